#pragma once

// BPE over chemical primitive tokens (atoms, bonds, ring digits, branches,
// dots). Every token carries the atom indices it covers in the parsed
// molecule, so per-atom evidence can be lifted to tokens.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace frigid::tok {

class TokenizerError : public std::runtime_error {
 public:
  enum class Kind { EmptyCorpus, VocabTooSmall, SequenceTooLong, MaskInSequence, UnknownToken, BadVocabFile };
  TokenizerError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Primitive {
  std::string text;
  std::vector<int> atoms;  // sorted
};

// Splits a SMILES string into primitives; concatenating their texts gives the
// input back. Propagates chem::SmilesError.
std::vector<Primitive> base_tokenize(std::string_view smiles);

inline constexpr std::string_view kBos = "[BOS]";
inline constexpr std::string_view kEos = "[EOS]";
inline constexpr std::string_view kMask = "[MASK]";
inline constexpr std::string_view kPad = "[PAD]";

class Vocabulary {
 public:
  Vocabulary() = default;
  // `tokens` must start with the four specials in the order BOS, EOS, MASK, PAD.
  Vocabulary(std::vector<std::string> tokens, std::vector<std::pair<std::string, std::string>> merges);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  // -1 when absent.
  int id(std::string_view token) const;

  int bos() const { return 0; }
  int eos() const { return 1; }
  int mask() const { return 2; }
  int pad() const { return 3; }
  bool is_special(int id) const { return id >= 0 && id < 4; }

  std::string to_json() const;
  static Vocabulary from_json(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  // FNV-1a over the serialized form; used to pair checkpoints with vocabularies.
  std::uint64_t hash() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.merges_ == b.merges_;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, int> index_;
};

// Number of distinct primitive token texts in the corpus.
int primitive_vocab_size(const std::vector<std::string>& corpus);

// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go to
// the lexicographically smallest pair) until the vocabulary reaches
// `target_vocab` or no pair occurs at least twice.
Vocabulary train_bpe(const std::vector<std::string>& corpus, int target_vocab);

struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::vector<int>> atom_spans;  // empty for specials and non-atom tokens

  std::size_t size() const { return ids.size(); }
};

// Applies merges in training order and wraps the result in [BOS] ... [EOS].
TokenSequence encode(std::string_view smiles, const Vocabulary& v, int max_len);
// Concatenates tokens after [BOS] up to the first [EOS], skipping [PAD].
std::string decode(const TokenSequence& seq, const Vocabulary& v);
std::string decode(const std::vector<int>& ids, const Vocabulary& v);

}  // namespace frigid::tok
