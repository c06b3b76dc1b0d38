#include "frigid/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "frigid/chemgraph.hpp"

namespace frigid::tok {

using Kind = TokenizerError::Kind;

std::vector<Primitive> base_tokenize(std::string_view smiles) {
  const auto parsed = chem::parse_smiles_traced(smiles);
  std::vector<Primitive> out;
  out.reserve(parsed.tokens.size());
  for (const auto& t : parsed.tokens) {
    out.push_back({std::string(smiles.substr(t.begin, t.end - t.begin)), t.atoms});
  }
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::vector<std::pair<std::string, std::string>> merges)
    : tokens_(std::move(tokens)), merges_(std::move(merges)) {
  if (tokens_.size() < 4 || tokens_[0] != kBos || tokens_[1] != kEos || tokens_[2] != kMask || tokens_[3] != kPad) {
    throw TokenizerError(Kind::BadVocabFile, "vocabulary must start with [BOS], [EOS], [MASK], [PAD]");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw TokenizerError(Kind::BadVocabFile, "duplicate token " + tokens_[i]);
    }
  }
  for (const auto& [a, b] : merges_) {
    if (id(a) < 0 || id(b) < 0 || id(a + b) < 0) throw TokenizerError(Kind::BadVocabFile, "merge references unknown token");
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

std::string Vocabulary::to_json() const {
  nlohmann::ordered_json j;
  j["tokens"] = tokens_;
  auto merges = nlohmann::ordered_json::array();
  for (const auto& [a, b] : merges_) merges.push_back({a, b});
  j["merges"] = merges;
  j["specials"] = {{"bos", bos()}, {"eos", eos()}, {"mask", mask()}, {"pad", pad()}};
  return j.dump(1);
}

Vocabulary Vocabulary::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    auto tokens = j.at("tokens").get<std::vector<std::string>>();
    std::vector<std::pair<std::string, std::string>> merges;
    for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    const auto& sp = j.at("specials");
    if (sp.at("bos") != 0 || sp.at("eos") != 1 || sp.at("mask") != 2 || sp.at("pad") != 3) {
      throw TokenizerError(Kind::BadVocabFile, "unexpected special token ids");
    }
    return Vocabulary(std::move(tokens), std::move(merges));
  } catch (const nlohmann::json::exception& e) {
    throw TokenizerError(Kind::BadVocabFile, std::string("malformed vocabulary: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TokenizerError(Kind::BadVocabFile, "cannot write " + path.string());
  out << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TokenizerError(Kind::BadVocabFile, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

int primitive_vocab_size(const std::vector<std::string>& corpus) {
  std::set<std::string> seen;
  for (const auto& s : corpus) {
    for (auto& p : base_tokenize(s)) seen.insert(std::move(p.text));
  }
  return static_cast<int>(seen.size());
}

Vocabulary train_bpe(const std::vector<std::string>& corpus, int target_vocab) {
  if (corpus.empty()) throw TokenizerError(Kind::EmptyCorpus, "empty tokenizer corpus");

  // Symbols are interned strings; identical words are counted once.
  std::vector<std::string> symbols;
  std::map<std::string, int> intern;
  auto sym = [&](const std::string& s) {
    auto [it, inserted] = intern.emplace(s, static_cast<int>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  };
  std::map<std::vector<int>, long> word_counts;
  for (const auto& s : corpus) {
    std::vector<int> w;
    for (const auto& p : base_tokenize(s)) w.push_back(sym(p.text));
    ++word_counts[w];
  }
  std::set<std::string> primitive_set(symbols.begin(), symbols.end());
  const int required = static_cast<int>(primitive_set.size()) + 4;
  if (target_vocab < required) {
    throw TokenizerError(Kind::VocabTooSmall, "vocabulary size " + std::to_string(target_vocab) +
                                                  " is below the minimum of " + std::to_string(required) +
                                                  " (primitives plus specials)");
  }

  std::vector<std::pair<std::vector<int>, long>> words(word_counts.begin(), word_counts.end());
  std::vector<std::string> tokens = {std::string(kBos), std::string(kEos), std::string(kMask), std::string(kPad)};
  tokens.insert(tokens.end(), primitive_set.begin(), primitive_set.end());
  std::set<std::string> token_set(tokens.begin(), tokens.end());
  std::vector<std::pair<std::string, std::string>> merges;

  std::map<std::pair<int, int>, long> pairs;
  auto add_pairs = [&](const std::vector<int>& w, long c) {
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      auto it = pairs.emplace(std::make_pair(w[i], w[i + 1]), 0).first;
      it->second += c;
      if (it->second == 0) pairs.erase(it);
    }
  };
  for (const auto& [w, c] : words) add_pairs(w, c);

  while (static_cast<int>(token_set.size()) < target_vocab) {
    const std::pair<int, int>* best = nullptr;
    long best_count = 0;
    for (const auto& [p, c] : pairs) {
      if (c < 2) continue;
      const bool better = c > best_count ||
                          (c == best_count && std::tie(symbols[p.first], symbols[p.second]) <
                                                  std::tie(symbols[best->first], symbols[best->second]));
      if (better) {
        best = &p;
        best_count = c;
      }
    }
    if (!best) break;
    const auto [a, b] = *best;
    const std::string merged = symbols[a] + symbols[b];
    const int m = sym(merged);
    merges.emplace_back(symbols[a], symbols[b]);
    if (token_set.insert(merged).second) tokens.push_back(merged);

    for (auto& [w, c] : words) {
      bool hit = false;
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        if (w[i] == a && w[i + 1] == b) {
          hit = true;
          break;
        }
      }
      if (!hit) continue;
      add_pairs(w, -c);
      std::vector<int> next;
      next.reserve(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == a && w[i + 1] == b) {
          next.push_back(m);
          ++i;
        } else {
          next.push_back(w[i]);
        }
      }
      w = std::move(next);
      add_pairs(w, c);
    }
  }
  return Vocabulary(std::move(tokens), std::move(merges));
}

namespace {

std::vector<int> span_union(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

}  // namespace

TokenSequence encode(std::string_view smiles, const Vocabulary& v, int max_len) {
  auto prims = base_tokenize(smiles);
  for (const auto& [a, b] : v.merges()) {
    if (prims.size() < 2) break;
    std::vector<Primitive> next;
    next.reserve(prims.size());
    for (std::size_t i = 0; i < prims.size(); ++i) {
      if (i + 1 < prims.size() && prims[i].text == a && prims[i + 1].text == b) {
        next.push_back({a + b, span_union(prims[i].atoms, prims[i + 1].atoms)});
        ++i;
      } else {
        next.push_back(std::move(prims[i]));
      }
    }
    prims = std::move(next);
  }
  const int len = static_cast<int>(prims.size()) + 2;
  if (len > max_len) {
    throw TokenizerError(Kind::SequenceTooLong, "sequence of " + std::to_string(len) + " tokens exceeds max_len " +
                                                    std::to_string(max_len));
  }
  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(len));
  seq.ids.push_back(v.bos());
  seq.atom_spans.emplace_back();
  for (auto& p : prims) {
    const int id = v.id(p.text);
    if (id < 0) throw TokenizerError(Kind::UnknownToken, "token not in vocabulary: " + p.text);
    seq.ids.push_back(id);
    seq.atom_spans.push_back(std::move(p.atoms));
  }
  seq.ids.push_back(v.eos());
  seq.atom_spans.emplace_back();
  return seq;
}

std::string decode(const std::vector<int>& ids, const Vocabulary& v) {
  if (std::find(ids.begin(), ids.end(), v.mask()) != ids.end()) {
    throw TokenizerError(Kind::MaskInSequence, "cannot decode a sequence containing [MASK]");
  }
  std::string out;
  bool started = false;
  for (int id : ids) {
    if (id == v.bos()) {
      started = true;
      continue;
    }
    if (id == v.eos()) {
      if (started) break;
      continue;
    }
    if (id == v.pad()) continue;
    if (id < 0 || id >= v.size()) throw TokenizerError(Kind::UnknownToken, "token id out of range");
    out += v.token(id);
  }
  return out;
}

std::string decode(const TokenSequence& seq, const Vocabulary& v) { return decode(seq.ids, v); }

}  // namespace frigid::tok
