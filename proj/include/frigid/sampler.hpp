#pragma once

// Conditional generation by confidence-ordered unmasking, plus the candidate
// pool, its stratified ranking and Top-k metrics.

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "frigid/chemgraph.hpp"
#include "frigid/denoiser.hpp"
#include "frigid/lengthmodel.hpp"
#include "frigid/rng.hpp"
#include "frigid/tokenizer.hpp"

namespace frigid::sample {

using ProbRows = nn::Mat<double>;

// Given a batch of partially masked sequences, returns one [length x V]
// matrix of token probabilities per sequence. Rows at masked positions must
// be normalized over the tokens the sampler may commit.
using BatchProbFn = std::function<std::vector<ProbRows>(const std::vector<std::vector<int>>&)>;

// Unmasks every `mask_id` position of each sequence, one position per step.
// At each step every masked position draws a provisional token from its
// distribution; the position maximizing log(max prob) + tau * Gumbel is
// committed, with tau = tau0 * remaining / initial and ties going to the
// lowest index. Each sequence uses its own rng so results do not depend on
// batch composition. Returns the number of steps taken per sequence.
std::vector<int> unmask(std::vector<std::vector<int>>& seqs, int mask_id, const BatchProbFn& probs, double tau0,
                        std::vector<Rng>& rngs);

// Wraps a denoiser and one condition. The condition memory is built once and
// reused for every call; special tokens are suppressed at content positions.
class ConditionedScorer {
 public:
  ConditionedScorer(model::Denoiser<float>& model, const model::Condition& cond, const tok::Vocabulary& vocab);

  std::vector<ProbRows> operator()(const std::vector<std::vector<int>>& seqs);
  // Sequences evaluated so far (one per sequence per denoising step).
  long calls() const { return calls_; }

 private:
  model::Denoiser<float>& model_;
  const tok::Vocabulary& vocab_;
  nn::Tape<float> tape_{false};
  model::Denoiser<float>::Memory mem_;
  std::size_t mark_ = 0;
  long calls_ = 0;
};

// One sequence of L content tokens between [BOS] and [EOS].
tok::TokenSequence generate(ConditionedScorer& scorer, const tok::Vocabulary& v, int length, double tau0, Rng& rng);

struct GenerationConfig {
  int batch = 128;
  double lambda = 1.0;
  double tau0 = 1.0;
  std::uint64_t seed = 0;
};

struct Candidate {
  std::string smiles;  // as decoded
  std::string key;     // canonical SMILES
  chem::Formula formula;
  chem::Fingerprint fp;
  double score = 0.0;  // Tanimoto to the target fingerprint
  int round_created = 0;
  chem::Molecule mol;
  // Tokens of `smiles` with atom spans aligned to `mol`; empty if the
  // string could not be re-encoded within max_len.
  tok::TokenSequence tokens;
};

// Parses a decoded string; nullopt if it is not a valid molecule.
std::optional<Candidate> make_candidate(const std::string& smiles, const chem::Fingerprint& target_fp, int round,
                                        const tok::Vocabulary& v, int max_len);

struct BatchResult {
  std::vector<Candidate> candidates;
  int invalid = 0;
  long denoiser_calls = 0;
};

// Draws `gc.batch` lengths from the length model, generates and decodes.
BatchResult generate_batch(model::Denoiser<float>& model, const model::Condition& cond,
                           const chem::Fingerprint& target_fp, const length::LengthModel& lengths,
                           const tok::Vocabulary& v, const GenerationConfig& gc, int round, Rng& rng);

class CandidatePool {
 public:
  CandidatePool(chem::Fingerprint target_fp, chem::Formula target_formula)
      : target_fp_(std::move(target_fp)), target_formula_(target_formula) {}

  // False (and no change) when the key is already present.
  bool insert(Candidate c);
  std::size_t size() const { return items_.size(); }
  const std::vector<Candidate>& items() const { return items_; }
  const chem::Fingerprint& target_fp() const { return target_fp_; }
  const chem::Formula& target_formula() const { return target_formula_; }
  bool contains(const std::string& key) const { return keys_.count(key) > 0; }

 private:
  chem::Fingerprint target_fp_;
  chem::Formula target_formula_;
  std::vector<Candidate> items_;
  std::unordered_set<std::string> keys_;
};

// Formula matches first, then non-matches; each by descending score, then
// earlier round, then key.
std::vector<const Candidate*> rank_pool(const CandidatePool& pool);

// (formula match, score) of the best-ranked candidate, compared in ranking
// order. Empty pools give (false, -1).
std::pair<bool, double> top_rank_score(const CandidatePool& pool);

struct TopKMetrics {
  std::map<int, double> accuracy;
  std::map<int, double> tanimoto;
};

TopKMetrics top_k_metrics(const std::vector<const Candidate*>& ranked, const chem::Molecule& truth,
                          const std::vector<int>& ks);

// Columns: rank, smiles, key, formula, score, round_created.
void write_ranked_tsv(std::ostream& out, const std::vector<const Candidate*>& ranked);

}  // namespace frigid::sample
