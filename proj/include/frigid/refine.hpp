#pragma once

// Spectrum-guided refinement: per-atom consistency scores from simulated
// versus observed peaks, token masking plans, renoise/denoise variants and
// the multi-round candidate pool loop.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "frigid/fragmenter.hpp"
#include "frigid/sampler.hpp"

namespace frigid::refine {

class AlignmentMismatch : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct AtomScores {
  std::vector<double> raw;
  std::vector<double> normalized;  // raw / max|raw|, or zeros
};

// Each informative peak adds +1 (matched) or -gamma (hallucinated) to every
// atom of its fragment.
AtomScores atom_scores(const chem::Molecule& mol, const frag::SimulatedSpectrum& sim, const frag::MatchResult& match,
                       double gamma);

// Worst normalized score over each token's atoms; +1 for specials and tokens
// that cover no atom.
std::vector<double> token_scores(const tok::TokenSequence& seq, const AtomScores& s, const tok::Vocabulary& v);

struct MaskPlan {
  std::vector<double> p_mask;
  std::vector<double> token_scores;
};

// p = p_max * |score| for scores <= 0, else 0.
MaskPlan mask_plan(const std::vector<double>& token_scores, double p_max);

// Same expected number of masked tokens as `guided`, spread uniformly over
// the maskable (non-special) positions.
MaskPlan random_plan_like(const MaskPlan& guided, const tok::TokenSequence& seq, const tok::Vocabulary& v);

struct RenoiseOutcome {
  std::vector<int> ids;  // mask-free result
  int masked = 0;        // positions re-masked, equal to the unmasking steps
};

// Masks each token j with probability plan.p_mask[j] and unmasks exactly the
// masked positions with the sampler's confidence rule.
std::vector<RenoiseOutcome> renoise_denoise(const sample::BatchProbFn& probs, const std::vector<const tok::TokenSequence*>& seqs,
                                            const std::vector<const MaskPlan*>& plans, int mask_id, double tau0,
                                            Rng& rng);

enum class Masking { Guided, Random };

struct RefineConfig {
  int rounds = 1;
  int budget = 128;
  int top_k = 12;
  int variants = 8;
  double gamma = 1.0;
  double p_max = 0.75;
  double lambda = 1.0;
  double tau0 = 1.0;
  Masking masking = Masking::Guided;
  frag::MatchOptions match;
  frag::SimulateOptions simulate;

  void validate() const;
};

struct RoundTrace {
  int round = 0;
  std::size_t cumulative_candidates = 0;
  double cumulative_seconds = 0.0;
  long denoiser_calls = 0;
  std::string top1_key;
  double top1_score = 0.0;
  bool top1_formula_match = false;
  bool exact_match = false;
  int invalid = 0;
};

struct RefineResult {
  sample::CandidatePool pool;
  std::vector<RoundTrace> trace;
  int clamped_variants = -1;  // the reduced M when K * M exceeded the budget
};

struct RefineInputs {
  model::Denoiser<float>* model = nullptr;
  const length::LengthModel* lengths = nullptr;
  const tok::Vocabulary* vocab = nullptr;
  model::Condition cond;
  chem::Fingerprint target_fp;
  frag::ObservedSpectrum observed;
  std::string truth_key;  // optional; fills RoundTrace::exact_match
};

RefineResult run_refinement(const RefineInputs& in, const RefineConfig& rc, Rng& rng,
                            frag::SpectrumCache* cache = nullptr);

// Columns: round, cumulative_candidates, cumulative_seconds, denoiser_calls,
// top1_key, top1_score, exact_match_flag.
void write_trace_csv(std::ostream& out, const std::vector<RoundTrace>& trace, bool header = true);

}  // namespace frigid::refine
