#include "frigid/refine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

namespace frigid::refine {

AtomScores atom_scores(const chem::Molecule& mol, const frag::SimulatedSpectrum& sim, const frag::MatchResult& match,
                       double gamma) {
  AtomScores s;
  s.raw.assign(static_cast<std::size_t>(mol.num_atoms()), 0.0);
  auto add = [&](const std::vector<int>& peaks, double delta) {
    for (int j : peaks) {
      for (int a : sim.peaks.at(static_cast<std::size_t>(j)).fragment.atoms) {
        if (a < 0 || a >= mol.num_atoms()) throw AlignmentMismatch("fragment atom outside the molecule");
        s.raw[static_cast<std::size_t>(a)] += delta;
      }
    }
  };
  add(match.matched, 1.0);
  add(match.hallucinated, -gamma);
  double mx = 0.0;
  for (double r : s.raw) mx = std::max(mx, std::abs(r));
  s.normalized.assign(s.raw.size(), 0.0);
  if (mx > 0.0) {
    for (std::size_t i = 0; i < s.raw.size(); ++i) s.normalized[i] = s.raw[i] / mx;
  }
  return s;
}

std::vector<double> token_scores(const tok::TokenSequence& seq, const AtomScores& s, const tok::Vocabulary& v) {
  if (seq.atom_spans.size() != seq.ids.size()) throw AlignmentMismatch("token spans do not cover the sequence");
  std::vector<double> out(seq.ids.size(), 1.0);
  for (std::size_t j = 0; j < seq.ids.size(); ++j) {
    if (v.is_special(seq.ids[j]) || seq.atom_spans[j].empty()) continue;
    double worst = 1.0;
    for (int a : seq.atom_spans[j]) {
      if (a < 0 || static_cast<std::size_t>(a) >= s.normalized.size()) {
        throw AlignmentMismatch("token span refers to atom " + std::to_string(a));
      }
      worst = std::min(worst, s.normalized[static_cast<std::size_t>(a)]);
    }
    out[j] = worst;
  }
  return out;
}

MaskPlan mask_plan(const std::vector<double>& token_scores, double p_max) {
  MaskPlan p;
  p.token_scores = token_scores;
  p.p_mask.reserve(token_scores.size());
  for (double s : token_scores) p.p_mask.push_back(s <= 0.0 ? p_max * std::abs(s) : 0.0);
  return p;
}

MaskPlan random_plan_like(const MaskPlan& guided, const tok::TokenSequence& seq, const tok::Vocabulary& v) {
  double expected = 0.0;
  for (double p : guided.p_mask) expected += p;
  int maskable = 0;
  for (int id : seq.ids) maskable += !v.is_special(id);
  MaskPlan r;
  r.token_scores = guided.token_scores;
  const double p = maskable > 0 ? std::min(1.0, expected / maskable) : 0.0;
  for (int id : seq.ids) r.p_mask.push_back(v.is_special(id) ? 0.0 : p);
  return r;
}

std::vector<RenoiseOutcome> renoise_denoise(const sample::BatchProbFn& probs,
                                            const std::vector<const tok::TokenSequence*>& seqs,
                                            const std::vector<const MaskPlan*>& plans, int mask_id, double tau0,
                                            Rng& rng) {
  if (seqs.size() != plans.size()) throw std::invalid_argument("renoise_denoise: one plan per sequence expected");
  std::vector<RenoiseOutcome> out(seqs.size());
  std::vector<std::vector<int>> work;
  std::vector<Rng> rngs;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& ids = seqs[i]->ids;
    const auto& p = plans[i]->p_mask;
    if (p.size() != ids.size()) throw AlignmentMismatch("mask plan length differs from the sequence");
    Rng r = rng.fork(i);
    out[i].ids = ids;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (ids[j] == mask_id) throw std::invalid_argument("renoise_denoise: input already contains [MASK]");
      if (p[j] > 0.0 && r.bernoulli(p[j])) {
        out[i].ids[j] = mask_id;
        ++out[i].masked;
      }
    }
    if (out[i].masked > 0) {
      work.push_back(out[i].ids);
      rngs.push_back(r);
      which.push_back(i);
    }
  }
  if (!work.empty()) {
    sample::unmask(work, mask_id, probs, tau0, rngs);
    for (std::size_t k = 0; k < which.size(); ++k) out[which[k]].ids = std::move(work[k]);
  }
  return out;
}

void RefineConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("refine config: ") + what);
  };
  need(rounds >= 1, "rounds must be at least 1");
  need(budget >= 0, "budget must be non-negative");
  need(top_k >= 0, "top_k must be non-negative");
  need(variants >= 0, "variants must be non-negative");
  need(gamma >= 0.0, "gamma must be non-negative");
  need(p_max >= 0.0 && p_max <= 1.0, "p_max must be in [0, 1]");
  need(lambda >= 0.0, "lambda must be non-negative");
  need(tau0 >= 0.0, "tau0 must be non-negative");
  need(match.tol_ppm > 0.0, "tol_ppm must be positive");
}

namespace {

chem::Formula formula_of(const model::Condition& c) {
  chem::Formula f;
  f.counts = c.counts;
  return f;
}

RoundTrace snapshot(int round, const sample::CandidatePool& pool, double seconds, long calls, int invalid,
                    const std::string& truth_key) {
  RoundTrace t;
  t.round = round;
  t.cumulative_candidates = pool.size();
  t.cumulative_seconds = seconds;
  t.denoiser_calls = calls;
  t.invalid = invalid;
  const auto ranked = sample::rank_pool(pool);
  if (!ranked.empty()) {
    t.top1_key = ranked[0]->key;
    t.top1_score = ranked[0]->score;
    t.top1_formula_match = ranked[0]->formula == pool.target_formula();
    t.exact_match = !truth_key.empty() && ranked[0]->key == truth_key;
  }
  return t;
}

}  // namespace

RefineResult run_refinement(const RefineInputs& in, const RefineConfig& rc, Rng& rng, frag::SpectrumCache* cache) {
  rc.validate();
  if (!in.model || !in.lengths || !in.vocab) throw std::invalid_argument("run_refinement: model, lengths and vocab required");
  const auto& v = *in.vocab;
  const int max_len = in.model->config().max_len;
  frag::SpectrumCache local(rc.simulate);
  frag::SpectrumCache& spectra = cache ? *cache : local;

  RefineResult res{sample::CandidatePool(in.target_fp, formula_of(in.cond)), {}, -1};
  int variants = rc.variants;
  if (rc.top_k > 0 && static_cast<long>(rc.top_k) * variants > rc.budget) {
    variants = rc.budget / rc.top_k;
    res.clamped_variants = variants;
  }
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  sample::GenerationConfig gc;
  gc.lambda = rc.lambda;
  gc.tau0 = rc.tau0;

  for (int round = 1; round <= rc.rounds; ++round) {
    long calls = 0;
    int invalid = 0;
    int fresh = rc.budget;
    if (round > 1 && variants > 0) {
      // Selected candidates must carry aligned tokens to be renoised.
      std::vector<const sample::Candidate*> chosen;
      for (const auto* c : sample::rank_pool(res.pool)) {
        if (static_cast<int>(chosen.size()) >= rc.top_k) break;
        if (!c->tokens.ids.empty()) chosen.push_back(c);
      }
      std::vector<MaskPlan> plans;
      plans.reserve(chosen.size());
      for (const auto* c : chosen) {
        const auto sim = spectra.get(c->key, c->mol);
        const auto match = frag::match_peaks(*sim, in.observed, rc.match);
        const auto scores = atom_scores(c->mol, *sim, match, rc.gamma);
        auto plan = mask_plan(token_scores(c->tokens, scores, v), rc.p_max);
        if (rc.masking == Masking::Random) plan = random_plan_like(plan, c->tokens, v);
        plans.push_back(std::move(plan));
      }
      std::vector<const tok::TokenSequence*> seqs;
      std::vector<const MaskPlan*> plan_ptrs;
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        for (int m = 0; m < variants; ++m) {
          seqs.push_back(&chosen[i]->tokens);
          plan_ptrs.push_back(&plans[i]);
        }
      }
      sample::ConditionedScorer scorer(*in.model, in.cond, v);
      const auto outcomes = renoise_denoise(std::ref(scorer), seqs, plan_ptrs, v.mask(), rc.tau0, rng);
      calls += scorer.calls();
      std::vector<sample::Candidate> made;
      for (const auto& o : outcomes) {
        std::string smiles;
        try {
          smiles = tok::decode(o.ids, v);
        } catch (const tok::TokenizerError&) {
          ++invalid;
          continue;
        }
        auto c = sample::make_candidate(smiles, in.target_fp, round, v, max_len);
        if (!c) {
          ++invalid;
          continue;
        }
        made.push_back(std::move(*c));
      }
      for (auto& c : made) res.pool.insert(std::move(c));
      fresh = rc.budget - static_cast<int>(seqs.size());
    }
    if (fresh > 0) {
      gc.batch = fresh;
      auto batch = sample::generate_batch(*in.model, in.cond, in.target_fp, *in.lengths, v, gc, round, rng);
      calls += batch.denoiser_calls;
      invalid += batch.invalid;
      for (auto& c : batch.candidates) res.pool.insert(std::move(c));
    }
    res.trace.push_back(snapshot(round, res.pool, elapsed(), calls, invalid, in.truth_key));
  }
  return res;
}

void write_trace_csv(std::ostream& out, const std::vector<RoundTrace>& trace, bool header) {
  if (header) out << "round,cumulative_candidates,cumulative_seconds,denoiser_calls,top1_key,top1_score,exact_match_flag\n";
  for (const auto& t : trace) {
    out << t.round << ',' << t.cumulative_candidates << ',' << t.cumulative_seconds << ',' << t.denoiser_calls << ','
        << t.top1_key << ',' << t.top1_score << ',' << (t.exact_match ? 1 : 0) << '\n';
  }
}

}  // namespace frigid::refine
