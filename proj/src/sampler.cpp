#include "frigid/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace frigid::sample {

std::vector<int> unmask(std::vector<std::vector<int>>& seqs, int mask_id, const BatchProbFn& probs, double tau0,
                        std::vector<Rng>& rngs) {
  if (rngs.size() != seqs.size()) throw std::invalid_argument("unmask: one rng per sequence expected");
  const std::size_t n = seqs.size();
  std::vector<int> initial(n, 0), remaining(n, 0), steps(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    initial[i] = remaining[i] = static_cast<int>(std::count(seqs[i].begin(), seqs[i].end(), mask_id));
  }
  std::vector<std::size_t> active;
  std::vector<std::vector<int>> batch;
  for (;;) {
    active.clear();
    batch.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (remaining[i] > 0) {
        active.push_back(i);
        batch.push_back(seqs[i]);
      }
    }
    if (active.empty()) break;
    const auto rows = probs(batch);
    if (rows.size() != active.size()) throw std::logic_error("unmask: probability batch size mismatch");
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      auto& seq = seqs[i];
      Rng& rng = rngs[i];
      const ProbRows& p = rows[a];
      const double tau = tau0 * static_cast<double>(remaining[i]) / static_cast<double>(initial[i]);
      int best_pos = -1, best_tok = -1;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t pos = 0; pos < seq.size(); ++pos) {
        if (seq[pos] != mask_id) continue;
        const auto row = p.row(static_cast<Eigen::Index>(pos));
        // Provisional token by inverse-CDF sampling; confidence is the row max.
        const double u = rng.uniform();
        double acc = 0.0, conf = 0.0;
        int tok = -1, last_nonzero = -1;
        for (Eigen::Index v = 0; v < row.size(); ++v) {
          const double pv = row(v);
          if (pv > 0.0) last_nonzero = static_cast<int>(v);
          conf = std::max(conf, pv);
          acc += pv;
          if (tok < 0 && u < acc) tok = static_cast<int>(v);
        }
        if (tok < 0) tok = last_nonzero;
        if (tok < 0) throw std::logic_error("unmask: empty distribution");
        double s = std::log(conf);
        if (tau > 0.0) s += tau * rng.gumbel();
        if (s > best) {
          best = s;
          best_pos = static_cast<int>(pos);
          best_tok = tok;
        }
      }
      seq[static_cast<std::size_t>(best_pos)] = best_tok;
      --remaining[i];
      ++steps[i];
    }
  }
  return steps;
}

ConditionedScorer::ConditionedScorer(model::Denoiser<float>& model, const model::Condition& cond,
                                     const tok::Vocabulary& vocab)
    : model_(model), vocab_(vocab) {
  Rng rng(0);
  mem_ = model_.encode(tape_, {&cond}, {false}, false, rng);
  mark_ = tape_.mark();
}

std::vector<ProbRows> ConditionedScorer::operator()(const std::vector<std::vector<int>>& seqs) {
  std::vector<const std::vector<int>*> sp;
  for (const auto& s : seqs) sp.push_back(&s);
  Rng rng(0);
  const nn::Mat<float> logits = tape_.value(model_.forward(tape_, sp, std::vector<int>(seqs.size(), 0), mem_, false, rng));
  tape_.rewind(mark_);
  calls_ += static_cast<long>(seqs.size());
  std::vector<ProbRows> out;
  Eigen::Index row = 0;
  for (const auto& s : seqs) {
    ProbRows p(static_cast<Eigen::Index>(s.size()), logits.cols());
    for (std::size_t pos = 0; pos < s.size(); ++pos, ++row) {
      const auto l = logits.row(row).cast<double>();
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index v = 4; v < l.size(); ++v) mx = std::max(mx, l(v));
      double z = 0.0;
      for (Eigen::Index v = 0; v < l.size(); ++v) {
        const double e = vocab_.is_special(static_cast<int>(v)) ? 0.0 : std::exp(l(v) - mx);
        p(static_cast<Eigen::Index>(pos), v) = e;
        z += e;
      }
      p.row(static_cast<Eigen::Index>(pos)) /= z;
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

std::vector<int> masked_template(const tok::Vocabulary& v, int length) {
  std::vector<int> s(static_cast<std::size_t>(length) + 2, v.mask());
  s.front() = v.bos();
  s.back() = v.eos();
  return s;
}

}  // namespace

tok::TokenSequence generate(ConditionedScorer& scorer, const tok::Vocabulary& v, int length, double tau0, Rng& rng) {
  if (length < 1) throw std::invalid_argument("generate: length must be positive");
  std::vector<std::vector<int>> seqs{masked_template(v, length)};
  std::vector<Rng> rngs{rng.fork(0)};
  unmask(seqs, v.mask(), std::ref(scorer), tau0, rngs);
  tok::TokenSequence out;
  out.ids = std::move(seqs[0]);
  out.atom_spans.resize(out.ids.size());
  return out;
}

std::optional<Candidate> make_candidate(const std::string& smiles, const chem::Fingerprint& target_fp, int round,
                                        const tok::Vocabulary& v, int max_len) {
  Candidate c;
  try {
    c.mol = chem::parse_smiles(smiles);
    if (c.mol.num_atoms() == 0) return std::nullopt;
    // Valence problems surface only when hydrogens are counted.
    c.formula = chem::molecular_formula(c.mol);
    c.key = chem::canonical_key(c.mol);
    c.fp = chem::morgan_fingerprint(c.mol, 2, target_fp.nbits());
  } catch (const chem::ChemError&) {
    return std::nullopt;
  }
  c.smiles = smiles;
  c.score = chem::tanimoto(c.fp, target_fp);
  c.round_created = round;
  try {
    c.tokens = tok::encode(smiles, v, max_len);
  } catch (const tok::TokenizerError&) {
    c.tokens = {};
  }
  return c;
}

BatchResult generate_batch(model::Denoiser<float>& model, const model::Condition& cond,
                           const chem::Fingerprint& target_fp, const length::LengthModel& lengths,
                           const tok::Vocabulary& v, const GenerationConfig& gc, int round, Rng& rng) {
  BatchResult out;
  if (gc.batch <= 0) return out;
  const int max_len = model.config().max_len;
  const auto formula = [&] {
    chem::Formula f;
    f.counts = cond.counts;
    return f;
  }();
  std::vector<std::vector<int>> seqs;
  std::vector<Rng> rngs;
  for (int b = 0; b < gc.batch; ++b) {
    const int l = length::sample_length(lengths, formula, gc.lambda, 1, max_len - 2, rng);
    seqs.push_back(masked_template(v, l));
    rngs.push_back(rng.fork(static_cast<std::uint64_t>(b)));
  }
  ConditionedScorer scorer(model, cond, v);
  unmask(seqs, v.mask(), std::ref(scorer), gc.tau0, rngs);
  out.denoiser_calls = scorer.calls();
  for (const auto& s : seqs) {
    std::string smiles;
    try {
      smiles = tok::decode(s, v);
    } catch (const tok::TokenizerError&) {
      ++out.invalid;
      continue;
    }
    auto c = make_candidate(smiles, target_fp, round, v, max_len);
    if (!c) {
      ++out.invalid;
      continue;
    }
    out.candidates.push_back(std::move(*c));
  }
  return out;
}

bool CandidatePool::insert(Candidate c) {
  if (!keys_.insert(c.key).second) return false;
  items_.push_back(std::move(c));
  return true;
}

std::vector<const Candidate*> rank_pool(const CandidatePool& pool) {
  std::vector<const Candidate*> out;
  for (const auto& c : pool.items()) out.push_back(&c);
  const auto& target = pool.target_formula();
  std::sort(out.begin(), out.end(), [&](const Candidate* a, const Candidate* b) {
    const bool ma = a->formula == target, mb = b->formula == target;
    if (ma != mb) return ma;
    if (a->score != b->score) return a->score > b->score;
    if (a->round_created != b->round_created) return a->round_created < b->round_created;
    return a->key < b->key;
  });
  return out;
}

std::pair<bool, double> top_rank_score(const CandidatePool& pool) {
  const auto ranked = rank_pool(pool);
  if (ranked.empty()) return {false, -1.0};
  return {ranked[0]->formula == pool.target_formula(), ranked[0]->score};
}

TopKMetrics top_k_metrics(const std::vector<const Candidate*>& ranked, const chem::Molecule& truth,
                          const std::vector<int>& ks) {
  const std::string key = chem::canonical_key(truth);
  const auto fp = chem::morgan_fingerprint(truth);
  TopKMetrics m;
  for (int k : ks) {
    double acc = 0.0, best = 0.0;
    for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < k; ++i) {
      if (ranked[i]->key == key) acc = 1.0;
      best = std::max(best, chem::tanimoto(ranked[i]->fp.nbits() == fp.nbits() ? ranked[i]->fp
                                                                                 : chem::morgan_fingerprint(ranked[i]->mol),
                                           fp));
    }
    m.accuracy[k] = acc;
    m.tanimoto[k] = best;
  }
  return m;
}

void write_ranked_tsv(std::ostream& out, const std::vector<const Candidate*>& ranked) {
  out << "rank\tsmiles\tkey\tformula\tscore\tround_created\n";
  int r = 1;
  for (const auto* c : ranked) {
    out << r++ << '\t' << c->smiles << '\t' << c->key << '\t' << c->formula.to_string() << '\t' << c->score << '\t'
        << c->round_created << '\n';
  }
}

}  // namespace frigid::sample
