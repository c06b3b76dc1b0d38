#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unistd.h>

#include "frigid/app.hpp"

namespace frigid::app {

using nlohmann::ordered_json;

void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid()) + "_" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

tok::Vocabulary cmd_tokenizer_train(const std::filesystem::path& corpus, int vocab_size,
                                    const std::filesystem::path& out) {
  const auto smiles = read_smiles(corpus);
  if (smiles.empty()) throw InputError("corpus " + corpus.string() + " has no SMILES");
  tok::Vocabulary v;
  try {
    v = tok::train_bpe(smiles, vocab_size);
  } catch (const tok::TokenizerError& e) {
    throw InputError(e.what());
  } catch (const chem::ChemError& e) {
    throw InputError(std::string("corpus: ") + e.what());
  }
  atomic_write(out, v.to_json());
  return v;
}

namespace {

struct TrainingSet {
  std::vector<model::Example> examples;
  std::vector<std::pair<length::Features, double>> lengths;
  int skipped = 0;
};

TrainingSet build_training_set(const std::vector<std::string>& smiles, const tok::Vocabulary& v,
                               const model::ModelConfig& mc) {
  TrainingSet ts;
  for (const auto& s : smiles) {
    try {
      const auto mol = chem::parse_smiles(s);
      const auto f = chem::molecular_formula(mol);
      auto seq = tok::encode(s, v, mc.max_len);
      ts.lengths.push_back({length::features(f), static_cast<double>(seq.size() - 2)});
      ts.examples.push_back({std::move(seq), model::make_condition(f, chem::morgan_fingerprint(mol, 2, mc.fp_bits),
                                                                   mc.fp_max_active)});
    } catch (const tok::TokenizerError&) {
      ++ts.skipped;
    } catch (const chem::ChemError& e) {
      throw InputError("training SMILES '" + s + "': " + e.what());
    }
  }
  return ts;
}

}  // namespace

TrainSummary cmd_train(const TrainOptions& opts, const RunConfig& cfg) {
  const auto smiles = read_smiles(opts.dataset);
  if (smiles.empty()) throw InputError("dataset has no SMILES");

  std::optional<model::Checkpoint> resume;
  if (opts.resume) {
    if (!std::filesystem::exists(opts.out)) throw InputError("--resume: no checkpoint at " + opts.out.string());
    resume = model::load_checkpoint(opts.out);
  }
  tok::Vocabulary v;
  if (resume) {
    v = tok::Vocabulary::from_json(resume->vocab_json);
  } else if (!opts.vocab.empty()) {
    v = tok::Vocabulary::load(resolve_data_path(opts.vocab));
  } else {
    try {
      v = tok::train_bpe(smiles, cfg.vocab_size);
    } catch (const tok::TokenizerError& e) {
      throw InputError(e.what());
    }
  }
  model::ModelConfig mc = resume ? resume->model_config : cfg.model;
  mc.vocab_size = v.size();
  const auto ts = build_training_set(smiles, v, mc);
  if (ts.examples.empty()) throw InputError("no training molecule fits within model.max_len");
  if (ts.skipped && !opts.quiet) std::cerr << "skipped " << ts.skipped << " molecules longer than model.max_len\n";

  std::string lm_json;
  if (resume && !resume->length_model_json.empty()) {
    lm_json = resume->length_model_json;
  } else {
    try {
      lm_json = length::fit_length_model(ts.lengths, cfg.length).to_json();
    } catch (const length::LengthModelError& e) {
      throw InputError(std::string("length model: ") + e.what());
    }
  }

  model::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  if (resume) tc = resume->train_config;
  model::Denoiser<float> net(mc, tc.seed);
  model::Trainer trainer(net, tc);
  if (resume) model::restore_trainer(*resume, trainer);

  TrainSummary sum;
  sum.start_step = trainer.step();
  const auto log_path = opts.loss_log.empty() ? std::filesystem::path(opts.out.string() + ".loss.csv") : opts.loss_log;
  if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
  const bool append = opts.resume && std::filesystem::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw InputError("cannot write loss log " + log_path.string());
  if (!append) log << "step,loss,lr,grad_norm,masked\n";
  log << std::setprecision(9);

  const auto save = [&] { model::save_checkpoint(model::make_checkpoint(trainer, v, lm_json), opts.out); };
  double smooth = std::nan("");
  bool first = true;
  try {
    trainer.run(ts.examples, cfg.schedule, v, [&](const model::TrainLogEntry& e) {
      log << e.step << ',' << e.loss << ',' << e.lr << ',' << e.grad_norm << ',' << e.masked << '\n';
      if (first) {
        sum.first_loss = e.loss;
        first = false;
      }
      sum.last_loss = e.loss;
      smooth = std::isnan(smooth) ? e.loss : 0.98 * smooth + 0.02 * e.loss;
      if (!opts.quiet && e.step % 100 == 0) std::cerr << "step " << e.step << " loss " << smooth << '\n';
      if (cfg.checkpoint_every > 0 && e.step % cfg.checkpoint_every == 0) {
        log.flush();
        save();
      }
      return opts.max_steps <= 0 || e.step - sum.start_step < opts.max_steps;
    });
  } catch (const model::NonFiniteLoss& e) {
    log.flush();
    // Parameters are untouched by the failed step, so this is the last good state.
    save();
    throw NumericFailure(std::string(e.what()) + " at step " + std::to_string(trainer.step() + 1) +
                         "; checkpoint kept at step " + std::to_string(trainer.step()));
  }
  log.flush();
  save();
  sum.final_step = trainer.step();
  return sum;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  LoadedModel m;
  try {
    m.checkpoint = model::load_checkpoint(resolve_data_path(checkpoint));
  } catch (const model::CheckpointError& e) {
    throw InputError(e.what());
  }
  if (m.checkpoint.vocab_json.empty()) throw InputError("checkpoint carries no vocabulary");
  if (m.checkpoint.length_model_json.empty()) throw InputError("checkpoint carries no length model");
  m.vocab = tok::Vocabulary::from_json(m.checkpoint.vocab_json);
  m.lengths = length::LengthModel::from_json(m.checkpoint.length_model_json);
  m.net = model::model_from_checkpoint(m.checkpoint, true);
  return m;
}

namespace {

struct Ranked {
  const sample::Candidate* c;
  bool formula_match;
};

bool better(const Ranked& a, const Ranked& b) {
  if (a.formula_match != b.formula_match) return a.formula_match;
  if (a.c->score != b.c->score) return a.c->score > b.c->score;
  if (a.c->round_created != b.c->round_created) return a.c->round_created < b.c->round_created;
  return a.c->key < b.c->key;
}

}  // namespace

SpectrumOutcome elucidate_record(const DatasetRecord& rec, LoadedModel& m, const RunConfig& cfg, Rng& rng,
                                 frag::SpectrumCache* cache) {
  const auto& mc = m.net->config();
  std::optional<chem::Molecule> truth;
  if (!rec.smiles.empty()) truth = chem::parse_smiles(rec.smiles);
  chem::Fingerprint target_fp(mc.fp_bits);
  if (rec.fingerprint) {
    target_fp = *rec.fingerprint;
  } else if (truth) {
    target_fp = chem::morgan_fingerprint(*truth, 2, mc.fp_bits);
  } else {
    throw InputError("record " + rec.id + ": needs a fingerprint or a SMILES");
  }
  if (target_fp.nbits() != mc.fp_bits) {
    throw InputError("record " + rec.id + ": fingerprint has " + std::to_string(target_fp.nbits()) +
                     " bits, model expects " + std::to_string(mc.fp_bits));
  }

  std::vector<chem::Formula> formulas;
  if (cfg.formula_hypotheses == 0) {
    if (!rec.has_formula) throw InputError("record " + rec.id + ": no formula (set elucidate.formula_hypotheses)");
    formulas.push_back(rec.formula);
  } else {
    if (!(rec.spectrum.precursor_mz > 0)) throw InputError("record " + rec.id + ": no precursor m/z");
    for (const auto& h : formula_hypotheses(rec.spectrum.precursor_mz, cfg.formula_hypotheses, cfg.hypothesis_ppm)) {
      formulas.push_back(h.formula);
    }
  }
  const auto budgets = split_budget(cfg.refine.budget, static_cast<int>(formulas.size()));

  refine::RefineInputs in;
  in.model = m.net.get();
  in.lengths = &m.lengths;
  in.vocab = &m.vocab;
  in.target_fp = target_fp;
  in.observed = rec.spectrum;
  if (truth) in.truth_key = chem::canonical_key(*truth);

  std::vector<refine::RefineResult> results;
  for (std::size_t h = 0; h < formulas.size(); ++h) {
    Rng hr = rng.fork(h);
    if (budgets[h] == 0) continue;
    refine::RefineConfig rc = cfg.refine;
    rc.budget = budgets[h];
    rc.top_k = std::min(rc.top_k, rc.budget);
    in.cond = model::make_condition(formulas[h], target_fp, mc.fp_max_active);
    results.push_back(refine::run_refinement(in, rc, hr, cache));
  }

  SpectrumOutcome out;
  out.id = rec.id;
  out.n_hypotheses = static_cast<int>(formulas.size());
  std::vector<Ranked> all;
  std::set<std::string> keys;
  for (const auto& r : results) {
    for (const auto& c : r.pool.items()) {
      if (!keys.insert(c.key).second) continue;
      const bool fm = std::find(formulas.begin(), formulas.end(), c.formula) != formulas.end();
      all.push_back({&c, fm});
    }
  }
  std::sort(all.begin(), all.end(), better);
  for (const auto& r : all) out.ranked.push_back(*r.c);

  if (results.size() == 1) {
    out.trace = results[0].trace;
  } else {
    // Per round: sums of costs; top-1 from the best hypothesis at that round.
    std::size_t rounds = 0;
    for (const auto& r : results) rounds = std::max(rounds, r.trace.size());
    for (std::size_t i = 0; i < rounds; ++i) {
      refine::RoundTrace t;
      t.round = static_cast<int>(i) + 1;
      bool have = false;
      for (const auto& r : results) {
        const auto& ri = r.trace[std::min(i, r.trace.size() - 1)];
        t.cumulative_candidates += ri.cumulative_candidates;
        t.cumulative_seconds += ri.cumulative_seconds;
        t.denoiser_calls += ri.denoiser_calls;
        t.invalid += ri.invalid;
        t.exact_match = t.exact_match || ri.exact_match;
        if (ri.top1_key.empty()) continue;
        if (!have || std::pair(ri.top1_formula_match, ri.top1_score) > std::pair(t.top1_formula_match, t.top1_score)) {
          t.top1_key = ri.top1_key;
          t.top1_score = ri.top1_score;
          t.top1_formula_match = ri.top1_formula_match;
          have = true;
        }
      }
      out.trace.push_back(t);
    }
  }

  if (truth) {
    out.has_truth = true;
    std::vector<const sample::Candidate*> ptrs;
    for (const auto& c : out.ranked) ptrs.push_back(&c);
    out.metrics = sample::top_k_metrics(ptrs, *truth, {1, 10});
  }
  return out;
}

std::string AggregateMetrics::to_json() const {
  ordered_json j;
  j["spectra"] = spectra;
  j["with_truth"] = with_truth;
  for (const auto& [k, v] : accuracy) j["accuracy@" + std::to_string(k)] = v;
  for (const auto& [k, v] : tanimoto) j["tanimoto@" + std::to_string(k)] = v;
  return j.dump(2) + "\n";
}

AggregateMetrics aggregate(const std::vector<SpectrumOutcome>& outcomes, const std::vector<int>& ks) {
  AggregateMetrics a;
  a.spectra = static_cast<int>(outcomes.size());
  for (int k : ks) {
    a.accuracy[k] = 0.0;
    a.tanimoto[k] = 0.0;
  }
  for (const auto& o : outcomes) {
    if (!o.has_truth) continue;
    ++a.with_truth;
    for (int k : ks) {
      const auto acc = o.metrics.accuracy.find(k);
      const auto tan = o.metrics.tanimoto.find(k);
      if (acc != o.metrics.accuracy.end()) a.accuracy[k] += acc->second;
      if (tan != o.metrics.tanimoto.end()) a.tanimoto[k] += tan->second;
    }
  }
  if (a.with_truth > 0) {
    for (int k : ks) {
      a.accuracy[k] /= a.with_truth;
      a.tanimoto[k] /= a.with_truth;
    }
  }
  return a;
}

namespace {

std::string file_stem(const std::string& id) {
  std::string s;
  for (char c : id) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return s.empty() ? "_" : s;
}

}  // namespace

AggregateMetrics cmd_elucidate(const ElucidateOptions& opts, const RunConfig& cfg) {
  auto first = load_model(opts.checkpoint);
  const auto records = read_dataset(opts.dataset, first.net->config().fp_threshold);
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (!ids.insert(file_stem(r.id)).second) throw DatasetError("duplicate record id " + r.id);
  }
  std::vector<Rng> rngs;
  Rng master(cfg.seed);
  for (std::size_t i = 0; i < records.size(); ++i) rngs.push_back(master.fork(i));

  std::vector<SpectrumOutcome> outcomes(records.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  const auto worker = [&](LoadedModel* own) {
    std::optional<LoadedModel> mine;
    if (!own) own = &mine.emplace(load_model(opts.checkpoint));
    frag::SpectrumCache cache(cfg.refine.simulate);
    for (std::size_t i; (i = next++) < records.size();) {
      try {
        outcomes[i] = elucidate_record(records[i], *own, cfg, rngs[i], &cache);
        std::ostringstream tsv, csv;
        std::vector<const sample::Candidate*> ptrs;
        for (const auto& c : outcomes[i].ranked) ptrs.push_back(&c);
        sample::write_ranked_tsv(tsv, ptrs);
        refine::write_trace_csv(csv, outcomes[i].trace);
        const auto stem = file_stem(records[i].id);
        atomic_write(opts.out_dir / (stem + ".ranked.tsv"), tsv.str());
        atomic_write(opts.out_dir / (stem + ".trace.csv"), csv.str());
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
        next = records.size();
      }
    }
  };
  const int nw = std::max(1, std::min<int>(cfg.workers, static_cast<int>(records.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < nw; ++w) pool.emplace_back(worker, nullptr);
  worker(&first);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);

  std::ostringstream all;
  all << "id,";
  std::ostringstream hdr;
  refine::write_trace_csv(hdr, {});
  all << hdr.str();
  for (const auto& o : outcomes) {
    std::ostringstream rows;
    refine::write_trace_csv(rows, o.trace, false);
    std::istringstream lines(rows.str());
    for (std::string line; std::getline(lines, line);) all << o.id << ',' << line << '\n';
  }
  atomic_write(opts.out_dir / "trace.csv", all.str());
  const auto metrics = aggregate(outcomes);
  atomic_write(opts.out_dir / "metrics.json", metrics.to_json());
  return metrics;
}

std::string simulate_json(const std::string& smiles, const frag::SimulateOptions& sim) {
  const auto mol = chem::parse_smiles(smiles);
  const auto s = frag::simulate_spectrum(mol, sim);
  const auto obs = frag::as_observed(s, mol);
  ordered_json j;
  j["smiles"] = smiles;
  j["formula"] = chem::molecular_formula(mol).to_string();
  j["precursor_mz"] = obs.precursor_mz;
  ordered_json peaks = ordered_json::array(), frags = ordered_json::array();
  for (const auto& p : s.peaks) {
    peaks.push_back({p.mz, p.intensity});
    frags.push_back({{"atoms", p.fragment.atoms},
                     {"formula", p.fragment.formula.to_string()},
                     {"n_breaks", p.fragment.n_breaks},
                     {"mz", p.mz},
                     {"intensity", p.intensity}});
  }
  j["peaks"] = peaks;
  j["fragments"] = frags;
  return j.dump();
}

std::vector<BenchRow> run_bench(const std::vector<DatasetRecord>& records, LoadedModel& m, const RunConfig& cfg) {
  std::vector<BenchRow> rows;
  if (records.empty()) return rows;
  for (int w = 0; w < cfg.bench_warmup; ++w) {
    Rng rng(cfg.seed);
    elucidate_record(records[0], m, cfg, rng);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    // phase -> per-repeat (phase seconds, cumulative seconds)
    std::vector<std::vector<std::pair<double, double>>> samples;
    for (int rep = 0; rep < cfg.bench_repeats; ++rep) {
      Rng rng = Rng(cfg.seed).fork(i);
      frag::SpectrumCache cache(cfg.refine.simulate);
      const auto o = elucidate_record(records[i], m, cfg, rng, &cache);
      if (samples.size() < o.trace.size()) samples.resize(o.trace.size());
      double prev = 0.0;
      for (std::size_t r = 0; r < o.trace.size(); ++r) {
        samples[r].push_back({o.trace[r].cumulative_seconds - prev, o.trace[r].cumulative_seconds});
        prev = o.trace[r].cumulative_seconds;
      }
    }
    for (std::size_t r = 0; r < samples.size(); ++r) {
      BenchRow row;
      row.id = records[i].id;
      row.phase = r == 0 ? "generation" : "round" + std::to_string(r + 1);
      row.repeats = static_cast<int>(samples[r].size());
      double s = 0, cum = 0;
      for (const auto& [x, c] : samples[r]) {
        s += x;
        cum += c;
      }
      row.mean_seconds = s / row.repeats;
      row.cumulative_seconds = cum / row.repeats;
      double ss = 0;
      for (const auto& [x, c] : samples[r]) ss += (x - row.mean_seconds) * (x - row.mean_seconds);
      row.std_seconds = row.repeats > 1 ? std::sqrt(ss / (row.repeats - 1)) : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "id,phase,repeats,mean_seconds,std_seconds,cumulative_seconds\n";
  out << std::setprecision(6);
  for (const auto& r : rows) {
    out << r.id << ',' << r.phase << ',' << r.repeats << ',' << r.mean_seconds << ',' << r.std_seconds << ','
        << r.cumulative_seconds << '\n';
  }
}

std::vector<BenchRow> cmd_bench(const BenchOptions& opts, const RunConfig& cfg) {
  auto m = load_model(opts.checkpoint);
  auto records = read_dataset(opts.dataset, m.net->config().fp_threshold);
  if (opts.max_spectra > 0 && static_cast<int>(records.size()) > opts.max_spectra) {
    records.resize(static_cast<std::size_t>(opts.max_spectra));
  }
  const auto rows = run_bench(records, m, cfg);
  std::ostringstream os;
  write_bench_csv(os, rows);
  if (opts.out.empty()) {
    std::cout << os.str();
  } else {
    atomic_write(opts.out, os.str());
  }
  return rows;
}

}  // namespace frigid::app
