#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <unistd.h>

#include "frigid/app.hpp"
#include "frigid/synth.hpp"

using namespace frigid;
using namespace frigid::app;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("frigid_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

RunConfig tiny_config() {
  RunConfig c;
  c.model.n_layers = 1;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.d_ff = 32;
  c.model.fp_attn_layers = 1;
  c.vocab_size = 60;
  c.train.steps = 30;
  c.train.batch_size = 8;
  c.train.warmup_steps = 5;
  c.checkpoint_every = 10;
  c.refine.budget = 12;
  c.refine.top_k = 3;
  c.refine.variants = 2;
  c.bench_repeats = 2;
  return c;
}

// Intersection over union computed from sorted bit lists, independent of
// chem::tanimoto.
double iou(const chem::Fingerprint& a, const chem::Fingerprint& b) {
  std::vector<int> both;
  std::set_intersection(a.bits().begin(), a.bits().end(), b.bits().begin(), b.bits().end(), std::back_inserter(both));
  const double u = static_cast<double>(a.count() + b.count() - both.size());
  return u == 0 ? 1.0 : static_cast<double>(both.size()) / u;
}

chem::Fingerprint first_bits(int n, int nbits = 4096) {
  std::vector<int> bits;
  for (int i = 0; i < n; ++i) bits.push_back(i * 7);
  return chem::Fingerprint(nbits, bits);
}

}  // namespace

TEST_CASE("config round trip") {
  const RunConfig d;
  CHECK(same_config(parse_config(serialize_config(d)), d));
  RunConfig c;
  c.seed = 18446744073709551615ULL;
  c.refine.p_max = 0.1 + 0.2;  // not exactly representable in short decimal
  c.refine.masking = refine::Masking::Random;
  c.train.ema_warmup = false;
  c.length.sigma_floor = 1e-5;
  c.formula_hypotheses = 5;
  const auto text = serialize_config(c);
  const auto back = parse_config(text);
  CHECK(same_config(back, c));
  CHECK(back.refine.p_max == c.refine.p_max);
  CHECK(back.seed == c.seed);
  CHECK(serialize_config(back) == text);
  CHECK(config_keys().size() == static_cast<std::size_t>(count_lines(text)));
}

TEST_CASE("config parsing rejects bad input") {
  CHECK(parse_config("# comment only\n\n  refine.p_max = 0.5  # trailing\n").refine.p_max == 0.5);
  CHECK_THROWS_AS(parse_config("refine.pmax = 0.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("refine.p_max = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("refine.p_max = -0.1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("refine.rounds = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("refine.rounds = 2.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("refine.masking = sometimes\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.ema_warmup = yes\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("refine.rounds\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("refine.rounds = 2\nrefine.rounds = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.d_model = 30\nmodel.n_heads = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("schedule.alpha_min = 1\n"), ConfigError);
  CHECK(parse_config("refine.masking = random\n").refine.masking == refine::Masking::Random);
}

TEST_CASE("dataset records") {
  const std::string good =
      R"({"id":"a","smiles":"CCO","formula":"C2H6O","spectrum":[[31.0,0.5],[47.05,1.0]],"precursor_mz":47.0491})";
  const auto r = parse_record(good);
  CHECK(r.id == "a");
  CHECK(r.has_formula);
  CHECK(r.spectrum.peaks.size() == 2);
  CHECK(r.spectrum.precursor_mz == 47.0491);
  CHECK_FALSE(r.fingerprint.has_value());

  CHECK_THROWS_AS(parse_record(R"({"id":"b","smiles":"CCO","formula":"C2H4O","spectrum":[]})"), DatasetError);
  CHECK_THROWS_AS(parse_record(R"({"id":"c","spectrum":[[50.0,1.0],[40.0,1.0]]})"), DatasetError);
  CHECK_THROWS_AS(parse_record(R"({"id":"d","smiles":"C1CC"})"), DatasetError);
  CHECK_THROWS_AS(parse_record(R"({"smiles":"CCO"})"), DatasetError);
  CHECK_THROWS_AS(parse_record("not json"), DatasetError);
  CHECK_THROWS_AS(parse_record(R"({"id":"e","fingerprint":42})"), DatasetError);

  // Formula only: precursor derived as [M+H]+.
  const auto f = parse_record(R"({"id":"f","formula":"C6H6"})");
  CHECK(f.spectrum.precursor_mz == chem::monoisotopic_mass(chem::Formula::parse("C6H6"), chem::Adduct::Proton));

  // Probabilities are thresholded strictly above 0.187.
  std::vector<double> probs(4096, 0.0);
  probs[3] = 0.9;
  probs[10] = 0.187;
  probs[11] = 0.1871;
  nlohmann::json j;
  j["id"] = "g";
  j["fingerprint"] = probs;
  const auto g = parse_record(j.dump());
  REQUIRE(g.fingerprint.has_value());
  CHECK(g.fingerprint->bits() == std::vector<int>{3, 11});
  probs[0] = 1.5;
  j["fingerprint"] = probs;
  CHECK_THROWS_AS(parse_record(j.dump()), DatasetError);

  // Serialization round trip, fingerprint carried as hex.
  Rng rng(1);
  const auto syn = synthetic_record("s1", "CC(=O)Nc1ccc(O)cc1", {}, 0.8, &rng);
  const auto back = parse_record(record_to_json(syn));
  CHECK(back.id == syn.id);
  CHECK(back.smiles == syn.smiles);
  CHECK(back.formula == syn.formula);
  CHECK(back.spectrum.peaks == syn.spectrum.peaks);
  CHECK(back.spectrum.precursor_mz == syn.spectrum.precursor_mz);
  CHECK(*back.fingerprint == *syn.fingerprint);
}

TEST_CASE("dataset files and the data directory") {
  const auto dir = scratch("data");
  write_lines(dir / "d.jsonl", {R"({"id":"a","smiles":"CCO"})", "", R"({"id":"b","smiles":"CCN"})"});
  CHECK(read_dataset(dir / "d.jsonl").size() == 2);
  write_lines(dir / "bad.jsonl", {R"({"id":"a","smiles":"CCO"})", R"({"id":"b","smiles":"CCN","formula":"C2H6O"})"});
  try {
    read_dataset(dir / "bad.jsonl");
    FAIL("expected a dataset error");
  } catch (const DatasetError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  ::setenv("FRIGID_DATA_DIR", dir.c_str(), 1);
  CHECK(resolve_data_path("d.jsonl") == dir / "d.jsonl");
  CHECK(read_smiles("d.jsonl") == std::vector<std::string>{"CCO", "CCN"});
  ::unsetenv("FRIGID_DATA_DIR");
  CHECK(resolve_data_path("d.jsonl") == fs::path("d.jsonl"));
  write_lines(dir / "c.smi", {"# header", "CCO ethanol", "", "c1ccccc1"});
  CHECK(read_smiles(dir / "c.smi") == std::vector<std::string>{"CCO", "c1ccccc1"});
  CHECK_THROWS_AS(read_dataset(dir / "missing.jsonl"), DatasetError);
  fs::remove_all(dir);
}

TEST_CASE("fingerprint noising") {
  Rng rng(3);
  const auto fp100 = first_bits(100);
  CHECK(noise_fingerprint(fp100, 1.0, rng) == fp100);
  for (int seed = 0; seed < 10; ++seed) {
    Rng r(static_cast<std::uint64_t>(seed));
    const auto n = noise_fingerprint(fp100, 0.5, r);
    CHECK(iou(fp100, n) >= 0.48);
    CHECK(iou(fp100, n) <= 0.52);
    CHECK(std::is_sorted(n.bits().begin(), n.bits().end()));
  }
  CHECK_THROWS_AS(noise_fingerprint(chem::Fingerprint(4096), 0.5, rng), UnreachableTarget);
  CHECK_THROWS_AS(noise_fingerprint(first_bits(2), 0.9, rng), UnreachableTarget);
  CHECK_THROWS_AS(noise_fingerprint(fp100, 0.0, rng), InputError);
  CHECK_THROWS_AS(noise_fingerprint(fp100, 1.2, rng), InputError);

  // Whenever it succeeds the result is within tolerance; deterministic per seed.
  for (int a : {3, 5, 12, 20, 33, 57, 200}) {
    for (double q : {0.2, 0.35, 0.5, 0.65, 0.8, 0.9, 0.97}) {
      Rng r1(static_cast<std::uint64_t>(a * 100 + static_cast<int>(q * 100))), r2 = r1;
      try {
        const auto n = noise_fingerprint(first_bits(a), q, r1);
        CHECK(std::abs(iou(first_bits(a), n) - q) <= 0.02 + 1e-12);
        CHECK(n == noise_fingerprint(first_bits(a), q, r2));
      } catch (const UnreachableTarget&) {
        // Only small fingerprints may be out of reach.
        CHECK(a < 30);
      }
    }
  }
}

TEST_CASE("formula hypotheses") {
  const double h_mass = chem::isotope_mass(chem::Element::H);
  const auto benzene = chem::Formula::parse("C6H6");
  const double mz = chem::monoisotopic_mass(benzene) + chem::kProtonMass;
  const auto hyps = formula_hypotheses(mz, 50);
  bool found = false;
  for (const auto& h : hyps) {
    found = found || h.formula == benzene;
    const double neutral = chem::monoisotopic_mass(h.formula);
    CHECK(std::abs(neutral - (mz - chem::kProtonMass)) / (mz - chem::kProtonMass) * 1e6 <= 5.0 + 1e-9);
    CHECK(h.rdbe >= 0);
    CHECK(h.rdbe == std::floor(h.rdbe));
  }
  CHECK(found);
  CHECK(formula_hypotheses(mz, 1).size() == 1);
  CHECK(formula_hypotheses(mz, 1)[0].formula == benzene);
  CHECK_THROWS_AS(formula_hypotheses(0.5, 5), NoCandidateFormula);
  CHECK_THROWS_AS(formula_hypotheses(mz, 0), InputError);

  // Exhaustive oracle over a small CHNO box: every formula in the window with
  // an integral, non-negative RDBE and enough carbon is returned.
  const double target = 180.06339;  // glucose, C6H12O6
  const double pmz = target + chem::kProtonMass;
  const auto all = formula_hypotheses(pmz, 100000);
  std::set<std::string> got;
  for (const auto& h : all) got.insert(h.formula.to_string());
  int oracle = 0;
  for (int c = 1; c <= 15; ++c) {
    for (int n = 0; n <= 6; ++n) {
      for (int o = 0; o <= 10; ++o) {
        for (int h = 0; h <= 40; ++h) {
          chem::Formula f;
          f.count(chem::Element::C) = c;
          f.count(chem::Element::H) = h;
          f.count(chem::Element::N) = n;
          f.count(chem::Element::O) = o;
          const double m = c * 12.0 + h * h_mass + n * chem::isotope_mass(chem::Element::N) +
                           o * chem::isotope_mass(chem::Element::O);
          if (std::abs(m - target) / target * 1e6 > 5.0) continue;
          const int twice = 2 * c + 2 + n - h;
          if (twice < 0 || twice % 2) continue;
          if (h > 3.1 * c + 4 || n > 1.3 * c + 1 || o > 1.2 * c + 1) continue;
          ++oracle;
          CHECK(got.count(f.to_string()) == 1);
        }
      }
    }
  }
  CHECK(oracle >= 1);
  CHECK(got.count("C6H12O6") == 1);

  // True formulas of synthetic molecules are recovered.
  for (const auto& smi : synth::generate_corpus(20, 5)) {
    const auto f = chem::molecular_formula(chem::parse_smiles(smi));
    const auto hs = formula_hypotheses(chem::monoisotopic_mass(f, chem::Adduct::Proton), 100000);
    CHECK(std::any_of(hs.begin(), hs.end(), [&](const FormulaHypothesis& h) { return h.formula == f; }));
  }
}

TEST_CASE("budget splitting") {
  CHECK(split_budget(128, 5) == std::vector<int>{26, 26, 26, 25, 25});
  CHECK(split_budget(3, 5) == std::vector<int>{1, 1, 1, 0, 0});
  for (int b = 0; b < 40; ++b) {
    for (int n = 1; n < 7; ++n) {
      const auto s = split_budget(b, n);
      CHECK(std::accumulate(s.begin(), s.end(), 0) == b);
      CHECK(s.front() - s.back() <= 1);
    }
  }
  CHECK_THROWS_AS(split_budget(10, 0), InputError);
}

TEST_CASE("tokenizer-train command") {
  const auto dir = scratch("tok");
  const auto corpus = synth::generate_corpus(1000, 21);
  write_lines(dir / "c.smi", corpus);
  const auto v = cmd_tokenizer_train(dir / "c.smi", 256, dir / "v.json");
  CHECK(v.size() == 256);
  const auto loaded = tok::Vocabulary::load(dir / "v.json");
  CHECK(loaded.size() == 256);
  CHECK(loaded.token(0) == tok::kBos);
  CHECK(loaded.token(3) == tok::kPad);
  const auto first = slurp(dir / "v.json");
  cmd_tokenizer_train(dir / "c.smi", 256, dir / "v.json");
  CHECK(slurp(dir / "v.json") == first);
  try {
    cmd_tokenizer_train(dir / "c.smi", 8, dir / "small.json");
    FAIL("expected an error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("minimum of " + std::to_string(tok::primitive_vocab_size(corpus) + 4)) !=
          std::string::npos);
  }
  CHECK_FALSE(fs::exists(dir / "small.json"));
  CHECK_THROWS_AS(cmd_tokenizer_train(dir / "none.smi", 256, dir / "x.json"), InputError);
  fs::remove_all(dir);
}

TEST_CASE("train, resume and numeric failure") {
  const auto dir = scratch("train");
  write_lines(dir / "c.smi", synth::generate_corpus(60, 4));
  const auto cfg = tiny_config();

  TrainOptions full;
  full.dataset = dir / "c.smi";
  full.out = dir / "full.ckpt";
  full.quiet = true;
  const auto s = cmd_train(full, cfg);
  CHECK(s.start_step == 0);
  CHECK(s.final_step == 30);
  const auto log = slurp(dir / "full.ckpt.loss.csv");
  CHECK(log.rfind("step,loss,lr,grad_norm,masked\n", 0) == 0);
  CHECK(count_lines(log) == 31);

  // Interrupted after 12 updates, then resumed.
  TrainOptions part = full;
  part.out = dir / "part.ckpt";
  part.max_steps = 12;
  CHECK(cmd_train(part, cfg).final_step == 12);
  CHECK(model::load_checkpoint(part.out).step == 12);
  part.max_steps = 0;
  part.resume = true;
  const auto rs = cmd_train(part, cfg);
  CHECK(rs.start_step == 12);
  CHECK(rs.final_step == 30);
  CHECK(count_lines(slurp(dir / "part.ckpt.loss.csv")) == 31);
  const auto a = model::load_checkpoint(full.out);
  const auto b = model::load_checkpoint(part.out);
  REQUIRE(a.params.size() == b.params.size());
  bool identical = true;
  for (std::size_t i = 0; i < a.params.size(); ++i) identical = identical && a.params[i].value == b.params[i].value;
  CHECK(identical);
  CHECK(slurp(dir / "full.ckpt.loss.csv") == slurp(dir / "part.ckpt.loss.csv"));

  // A poisoned weight makes the loss non-finite; the checkpoint stays at the
  // last good step.
  auto ck = model::load_checkpoint(part.out);
  ck.train_config.steps = 40;
  ck.params[0].value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  model::save_checkpoint(ck, part.out);
  CHECK_THROWS_AS(cmd_train(part, cfg), NumericFailure);
  CHECK(model::load_checkpoint(part.out).step == 30);

  TrainOptions missing = full;
  missing.out = dir / "nothing.ckpt";
  missing.resume = true;
  CHECK_THROWS_AS(cmd_train(missing, cfg), InputError);
  fs::remove_all(dir);
}

TEST_CASE("elucidate and bench commands") {
  const auto dir = scratch("elucidate");
  const auto corpus = synth::generate_corpus(60, 4);
  write_lines(dir / "c.smi", corpus);
  auto cfg = tiny_config();
  TrainOptions t;
  t.dataset = dir / "c.smi";
  t.out = dir / "m.ckpt";
  t.quiet = true;
  cmd_train(t, cfg);

  std::vector<DatasetRecord> recs;
  Rng rng(2);
  for (int i = 0; i < 3; ++i) recs.push_back(synthetic_record("s" + std::to_string(i), corpus[i], {}, std::nullopt, &rng));
  recs.push_back(recs[0]);
  recs.back().id = "unknown";
  recs.back().smiles.clear();
  write_dataset(dir / "d.jsonl", recs);

  cfg.refine.rounds = 1;
  const auto m1 = cmd_elucidate({dir / "d.jsonl", t.out, dir / "r1"}, cfg);
  CHECK(m1.spectra == 4);
  CHECK(m1.with_truth == 3);
  CHECK(count_lines(slurp(dir / "r1" / "s0.trace.csv")) == 2);
  CHECK(fs::exists(dir / "r1" / "unknown.ranked.tsv"));

  cfg.refine.rounds = 5;
  cmd_elucidate({dir / "d.jsonl", t.out, dir / "r5"}, cfg);
  CHECK(count_lines(slurp(dir / "r5" / "s1.trace.csv")) == 6);
  CHECK(count_lines(slurp(dir / "r5" / "trace.csv")) == 1 + 4 * 5);
  const auto metrics = nlohmann::json::parse(slurp(dir / "r5" / "metrics.json"));
  for (const char* k : {"accuracy@1", "accuracy@10", "tanimoto@1", "tanimoto@10", "spectra", "with_truth"}) {
    CHECK(metrics.contains(k));
  }

  // Deterministic given the seed, also with several workers.
  cfg.workers = 2;
  cmd_elucidate({dir / "d.jsonl", t.out, dir / "r5b"}, cfg);
  for (const char* f : {"s0.ranked.tsv", "s1.ranked.tsv", "s2.ranked.tsv", "unknown.ranked.tsv"}) {
    CHECK(slurp(dir / "r5" / f) == slurp(dir / "r5b" / f));
  }
  cfg.workers = 1;

  cfg.formula_hypotheses = 2;
  cfg.refine.rounds = 2;
  const auto mh = cmd_elucidate({dir / "d.jsonl", t.out, dir / "hyp"}, cfg);
  CHECK(mh.spectra == 4);
  cfg.formula_hypotheses = 0;

  cfg.refine.rounds = 3;
  cfg.bench_repeats = 2;
  const auto rows = cmd_bench({dir / "d.jsonl", t.out, dir / "bench.csv", 2}, cfg);
  CHECK(rows.size() == 2 * 3);
  for (const auto& r : rows) {
    CHECK(r.repeats == 2);
    CHECK(r.mean_seconds >= 0.0);
    CHECK(r.std_seconds >= 0.0);
  }
  CHECK(rows[0].phase == "generation");
  CHECK(rows[2].phase == "round3");
  CHECK(rows[2].cumulative_seconds >= rows[1].cumulative_seconds);
  const auto csv = slurp(dir / "bench.csv");
  CHECK(csv.rfind("id,phase,repeats,mean_seconds,std_seconds,cumulative_seconds\n", 0) == 0);
  CHECK(count_lines(csv) == 7);

  write_lines(dir / "dup.jsonl", {R"({"id":"x","smiles":"CCO"})", R"({"id":"x","smiles":"CCN"})"});
  CHECK_THROWS_AS(cmd_elucidate({dir / "dup.jsonl", t.out, dir / "dup"}, cfg), DatasetError);
  fs::remove_all(dir);
}

TEST_CASE("simulate JSON") {
  const auto j = nlohmann::json::parse(simulate_json("CCO", {}));
  CHECK(j["formula"] == "C2H6O");
  CHECK(j["peaks"].size() == j["fragments"].size());
  CHECK(j["precursor_mz"].get<double>() ==
        doctest::Approx(chem::monoisotopic_mass(chem::Formula::parse("C2H6O")) + chem::kProtonMass));
  CHECK_THROWS_AS(simulate_json("C1CC", {}), chem::ChemError);
}

#ifdef FRIGID_CLI_PATH
TEST_CASE("command-line exit codes") {
  const auto dir = scratch("exit");
  const std::string cli = FRIGID_CLI_PATH;
  const auto run = [&](const std::string& args) {
    const int st = std::system((cli + " " + args + " >" + (dir / "out.txt").string() + " 2>&1").c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  CHECK(run("config") == 0);
  CHECK(run("--set refine.nope=1 config") == 2);
  CHECK(run("--set refine.p_max=3 config") == 2);
  CHECK(run("formula-hyp --precursor 0.5") == 2);
  CHECK(run("formula-hyp --precursor 79.054221 -n 1") == 0);
  CHECK(slurp(dir / "out.txt").rfind("C6H6", 0) == 0);
  CHECK(run("noise-fp --smiles C -q 0.5") == 2);
  CHECK(run("simulate --smiles CCO") == 0);
  CHECK(run("elucidate --dataset missing.jsonl --checkpoint missing.ckpt -o x") == 2);
  CHECK(run("no-such-verb") == 2);

  write_lines(dir / "c.smi", synth::generate_corpus(40, 6));
  std::ofstream(dir / "tiny.cfg") << serialize_config(tiny_config());
  const std::string common = "--config " + (dir / "tiny.cfg").string() + " ";
  CHECK(run(common + "train -q --dataset " + (dir / "c.smi").string() + " -o " + (dir / "m.ckpt").string()) == 0);
  auto ck = model::load_checkpoint(dir / "m.ckpt");
  ck.train_config.steps = 50;
  ck.params[0].value(0, 0) = std::numeric_limits<float>::infinity();
  model::save_checkpoint(ck, dir / "m.ckpt");
  CHECK(run(common + "train -q --resume --dataset " + (dir / "c.smi").string() + " -o " + (dir / "m.ckpt").string()) ==
        3);
  CHECK(model::load_checkpoint(dir / "m.ckpt").step == 30);
  fs::remove_all(dir);
}
#endif
