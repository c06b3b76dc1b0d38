#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "frigid/app.hpp"
#include "frigid/synth.hpp"

using namespace frigid;

namespace {

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<int> rounds;
  std::optional<int> budget;
};

app::RunConfig effective_config(const Globals& g) {
  app::RunConfig c = g.config.empty() ? app::RunConfig{} : app::load_config(app::resolve_data_path(g.config));
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw app::ConfigError("--set expects key=value, got '" + kv + "'");
    app::set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.seed = *g.seed;
  if (g.workers) app::set_config_value(c, "workers", std::to_string(*g.workers));
  if (g.rounds) app::set_config_value(c, "refine.rounds", std::to_string(*g.rounds));
  if (g.budget) app::set_config_value(c, "refine.budget", std::to_string(*g.budget));
  c.validate();
  return c;
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    app::atomic_write(out, text);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"frigid: structure elucidation from tandem mass spectra with a masked diffusion model"};
  cli.require_subcommand(1);
  cli.fallthrough();
  Globals g;
  cli.add_option("--config", g.config, "Run configuration file (key = value lines)");
  cli.add_option("--set", g.sets, "Override one config key, e.g. --set refine.p_max=0.5")->take_all();
  cli.add_option("--seed", g.seed, "Random seed");
  cli.add_option("--workers", g.workers, "Concurrent spectra");
  cli.add_option("--rounds", g.rounds, "Refinement rounds R");
  cli.add_option("--budget", g.budget, "Candidates per round B");

  auto* cfg_cmd = cli.add_subcommand("config", "Print the effective configuration");

  auto* synth_cmd = cli.add_subcommand("synth", "Write a synthetic SMILES corpus");
  std::size_t synth_n = 1000;
  std::string synth_out;
  synth_cmd->add_option("-n,--count", synth_n, "Number of molecules")->capture_default_str();
  synth_cmd->add_option("-o,--out", synth_out, "Output file (default stdout)");

  auto* tok_cmd = cli.add_subcommand("tokenizer-train", "Learn a BPE vocabulary from a SMILES corpus");
  std::string tok_corpus, tok_out;
  std::optional<int> tok_size;
  tok_cmd->add_option("--corpus", tok_corpus, "SMILES file or JSONL dataset")->required();
  tok_cmd->add_option("--vocab-size", tok_size, "Target vocabulary size (default tokenizer.vocab_size)");
  tok_cmd->add_option("-o,--out", tok_out, "Vocabulary JSON")->required();

  auto* train_cmd = cli.add_subcommand("train", "Train the denoiser and the length model");
  app::TrainOptions topts;
  std::string t_dataset, t_out, t_vocab, t_log;
  train_cmd->add_option("--dataset", t_dataset, "SMILES file or JSONL dataset")->required();
  train_cmd->add_option("-o,--out", t_out, "Checkpoint path")->required();
  train_cmd->add_option("--vocab", t_vocab, "Vocabulary JSON (default: learn one)");
  train_cmd->add_option("--log", t_log, "Loss log CSV (default <out>.loss.csv)");
  train_cmd->add_flag("--resume", topts.resume, "Continue from the checkpoint at --out");
  train_cmd->add_flag("-q,--quiet", topts.quiet, "No progress output");
  train_cmd->add_option("--max-steps", topts.max_steps, "Stop after this many updates (resume later)");

  auto* elu_cmd = cli.add_subcommand("elucidate", "Rank candidate structures for each spectrum");
  std::string e_dataset, e_ckpt, e_out;
  std::optional<int> e_hyp;
  elu_cmd->add_option("--dataset", e_dataset, "JSONL dataset")->required();
  elu_cmd->add_option("--checkpoint", e_ckpt, "Trained checkpoint")->required();
  elu_cmd->add_option("-o,--out-dir", e_out, "Output directory")->required();
  elu_cmd->add_option("--formula-hypotheses", e_hyp, "Use n formula hypotheses instead of the record formula");

  auto* sim_cmd = cli.add_subcommand("simulate", "Simulate fragment spectra");
  std::string s_smiles, s_input, s_out;
  std::optional<double> s_noise;
  sim_cmd->add_option("--smiles", s_smiles, "One molecule; prints spectrum JSON");
  sim_cmd->add_option("--input", s_input, "SMILES file; writes a JSONL dataset");
  sim_cmd->add_option("-o,--out", s_out, "Output file (default stdout)");
  sim_cmd->add_option("--noise-fp", s_noise, "Noise dataset fingerprints to this Tanimoto");

  auto* bench_cmd = cli.add_subcommand("bench", "Per-phase latency of elucidation");
  app::BenchOptions bopts;
  std::string b_dataset, b_ckpt, b_out;
  bench_cmd->add_option("--dataset", b_dataset, "JSONL dataset")->required();
  bench_cmd->add_option("--checkpoint", b_ckpt, "Trained checkpoint")->required();
  bench_cmd->add_option("-o,--out", b_out, "Latency CSV (default stdout)");
  bench_cmd->add_option("--max-spectra", bopts.max_spectra, "Limit the number of spectra");

  auto* noise_cmd = cli.add_subcommand("noise-fp", "Perturb a fingerprint to a target Tanimoto similarity");
  std::string n_hex, n_smiles;
  double n_q = 0.8;
  noise_cmd->add_option("--hex", n_hex, "Fingerprint as hex");
  noise_cmd->add_option("--smiles", n_smiles, "Use this molecule's fingerprint");
  noise_cmd->add_option("-q,--target", n_q, "Target Tanimoto")->capture_default_str();

  auto* hyp_cmd = cli.add_subcommand("formula-hyp", "Formula hypotheses for a precursor m/z");
  double h_mz = 0;
  int h_n = 5;
  std::optional<double> h_ppm;
  hyp_cmd->add_option("--precursor", h_mz, "[M+H]+ m/z")->required();
  hyp_cmd->add_option("-n", h_n, "Number of hypotheses")->capture_default_str();
  hyp_cmd->add_option("--ppm", h_ppm, "Mass tolerance (default elucidate.hypothesis_ppm)");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = cli.exit(e);
    return rc == 0 ? app::kExitOk : app::kExitInput;
  }

  try {
    const auto cfg = effective_config(g);
    if (cfg_cmd->parsed()) {
      std::cout << app::serialize_config(cfg);
    } else if (synth_cmd->parsed()) {
      std::string text;
      for (const auto& s : synth::generate_corpus(synth_n, cfg.seed)) text += s + "\n";
      emit(synth_out, text);
    } else if (tok_cmd->parsed()) {
      const auto v = app::cmd_tokenizer_train(tok_corpus, tok_size.value_or(cfg.vocab_size), tok_out);
      std::cerr << "vocabulary of " << v.size() << " tokens written to " << tok_out << '\n';
    } else if (train_cmd->parsed()) {
      topts.dataset = t_dataset;
      topts.out = t_out;
      topts.vocab = t_vocab;
      topts.loss_log = t_log;
      const auto s = app::cmd_train(topts, cfg);
      if (!topts.quiet) {
        std::cerr << "trained steps " << s.start_step << ".." << s.final_step << ", loss " << s.first_loss << " -> "
                  << s.last_loss << '\n';
      }
    } else if (elu_cmd->parsed()) {
      auto c = cfg;
      if (e_hyp) app::set_config_value(c, "elucidate.formula_hypotheses", std::to_string(*e_hyp));
      const auto m = app::cmd_elucidate({e_dataset, e_ckpt, e_out}, c);
      std::cout << m.to_json();
    } else if (sim_cmd->parsed()) {
      if (s_smiles.empty() == s_input.empty()) throw app::InputError("simulate: give exactly one of --smiles, --input");
      if (!s_smiles.empty()) {
        emit(s_out, app::simulate_json(s_smiles, cfg.refine.simulate) + "\n");
      } else {
        Rng rng(cfg.seed);
        std::vector<app::DatasetRecord> recs;
        int i = 0, skipped = 0;
        for (const auto& s : app::read_smiles(s_input)) {
          const std::string id = "mol" + std::to_string(i++);
          try {
            recs.push_back(app::synthetic_record(id, s, cfg.refine.simulate, s_noise, &rng));
          } catch (const app::UnreachableTarget&) {
            ++skipped;
          }
        }
        if (skipped) std::cerr << "skipped " << skipped << " molecules whose fingerprint cannot reach the target\n";
        std::string text;
        for (const auto& r : recs) text += app::record_to_json(r) + "\n";
        emit(s_out, text);
      }
    } else if (bench_cmd->parsed()) {
      bopts.dataset = b_dataset;
      bopts.checkpoint = b_ckpt;
      bopts.out = b_out;
      app::cmd_bench(bopts, cfg);
    } else if (noise_cmd->parsed()) {
      if (n_hex.empty() == n_smiles.empty()) throw app::InputError("noise-fp: give exactly one of --hex, --smiles");
      const auto fp = n_hex.empty() ? chem::morgan_fingerprint(chem::parse_smiles(n_smiles)) : chem::Fingerprint::from_hex(n_hex);
      Rng rng(cfg.seed);
      const auto noised = app::noise_fingerprint(fp, n_q, rng);
      nlohmann::ordered_json j;
      j["fingerprint"] = noised.to_hex();
      j["active_bits"] = noised.count();
      j["tanimoto"] = chem::tanimoto(fp, noised);
      std::cout << j.dump() << '\n';
    } else if (hyp_cmd->parsed()) {
      for (const auto& h : app::formula_hypotheses(h_mz, h_n, h_ppm.value_or(cfg.hypothesis_ppm))) {
        std::cout << h.formula.to_string() << '\t' << h.ppm << '\t' << h.rdbe << '\n';
      }
    }
  } catch (const app::NumericFailure& e) {
    std::cerr << "frigid: numeric failure: " << e.what() << '\n';
    return app::kExitNumeric;
  } catch (const app::InputError& e) {
    std::cerr << "frigid: " << e.what() << '\n';
    return app::kExitInput;
  } catch (const chem::ChemError& e) {
    std::cerr << "frigid: " << e.what() << '\n';
    return app::kExitInput;
  } catch (const tok::TokenizerError& e) {
    std::cerr << "frigid: " << e.what() << '\n';
    return app::kExitInput;
  } catch (const model::CheckpointError& e) {
    std::cerr << "frigid: " << e.what() << '\n';
    return app::kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "frigid: internal error: " << e.what() << '\n';
    return 1;
  }
  return app::kExitOk;
}
