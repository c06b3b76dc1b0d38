#pragma once

// Application layer behind the frigid command-line tool: run configuration,
// dataset ingestion, fingerprint noising, formula hypotheses and the
// commands themselves. Commands report errors as exceptions; the tool maps
// them to exit codes.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "frigid/denoiser.hpp"
#include "frigid/lengthmodel.hpp"
#include "frigid/refine.hpp"

namespace frigid::app {

// Bad user input: unreadable file, malformed record, invalid config value.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

class DatasetError : public InputError {
 public:
  using InputError::InputError;
};

class UnreachableTarget : public InputError {
 public:
  using InputError::InputError;
};

class NoCandidateFormula : public InputError {
 public:
  using InputError::InputError;
};

// Training diverged; the last good checkpoint is kept on disk.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kExitOk = 0, kExitInput = 2, kExitNumeric = 3 };

struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  int vocab_size = 256;
  model::ModelConfig model = model::ModelConfig::desk();
  model::NoiseSchedule schedule;
  model::TrainConfig train;
  int checkpoint_every = 500;
  length::FitOptions length;
  refine::RefineConfig refine;
  // 0 uses the record's formula; n > 0 splits the budget over n hypotheses.
  int formula_hypotheses = 0;
  double hypothesis_ppm = 5.0;
  int bench_warmup = 1;
  int bench_repeats = 3;

  RunConfig();
  void validate() const;
};

// Flat "section.key = value" lines; '#' starts a comment. Unknown keys and
// out-of-range values throw ConfigError. Keys absent from the text keep their
// defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& c);
bool same_config(const RunConfig& a, const RunConfig& b);
std::vector<std::string> config_keys();
void set_config_value(RunConfig& c, const std::string& key, const std::string& value);

struct DatasetRecord {
  std::string id;
  std::string smiles;  // empty when unknown
  chem::Formula formula;
  bool has_formula = false;
  frag::ObservedSpectrum spectrum;
  std::optional<chem::Fingerprint> fingerprint;
};

// Probabilities strictly above the threshold become set bits.
chem::Fingerprint threshold_fingerprint(const std::vector<double>& probs, double threshold);

DatasetRecord parse_record(const std::string& json_line, double fp_threshold = 0.187);
std::string record_to_json(const DatasetRecord& r);
// JSONL, one record per line; blank lines skipped. Errors name the line.
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path, double fp_threshold = 0.187);
void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
// Relative paths that do not exist as given are looked up under
// $FRIGID_DATA_DIR.
std::filesystem::path resolve_data_path(const std::filesystem::path& p);
// SMILES per line (first whitespace-separated field), or the smiles fields
// of a JSONL dataset.
std::vector<std::string> read_smiles(const std::filesystem::path& path);

// Record built from a structure: simulated spectrum, true formula and
// fingerprint (optionally noised to Tanimoto q against the true one).
DatasetRecord synthetic_record(const std::string& id, const std::string& smiles, const frag::SimulateOptions& sim,
                               std::optional<double> noise_q = {}, Rng* rng = nullptr);

// Flips bits alternately off and on (removals exceed additions by at most
// one), with the flip count found by bisection so the Tanimoto similarity to
// the input lands within +-0.02 of q.
chem::Fingerprint noise_fingerprint(const chem::Fingerprint& fp, double q, Rng& rng);

struct FormulaHypothesis {
  chem::Formula formula;
  double ppm = 0.0;  // signed, relative to the neutral mass
  double rdbe = 0.0;
  double penalty = 0.0;
};

// CHNOPS plus halogen formulae whose neutral monoisotopic mass lies within
// `ppm` of precursor_mz minus a proton, best first.
std::vector<FormulaHypothesis> formula_hypotheses(double precursor_mz, int n, double ppm = 5.0);

// Budget for each of n hypotheses summing to `budget`; earlier ones get the
// remainder.
std::vector<int> split_budget(int budget, int n);

// --- commands -------------------------------------------------------------

void atomic_write(const std::filesystem::path& path, const std::string& content);

tok::Vocabulary cmd_tokenizer_train(const std::filesystem::path& corpus, int vocab_size,
                                    const std::filesystem::path& out);

struct TrainOptions {
  std::filesystem::path dataset;
  std::filesystem::path out;
  std::filesystem::path vocab;     // empty: train one on the dataset
  std::filesystem::path loss_log;  // empty: <out>.loss.csv
  bool resume = false;
  bool quiet = false;
  int max_steps = 0;  // stop after this many updates in this invocation; 0: run to train.steps
};
struct TrainSummary {
  int start_step = 0;
  int final_step = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};
TrainSummary cmd_train(const TrainOptions& opts, const RunConfig& cfg);

// Everything needed for inference, loaded from one checkpoint.
struct LoadedModel {
  tok::Vocabulary vocab;
  length::LengthModel lengths;
  model::Checkpoint checkpoint;
  std::unique_ptr<model::Denoiser<float>> net;  // EMA weights
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

struct SpectrumOutcome {
  std::string id;
  std::vector<sample::Candidate> ranked;
  std::vector<refine::RoundTrace> trace;
  bool has_truth = false;
  sample::TopKMetrics metrics;
  int n_hypotheses = 1;
};

// Runs refinement for one record. In hypothesis mode the budget is divided
// over the hypotheses and the pools are merged; a candidate counts as formula
// matched when it matches any hypothesis.
SpectrumOutcome elucidate_record(const DatasetRecord& rec, LoadedModel& m, const RunConfig& cfg, Rng& rng,
                                 frag::SpectrumCache* cache = nullptr);

struct AggregateMetrics {
  int spectra = 0;
  int with_truth = 0;
  std::map<int, double> accuracy;
  std::map<int, double> tanimoto;
  std::string to_json() const;
};
AggregateMetrics aggregate(const std::vector<SpectrumOutcome>& outcomes, const std::vector<int>& ks = {1, 10});

struct ElucidateOptions {
  std::filesystem::path dataset;
  std::filesystem::path checkpoint;
  std::filesystem::path out_dir;
};
// Writes <id>.ranked.tsv per spectrum plus metrics.json and trace.csv.
AggregateMetrics cmd_elucidate(const ElucidateOptions& opts, const RunConfig& cfg);

// Spectrum JSON: {"smiles", "formula", "precursor_mz", "peaks": [[mz, int]...],
// "fragments": [{"atoms", "formula", "n_breaks", "mz", "intensity"}...]}.
std::string simulate_json(const std::string& smiles, const frag::SimulateOptions& sim);

struct BenchRow {
  std::string id;
  std::string phase;  // "generation" or "round<r>"
  int repeats = 0;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  double cumulative_seconds = 0.0;  // mean wall time from start to the end of this phase
};
struct BenchOptions {
  std::filesystem::path dataset;
  std::filesystem::path checkpoint;
  std::filesystem::path out;  // CSV
  int max_spectra = 0;        // 0: all
};
std::vector<BenchRow> run_bench(const std::vector<DatasetRecord>& records, LoadedModel& m, const RunConfig& cfg);
void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);
std::vector<BenchRow> cmd_bench(const BenchOptions& opts, const RunConfig& cfg);

}  // namespace frigid::app
