#pragma once

// Masked diffusion denoiser: noise schedule, forward corruption, the
// conditional transformer, the masked-token objective, training and
// checkpoints.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "frigid/autograd.hpp"
#include "frigid/chemgraph.hpp"
#include "frigid/rng.hpp"
#include "frigid/tokenizer.hpp"

namespace frigid::model {

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct NoiseSchedule {
  double alpha_max = 1.0;
  double alpha_min = 1e-3;
  double sampling_epsilon = 1e-3;

  // Log-linear interpolation between alpha_max (t = 0) and alpha_min (t = 1).
  double alpha(double t) const;
};

// Masks every content token independently with probability 1 - alpha(t).
// [BOS], [EOS] and [PAD] are never touched.
tok::TokenSequence corrupt(const tok::TokenSequence& x0, double t, const NoiseSchedule& schedule, const tok::Vocabulary& v,
                           Rng& rng);

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int max_len = 64;
  int vocab_size = 256;
  double dropout = 0.1;
  double cond_dropout_fp = 0.25;
  int n_elements = chem::kNumElementSlots;
  int max_count = 200;
  int fp_bits = 4096;
  int fp_max_active = 256;
  int fp_attn_layers = 3;
  double fp_threshold = 0.187;

  static ModelConfig desk();
  static ModelConfig full();
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Conditioning for one spectrum: element counts and the active fingerprint
// bits (strictly increasing, at most fp_max_active).
struct Condition {
  std::array<int, chem::kNumElementSlots> counts{};
  std::vector<int> bits;
};

// Keeps the lowest `max_active` bits when more are set.
Condition make_condition(const chem::Formula& formula, const chem::Fingerprint& fp, int max_active = 256);

template <typename T>
class Denoiser {
 public:
  using Tape = nn::Tape<T>;

  Denoiser(const ModelConfig& cfg, std::uint64_t seed);
  // Parameter handles point into params_, so copies would alias; moves keep
  // the vector's buffer and stay valid.
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  std::vector<nn::Param<T>>& params() { return params_; }
  const std::vector<nn::Param<T>>& params() const { return params_; }
  nn::Param<T>& param(const std::string& name);
  std::size_t num_parameters() const;

  // Conditioning rows for a batch of conditions, already projected to each
  // block's cross-attention keys and values. Build once per spectrum at
  // inference and reuse across denoising steps.
  struct Memory {
    std::vector<nn::AttnSegment> segs;  // k0/kn per condition
    std::vector<nn::Var> keys;          // one per block
    std::vector<nn::Var> values;
  };
  Memory encode(Tape& tape, const std::vector<const Condition*>& conds, const std::vector<bool>& drop_fp, bool training,
                Rng& rng);

  // Logits [sum of lengths x vocab] for row-packed sequences. Sequence i
  // attends to condition cond_of_seq[i] of `mem`.
  nn::Var forward(Tape& tape, const std::vector<const std::vector<int>*>& seqs, const std::vector<int>& cond_of_seq,
                  const Memory& mem, bool training, Rng& rng);

  // Convenience wrapper for a single batch in inference mode.
  nn::Mat<T> logits(const std::vector<std::vector<int>>& seqs, const std::vector<Condition>& conds);

 private:
  struct Linear {
    nn::Param<T>* w;
    nn::Param<T>* b;
  };
  struct Norm {
    nn::Param<T>* g;
    nn::Param<T>* b;
  };
  struct Attn {
    Linear q, k, v, o;
  };
  struct FpLayer {
    Attn attn;
    Norm ln1;
    Linear ff1, ff2;
    Norm ln2;
  };
  struct Block {
    Attn self;
    Norm ln1;
    Attn cross;
    Norm ln2;
    Linear ff1, ff2;
    Norm ln3;
  };

  nn::Param<T>& add_param(const std::string& name, int rows, int cols, double stddev, T fill, Rng& rng);
  Linear make_linear(const std::string& name, int in, int out, Rng& rng);
  Norm make_norm(const std::string& name, int d, Rng& rng);
  Attn make_attn(const std::string& name, Rng& rng);

  nn::Var lin(Tape& t, nn::Var x, const Linear& l);
  nn::Var norm(Tape& t, nn::Var x, const Norm& n);
  nn::Var residual_norm(Tape& t, nn::Var x, nn::Var sub, const Norm& n, bool training, Rng& rng);

  ModelConfig cfg_;
  std::vector<nn::Param<T>> params_;
  nn::Param<T>* tok_emb_ = nullptr;
  nn::Param<T>* pos_emb_ = nullptr;
  Norm emb_ln_{};
  nn::Param<T>* elem_emb_ = nullptr;
  nn::Param<T>* count_emb_ = nullptr;
  nn::Param<T>* slot_emb_ = nullptr;
  Norm formula_ln_{};
  nn::Param<T>* bit_emb_ = nullptr;
  std::vector<FpLayer> fp_layers_;
  std::vector<Block> blocks_;
  Linear out_{};
};

extern template class Denoiser<float>;
extern template class Denoiser<double>;

// Copies parameter values across scalar types (names and shapes must agree).
template <typename To, typename From>
void copy_params(const Denoiser<From>& src, Denoiser<To>& dst) {
  if (src.params().size() != dst.params().size()) throw ShapeMismatch("parameter count mismatch");
  for (std::size_t i = 0; i < src.params().size(); ++i) {
    dst.params()[i].value = src.params()[i].value.template cast<To>();
  }
}

struct Example {
  tok::TokenSequence x0;
  Condition cond;
};

struct LossStats {
  long masked = 0;
  long no_mask_batches = 0;  // incremented when a batch had nothing to score
};

// Loss for an already corrupted batch: masked-position NLL summed over the
// batch and divided by the total masked count. Returns a zero node when no
// position is masked.
template <typename T>
nn::Var masked_nll(nn::Tape<T>& tape, Denoiser<T>& model, const std::vector<std::vector<int>>& xt,
                   const std::vector<const Example*>& batch, const std::vector<bool>& drop_fp, int mask_id, bool training,
                   Rng& rng, long* masked_count = nullptr);

// Draws antithetic times (u, 1 - u) per pair, corrupts, applies fingerprint
// dropout when training and returns the masked NLL.
template <typename T>
nn::Var mdlm_loss(nn::Tape<T>& tape, Denoiser<T>& model, const std::vector<const Example*>& batch,
                  const NoiseSchedule& schedule, const tok::Vocabulary& v, bool training, Rng& rng, LossStats* stats = nullptr);

// Max relative error between analytic and central-difference gradients over
// `coords` random parameter coordinates (double precision, dropout off).
struct GradCheckResult {
  double max_rel_error = 0.0;
  int coords_checked = 0;
  double max_abs_grad = 0.0;
};
GradCheckResult gradient_check(const ModelConfig& cfg, const std::vector<Example>& batch, const tok::Vocabulary& v,
                               std::uint64_t seed, int coords = 256, double h = 1e-4);

struct TrainConfig {
  int steps = 3000;
  int batch_size = 32;
  double peak_lr = 3e-4;
  int warmup_steps = 300;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  double min_lr = 1e-8;
  double ema_decay = 0.9999;
  // Effective decay min(ema_decay, (1 + k) / (10 + k)) at update k, so short
  // runs are not dominated by the initialization.
  bool ema_warmup = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Learning rate for update number `step` (1-based): linear warmup reaching
// peak_lr exactly at warmup_steps, then cosine decay to min_lr at `steps`.
double learning_rate(const TrainConfig& tc, int step);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  long masked = 0;
};

// Owns the optimizer state and the EMA shadow for a float model.
class Trainer {
 public:
  Trainer(Denoiser<float>& model, TrainConfig tc);

  int step() const { return step_; }
  const TrainConfig& config() const { return tc_; }
  Denoiser<float>& model() { return model_; }
  const Denoiser<float>& model() const { return model_; }
  const std::vector<nn::Mat<float>>& ema() const { return ema_; }
  std::vector<nn::Mat<float>>& ema() { return ema_; }
  std::vector<nn::Mat<float>>& adam_m() { return m_; }
  std::vector<nn::Mat<float>>& adam_v() { return v_; }
  const std::vector<nn::Mat<float>>& adam_m() const { return m_; }
  const std::vector<nn::Mat<float>>& adam_v() const { return v_; }
  void set_step(int s) { step_ = s; }

  // One optimizer update on `batch`. Throws NonFiniteLoss without touching
  // the parameters if the loss or gradient is not finite.
  TrainLogEntry train_step(const std::vector<const Example*>& batch, const NoiseSchedule& schedule,
                           const tok::Vocabulary& v, Rng& rng);

  // Runs until config().steps, sampling batches uniformly with replacement.
  // `on_step` sees every log entry; returning false stops early.
  std::vector<TrainLogEntry> run(const std::vector<Example>& data, const NoiseSchedule& schedule, const tok::Vocabulary& v,
                                 const std::function<bool(const TrainLogEntry&)>& on_step = {});

  // A model holding the EMA weights, used for evaluation.
  std::unique_ptr<Denoiser<float>> ema_model() const;

  void update_ema();

 private:
  Denoiser<float>& model_;
  TrainConfig tc_;
  int step_ = 0;
  std::vector<nn::Mat<float>> m_, v_, ema_;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Corrupt, ConfigMismatch, Io };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  int step = 0;
  std::string vocab_json;
  std::uint64_t vocab_hash = 0;
  std::string length_model_json;  // empty when absent
  std::vector<nn::Param<float>> params;
  std::vector<nn::Mat<float>> ema;
  std::vector<nn::Mat<float>> adam_m;
  std::vector<nn::Mat<float>> adam_v;
};

// File layout: magic "FRGDCKPT", u16 version, u64 header length, JSON header,
// then little-endian float32 blobs at the offsets listed in the header.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash = {});

Checkpoint make_checkpoint(const Trainer& trainer, const tok::Vocabulary& v, const std::string& length_model_json = {});
// Restores parameters (raw or EMA) into a freshly built model.
std::unique_ptr<Denoiser<float>> model_from_checkpoint(const Checkpoint& ck, bool use_ema = true);
// Restores parameters, optimizer state, EMA and step counter.
void restore_trainer(const Checkpoint& ck, Trainer& trainer);

}  // namespace frigid::model
