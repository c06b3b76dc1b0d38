#include <cmath>
#include <numbers>

#include <json.hpp>

#include "frigid/denoiser.hpp"

namespace frigid::model {

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
  };
  need(steps >= 0, "steps must be non-negative");
  need(batch_size >= 2, "batch_size must be at least 2");
  need(peak_lr > 0.0, "peak_lr must be positive");
  need(warmup_steps >= 0 && (steps == 0 || warmup_steps < steps), "warmup_steps must be below steps");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0, 1)");
  need(adam_eps > 0.0, "adam_eps must be positive");
  need(weight_decay >= 0.0, "weight_decay must be non-negative");
  need(grad_clip > 0.0, "grad_clip must be positive");
  need(min_lr >= 0.0 && min_lr <= peak_lr, "min_lr must be in [0, peak_lr]");
  need(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must be in [0, 1)");
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j = {
      {"steps", steps},         {"batch_size", batch_size}, {"peak_lr", peak_lr},
      {"warmup_steps", warmup_steps}, {"beta1", beta1},     {"beta2", beta2},
      {"adam_eps", adam_eps},   {"weight_decay", weight_decay}, {"grad_clip", grad_clip},
      {"min_lr", min_lr},       {"ema_decay", ema_decay},   {"ema_warmup", ema_warmup},
      {"seed", seed},
  };
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  TrainConfig c;
  c.steps = j.at("steps");
  c.batch_size = j.at("batch_size");
  c.peak_lr = j.at("peak_lr");
  c.warmup_steps = j.at("warmup_steps");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.adam_eps = j.at("adam_eps");
  c.weight_decay = j.at("weight_decay");
  c.grad_clip = j.at("grad_clip");
  c.min_lr = j.at("min_lr");
  c.ema_decay = j.at("ema_decay");
  c.ema_warmup = j.at("ema_warmup");
  c.seed = j.at("seed");
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& tc, int step) {
  if (step < tc.warmup_steps) return tc.peak_lr * static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
  if (tc.steps <= tc.warmup_steps) return tc.peak_lr;
  double progress = static_cast<double>(step - tc.warmup_steps) / static_cast<double>(tc.steps - tc.warmup_steps);
  progress = std::clamp(progress, 0.0, 1.0);
  return tc.min_lr + (tc.peak_lr - tc.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Trainer::Trainer(Denoiser<float>& model, TrainConfig tc) : model_(model), tc_(tc) {
  tc_.validate();
  for (auto& p : model_.params()) {
    m_.push_back(nn::Mat<float>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(nn::Mat<float>::Zero(p.value.rows(), p.value.cols()));
    ema_.push_back(p.value);
  }
}

void Trainer::update_ema() {
  double decay = tc_.ema_decay;
  if (tc_.ema_warmup) {
    const double k = static_cast<double>(step_ - 1);
    decay = std::min(decay, (1.0 + k) / (10.0 + k));
  }
  const auto d = static_cast<float>(decay);
  const auto one_minus = static_cast<float>(1.0 - decay);
  auto& ps = model_.params();
  for (std::size_t i = 0; i < ps.size(); ++i) ema_[i] = d * ema_[i] + one_minus * ps[i].value;
}

TrainLogEntry Trainer::train_step(const std::vector<const Example*>& batch, const NoiseSchedule& schedule,
                                  const tok::Vocabulary& v, Rng& rng) {
  auto& ps = model_.params();
  for (auto& p : ps) p.grad.setZero();
  nn::Tape<float> tape(true);
  LossStats stats;
  nn::Var loss = mdlm_loss(tape, model_, batch, schedule, v, true, rng, &stats);
  TrainLogEntry log;
  log.loss = tape.value(loss)(0, 0);
  log.masked = stats.masked;
  if (!std::isfinite(log.loss)) throw NonFiniteLoss("non-finite loss at step " + std::to_string(step_ + 1));
  ++step_;
  log.step = step_;
  log.lr = learning_rate(tc_, step_);
  if (stats.masked > 0) {
    tape.backward(loss);
    double sq = 0.0;
    for (const auto& p : ps) sq += static_cast<double>(p.grad.squaredNorm());
    log.grad_norm = std::sqrt(sq);
    if (!std::isfinite(log.grad_norm)) {
      --step_;
      throw NonFiniteLoss("non-finite gradient at step " + std::to_string(step_ + 1));
    }
    const double clip = log.grad_norm > tc_.grad_clip ? tc_.grad_clip / log.grad_norm : 1.0;
    const double bc1 = 1.0 - std::pow(tc_.beta1, step_);
    const double bc2 = 1.0 - std::pow(tc_.beta2, step_);
    const auto b1 = static_cast<float>(tc_.beta1), b2 = static_cast<float>(tc_.beta2);
    const auto step_size = static_cast<float>(log.lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(tc_.adam_eps);
    const auto decay = static_cast<float>(log.lr * tc_.weight_decay);
    const auto c = static_cast<float>(clip);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto g = (ps[i].grad * c).array();
      m_[i].array() = b1 * m_[i].array() + (1.0f - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (1.0f - b2) * g.square();
      if (decay != 0.0f) ps[i].value *= (1.0f - decay);
      ps[i].value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
    }
  }
  update_ema();
  return log;
}

std::vector<TrainLogEntry> Trainer::run(const std::vector<Example>& data, const NoiseSchedule& schedule,
                                        const tok::Vocabulary& v, const std::function<bool(const TrainLogEntry&)>& on_step) {
  if (data.empty()) throw std::invalid_argument("training set is empty");
  std::vector<TrainLogEntry> log;
  while (step_ < tc_.steps) {
    // Batch composition depends only on (seed, step) so a resumed run
    // continues exactly.
    Rng step_rng(tc_.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(step_) + 1);
    std::vector<const Example*> batch;
    for (int i = 0; i < tc_.batch_size; ++i) batch.push_back(&data[step_rng.below(data.size())]);
    log.push_back(train_step(batch, schedule, v, step_rng));
    if (on_step && !on_step(log.back())) break;
  }
  return log;
}

std::unique_ptr<Denoiser<float>> Trainer::ema_model() const {
  auto out = std::make_unique<Denoiser<float>>(model_.config(), 0);
  for (std::size_t i = 0; i < ema_.size(); ++i) out->params()[i].value = ema_[i];
  return out;
}

}  // namespace frigid::model
