#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "frigid/app.hpp"

namespace frigid::app {

namespace {

enum class Kind { Int, Real, Bool, U64, Masking };

struct Field {
  std::string key;
  Kind kind;
  void* ptr;
  double lo;
  double hi;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<Field> fields(RunConfig& c) {
  auto& m = c.model;
  auto& s = c.schedule;
  auto& t = c.train;
  auto& l = c.length;
  auto& r = c.refine;
  return {
      {"seed", Kind::U64, &c.seed, 0, kInf},
      {"workers", Kind::Int, &c.workers, 1, 256},
      {"tokenizer.vocab_size", Kind::Int, &c.vocab_size, 5, 1 << 16},
      {"model.n_layers", Kind::Int, &m.n_layers, 1, 64},
      {"model.d_model", Kind::Int, &m.d_model, 2, 8192},
      {"model.n_heads", Kind::Int, &m.n_heads, 1, 128},
      {"model.d_ff", Kind::Int, &m.d_ff, 1, 65536},
      {"model.max_len", Kind::Int, &m.max_len, 5, 4096},
      {"model.dropout", Kind::Real, &m.dropout, 0, 0.99},
      {"model.cond_dropout_fp", Kind::Real, &m.cond_dropout_fp, 0, 1},
      {"model.max_count", Kind::Int, &m.max_count, 1, 10000},
      {"model.fp_bits", Kind::Int, &m.fp_bits, 8, 1 << 16},
      {"model.fp_max_active", Kind::Int, &m.fp_max_active, 1, 1 << 16},
      {"model.fp_attn_layers", Kind::Int, &m.fp_attn_layers, 0, 16},
      {"model.fp_threshold", Kind::Real, &m.fp_threshold, 0, 1},
      {"schedule.alpha_max", Kind::Real, &s.alpha_max, 1e-9, 1},
      {"schedule.alpha_min", Kind::Real, &s.alpha_min, 0, 1},
      {"schedule.sampling_epsilon", Kind::Real, &s.sampling_epsilon, 0, 0.5},
      {"train.steps", Kind::Int, &t.steps, 0, 1e9},
      {"train.batch_size", Kind::Int, &t.batch_size, 1, 1 << 16},
      {"train.peak_lr", Kind::Real, &t.peak_lr, 0, 10},
      {"train.warmup_steps", Kind::Int, &t.warmup_steps, 0, 1e9},
      {"train.beta1", Kind::Real, &t.beta1, 0, 0.999999},
      {"train.beta2", Kind::Real, &t.beta2, 0, 0.999999999},
      {"train.adam_eps", Kind::Real, &t.adam_eps, 1e-20, 1},
      {"train.weight_decay", Kind::Real, &t.weight_decay, 0, 1},
      {"train.grad_clip", Kind::Real, &t.grad_clip, 0, kInf},
      {"train.min_lr", Kind::Real, &t.min_lr, 0, 10},
      {"train.ema_decay", Kind::Real, &t.ema_decay, 0, 1},
      {"train.ema_warmup", Kind::Bool, &t.ema_warmup, 0, 1},
      {"train.checkpoint_every", Kind::Int, &c.checkpoint_every, 0, 1e9},
      {"length.stages", Kind::Int, &l.stages, 0, 100000},
      {"length.learning_rate", Kind::Real, &l.learning_rate, 1e-9, 1},
      {"length.depth", Kind::Int, &l.depth, 1, 16},
      {"length.patience", Kind::Int, &l.patience, 1, 100000},
      {"length.sigma_floor", Kind::Real, &l.sigma_floor, 1e-6, kInf},
      {"length.validation_every", Kind::Int, &l.validation_every, 0, 1000},
      {"refine.rounds", Kind::Int, &r.rounds, 1, 1000},
      {"refine.budget", Kind::Int, &r.budget, 1, 1 << 20},
      {"refine.top_k", Kind::Int, &r.top_k, 1, 1 << 20},
      {"refine.variants", Kind::Int, &r.variants, 1, 1 << 20},
      {"refine.gamma", Kind::Real, &r.gamma, 1e-9, kInf},
      {"refine.p_max", Kind::Real, &r.p_max, 0, 1},
      {"refine.lambda", Kind::Real, &r.lambda, 0, 100},
      {"refine.tau0", Kind::Real, &r.tau0, 0, 100},
      {"refine.masking", Kind::Masking, &r.masking, 0, 1},
      {"refine.match.tol_ppm", Kind::Real, &r.match.tol_ppm, 0, 1e6},
      {"refine.match.top_p", Kind::Int, &r.match.top_p, 1, 1 << 20},
      {"refine.match.min_rel_int", Kind::Real, &r.match.min_rel_int, 0, 1},
      {"refine.simulate.beta", Kind::Real, &r.simulate.beta, 0, 1},
      {"refine.simulate.max_breaks", Kind::Int, &r.simulate.max_breaks, 0, 8},
      {"refine.simulate.max_frags", Kind::Int, &r.simulate.max_frags, 1, 1 << 20},
      {"elucidate.formula_hypotheses", Kind::Int, &c.formula_hypotheses, 0, 100},
      {"elucidate.hypothesis_ppm", Kind::Real, &c.hypothesis_ppm, 1e-3, 1000},
      {"bench.warmup", Kind::Int, &c.bench_warmup, 0, 1000},
      {"bench.repeats", Kind::Int, &c.bench_repeats, 1, 1000},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_real(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("config: " + key + ": cannot parse '" + v + "'");
  }
  return out;
}

void check_range(const Field& f, double x) {
  if (!(x >= f.lo && x <= f.hi)) {
    throw ConfigError("config: " + f.key + " = " + fmt_real(x) + " outside [" + fmt_real(f.lo) + ", " +
                      fmt_real(f.hi) + "]");
  }
}

void assign(const Field& f, const std::string& v) {
  switch (f.kind) {
    case Kind::Int: {
      const auto x = parse_number<long long>(f.key, v);
      check_range(f, static_cast<double>(x));
      *static_cast<int*>(f.ptr) = static_cast<int>(x);
      break;
    }
    case Kind::U64: {
      if (!v.empty() && v[0] == '-') throw ConfigError("config: " + f.key + " must be non-negative");
      *static_cast<std::uint64_t*>(f.ptr) = parse_number<std::uint64_t>(f.key, v);
      break;
    }
    case Kind::Real: {
      const auto x = parse_number<double>(f.key, v);
      check_range(f, x);
      *static_cast<double*>(f.ptr) = x;
      break;
    }
    case Kind::Bool: {
      if (v == "true" || v == "1") {
        *static_cast<bool*>(f.ptr) = true;
      } else if (v == "false" || v == "0") {
        *static_cast<bool*>(f.ptr) = false;
      } else {
        throw ConfigError("config: " + f.key + ": expected true or false, got '" + v + "'");
      }
      break;
    }
    case Kind::Masking: {
      auto& m = *static_cast<refine::Masking*>(f.ptr);
      if (v == "guided") {
        m = refine::Masking::Guided;
      } else if (v == "random") {
        m = refine::Masking::Random;
      } else {
        throw ConfigError("config: " + f.key + ": expected guided or random, got '" + v + "'");
      }
      break;
    }
  }
}

std::string render(const Field& f) {
  switch (f.kind) {
    case Kind::Int:
      return std::to_string(*static_cast<const int*>(f.ptr));
    case Kind::U64:
      return std::to_string(*static_cast<const std::uint64_t*>(f.ptr));
    case Kind::Real:
      return fmt_real(*static_cast<const double*>(f.ptr));
    case Kind::Bool:
      return *static_cast<const bool*>(f.ptr) ? "true" : "false";
    case Kind::Masking:
      return *static_cast<const refine::Masking*>(f.ptr) == refine::Masking::Guided ? "guided" : "random";
  }
  return {};
}

}  // namespace

RunConfig::RunConfig() { train.steps = 3000; }

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
    refine.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (schedule.alpha_min >= schedule.alpha_max) throw ConfigError("config: schedule.alpha_min must be below alpha_max");
}

std::vector<std::string> config_keys() {
  RunConfig c;
  std::vector<std::string> out;
  for (const auto& f : fields(c)) out.push_back(f.key);
  return out;
}

void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : fields(c)) {
    if (f.key == key) {
      assign(f, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config: duplicate key '" + key + "'");
    set_config_value(c, key, value);
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
  RunConfig copy = c;
  std::string out;
  for (const auto& f : fields(copy)) out += f.key + " = " + render(f) + "\n";
  return out;
}

bool same_config(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

}  // namespace frigid::app
