#include "frigid/lengthmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace frigid::length {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double normal_nll(double y, double mu, double sigma) {
  const double z = (y - mu) / sigma;
  return 0.5 * z * z + std::log(sigma) + 0.5 * kLog2Pi;
}

nlohmann::json tree_node_json(const std::vector<RegressionTree::Node>& nodes, int i) {
  const auto& n = nodes[static_cast<std::size_t>(i)];
  if (n.feature < 0) return {{"value", n.value}};
  nlohmann::ordered_json j;
  j["feature"] = n.feature;
  j["threshold"] = n.threshold;
  j["left"] = tree_node_json(nodes, n.left);
  j["right"] = tree_node_json(nodes, n.right);
  return j;
}

int tree_node_from_json(const nlohmann::json& j, std::vector<RegressionTree::Node>& nodes) {
  const int id = static_cast<int>(nodes.size());
  nodes.emplace_back();
  if (j.contains("value")) {
    nodes[static_cast<std::size_t>(id)].value = j.at("value");
    return id;
  }
  RegressionTree::Node n;
  n.feature = j.at("feature");
  n.threshold = j.at("threshold");
  if (n.feature < 0 || n.feature >= chem::kNumElementSlots) throw LengthModelError("tree feature out of range");
  n.left = tree_node_from_json(j.at("left"), nodes);
  n.right = tree_node_from_json(j.at("right"), nodes);
  nodes[static_cast<std::size_t>(id)] = n;
  return id;
}

}  // namespace

Features features(const chem::Formula& f) {
  Features x{};
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = f.counts[i];
  return x;
}

RegressionTree RegressionTree::fit(const std::vector<const Features*>& x, const std::vector<double>& y, int max_depth,
                                   int min_leaf) {
  RegressionTree t;
  std::vector<int> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.empty()) {
    t.nodes_.push_back(Node{});
    return t;
  }
  t.build(x, y, idx, 0, static_cast<int>(idx.size()), 0, max_depth, std::max(min_leaf, 1));
  return t;
}

int RegressionTree::build(const std::vector<const Features*>& x, const std::vector<double>& y, std::vector<int>& idx,
                          int begin, int end, int depth, int max_depth, int min_leaf) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  const int n = end - begin;
  double sum = 0.0;
  for (int i = begin; i < end; ++i) sum += y[idx[i]];
  nodes_[id].value = sum / n;
  if (depth >= max_depth || n < 2 * min_leaf) return id;

  // Best split maximizes sum_l^2/n_l + sum_r^2/n_r (equivalently the SSE drop).
  const double base = sum * sum / n;
  double best_gain = 1e-12;
  int best_f = -1;
  double best_thr = 0.0;
  std::vector<int> order(idx.begin() + begin, idx.begin() + end);
  for (int f = 0; f < static_cast<int>(Features{}.size()); ++f) {
    std::sort(order.begin(), order.end(), [&](int a, int b) { return (*x[a])[f] < (*x[b])[f]; });
    double left = 0.0;
    for (int k = 0; k < n - 1; ++k) {
      left += y[order[k]];
      const double xv = (*x[order[k]])[f];
      const double xn = (*x[order[k + 1]])[f];
      if (xv == xn) continue;
      const int nl = k + 1, nr = n - nl;
      if (nl < min_leaf || nr < min_leaf) continue;
      const double right = sum - left;
      const double gain = left * left / nl + right * right / nr - base;
      if (gain > best_gain) {
        best_gain = gain;
        best_f = f;
        best_thr = 0.5 * (xv + xn);
      }
    }
  }
  if (best_f < 0) return id;
  const auto mid = std::partition(idx.begin() + begin, idx.begin() + end,
                                  [&](int i) { return (*x[i])[best_f] <= best_thr; });
  const int m = static_cast<int>(mid - idx.begin());
  const int l = build(x, y, idx, begin, m, depth + 1, max_depth, min_leaf);
  const int r = build(x, y, idx, m, end, depth + 1, max_depth, min_leaf);
  nodes_[id].feature = best_f;
  nodes_[id].threshold = best_thr;
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

double RegressionTree::predict(const Features& x) const {
  int i = 0;
  while (nodes_[static_cast<std::size_t>(i)].feature >= 0) {
    const auto& n = nodes_[static_cast<std::size_t>(i)];
    i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
  }
  return nodes_[static_cast<std::size_t>(i)].value;
}

std::string RegressionTree::to_json() const { return tree_node_json(nodes_, 0).dump(); }

RegressionTree RegressionTree::from_json(const std::string& text) {
  RegressionTree t;
  tree_node_from_json(nlohmann::json::parse(text), t.nodes_);
  return t;
}

std::pair<double, double> LengthModel::raw(const Features& x) const {
  double mu = mu0_, ls = log_sigma0_;
  for (const auto& t : mu_trees_) mu += lr_ * t.predict(x);
  for (const auto& t : ls_trees_) ls += lr_ * t.predict(x);
  return {mu, ls};
}

Prediction LengthModel::predict(const Features& x) const {
  const auto [mu, ls] = raw(x);
  return {mu, std::max(std::exp(ls), sigma_floor_)};
}

double LengthModel::nll(const std::vector<std::pair<Features, double>>& data) const {
  double s = 0.0;
  for (const auto& [x, y] : data) {
    const auto p = predict(x);
    s += normal_nll(y, p.mu, p.sigma);
  }
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

std::string LengthModel::to_json() const {
  nlohmann::ordered_json j;
  j["mu0"] = mu0_;
  j["log_sigma0"] = log_sigma0_;
  j["learning_rate"] = lr_;
  j["sigma_floor"] = sigma_floor_;
  j["n_stages"] = mu_trees_.size();
  auto mu = nlohmann::ordered_json::array();
  auto ls = nlohmann::ordered_json::array();
  for (const auto& t : mu_trees_) mu.push_back(nlohmann::ordered_json::parse(t.to_json()));
  for (const auto& t : ls_trees_) ls.push_back(nlohmann::ordered_json::parse(t.to_json()));
  j["mu_trees"] = mu;
  j["log_sigma_trees"] = ls;
  return j.dump();
}

LengthModel LengthModel::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    LengthModel m;
    m.mu0_ = j.at("mu0");
    m.log_sigma0_ = j.at("log_sigma0");
    m.lr_ = j.at("learning_rate");
    m.sigma_floor_ = j.at("sigma_floor");
    for (const auto& t : j.at("mu_trees")) m.mu_trees_.push_back(RegressionTree::from_json(t.dump()));
    for (const auto& t : j.at("log_sigma_trees")) m.ls_trees_.push_back(RegressionTree::from_json(t.dump()));
    if (m.mu_trees_.size() != m.ls_trees_.size() || m.mu_trees_.size() != j.at("n_stages").get<std::size_t>()) {
      throw LengthModelError("tree counts disagree");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw LengthModelError(std::string("malformed length model: ") + e.what());
  }
}

LengthModel fit_length_model(const std::vector<std::pair<Features, double>>& pairs, const FitOptions& opts) {
  if (pairs.size() < 10) throw LengthModelError("length model needs at least 10 examples");
  for (const auto& [x, y] : pairs) {
    if (!(y >= 1.0)) throw LengthModelError("lengths must be at least 1");
  }
  std::vector<std::pair<Features, double>> train, valid;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (opts.validation_every > 0 && pairs.size() >= 20 && i % static_cast<std::size_t>(opts.validation_every) ==
                                                               static_cast<std::size_t>(opts.validation_every - 1)) {
      valid.push_back(pairs[i]);
    } else {
      train.push_back(pairs[i]);
    }
  }

  LengthModel m;
  m.lr_ = opts.learning_rate;
  m.sigma_floor_ = opts.sigma_floor;
  double mean = 0.0;
  for (const auto& p : train) mean += p.second;
  mean /= static_cast<double>(train.size());
  double var = 0.0;
  for (const auto& p : train) var += (p.second - mean) * (p.second - mean);
  var /= static_cast<double>(train.size());
  m.mu0_ = mean;
  m.log_sigma0_ = std::log(std::max(std::sqrt(var), opts.sigma_floor));

  const std::size_t n = train.size();
  std::vector<const Features*> xs(n);
  std::vector<double> mu(n, m.mu0_), ls(n, m.log_sigma0_);
  for (std::size_t i = 0; i < n; ++i) xs[i] = &train[i].first;
  auto train_nll = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += normal_nll(train[i].second, mu[i], std::max(std::exp(ls[i]), m.sigma_floor_));
    return s / static_cast<double>(n);
  };
  m.train_curve_.push_back(train_nll());

  double best_val = valid.empty() ? 0.0 : m.nll(valid);
  std::size_t best_stages = 0;
  int bad = 0;
  std::vector<double> g_mu(n), g_ls(n);
  for (int stage = 0; stage < opts.stages; ++stage) {
    // Negative natural gradient of the Normal NLL in (mu, log sigma).
    for (std::size_t i = 0; i < n; ++i) {
      const double y = train[i].second;
      const double s2 = std::exp(2.0 * ls[i]);
      g_mu[i] = y - mu[i];
      g_ls[i] = -0.5 * (1.0 - (y - mu[i]) * (y - mu[i]) / s2);
    }
    auto tm = RegressionTree::fit(xs, g_mu, opts.depth);
    auto tl = RegressionTree::fit(xs, g_ls, opts.depth);
    for (std::size_t i = 0; i < n; ++i) {
      mu[i] += m.lr_ * tm.predict(*xs[i]);
      ls[i] += m.lr_ * tl.predict(*xs[i]);
    }
    m.mu_trees_.push_back(std::move(tm));
    m.ls_trees_.push_back(std::move(tl));
    m.train_curve_.push_back(train_nll());
    if (valid.empty()) continue;
    const double v = m.nll(valid);
    if (v < best_val) {
      best_val = v;
      best_stages = m.mu_trees_.size();
      bad = 0;
    } else if (++bad >= opts.patience) {
      break;
    }
  }
  if (!valid.empty()) {
    m.mu_trees_.resize(best_stages);
    m.ls_trees_.resize(best_stages);
    m.train_curve_.resize(best_stages + 1);
  }
  return m;
}

int sample_length(const LengthModel& m, const chem::Formula& f, double lambda, int l_min, int l_max, Rng& rng) {
  if (l_min > l_max) throw LengthModelError("sample_length: l_min exceeds l_max");
  if (lambda < 0.0) throw LengthModelError("sample_length: lambda must be non-negative");
  const auto p = m.predict(f);
  const double draw = p.mu + std::sqrt(lambda) * p.sigma * (lambda > 0.0 ? rng.normal() : 0.0);
  const double r = std::nearbyint(draw);
  if (!(r >= l_min)) return l_min;
  if (r > l_max) return l_max;
  return static_cast<int>(r);
}

}  // namespace frigid::length
