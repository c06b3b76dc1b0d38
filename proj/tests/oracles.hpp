#pragma once

// Independent reference computations shared by unit and acceptance tests.

#include <cmath>
#include <map>
#include <vector>

#include "frigid/sampler.hpp"

namespace frigid::oracle {

// Toy denoiser over 4 tokens: position bias plus attraction to tokens
// already committed elsewhere, so the output depends on unmasking order.
struct ToyModel {
  static constexpr int kVocab = 4;
  static constexpr int kMask = 4;

  double bias[3][4] = {{1.2, 0.1, -0.5, 0.3}, {-0.2, 0.9, 0.4, 0.0}, {0.5, 0.5, -1.0, 1.1}};

  std::vector<double> probs(const std::vector<int>& seq, std::size_t pos) const {
    std::vector<double> l(kVocab);
    for (int v = 0; v < kVocab; ++v) {
      l[static_cast<std::size_t>(v)] = bias[pos][v];
      for (std::size_t j = 0; j < seq.size(); ++j) {
        if (j != pos && seq[j] == v) l[static_cast<std::size_t>(v)] += 0.8;
      }
    }
    double z = 0;
    for (double& x : l) z += (x = std::exp(x));
    for (double& x : l) x /= z;
    return l;
  }

  sample::BatchProbFn fn() const {
    return [this](const std::vector<std::vector<int>>& seqs) {
      std::vector<sample::ProbRows> out;
      for (const auto& s : seqs) {
        sample::ProbRows p(static_cast<Eigen::Index>(s.size()), kVocab);
        for (std::size_t i = 0; i < s.size(); ++i) {
          const auto r = probs(s, i);
          for (int v = 0; v < kVocab; ++v) p(static_cast<Eigen::Index>(i), v) = r[static_cast<std::size_t>(v)];
        }
        out.push_back(std::move(p));
      }
      return out;
    };
  }
};

// Exact output distribution of the unmasking loop. Choosing the position
// by argmax of log p_i + tau * Gumbel is a softmax over log p_i / tau; the
// committed token is an independent draw from that position's distribution.
inline void enumerate(const ToyModel& m, std::vector<int> seq, int initial, double tau0, double weight,
                      std::map<std::vector<int>, double>& out) {
  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] == ToyModel::kMask) masked.push_back(i);
  }
  if (masked.empty()) {
    out[seq] += weight;
    return;
  }
  const double tau = tau0 * static_cast<double>(masked.size()) / initial;
  std::vector<std::vector<double>> p;
  std::vector<double> logc;
  for (auto i : masked) {
    p.push_back(m.probs(seq, i));
    double c = 0;
    for (double x : p.back()) c = std::max(c, x);
    logc.push_back(std::log(c));
  }
  std::vector<double> sel(masked.size(), 0.0);
  if (tau > 0) {
    double mx = -1e300, z = 0;
    for (double c : logc) mx = std::max(mx, c);
    for (std::size_t k = 0; k < masked.size(); ++k) z += sel[k] = std::exp((logc[k] - mx) / tau);
    for (double& s : sel) s /= z;
  } else {
    std::size_t best = 0;
    for (std::size_t k = 1; k < masked.size(); ++k) {
      if (logc[k] > logc[best]) best = k;
    }
    sel[best] = 1.0;
  }
  for (std::size_t k = 0; k < masked.size(); ++k) {
    for (int v = 0; v < ToyModel::kVocab; ++v) {
      const double w = weight * sel[k] * p[k][static_cast<std::size_t>(v)];
      if (w == 0) continue;
      auto next = seq;
      next[masked[k]] = v;
      enumerate(m, next, initial, tau0, w, out);
    }
  }
}

// Total-variation distance between `samples` draws of the sampler and the
// enumerated distribution.
inline double toy_sampler_tv(int samples, double tau0, std::uint64_t seed) {
  ToyModel m;
  std::map<std::vector<int>, double> exact;
  enumerate(m, {ToyModel::kMask, ToyModel::kMask, ToyModel::kMask}, 3, tau0, 1.0, exact);
  std::map<std::vector<int>, double> emp;
  Rng rng(seed);
  const auto fn = m.fn();
  const int chunk = 1000;
  for (int done = 0; done < samples; done += chunk) {
    const int n = std::min(chunk, samples - done);
    std::vector<std::vector<int>> seqs(static_cast<std::size_t>(n), {ToyModel::kMask, ToyModel::kMask, ToyModel::kMask});
    std::vector<Rng> rngs;
    for (int i = 0; i < n; ++i) rngs.push_back(rng.fork(static_cast<std::uint64_t>(i)));
    sample::unmask(seqs, ToyModel::kMask, fn, tau0, rngs);
    for (const auto& s : seqs) emp[s] += 1.0 / samples;
  }
  double tv = 0;
  for (const auto& [k, p] : exact) tv += std::abs(p - (emp.count(k) ? emp[k] : 0.0));
  for (const auto& [k, p] : emp) {
    if (!exact.count(k)) tv += p;
  }
  return tv / 2;
}

}  // namespace frigid::oracle
