#pragma once

// Token-length prediction from element counts: a conditional Normal whose
// mean and log standard deviation are fitted by natural-gradient boosting of
// shallow regression trees.

#include <array>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "frigid/chemgraph.hpp"
#include "frigid/rng.hpp"

namespace frigid::length {

using Features = std::array<double, chem::kNumElementSlots>;

Features features(const chem::Formula& f);

class LengthModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RegressionTree {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };

  // Exact greedy squared-error splits over every feature threshold.
  static RegressionTree fit(const std::vector<const Features*>& x, const std::vector<double>& y, int max_depth,
                            int min_leaf = 1);

  double predict(const Features& x) const;
  const std::vector<Node>& nodes() const { return nodes_; }

  std::string to_json() const;
  static RegressionTree from_json(const std::string& text);

 private:
  int build(const std::vector<const Features*>& x, const std::vector<double>& y, std::vector<int>& idx, int begin,
            int end, int depth, int max_depth, int min_leaf);

  std::vector<Node> nodes_;
};

struct FitOptions {
  int stages = 200;
  double learning_rate = 0.05;
  int depth = 3;
  int patience = 10;
  double sigma_floor = 0.5;
  // Every k-th example is held out for early stopping; 0 disables it.
  int validation_every = 10;
};

struct Prediction {
  double mu = 0.0;
  double sigma = 0.0;
};

class LengthModel {
 public:
  Prediction predict(const Features& x) const;
  Prediction predict(const chem::Formula& f) const { return predict(features(f)); }

  // Mean Normal negative log-likelihood over the given pairs.
  double nll(const std::vector<std::pair<Features, double>>& data) const;

  int n_stages() const { return static_cast<int>(mu_trees_.size()); }
  double learning_rate() const { return lr_; }
  double sigma_floor() const { return sigma_floor_; }
  std::pair<double, double> base_params() const { return {mu0_, log_sigma0_}; }

  std::string to_json() const;
  static LengthModel from_json(const std::string& text);

  // Per-stage mean training NLL recorded during fitting (stage 0 = base).
  const std::vector<double>& train_curve() const { return train_curve_; }

 private:
  friend LengthModel fit_length_model(const std::vector<std::pair<Features, double>>&, const FitOptions&);
  std::pair<double, double> raw(const Features& x) const;

  double mu0_ = 0.0;
  double log_sigma0_ = 0.0;
  double lr_ = 0.05;
  double sigma_floor_ = 0.5;
  std::vector<RegressionTree> mu_trees_;
  std::vector<RegressionTree> ls_trees_;
  std::vector<double> train_curve_;
};

// Throws LengthModelError with fewer than 10 pairs or a length below 1.
LengthModel fit_length_model(const std::vector<std::pair<Features, double>>& pairs, const FitOptions& opts = {});

// Draws from Normal(mu, lambda * sigma^2), rounds to the nearest integer and
// clips to [l_min, l_max].
int sample_length(const LengthModel& m, const chem::Formula& f, double lambda, int l_min, int l_max, Rng& rng);

}  // namespace frigid::length
