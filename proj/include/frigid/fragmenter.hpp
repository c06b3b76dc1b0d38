#pragma once

// Rule-based forward fragmentation: bond-cut enumeration, simulated spectra
// with fragment attribution, and ppm peak matching.

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "frigid/chemgraph.hpp"

namespace frigid::frag {

struct Fragment {
  std::vector<int> atoms;  // sorted indices into the parent molecule
  chem::Formula formula;   // includes one H per cut bond on this side
  int n_breaks = 0;
};

// Breadth-first removal of acyclic, non-aromatic single bonds up to
// `max_breaks` deep. Each atom set appears once, at its shallowest depth.
// Results are ordered largest first and truncated to `max_frags`.
std::vector<Fragment> enumerate_fragments(const chem::Molecule& mol, int max_breaks = 2, int max_frags = 256);

struct Peak {
  Fragment fragment;
  double mz = 0.0;
  double intensity = 0.0;
};

struct SimulatedSpectrum {
  std::vector<Peak> peaks;  // ascending m/z
};

struct SimulateOptions {
  double beta = 0.6;
  int max_breaks = 2;
  int max_frags = 256;
};

// [M+H]+ fragment ions with intensity beta^breaks * size fraction, scaled to
// a maximum of 1. Peaks within 1e-6 Da are merged keeping the stronger one;
// zero-intensity peaks are dropped.
SimulatedSpectrum simulate_spectrum(const chem::Molecule& mol, const SimulateOptions& opts = {});

class SpectrumError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ObservedSpectrum {
  std::vector<std::pair<double, double>> peaks;  // (m/z, intensity)
  double precursor_mz = 0.0;

  // Sorts by m/z and rejects negative values or duplicate m/z (1e-6 Da).
  void normalize();
};

// Observed spectrum equal to the simulated one, with the precursor at [M+H]+.
ObservedSpectrum as_observed(const SimulatedSpectrum& sim, const chem::Molecule& mol);

double ppm_error(double mz_sim, double mz_obs);

struct MatchOptions {
  double tol_ppm = 20.0;
  int top_p = 20;
  double min_rel_int = 0.01;
};

struct MatchResult {
  std::vector<int> matched;       // indices into SimulatedSpectrum::peaks
  std::vector<int> hallucinated;  // informative peaks without a counterpart
};

// Informative peaks: relative intensity >= min_rel_int, not within tolerance
// of the precursor, then the top_p strongest. Each is matched when an
// observed peak lies within tol_ppm.
MatchResult match_peaks(const SimulatedSpectrum& sim, const ObservedSpectrum& obs, const MatchOptions& opts = {});

// Spectra keyed by canonical key; repeated lookups return the same object.
class SpectrumCache {
 public:
  explicit SpectrumCache(SimulateOptions opts = {}) : opts_(opts) {}
  std::shared_ptr<const SimulatedSpectrum> get(const std::string& key, const chem::Molecule& mol);
  std::size_t size() const;
  long hits() const { return hits_; }

 private:
  SimulateOptions opts_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const SimulatedSpectrum>> items_;
  long hits_ = 0;
};

}  // namespace frigid::frag
