#include "frigid/fragmenter.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>

namespace frigid::frag {

namespace {

bool cuttable(const chem::Bond& b) { return b.order == chem::BondOrder::Single && !b.in_ring; }

// Connected component of `start` within `allowed`, ignoring bond `skip`.
std::vector<int> component(const chem::Molecule& mol, const std::vector<char>& allowed, int start, int skip) {
  std::vector<int> out{start};
  std::vector<char> seen(static_cast<std::size_t>(mol.num_atoms()), 0);
  seen[static_cast<std::size_t>(start)] = 1;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (const auto& nb : mol.neighbors(out[i])) {
      if (nb.bond == skip || !allowed[static_cast<std::size_t>(nb.atom)] || seen[static_cast<std::size_t>(nb.atom)]) {
        continue;
      }
      seen[static_cast<std::size_t>(nb.atom)] = 1;
      out.push_back(nb.atom);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Fragment make_fragment(const chem::Molecule& mol, std::vector<int> atoms, int n_breaks) {
  std::vector<char> in(static_cast<std::size_t>(mol.num_atoms()), 0);
  for (int a : atoms) in[static_cast<std::size_t>(a)] = 1;
  int boundary = 0;
  for (const auto& b : mol.bonds()) boundary += in[static_cast<std::size_t>(b.begin)] != in[static_cast<std::size_t>(b.end)];
  Fragment f;
  f.formula = chem::subset_formula(mol, atoms, boundary);
  f.atoms = std::move(atoms);
  f.n_breaks = n_breaks;
  return f;
}

}  // namespace

std::vector<Fragment> enumerate_fragments(const chem::Molecule& mol, int max_breaks, int max_frags) {
  std::vector<Fragment> out;
  if (mol.num_atoms() == 0) return out;
  std::vector<int> all(static_cast<std::size_t>(mol.num_atoms()));
  for (int i = 0; i < mol.num_atoms(); ++i) all[static_cast<std::size_t>(i)] = i;
  std::set<std::vector<int>> seen{all};
  std::vector<std::pair<std::vector<int>, int>> found{{all, 0}};
  std::deque<std::pair<std::vector<int>, int>> queue{{all, 0}};
  while (!queue.empty()) {
    auto [atoms, depth] = queue.front();
    queue.pop_front();
    if (depth >= max_breaks) continue;
    std::vector<char> allowed(static_cast<std::size_t>(mol.num_atoms()), 0);
    for (int a : atoms) allowed[static_cast<std::size_t>(a)] = 1;
    for (int bi = 0; bi < mol.num_bonds(); ++bi) {
      const auto& b = mol.bond(bi);
      if (!cuttable(b) || !allowed[static_cast<std::size_t>(b.begin)] || !allowed[static_cast<std::size_t>(b.end)]) {
        continue;
      }
      for (int side : {b.begin, b.end}) {
        auto part = component(mol, allowed, side, bi);
        if (seen.insert(part).second) {
          found.emplace_back(part, depth + 1);
          queue.emplace_back(std::move(part), depth + 1);
        }
      }
    }
  }
  std::stable_sort(found.begin(), found.end(), [](const auto& a, const auto& b) {
    if (a.first.size() != b.first.size()) return a.first.size() > b.first.size();
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  if (max_frags >= 0 && found.size() > static_cast<std::size_t>(max_frags)) found.resize(static_cast<std::size_t>(max_frags));
  for (auto& [atoms, depth] : found) out.push_back(make_fragment(mol, std::move(atoms), depth));
  return out;
}

SimulatedSpectrum simulate_spectrum(const chem::Molecule& mol, const SimulateOptions& opts) {
  SimulatedSpectrum s;
  const auto frags = enumerate_fragments(mol, opts.max_breaks, opts.max_frags);
  const double n = mol.num_atoms();
  std::vector<Peak> raw;
  double mx = 0.0;
  for (const auto& f : frags) {
    const double inten = std::pow(opts.beta, f.n_breaks) * static_cast<double>(f.atoms.size()) / n;
    if (!(inten > 0.0)) continue;
    mx = std::max(mx, inten);
    raw.push_back({f, chem::monoisotopic_mass(f.formula, chem::Adduct::Proton), inten});
  }
  std::stable_sort(raw.begin(), raw.end(), [](const Peak& a, const Peak& b) { return a.mz < b.mz; });
  for (auto& p : raw) {
    p.intensity /= mx;
    if (!s.peaks.empty() && p.mz - s.peaks.back().mz <= 1e-6) {
      if (p.intensity > s.peaks.back().intensity) s.peaks.back() = std::move(p);
      continue;
    }
    s.peaks.push_back(std::move(p));
  }
  return s;
}

void ObservedSpectrum::normalize() {
  for (const auto& [mz, in] : peaks) {
    if (!(mz > 0.0) || !(in >= 0.0)) throw SpectrumError("peaks need positive m/z and non-negative intensity");
  }
  std::sort(peaks.begin(), peaks.end());
  for (std::size_t i = 1; i < peaks.size(); ++i) {
    if (peaks[i].first - peaks[i - 1].first <= 1e-6) throw SpectrumError("duplicate m/z in observed spectrum");
  }
}

ObservedSpectrum as_observed(const SimulatedSpectrum& sim, const chem::Molecule& mol) {
  ObservedSpectrum o;
  for (const auto& p : sim.peaks) o.peaks.emplace_back(p.mz, p.intensity);
  o.precursor_mz = chem::monoisotopic_mass(chem::molecular_formula(mol), chem::Adduct::Proton);
  return o;
}

double ppm_error(double mz_sim, double mz_obs) { return std::abs(mz_sim - mz_obs) / mz_obs * 1e6; }

MatchResult match_peaks(const SimulatedSpectrum& sim, const ObservedSpectrum& obs, const MatchOptions& opts) {
  MatchResult r;
  double mx = 0.0;
  for (const auto& p : sim.peaks) mx = std::max(mx, p.intensity);
  std::vector<int> informative;
  for (int i = 0; i < static_cast<int>(sim.peaks.size()); ++i) {
    const auto& p = sim.peaks[static_cast<std::size_t>(i)];
    if (p.intensity < opts.min_rel_int * mx) continue;
    if (obs.precursor_mz > 0.0 && ppm_error(p.mz, obs.precursor_mz) <= opts.tol_ppm) continue;
    informative.push_back(i);
  }
  std::stable_sort(informative.begin(), informative.end(), [&](int a, int b) {
    return sim.peaks[static_cast<std::size_t>(a)].intensity > sim.peaks[static_cast<std::size_t>(b)].intensity;
  });
  if (opts.top_p >= 0 && informative.size() > static_cast<std::size_t>(opts.top_p)) {
    informative.resize(static_cast<std::size_t>(opts.top_p));
  }
  std::sort(informative.begin(), informative.end());
  for (int i : informative) {
    const double m = sim.peaks[static_cast<std::size_t>(i)].mz;
    // Observed peaks are sorted; only neighbours of the insertion point can be
    // closest in m/z, but check a small window since ppm is relative to m_obs.
    auto it = std::lower_bound(obs.peaks.begin(), obs.peaks.end(), std::make_pair(m, -1.0));
    bool hit = false;
    for (auto j = it; j != obs.peaks.end() && !hit; ++j) {
      if (ppm_error(m, j->first) <= opts.tol_ppm) hit = true;
      else if (j->first > m) break;
    }
    for (auto j = it; j != obs.peaks.begin() && !hit;) {
      --j;
      if (ppm_error(m, j->first) <= opts.tol_ppm) hit = true;
      else break;
    }
    (hit ? r.matched : r.hallucinated).push_back(i);
  }
  return r;
}

std::shared_ptr<const SimulatedSpectrum> SpectrumCache::get(const std::string& key, const chem::Molecule& mol) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = items_.find(key);
    if (it != items_.end()) {
      ++hits_;
      return it->second;
    }
  }
  auto s = std::make_shared<const SimulatedSpectrum>(simulate_spectrum(mol, opts_));
  std::lock_guard<std::mutex> lock(mu_);
  // Another caller may have raced us; keep whichever landed first.
  return items_.emplace(key, std::move(s)).first->second;
}

std::size_t SpectrumCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return items_.size();
}

}  // namespace frigid::frag
