#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "frigid/app.hpp"

namespace frigid::app {

using nlohmann::json;

chem::Fingerprint threshold_fingerprint(const std::vector<double>& probs, double threshold) {
  std::vector<int> bits;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw DatasetError("fingerprint probability outside [0, 1]");
    if (probs[i] > threshold) bits.push_back(static_cast<int>(i));
  }
  return chem::Fingerprint(static_cast<int>(probs.size()), std::move(bits));
}

DatasetRecord parse_record(const std::string& line, double fp_threshold) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw DatasetError("record is not a JSON object");
  DatasetRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    if (j.contains("smiles") && !j["smiles"].is_null()) r.smiles = j["smiles"].get<std::string>();
    if (j.contains("formula") && !j["formula"].is_null()) {
      r.formula = chem::Formula::parse(j["formula"].get<std::string>());
      r.has_formula = true;
    }
    if (!r.smiles.empty()) {
      const auto f = chem::molecular_formula(chem::parse_smiles(r.smiles));
      if (r.has_formula && !(f == r.formula)) {
        throw DatasetError("record " + r.id + ": formula " + r.formula.to_string() + " does not match SMILES formula " +
                           f.to_string());
      }
      r.formula = f;
      r.has_formula = true;
    }
    if (j.contains("spectrum")) {
      double prev = -1.0;
      for (const auto& p : j["spectrum"]) {
        if (!p.is_array() || p.size() != 2) throw DatasetError("record " + r.id + ": peaks must be [mz, intensity]");
        const double mz = p[0].get<double>(), in = p[1].get<double>();
        if (!(mz > prev)) throw DatasetError("record " + r.id + ": spectrum not sorted by m/z");
        prev = mz;
        r.spectrum.peaks.emplace_back(mz, in);
      }
    }
    if (j.contains("precursor_mz") && !j["precursor_mz"].is_null()) {
      r.spectrum.precursor_mz = j["precursor_mz"].get<double>();
    } else if (r.has_formula) {
      r.spectrum.precursor_mz = chem::monoisotopic_mass(r.formula, chem::Adduct::Proton);
    }
    if (j.contains("fingerprint") && !j["fingerprint"].is_null()) {
      const auto& f = j["fingerprint"];
      if (f.is_string()) {
        r.fingerprint = chem::Fingerprint::from_hex(f.get<std::string>());
      } else if (f.is_array()) {
        r.fingerprint = threshold_fingerprint(f.get<std::vector<double>>(), fp_threshold);
      } else {
        throw DatasetError("record " + r.id + ": fingerprint must be a hex string or probability array");
      }
    }
  } catch (const json::exception& e) {
    throw DatasetError("record " + (r.id.empty() ? std::string("?") : r.id) + ": " + e.what());
  } catch (const chem::ChemError& e) {
    throw DatasetError("record " + (r.id.empty() ? std::string("?") : r.id) + ": " + e.what());
  }
  try {
    r.spectrum.normalize();
  } catch (const std::exception& e) {
    throw DatasetError("record " + r.id + ": " + e.what());
  }
  return r;
}

std::string record_to_json(const DatasetRecord& r) {
  json j;
  j["id"] = r.id;
  if (!r.smiles.empty()) j["smiles"] = r.smiles;
  if (r.has_formula) j["formula"] = r.formula.to_string();
  json peaks = json::array();
  for (const auto& [mz, in] : r.spectrum.peaks) peaks.push_back({mz, in});
  j["spectrum"] = peaks;
  j["precursor_mz"] = r.spectrum.precursor_mz;
  if (r.fingerprint) j["fingerprint"] = r.fingerprint->to_hex();
  return j.dump();
}

std::filesystem::path resolve_data_path(const std::filesystem::path& p) {
  if (p.is_absolute() || std::filesystem::exists(p)) return p;
  if (const char* root = std::getenv("FRIGID_DATA_DIR")) {
    const auto q = std::filesystem::path(root) / p;
    if (std::filesystem::exists(q)) return q;
  }
  return p;
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path, double fp_threshold) {
  const auto p = resolve_data_path(path);
  std::ifstream in(p);
  if (!in) throw DatasetError("cannot read dataset " + p.string());
  std::vector<DatasetRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_record(line, fp_threshold));
    } catch (const DatasetError& e) {
      throw DatasetError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  std::string text;
  for (const auto& r : records) text += record_to_json(r) + "\n";
  atomic_write(path, text);
}

std::vector<std::string> read_smiles(const std::filesystem::path& path) {
  const auto p = resolve_data_path(path);
  if (p.extension() == ".jsonl") {
    std::vector<std::string> out;
    for (const auto& r : read_dataset(p)) {
      if (r.smiles.empty()) throw DatasetError(p.string() + ": record " + r.id + " has no SMILES");
      out.push_back(r.smiles);
    }
    return out;
  }
  std::ifstream in(p);
  if (!in) throw InputError("cannot read corpus " + p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first) || first[0] == '#') continue;
    out.push_back(first);
  }
  return out;
}

DatasetRecord synthetic_record(const std::string& id, const std::string& smiles, const frag::SimulateOptions& sim,
                               std::optional<double> noise_q, Rng* rng) {
  DatasetRecord r;
  r.id = id;
  const auto mol = chem::parse_smiles(smiles);
  r.smiles = smiles;
  r.formula = chem::molecular_formula(mol);
  r.has_formula = true;
  r.spectrum = frag::as_observed(frag::simulate_spectrum(mol, sim), mol);
  auto fp = chem::morgan_fingerprint(mol);
  if (noise_q) {
    if (!rng) throw std::invalid_argument("synthetic_record: noising needs an rng");
    fp = noise_fingerprint(fp, *noise_q, *rng);
  }
  r.fingerprint = fp;
  return r;
}

namespace {

// Flip f removes ceil(f/2) set bits and adds floor(f/2) unset ones, so the
// similarity falls monotonically in f with half the step of paired flips.
int removals(int f) { return (f + 1) / 2; }
int additions(int f) { return f / 2; }
double flipped_tanimoto(int active, int f) {
  return static_cast<double>(active - removals(f)) / static_cast<double>(active + additions(f));
}

// k distinct elements of `pool`, uniformly.
std::vector<int> choose(std::vector<int> pool, int k, Rng& rng) {
  for (int i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(rng.below(pool.size() - static_cast<std::size_t>(i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

}  // namespace

chem::Fingerprint noise_fingerprint(const chem::Fingerprint& fp, double q, Rng& rng) {
  if (!(q > 0.0 && q <= 1.0)) throw InputError("noise_fingerprint: target Tanimoto must lie in (0, 1]");
  const int a = static_cast<int>(fp.count());
  if (a < 3) throw UnreachableTarget("noise_fingerprint: fewer than 3 active bits");
  const int f_max = std::min(2 * a - 1, 2 * (fp.nbits() - a));
  // Smallest flip count whose similarity is at or below q.
  int lo = 0, hi = f_max;
  if (flipped_tanimoto(a, hi) > q) {
    lo = hi;
  } else {
    while (hi - lo > 1) {
      const int mid = (lo + hi) / 2;
      (flipped_tanimoto(a, mid) <= q ? hi : lo) = mid;
    }
    if (flipped_tanimoto(a, lo) > q) lo = hi;
  }
  int f = lo;
  if (f > 0 && std::abs(flipped_tanimoto(a, f - 1) - q) <= std::abs(flipped_tanimoto(a, f) - q)) --f;
  if (std::abs(flipped_tanimoto(a, f) - q) > 0.02) {
    throw UnreachableTarget("noise_fingerprint: cannot reach Tanimoto " + std::to_string(q) + " with " +
                            std::to_string(a) + " active bits");
  }
  if (f == 0) return fp;
  std::vector<int> inactive;
  inactive.reserve(static_cast<std::size_t>(fp.nbits() - a));
  for (int b = 0, j = 0; b < fp.nbits(); ++b) {
    if (j < a && fp.bits()[static_cast<std::size_t>(j)] == b) {
      ++j;
    } else {
      inactive.push_back(b);
    }
  }
  auto removed = choose(fp.bits(), removals(f), rng);
  const auto added = choose(inactive, additions(f), rng);
  std::sort(removed.begin(), removed.end());
  std::vector<int> bits;
  std::set_difference(fp.bits().begin(), fp.bits().end(), removed.begin(), removed.end(), std::back_inserter(bits));
  bits.insert(bits.end(), added.begin(), added.end());
  std::sort(bits.begin(), bits.end());
  return chem::Fingerprint(fp.nbits(), std::move(bits));
}

std::vector<FormulaHypothesis> formula_hypotheses(double precursor_mz, int n, double ppm) {
  using chem::Element;
  if (n < 1) throw InputError("formula_hypotheses: n must be positive");
  const double target = precursor_mz - chem::kProtonMass;
  const double tol = target * ppm * 1e-6;
  std::vector<FormulaHypothesis> out;
  if (target < 12.0 - tol) throw NoCandidateFormula("no formula within " + std::to_string(ppm) + " ppm");

  // Heavy elements first so remaining-mass pruning bites early.
  struct Slot {
    Element e;
    int max;
  };
  const Slot slots[] = {{Element::I, 3},  {Element::Br, 4}, {Element::Cl, 6},  {Element::S, 4},
                        {Element::P, 3},  {Element::F, 12}, {Element::O, 20},  {Element::N, 12}};
  constexpr int kSlots = 8;
  const double mh = chem::isotope_mass(Element::H);
  const double mc = chem::isotope_mass(Element::C);
  chem::Formula f;

  const auto consider = [&](double rest) {
    // rest = mass left for carbon and hydrogen
    const int cmax = static_cast<int>((rest + tol) / mc);
    for (int c = 1; c <= cmax; ++c) {
      const double hm = rest - c * mc;
      const int h = static_cast<int>(std::lround(hm / mh));
      if (h < 0) continue;
      const double err = hm - h * mh;
      if (std::abs(err) > tol) continue;
      f.count(Element::C) = c;
      f.count(Element::H) = h;
      const int x = f.count(Element::F) + f.count(Element::Cl) + f.count(Element::Br) + f.count(Element::I);
      const int nn = f.count(Element::N) + f.count(Element::P);
      // Ring and double-bond equivalents; must be a non-negative integer for
      // an even-electron neutral molecule.
      const int twice = 2 * c + 2 + nn - h - x;
      if (twice < 0 || twice % 2 != 0) continue;
      const double rdbe = twice / 2.0;
      const double dc = c;
      if (h > 3.1 * dc + 4 || f.count(Element::N) > 1.3 * dc + 1 || f.count(Element::O) > 1.2 * dc + 1 ||
          f.count(Element::P) > 0.3 * dc + 1 || f.count(Element::S) > 0.8 * dc + 1 ||
          f.count(Element::F) > 1.5 * dc + 2 || f.count(Element::Cl) > 0.8 * dc + 1 ||
          f.count(Element::Br) > 0.8 * dc + 1 || f.count(Element::I) > 0.8 * dc + 1) {
        continue;
      }
      const int hetero = nn + x + f.count(Element::O) + f.count(Element::S);
      FormulaHypothesis hyp;
      hyp.formula = f;
      hyp.ppm = err / target * 1e6;
      hyp.rdbe = rdbe;
      hyp.penalty = std::abs(hyp.ppm) / ppm + hetero / dc + std::max(0.0, rdbe - dc / 2.0 - 1.0) / 2.0;
      out.push_back(hyp);
    }
    f.count(Element::C) = 0;
    f.count(Element::H) = 0;
  };

  const auto recurse = [&](auto&& self, int slot, double rest) -> void {
    if (slot == kSlots) {
      consider(rest);
      return;
    }
    const double m = chem::isotope_mass(slots[slot].e);
    for (int k = 0; k <= slots[slot].max && rest - k * m >= mc - tol; ++k) {
      f.count(slots[slot].e) = k;
      self(self, slot + 1, rest - k * m);
    }
    f.count(slots[slot].e) = 0;
  };
  recurse(recurse, 0, target);

  if (out.empty()) throw NoCandidateFormula("no formula within " + std::to_string(ppm) + " ppm of " + std::to_string(precursor_mz));
  std::sort(out.begin(), out.end(), [](const FormulaHypothesis& a, const FormulaHypothesis& b) {
    if (a.penalty != b.penalty) return a.penalty < b.penalty;
    return a.formula.to_string() < b.formula.to_string();
  });
  if (static_cast<int>(out.size()) > n) out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<int> split_budget(int budget, int n) {
  if (n < 1) throw InputError("split_budget: need at least one share");
  std::vector<int> out(static_cast<std::size_t>(n), budget / n);
  for (int i = 0; i < budget % n; ++i) ++out[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace frigid::app
