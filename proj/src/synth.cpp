#include "frigid/synth.hpp"

#include <array>
#include <string_view>
#include <unordered_set>

namespace frigid::synth {

namespace {

constexpr std::array<std::string_view, 13> kCores = {
    "c1ccccc1", "c1ccncc1", "c1ccoc1", "c1ccsc1", "C1CCCCC1", "C1CCNCC1", "C1CCOC1",
    "C1CC1",    "CC",       "CCC",     "CCCC",    "CC(C)C",   "c1ccc2ccccc2c1",
};

constexpr std::array<std::string_view, 30> kSubstituents = {
    "C",      "CC",      "CCC",      "C(C)C",    "O",     "OC",      "OCC",  "N",
    "NC",     "N(C)C",   "F",        "Cl",       "Br",    "C(=O)O",  "C(=O)OC", "C(=O)N",
    "C=O",    "C#N",     "S",        "SC",       "C(F)(F)F", "CO",   "CN",   "NC(C)=O",
    "C(=O)C", "c1ccccc1", "C1CC1",   "Cc1ccccc1", "Oc1ccccc1", "C=C",
};

void append(chem::Molecule& mol, const chem::Molecule& part, int attach_to) {
  const int offset = mol.num_atoms();
  for (const auto& a : part.atoms()) mol.add_atom(a);
  for (const auto& b : part.bonds()) mol.add_bond(b.begin + offset, b.end + offset, b.order);
  mol.add_bond(attach_to, offset, chem::BondOrder::Single);
}

}  // namespace

MoleculeGenerator::MoleculeGenerator(std::uint64_t seed, GeneratorOptions opts) : rng_(seed), opts_(opts) {}

chem::Molecule MoleculeGenerator::next_molecule() {
  for (;;) {
    chem::Molecule mol = chem::parse_smiles(kCores[rng_.below(kCores.size())]);
    const int core_atoms = mol.num_atoms();
    const int span = opts_.max_substituents - opts_.min_substituents + 1;
    const int n_sub = opts_.min_substituents + static_cast<int>(rng_.below(static_cast<std::uint64_t>(span)));
    std::vector<bool> used(static_cast<std::size_t>(core_atoms), false);
    bool ok = true;
    for (int s = 0; s < n_sub && ok; ++s) {
      std::vector<int> sites;
      for (int a = 0; a < core_atoms; ++a) {
        if (used[a]) continue;
        auto h = mol.default_hydrogens(a);
        if (!mol.atom(a).explicit_h && h && *h > 0) sites.push_back(a);
      }
      if (sites.empty()) break;
      const int site = sites[rng_.below(sites.size())];
      used[site] = true;
      append(mol, chem::parse_smiles(kSubstituents[rng_.below(kSubstituents.size())]), site);
    }
    if (mol.num_atoms() > opts_.max_heavy_atoms) continue;
    mol.perceive_rings();
    try {
      (void)chem::molecular_formula(mol);
    } catch (const chem::ValenceError&) {
      ok = false;
    }
    if (ok) return mol;
  }
}

std::string MoleculeGenerator::next() { return chem::write_smiles(next_molecule()); }

std::vector<std::string> generate_corpus(std::size_t n, std::uint64_t seed, GeneratorOptions opts) {
  MoleculeGenerator gen(seed, opts);
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > n * 200 + 1000) break;
    std::string s = gen.next();
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace frigid::synth
