#include "frigid/chemgraph.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <functional>

namespace frigid::chem {

namespace {

struct ElementInfo {
  std::string_view symbol;
  int z;
  double mass;
  std::array<int, 3> valences;  // 0 terminates
};

constexpr std::array<ElementInfo, kNumElements> kElements = {{
    {"C", 6, 12.000000, {4, 0, 0}},
    {"H", 1, 1.00782503, {1, 0, 0}},
    {"N", 7, 14.00307401, {3, 0, 0}},
    {"O", 8, 15.99491462, {2, 0, 0}},
    {"P", 15, 30.97376199, {3, 5, 0}},
    {"S", 16, 31.97207117, {2, 4, 6}},
    {"F", 9, 18.99840322, {1, 0, 0}},
    {"Cl", 17, 34.96885268, {1, 0, 0}},
    {"Br", 35, 78.9183376, {1, 0, 0}},
    {"I", 53, 126.904473, {1, 0, 0}},
    {"B", 5, 11.00930536, {3, 0, 0}},
}};

const ElementInfo& info(Element e) { return kElements[static_cast<std::size_t>(e)]; }

int max_valence(Element e) {
  const auto& v = info(e).valences;
  int m = 0;
  for (int x : v) m = std::max(m, x);
  return m;
}

// Sum of bond orders with aromatic bonds counting 1.
int bond_order_sum(const Molecule& mol, int i) {
  int sum = 0;
  for (const auto& nb : mol.neighbors(i)) {
    const auto order = mol.bond(nb.bond).order;
    sum += order == BondOrder::Aromatic ? 1 : static_cast<int>(order);
  }
  return sum;
}

bool has_aromatic_bond(const Molecule& mol, int i) {
  for (const auto& nb : mol.neighbors(i)) {
    if (mol.bond(nb.bond).order == BondOrder::Aromatic) return true;
  }
  return false;
}

}  // namespace

std::string_view element_symbol(Element e) { return info(e).symbol; }

std::optional<Element> element_from_symbol(std::string_view sym) {
  for (std::size_t i = 0; i < kElements.size(); ++i) {
    if (kElements[i].symbol == sym) return static_cast<Element>(i);
  }
  return std::nullopt;
}

int atomic_number(Element e) { return info(e).z; }
double isotope_mass(Element e) { return info(e).mass; }

SmilesError::SmilesError(Kind kind, std::size_t offset, const std::string& detail)
    : ChemError(detail + " at offset " + std::to_string(offset)), kind_(kind), offset_(offset) {}

ValenceError::ValenceError(int atom, const std::string& detail)
    : ChemError("valence overflow on atom " + std::to_string(atom) + ": " + detail), atom_(atom) {}

int Molecule::add_atom(Atom atom) {
  atom.index = static_cast<int>(atoms_.size());
  atoms_.push_back(atom);
  adjacency_.emplace_back();
  return atom.index;
}

int Molecule::add_bond(int a, int b, BondOrder order) {
  const int n = num_atoms();
  if (a < 0 || b < 0 || a >= n || b >= n) throw ChemError("bond endpoint out of range");
  if (a == b) throw ChemError("bond endpoints must differ");
  if (bond_between(a, b)) throw ChemError("duplicate bond between atoms " + std::to_string(a) + " and " + std::to_string(b));
  const int idx = static_cast<int>(bonds_.size());
  bonds_.push_back(Bond{a, b, order, false});
  adjacency_[static_cast<std::size_t>(a)].push_back({b, idx});
  adjacency_[static_cast<std::size_t>(b)].push_back({a, idx});
  return idx;
}

std::optional<int> Molecule::bond_between(int a, int b) const {
  for (const auto& nb : adjacency_[static_cast<std::size_t>(a)]) {
    if (nb.atom == b) return nb.bond;
  }
  return std::nullopt;
}

bool Molecule::atom_in_ring(int i) const {
  for (const auto& nb : neighbors(i)) {
    if (bond(nb.bond).in_ring) return true;
  }
  return false;
}

std::optional<int> Molecule::default_hydrogens(int i) const {
  const int sum = bond_order_sum(*this, i);
  for (int v : info(atom(i).element).valences) {
    if (v == 0) break;
    if (v < sum) continue;
    int h = v - sum;
    // An aromatic atom spends one more valence on the pi system when it can
    // (c, n in pyridine); o and s in five-membered rings cannot.
    if (h > 0 && atom(i).aromatic && has_aromatic_bond(*this, i)) --h;
    return h;
  }
  return std::nullopt;
}

int Molecule::implicit_hydrogens(int i) const {
  const Atom& a = atom(i);
  if (a.explicit_h) return 0;
  if (auto h = default_hydrogens(i)) return *h;
  throw ValenceError(i, "bond order sum " + std::to_string(bond_order_sum(*this, i)) + " exceeds valence of " +
                            std::string(element_symbol(a.element)));
}

int Molecule::total_hydrogens(int i) const {
  const Atom& a = atom(i);
  if (a.explicit_h) {
    const int used = bond_order_sum(*this, i) + *a.explicit_h;
    if (used > max_valence(a.element) + std::abs(a.formal_charge)) {
      throw ValenceError(i, "bracket atom exceeds valence");
    }
    return *a.explicit_h;
  }
  return implicit_hydrogens(i);
}

void Molecule::perceive_rings() {
  // Tarjan bridge finding; every non-bridge bond lies on a cycle.
  const int n = num_atoms();
  std::vector<int> disc(static_cast<std::size_t>(n), -1), low(static_cast<std::size_t>(n), 0);
  int timer = 0;
  for (auto& b : bonds_) b.in_ring = true;
  std::function<void(int, int)> dfs = [&](int u, int parent_bond) {
    disc[u] = low[u] = timer++;
    for (const auto& nb : adjacency_[static_cast<std::size_t>(u)]) {
      if (nb.bond == parent_bond) continue;
      if (disc[nb.atom] < 0) {
        dfs(nb.atom, nb.bond);
        low[u] = std::min(low[u], low[nb.atom]);
        if (low[nb.atom] > disc[u]) bonds_[static_cast<std::size_t>(nb.bond)].in_ring = false;
      } else {
        low[u] = std::min(low[u], disc[nb.atom]);
      }
    }
  };
  for (int i = 0; i < n; ++i) {
    if (disc[i] < 0) dfs(i, -1);
  }
}

Molecule Molecule::permuted(std::span<const int> perm) const {
  if (static_cast<int>(perm.size()) != num_atoms()) throw ChemError("permutation size mismatch");
  std::vector<int> inverse(perm.size(), -1);
  Molecule out;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    inverse[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    out.add_atom(atom(perm[i]));
  }
  for (const auto& b : bonds_) out.add_bond(inverse[b.begin], inverse[b.end], b.order);
  out.perceive_rings();
  return out;
}

bool Formula::empty() const {
  return std::all_of(counts.begin(), counts.end(), [](int c) { return c == 0; });
}

Formula& Formula::operator+=(const Formula& o) {
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  charge += o.charge;
  return *this;
}

std::string Formula::to_string() const {
  std::string out;
  auto emit = [&](Element e) {
    const int c = count(e);
    if (c == 0) return;
    out += element_symbol(e);
    if (c != 1) out += std::to_string(c);
  };
  std::vector<Element> rest;
  for (int i = 0; i < kNumElements; ++i) rest.push_back(static_cast<Element>(i));
  if (count(Element::C) > 0) {
    emit(Element::C);
    emit(Element::H);
    std::erase(rest, Element::C);
    std::erase(rest, Element::H);
  }
  std::sort(rest.begin(), rest.end(), [](Element a, Element b) { return element_symbol(a) < element_symbol(b); });
  for (Element e : rest) emit(e);
  if (charge != 0) {
    out += charge > 0 ? "+" : "-";
    if (std::abs(charge) != 1) out += std::to_string(std::abs(charge));
  }
  return out;
}

Formula Formula::parse(std::string_view hill) {
  Formula f;
  std::size_t i = 0;
  while (i < hill.size()) {
    const char ch = hill[i];
    if (ch == '+' || ch == '-') {
      const int sign = ch == '+' ? 1 : -1;
      ++i;
      int mag = 0;
      while (i < hill.size() && std::isdigit(static_cast<unsigned char>(hill[i]))) mag = mag * 10 + (hill[i++] - '0');
      f.charge += sign * (mag == 0 ? 1 : mag);
      continue;
    }
    if (!std::isupper(static_cast<unsigned char>(ch))) throw ChemError("bad formula: " + std::string(hill));
    std::size_t len = 1;
    if (i + 1 < hill.size() && std::islower(static_cast<unsigned char>(hill[i + 1]))) len = 2;
    auto e = element_from_symbol(hill.substr(i, len));
    if (!e) throw ChemError("unknown element in formula: " + std::string(hill.substr(i, len)));
    i += len;
    int n = 0;
    bool any = false;
    while (i < hill.size() && std::isdigit(static_cast<unsigned char>(hill[i]))) {
      n = n * 10 + (hill[i++] - '0');
      any = true;
    }
    f.count(*e) += any ? n : 1;
  }
  return f;
}

Formula subset_formula(const Molecule& mol, std::span<const int> atoms, int extra_h) {
  Formula f;
  for (int i : atoms) {
    const Atom& a = mol.atom(i);
    f.count(a.element) += 1;
    f.count(Element::H) += mol.total_hydrogens(i);
    f.charge += a.formal_charge;
  }
  f.count(Element::H) += extra_h;
  return f;
}

Formula molecular_formula(const Molecule& mol) {
  std::vector<int> all(static_cast<std::size_t>(mol.num_atoms()));
  for (int i = 0; i < mol.num_atoms(); ++i) all[static_cast<std::size_t>(i)] = i;
  return subset_formula(mol, all, 0);
}

double monoisotopic_mass(const Formula& f, Adduct adduct) {
  double m = 0.0;
  for (int i = 0; i < kNumElements; ++i) m += f.counts[static_cast<std::size_t>(i)] * info(static_cast<Element>(i)).mass;
  if (adduct == Adduct::Proton) m += kProtonMass;
  return m;
}

}  // namespace frigid::chem
