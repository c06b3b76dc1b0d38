#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <numeric>
#include <tuple>

#include "frigid/chemgraph.hpp"

namespace frigid::chem {

namespace {

constexpr int kMaxCanonLeaves = 512;

int safe_total_h(const Molecule& mol, int i) {
  try {
    return mol.total_hydrogens(i);
  } catch (const ValenceError&) {
    return -1;
  }
}

// rank[a] = number of atoms whose key sorts strictly before a's key.
template <typename Key>
int rank_by_keys(const std::vector<Key>& keys, std::vector<int>& ranks) {
  const int n = static_cast<int>(keys.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return keys[a] < keys[b]; });
  ranks.assign(static_cast<std::size_t>(n), 0);
  int classes = 0;
  for (int i = 0; i < n; ++i) {
    if (i == 0 || keys[order[i - 1]] < keys[order[i]]) {
      ++classes;
      ranks[order[i]] = i;
    } else {
      ranks[order[i]] = ranks[order[i - 1]];
    }
  }
  return classes;
}

int count_classes(const std::vector<int>& ranks) {
  std::vector<int> r = ranks;
  std::sort(r.begin(), r.end());
  return static_cast<int>(std::unique(r.begin(), r.end()) - r.begin());
}

void refine(const Molecule& mol, std::vector<int>& ranks) {
  using Key = std::pair<int, std::vector<std::pair<int, int>>>;
  int classes = count_classes(ranks);
  const int n = mol.num_atoms();
  while (classes < n) {
    std::vector<Key> keys(static_cast<std::size_t>(n));
    for (int a = 0; a < n; ++a) {
      keys[a].first = ranks[a];
      for (const auto& nb : mol.neighbors(a)) {
        keys[a].second.emplace_back(ranks[nb.atom], static_cast<int>(mol.bond(nb.bond).order));
      }
      std::sort(keys[a].second.begin(), keys[a].second.end());
    }
    std::vector<int> next;
    const int next_classes = rank_by_keys(keys, next);
    ranks = std::move(next);
    if (next_classes == classes) break;
    classes = next_classes;
  }
}

std::vector<int> initial_ranks(const Molecule& mol) {
  using Key = std::tuple<int, int, int, int, int, int>;
  std::vector<Key> keys;
  keys.reserve(static_cast<std::size_t>(mol.num_atoms()));
  for (int a = 0; a < mol.num_atoms(); ++a) {
    const Atom& at = mol.atom(a);
    keys.emplace_back(atomic_number(at.element), mol.degree(a), safe_total_h(mol, a), at.formal_charge,
                      at.aromatic ? 1 : 0, mol.atom_in_ring(a) ? 1 : 0);
  }
  std::vector<int> ranks;
  rank_by_keys(keys, ranks);
  return ranks;
}

std::string atom_symbol(const Molecule& mol, int i) {
  const Atom& a = mol.atom(i);
  std::string sym(element_symbol(a.element));
  if (a.aromatic) sym[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(sym[0])));
  const int total_h = safe_total_h(mol, i);
  bool bracket = a.element == Element::H || a.formal_charge != 0;
  if (!bracket && total_h >= 0) bracket = mol.default_hydrogens(i) != total_h;
  if (!bracket) return sym;
  std::string out = "[" + sym;
  if (total_h > 0) {
    out += "H";
    if (total_h > 1) out += std::to_string(total_h);
  }
  if (a.formal_charge != 0) {
    out += a.formal_charge > 0 ? "+" : "-";
    if (std::abs(a.formal_charge) > 1) out += std::to_string(std::abs(a.formal_charge));
  }
  out += "]";
  return out;
}

std::string bond_symbol(const Molecule& mol, const Bond& b) {
  const bool both_arom = mol.atom(b.begin).aromatic && mol.atom(b.end).aromatic;
  switch (b.order) {
    case BondOrder::Single: return both_arom ? "-" : "";
    case BondOrder::Double: return "=";
    case BondOrder::Triple: return "#";
    case BondOrder::Aromatic: return both_arom ? "" : ":";
  }
  return "";
}

std::string ring_label(int d) { return d < 10 ? std::to_string(d) : "%" + std::to_string(d); }

class Writer {
 public:
  Writer(const Molecule& mol, const std::vector<int>& ranks) : mol_(mol), ranks_(ranks) {
    const auto n = static_cast<std::size_t>(mol.num_atoms());
    visited_.assign(n, false);
    children_.assign(n, {});
    rings_.assign(n, {});
    ring_done_.assign(static_cast<std::size_t>(mol.num_bonds()), false);
    symbols_.resize(n);
    for (int i = 0; i < mol.num_atoms(); ++i) symbols_[i] = atom_symbol(mol, i);
  }

  std::string run() {
    std::vector<int> order(static_cast<std::size_t>(mol_.num_atoms()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return ranks_[a] < ranks_[b]; });
    std::string out;
    for (int start : order) {
      if (visited_[start]) continue;
      build(start, -1);
      if (!out.empty()) out += '.';
      emit(start, out);
    }
    return out;
  }

 private:
  struct RingRef {
    int bond;
    int partner;
    bool opening;
  };

  std::vector<Molecule::Neighbor> sorted_neighbors(int a) const {
    auto nbs = std::vector<Molecule::Neighbor>(mol_.neighbors(a).begin(), mol_.neighbors(a).end());
    std::sort(nbs.begin(), nbs.end(), [&](const auto& x, const auto& y) { return ranks_[x.atom] < ranks_[y.atom]; });
    return nbs;
  }

  void build(int a, int parent_bond) {
    visited_[a] = true;
    for (const auto& nb : sorted_neighbors(a)) {
      if (nb.bond == parent_bond || ring_done_[nb.bond]) continue;
      if (!visited_[nb.atom]) {
        children_[a].push_back(nb);
        build(nb.atom, nb.bond);
      } else {
        // Back edge to an ancestor: opened at the ancestor, closed here.
        ring_done_[nb.bond] = true;
        rings_[nb.atom].push_back({nb.bond, a, true});
        rings_[a].push_back({nb.bond, nb.atom, false});
      }
    }
  }

  void emit(int a, std::string& out) {
    out += symbols_[a];
    auto refs = rings_[a];
    std::sort(refs.begin(), refs.end(), [&](const RingRef& x, const RingRef& y) {
      if (x.opening != y.opening) return !x.opening;  // close before open
      return ranks_[x.partner] < ranks_[y.partner];
    });
    for (const auto& r : refs) {
      if (r.opening) {
        int d = 1;
        while (std::find(in_use_.begin(), in_use_.end(), d) != in_use_.end()) ++d;
        in_use_.push_back(d);
        digit_of_bond_.emplace_back(r.bond, d);
        out += bond_symbol(mol_, mol_.bond(r.bond));
        out += ring_label(d);
      } else {
        auto it = std::find_if(digit_of_bond_.begin(), digit_of_bond_.end(),
                               [&](const auto& p) { return p.first == r.bond; });
        const int d = it->second;
        digit_of_bond_.erase(it);
        std::erase(in_use_, d);
        out += ring_label(d);
      }
    }
    const auto& kids = children_[a];
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const bool last = k + 1 == kids.size();
      if (!last) out += '(';
      out += bond_symbol(mol_, mol_.bond(kids[k].bond));
      emit(kids[k].atom, out);
      if (!last) out += ')';
    }
  }

  const Molecule& mol_;
  const std::vector<int>& ranks_;
  std::vector<bool> visited_;
  std::vector<std::vector<Molecule::Neighbor>> children_;
  std::vector<std::vector<RingRef>> rings_;
  std::vector<bool> ring_done_;
  std::vector<std::string> symbols_;
  std::vector<int> in_use_;
  std::vector<std::pair<int, int>> digit_of_bond_;
};

struct CanonSearch {
  const Molecule& mol;
  int leaves = 0;
  std::string best;
  std::vector<int> best_ranks;

  void search(std::vector<int> ranks) {
    refine(mol, ranks);
    const int n = mol.num_atoms();
    if (count_classes(ranks) == n) {
      ++leaves;
      std::string s = Writer(mol, ranks).run();
      if (best_ranks.empty() || s < best) {
        best = std::move(s);
        best_ranks = ranks;
      }
      return;
    }
    // Smallest tied class.
    int tied_rank = n;
    std::vector<int> counts(static_cast<std::size_t>(n), 0);
    for (int r : ranks) ++counts[r];
    for (int r = 0; r < n; ++r) {
      if (counts[r] > 1) {
        tied_rank = r;
        break;
      }
    }
    std::vector<int> members;
    for (int a = 0; a < n; ++a) {
      if (ranks[a] == tied_rank) members.push_back(a);
    }
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (k > 0 && leaves >= kMaxCanonLeaves) break;
      std::vector<int> next = ranks;
      for (int m : members) {
        if (m != members[k]) next[m] = tied_rank + 1;
      }
      search(std::move(next));
    }
  }
};

}  // namespace

std::vector<int> canonical_ranks(const Molecule& mol) {
  if (mol.num_atoms() == 0) return {};
  CanonSearch s{mol, 0, {}, {}};
  s.search(initial_ranks(mol));
  return s.best_ranks;
}

std::string write_smiles(const Molecule& mol) {
  if (mol.num_atoms() == 0) return {};
  CanonSearch s{mol, 0, {}, {}};
  s.search(initial_ranks(mol));
  return s.best;
}

std::string canonical_key(const Molecule& mol) { return write_smiles(mol); }

}  // namespace frigid::chem
