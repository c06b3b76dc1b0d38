#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>

#include "frigid/chemgraph.hpp"
#include "frigid/rng.hpp"
#include "frigid/synth.hpp"

using namespace frigid;
using namespace frigid::chem;

namespace {

std::vector<int> random_perm(int n, Rng& rng) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(p[i], p[rng.below(static_cast<std::uint64_t>(i + 1))]);
  return p;
}

// Independent isomorphism check by brute-force backtracking; only for small graphs.
bool isomorphic(const Molecule& a, const Molecule& b) {
  if (a.num_atoms() != b.num_atoms() || a.num_bonds() != b.num_bonds()) return false;
  const int n = a.num_atoms();
  std::vector<int> map(static_cast<std::size_t>(n), -1);
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  auto compatible = [&](int i, int j) {
    const Atom& x = a.atom(i);
    const Atom& y = b.atom(j);
    return x.element == y.element && x.aromatic == y.aromatic && x.formal_charge == y.formal_charge &&
           a.degree(i) == b.degree(j) && a.total_hydrogens(i) == b.total_hydrogens(j);
  };
  std::function<bool(int)> go = [&](int i) {
    if (i == n) return true;
    for (int j = 0; j < n; ++j) {
      if (used[j] || !compatible(i, j)) continue;
      bool ok = true;
      for (const auto& nb : a.neighbors(i)) {
        if (nb.atom >= i) continue;
        auto bb = b.bond_between(j, map[nb.atom]);
        if (!bb || b.bond(*bb).order != a.bond(nb.bond).order) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      map[i] = j;
      used[j] = true;
      if (go(i + 1)) return true;
      used[j] = false;
    }
    return false;
  };
  return go(0);
}

double hand_mass(std::initializer_list<std::pair<double, int>> parts) {
  double m = 0;
  for (auto [mass, n] : parts) m += mass * n;
  return m;
}

}  // namespace

TEST_CASE("parse simple chains and rings") {
  auto m = parse_smiles("CCO");
  CHECK(m.num_atoms() == 3);
  CHECK(m.num_bonds() == 2);
  CHECK(m.atom(2).element == Element::O);
  for (const auto& b : m.bonds()) CHECK(b.order == BondOrder::Single);

  auto benz = parse_smiles("c1ccccc1");
  CHECK(benz.num_atoms() == 6);
  CHECK(benz.num_bonds() == 6);
  for (const auto& a : benz.atoms()) CHECK(a.aromatic);
  for (const auto& b : benz.bonds()) {
    CHECK(b.in_ring);
    CHECK(b.order == BondOrder::Aromatic);
  }
  for (int i = 0; i < 6; ++i) CHECK(benz.degree(i) == 2);
}

TEST_CASE("parse errors carry kind and offset") {
  auto expect = [](std::string_view s, SmilesError::Kind kind, std::size_t offset) {
    try {
      parse_smiles(s);
      FAIL("expected error for " << s);
    } catch (const SmilesError& e) {
      CHECK(e.kind() == kind);
      CHECK(e.offset() == offset);
    }
  };
  expect("C(", SmilesError::Kind::UnbalancedParenthesis, 1);
  expect("CC)", SmilesError::Kind::UnbalancedParenthesis, 2);
  expect("C1CC", SmilesError::Kind::UnclosedRing, 1);
  expect("CXC", SmilesError::Kind::UnknownElement, 1);
  expect("", SmilesError::Kind::EmptyInput, 0);
  expect("C[Zz]", SmilesError::Kind::UnknownElement, 2);
}

TEST_CASE("stereo markers are accepted and dropped") {
  CHECK(canonical_key(parse_smiles("F/C=C/F")) == canonical_key(parse_smiles("FC=CF")));
  CHECK(canonical_key(parse_smiles("C[C@H](N)O")) == canonical_key(parse_smiles("CC(N)O")));
}

TEST_CASE("bracket atoms, charges, dots, percent closures") {
  auto nh4 = parse_smiles("[NH4+]");
  CHECK(nh4.atom(0).formal_charge == 1);
  CHECK(nh4.total_hydrogens(0) == 4);
  CHECK_THROWS_AS(parse_smiles("[Na+].[Cl-]"), SmilesError);
  auto two = parse_smiles("CC.O");
  CHECK(two.num_atoms() == 3);
  CHECK(two.num_bonds() == 1);
  auto pct = parse_smiles("C%12CCC%12");
  CHECK(pct.num_bonds() == 4);
  CHECK(pct.bond_between(0, 3).has_value());
  auto oxide = parse_smiles("C[O-]");
  CHECK(oxide.total_hydrogens(1) == 0);
}

TEST_CASE("molecular formulae") {
  CHECK(molecular_formula(parse_smiles("CCO")).to_string() == "C2H6O");
  CHECK(molecular_formula(parse_smiles("c1ccccc1")).to_string() == "C6H6");
  auto f = molecular_formula(parse_smiles("[NH4+]"));
  CHECK(f.to_string() == "H4N+");
  CHECK(f.charge == 1);
  CHECK(f.count(Element::N) == 1);
  CHECK(f.count(Element::H) == 4);
  CHECK(molecular_formula(parse_smiles("c1ccncc1")).to_string() == "C5H5N");
  CHECK(molecular_formula(parse_smiles("c1cc[nH]c1")).to_string() == "C4H5N");
  CHECK(molecular_formula(parse_smiles("c1ccoc1")).to_string() == "C4H4O");
  CHECK(molecular_formula(parse_smiles("c1ccsc1")).to_string() == "C4H4S");
  CHECK(molecular_formula(parse_smiles("Cn1cccc1")).to_string() == "C5H7N");
  CHECK(molecular_formula(parse_smiles("c1ccc2ccccc2c1")).to_string() == "C10H8");
  CHECK(molecular_formula(parse_smiles("O=c1cccc[nH]1")).to_string() == "C5H5NO");
  CHECK(molecular_formula(parse_smiles("CS(=O)(=O)C")).to_string() == "C2H6O2S");
  CHECK(molecular_formula(parse_smiles("OP(=O)(O)O")).to_string() == "H3O4P");
  CHECK(Formula::parse("C2H6O") == molecular_formula(parse_smiles("OCC")));
  CHECK(Formula::parse("H4N+") == f);
  CHECK_THROWS_AS(molecular_formula(parse_smiles("C(C)(C)(C)(C)C")), ValenceError);
  CHECK_THROWS_AS(molecular_formula(parse_smiles("FF=C")), ValenceError);
}

TEST_CASE("monoisotopic masses") {
  const double c = 12.0, h = 1.00782503, o = 15.99491462;
  CHECK(std::abs(monoisotopic_mass(Formula::parse("C2H6O")) - 46.04186) < 1e-4);
  CHECK(std::abs(monoisotopic_mass(Formula::parse("C2H6O")) - hand_mass({{c, 2}, {h, 6}, {o, 1}})) < 1e-9);
  CHECK(monoisotopic_mass(Formula{}) == 0.0);
  CHECK(std::abs(monoisotopic_mass(Formula::parse("H2O"), Adduct::Proton) - 19.01784) < 1e-4);
}

TEST_CASE("mass additivity") {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    Formula a, b;
    for (int e = 0; e < kNumElements; ++e) {
      a.counts[e] = static_cast<int>(rng.below(30));
      b.counts[e] = static_cast<int>(rng.below(30));
    }
    const double sum = monoisotopic_mass(a) + monoisotopic_mass(b);
    CHECK(std::abs(monoisotopic_mass(a + b) - sum) <= 1e-9 * sum);
  }
}

TEST_CASE("canonical keys") {
  CHECK(canonical_key(parse_smiles("CCO")) == canonical_key(parse_smiles("OCC")));
  CHECK(canonical_key(parse_smiles("CCO")) != canonical_key(parse_smiles("COC")));
  CHECK(write_smiles(parse_smiles("C")) == "C");
  CHECK(canonical_key(parse_smiles("c1ccccc1C")) == canonical_key(parse_smiles("Cc1ccccc1")));
  CHECK(canonical_key(parse_smiles("OC(=O)c1ccccc1")) == canonical_key(parse_smiles("c1ccc(cc1)C(O)=O")));
  CHECK(canonical_key(parse_smiles("CC.O")) == canonical_key(parse_smiles("O.CC")));
  auto benz = parse_smiles(write_smiles(parse_smiles("c1ccccc1")));
  CHECK(benz.num_atoms() == 6);
  for (const auto& a : benz.atoms()) CHECK(a.aromatic);
}

TEST_CASE("canonical key is invariant under atom permutations") {
  // 12 heavy atoms with symmetric substituents to exercise tie breaking.
  const auto mol = parse_smiles("CC(C)c1ccc(cc1)C(=O)O");
  REQUIRE(mol.num_atoms() == 12);
  const auto key = canonical_key(mol);
  const auto fp = morgan_fingerprint(mol);
  Rng rng(1234);
  for (int i = 0; i < 100; ++i) {
    const auto p = mol.permuted(random_perm(mol.num_atoms(), rng));
    CHECK(canonical_key(p) == key);
    CHECK(morgan_fingerprint(p) == fp);
  }
}

TEST_CASE("highly symmetric graphs canonicalize consistently") {
  const char* cases[] = {"C1CCCCC1", "c1ccc2ccccc2c1", "C12C3C4C1C5C2C3C45", "CC(C)(C)C", "C1CC2CCC1CC2"};
  Rng rng(99);
  for (const char* s : cases) {
    const auto mol = parse_smiles(s);
    const auto key = canonical_key(mol);
    for (int i = 0; i < 30; ++i) CHECK(canonical_key(mol.permuted(random_perm(mol.num_atoms(), rng))) == key);
  }
}

TEST_CASE("round trip on a 1000-molecule corpus") {
  const auto corpus = synth::generate_corpus(1000, 42);
  REQUIRE(corpus.size() == 1000);
  Rng rng(5);
  int iso_checked = 0;
  for (const auto& s : corpus) {
    const auto m = parse_smiles(s);
    const auto key = canonical_key(m);
    CHECK(key == s);  // corpus entries are canonical already
    const auto again = parse_smiles(write_smiles(m));
    CHECK(canonical_key(again) == key);
    const auto shuffled = m.permuted(random_perm(m.num_atoms(), rng));
    CHECK(canonical_key(shuffled) == key);
    if (iso_checked < 200 && m.num_atoms() <= 14) {
      CHECK(isomorphic(m, again));
      ++iso_checked;
    }
  }
}

TEST_CASE("distinct molecules get distinct keys") {
  // Pairs of non-isomorphic graphs that 1-WL refinement alone cannot separate.
  CHECK(canonical_key(parse_smiles("C1CCC2CCCC2C1")) != canonical_key(parse_smiles("C1CCCC(C1)C1CC1")));
  CHECK(canonical_key(parse_smiles("C1CCCCC1.C1CCCCC1")) == canonical_key(parse_smiles("C1CCCCC1.C1CCCCC1")));
  CHECK(canonical_key(parse_smiles("C1CCCCCCCCCCC1")) != canonical_key(parse_smiles("C1CCCCC1.C1CCCCC1")));
  CHECK(canonical_key(parse_smiles("Cc1ccccc1C")) != canonical_key(parse_smiles("Cc1cccc(C)c1")));
}

TEST_CASE("morgan fingerprints") {
  const auto methane = parse_smiles("C");
  const auto fp = morgan_fingerprint(methane);
  CHECK(fp.count() >= 1);
  CHECK(fp.count() <= 2);
  CHECK(morgan_fingerprint(parse_smiles("C")) == fp);
  // A radius-0 fingerprint of methane is a subset of the radius-2 one.
  const auto r0 = morgan_fingerprint(methane, 0);
  CHECK(r0.count() == 1);
  CHECK(fp.test(r0.bits()[0]));
  // Radius 1 already captures the whole molecule; radius 2 adds nothing.
  CHECK(morgan_fingerprint(methane, 1) == fp);

  const auto a = morgan_fingerprint(parse_smiles("CCO"));
  const auto b = morgan_fingerprint(parse_smiles("OCC"));
  CHECK(a == b);
  CHECK(a != morgan_fingerprint(parse_smiles("COC")));
  for (int bit : a.bits()) {
    CHECK(bit >= 0);
    CHECK(bit < 4096);
  }
}

TEST_CASE("fingerprint hex") {
  Fingerprint f(4096, {0, 5, 4095});
  const auto hex = f.to_hex();
  CHECK(hex.size() == 1024);
  CHECK(hex[0] == '8');
  CHECK(hex[1] == '4');
  CHECK(hex[1023] == '1');
  CHECK(Fingerprint::from_hex(hex) == f);
  CHECK_THROWS_AS(Fingerprint::from_hex("zz"), ChemError);
  CHECK_THROWS_AS(Fingerprint(16, {16}), ChemError);
}

TEST_CASE("tanimoto") {
  Fingerprint a(4096, {1, 2, 3}), b(4096, {2, 3, 4}), c(4096, {7, 8});
  CHECK(tanimoto(a, b) == 0.5);
  CHECK(tanimoto(a, a) == 1.0);
  CHECK(tanimoto(a, c) == 0.0);
  CHECK(tanimoto(Fingerprint(4096), Fingerprint(4096)) == 0.0);
}

TEST_CASE("tanimoto distance properties on random triples") {
  Rng rng(2024);
  auto random_fp = [&] {
    std::vector<int> bits;
    const int n = 1 + static_cast<int>(rng.below(40));
    for (int i = 0; i < n; ++i) bits.push_back(static_cast<int>(rng.below(96)));
    return Fingerprint(4096, bits);
  };
  for (int i = 0; i < 1000; ++i) {
    const auto x = random_fp(), y = random_fp(), z = random_fp();
    const double xy = 1 - tanimoto(x, y), yz = 1 - tanimoto(y, z), xz = 1 - tanimoto(x, z);
    CHECK(tanimoto(x, y) == tanimoto(y, x));
    CHECK(xz <= xy + yz + 1e-12);
    CHECK((tanimoto(x, y) == 1.0) == (x == y));
  }
}
