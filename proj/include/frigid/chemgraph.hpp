#pragma once

// Molecular graphs over a SMILES subset: parsing, canonical writing,
// formulae, monoisotopic masses and circular fingerprints.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace frigid::chem {

// Element slots used by formula count vectors. Eleven slots are populated
// (the ten parsable heavy elements plus hydrogen); the rest are reserved and
// always zero so conditioning vectors keep a fixed width.
inline constexpr int kNumElementSlots = 30;

enum class Element : std::uint8_t { C = 0, H, N, O, P, S, F, Cl, Br, I, B };
inline constexpr int kNumElements = 11;

std::string_view element_symbol(Element e);
std::optional<Element> element_from_symbol(std::string_view sym);
int atomic_number(Element e);
double isotope_mass(Element e);

inline constexpr double kProtonMass = 1.00727646;

enum class BondOrder : std::uint8_t { Single = 1, Double = 2, Triple = 3, Aromatic = 4 };

struct Atom {
  Element element = Element::C;
  int formal_charge = 0;
  // Only set for bracket atoms; unbracketed atoms take implicit hydrogens.
  std::optional<int> explicit_h;
  bool aromatic = false;
  int index = 0;
};

struct Bond {
  int begin = 0;
  int end = 0;
  BondOrder order = BondOrder::Single;
  bool in_ring = false;

  int other(int atom) const { return atom == begin ? end : begin; }
};

class ChemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SmilesError : public ChemError {
 public:
  enum class Kind { EmptyInput, UnbalancedParenthesis, UnclosedRing, UnknownElement, Syntax };

  SmilesError(Kind kind, std::size_t offset, const std::string& detail);

  Kind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

class ValenceError : public ChemError {
 public:
  ValenceError(int atom, const std::string& detail);
  int atom() const { return atom_; }

 private:
  int atom_;
};

class Molecule {
 public:
  struct Neighbor {
    int atom;
    int bond;
  };

  int add_atom(Atom atom);
  // Throws ChemError on self-loops, out-of-range endpoints or duplicate bonds.
  int add_bond(int a, int b, BondOrder order);

  const std::vector<Atom>& atoms() const { return atoms_; }
  const std::vector<Bond>& bonds() const { return bonds_; }
  const Atom& atom(int i) const { return atoms_[static_cast<std::size_t>(i)]; }
  const Bond& bond(int i) const { return bonds_[static_cast<std::size_t>(i)]; }
  std::span<const Neighbor> neighbors(int i) const { return adjacency_[static_cast<std::size_t>(i)]; }
  int num_atoms() const { return static_cast<int>(atoms_.size()); }
  int num_bonds() const { return static_cast<int>(bonds_.size()); }
  int degree(int i) const { return static_cast<int>(adjacency_[static_cast<std::size_t>(i)].size()); }
  std::optional<int> bond_between(int a, int b) const;
  bool atom_in_ring(int i) const;

  // Implicit hydrogens from default valences (B 3, C 4, N 3, O 2, P 3/5,
  // S 2/4/6, halogens 1). Zero for bracket atoms. Throws ValenceError when
  // the bond order sum exceeds the largest allowed valence.
  int implicit_hydrogens(int i) const;
  // Hydrogens atom i would carry if written without brackets; nullopt when
  // its bonds exceed every default valence.
  std::optional<int> default_hydrogens(int i) const;
  int total_hydrogens(int i) const;

  // Recomputes Bond::in_ring (a bond is in a ring iff it is not a bridge).
  void perceive_rings();

  // Atom i of the result is atom perm[i] of this molecule.
  Molecule permuted(std::span<const int> perm) const;

 private:
  std::vector<Atom> atoms_;
  std::vector<Bond> bonds_;
  std::vector<std::vector<Neighbor>> adjacency_;
};

// Lexical tokens recorded while parsing; the tokenizer builds on these.
enum class LexKind { Atom, Bond, RingClosure, BranchOpen, BranchClose, Dot };

struct LexToken {
  std::size_t begin = 0;
  std::size_t end = 0;
  LexKind kind = LexKind::Atom;
  std::vector<int> atoms;  // sorted atom indices covered by the token
};

struct ParsedSmiles {
  Molecule mol;
  std::vector<LexToken> tokens;
};

ParsedSmiles parse_smiles_traced(std::string_view text);
Molecule parse_smiles(std::string_view text);

// Canonical SMILES: equal for any atom ordering of the same connectivity.
std::string write_smiles(const Molecule& mol);
std::string canonical_key(const Molecule& mol);

// Canonical rank of every atom (a permutation of 0..n-1).
std::vector<int> canonical_ranks(const Molecule& mol);

struct Formula {
  std::array<int, kNumElementSlots> counts{};
  int charge = 0;

  int count(Element e) const { return counts[static_cast<std::size_t>(e)]; }
  int& count(Element e) { return counts[static_cast<std::size_t>(e)]; }
  bool empty() const;

  Formula& operator+=(const Formula& o);
  friend Formula operator+(Formula a, const Formula& b) { return a += b; }
  friend bool operator==(const Formula&, const Formula&) = default;

  // Hill notation; a nonzero charge is appended as "+", "-", "+2", ...
  std::string to_string() const;
  static Formula parse(std::string_view hill);
};

Formula molecular_formula(const Molecule& mol);
// Formula of the atom subset plus `extra_h` hydrogens.
Formula subset_formula(const Molecule& mol, std::span<const int> atoms, int extra_h);

enum class Adduct { None, Proton };
double monoisotopic_mass(const Formula& f, Adduct adduct = Adduct::None);

class Fingerprint {
 public:
  explicit Fingerprint(int nbits = 4096) : nbits_(nbits) {}
  // Sorts and deduplicates; throws ChemError on out-of-range indices.
  Fingerprint(int nbits, std::vector<int> bits);

  int nbits() const { return nbits_; }
  const std::vector<int>& bits() const { return bits_; }
  std::size_t count() const { return bits_.size(); }
  bool test(int bit) const;

  // Lowercase hex of the full bit vector; bit 0 is the most significant bit.
  std::string to_hex() const;
  static Fingerprint from_hex(std::string_view hex, int nbits = 4096);

  friend bool operator==(const Fingerprint&, const Fingerprint&) = default;

 private:
  int nbits_;
  std::vector<int> bits_;
};

Fingerprint morgan_fingerprint(const Molecule& mol, int radius = 2, int nbits = 4096);

// |a & b| / |a | b|; 0 when both are empty.
double tanimoto(const Fingerprint& a, const Fingerprint& b);

}  // namespace frigid::chem
