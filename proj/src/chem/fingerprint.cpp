#include <algorithm>
#include <map>

#include "frigid/chemgraph.hpp"

namespace frigid::chem {

namespace {

constexpr std::uint64_t kHashSeed = 0x5f7a3c1d9e2b4806ULL;

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t combine(std::uint64_t h, std::uint64_t v) { return mix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2))); }

using BondSet = std::vector<std::uint64_t>;

void set_bit(BondSet& s, int i) { s[static_cast<std::size_t>(i) / 64] |= 1ULL << (static_cast<unsigned>(i) % 64); }

void merge_into(BondSet& dst, const BondSet& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] |= src[i];
}

}  // namespace

Fingerprint::Fingerprint(int nbits, std::vector<int> bits) : nbits_(nbits), bits_(std::move(bits)) {
  std::sort(bits_.begin(), bits_.end());
  bits_.erase(std::unique(bits_.begin(), bits_.end()), bits_.end());
  if (!bits_.empty() && (bits_.front() < 0 || bits_.back() >= nbits_)) throw ChemError("fingerprint bit out of range");
}

bool Fingerprint::test(int bit) const { return std::binary_search(bits_.begin(), bits_.end(), bit); }

std::string Fingerprint::to_hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(static_cast<std::size_t>((nbits_ + 3) / 4), '0');
  for (int b : bits_) {
    auto& c = out[static_cast<std::size_t>(b / 4)];
    int nibble = static_cast<int>(std::string_view(kDigits).find(c));
    nibble |= 8 >> (b % 4);
    c = kDigits[nibble];
  }
  return out;
}

Fingerprint Fingerprint::from_hex(std::string_view hex, int nbits) {
  if (static_cast<int>(hex.size()) * 4 < nbits) throw ChemError("fingerprint hex too short");
  std::vector<int> bits;
  for (std::size_t i = 0; i < hex.size(); ++i) {
    const char c = hex[i];
    int v;
    if (c >= '0' && c <= '9') {
      v = c - '0';
    } else if (c >= 'a' && c <= 'f') {
      v = c - 'a' + 10;
    } else if (c >= 'A' && c <= 'F') {
      v = c - 'A' + 10;
    } else {
      throw ChemError("invalid hex digit in fingerprint");
    }
    for (int k = 0; k < 4; ++k) {
      if (v & (8 >> k)) bits.push_back(static_cast<int>(i) * 4 + k);
    }
  }
  return Fingerprint(nbits, std::move(bits));
}

Fingerprint morgan_fingerprint(const Molecule& mol, int radius, int nbits) {
  const int n = mol.num_atoms();
  const std::size_t words = static_cast<std::size_t>(mol.num_bonds() + 63) / 64 + 1;
  std::vector<std::uint64_t> inv(static_cast<std::size_t>(n));
  std::vector<int> bits;
  for (int a = 0; a < n; ++a) {
    const Atom& at = mol.atom(a);
    int h;
    try {
      h = mol.total_hydrogens(a);
    } catch (const ValenceError&) {
      h = -1;
    }
    std::uint64_t x = kHashSeed;
    x = combine(x, static_cast<std::uint64_t>(atomic_number(at.element)));
    x = combine(x, static_cast<std::uint64_t>(mol.degree(a)));
    x = combine(x, static_cast<std::uint64_t>(static_cast<std::int64_t>(at.formal_charge)));
    x = combine(x, static_cast<std::uint64_t>(static_cast<std::int64_t>(h)));
    x = combine(x, mol.atom_in_ring(a) ? 1U : 0U);
    inv[a] = x;
    bits.push_back(static_cast<int>(x % static_cast<std::uint64_t>(nbits)));
  }

  // An environment is emitted once per distinct bond set; atoms whose
  // environment repeats an earlier one stop contributing.
  std::vector<BondSet> env(static_cast<std::size_t>(n), BondSet(words, 0));
  std::vector<bool> dead(static_cast<std::size_t>(n), false);
  std::vector<BondSet> seen;
  for (int r = 1; r <= radius; ++r) {
    std::vector<std::uint64_t> next(static_cast<std::size_t>(n));
    std::vector<BondSet> next_env = env;
    for (int a = 0; a < n; ++a) {
      std::vector<std::pair<std::uint64_t, std::uint64_t>> pairs;
      for (const auto& nb : mol.neighbors(a)) {
        pairs.emplace_back(static_cast<std::uint64_t>(mol.bond(nb.bond).order), inv[nb.atom]);
        set_bit(next_env[a], nb.bond);
        merge_into(next_env[a], env[nb.atom]);
      }
      std::sort(pairs.begin(), pairs.end());
      std::uint64_t x = combine(kHashSeed, static_cast<std::uint64_t>(r));
      x = combine(x, inv[a]);
      for (const auto& [order, v] : pairs) {
        x = combine(x, order);
        x = combine(x, v);
      }
      next[a] = x;
    }
    // Within a round, equal environments keep the smallest invariant.
    std::map<BondSet, std::uint64_t> round;
    for (int a = 0; a < n; ++a) {
      if (dead[a]) continue;
      if (std::find(seen.begin(), seen.end(), next_env[a]) != seen.end()) {
        dead[a] = true;
        continue;
      }
      auto [it, inserted] = round.emplace(next_env[a], next[a]);
      if (!inserted) it->second = std::min(it->second, next[a]);
    }
    for (const auto& [e, x] : round) {
      seen.push_back(e);
      bits.push_back(static_cast<int>(x % static_cast<std::uint64_t>(nbits)));
    }
    inv = std::move(next);
    env = std::move(next_env);
  }
  return Fingerprint(nbits, std::move(bits));
}

double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  const auto& x = a.bits();
  const auto& y = b.bits();
  std::size_t i = 0, j = 0, inter = 0;
  while (i < x.size() && j < y.size()) {
    if (x[i] == y[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (x[i] < y[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = x.size() + y.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace frigid::chem
