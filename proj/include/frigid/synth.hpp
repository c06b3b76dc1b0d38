#pragma once

// Random drug-like small molecules assembled from ring cores and
// substituents. Used for corpora, benchmarks and property tests.

#include <cstdint>
#include <string>
#include <vector>

#include "frigid/chemgraph.hpp"
#include "frigid/rng.hpp"

namespace frigid::synth {

struct GeneratorOptions {
  int min_substituents = 1;
  int max_substituents = 3;
  int max_heavy_atoms = 22;
};

class MoleculeGenerator {
 public:
  explicit MoleculeGenerator(std::uint64_t seed, GeneratorOptions opts = {});

  chem::Molecule next_molecule();
  // Canonical SMILES of next_molecule().
  std::string next();

 private:
  Rng rng_;
  GeneratorOptions opts_;
};

// `n` distinct canonical SMILES, in generation order.
std::vector<std::string> generate_corpus(std::size_t n, std::uint64_t seed, GeneratorOptions opts = {});

}  // namespace frigid::synth
