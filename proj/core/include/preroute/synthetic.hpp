#pragma once

#include <cstdint>
#include <vector>

#include "preroute/corpus.hpp"

namespace preroute {

// Mixture of domain-specific Markov chains. Each domain owns a contiguous
// slice of the vocabulary that most of its transitions stay in, so token
// statistics (and therefore routing) cluster by domain.
struct SyntheticSpec {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 32;
  std::size_t num_sequences = 256;
  std::size_t num_domains = 4;
  std::size_t branching = 3;        // successors per token
  double in_domain = 0.85;          // probability a successor lies in the domain slice
  // Relative frequency of domain 0; the others have weight 1.
  double skew = 1.0;
  std::uint64_t structure_seed = 1;  // transition tables
  std::uint64_t sample_seed = 1;     // sequence sampling
};

Corpus generate_corpus(const SyntheticSpec& spec);

// Expected share of domain 0 under `spec`: skew / (skew + D - 1).
double domain0_share(const SyntheticSpec& spec);

}  // namespace preroute
