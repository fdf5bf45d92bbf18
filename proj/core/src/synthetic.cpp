#include "preroute/synthetic.hpp"

#include <random>

#include "preroute/error.hpp"

namespace preroute {
namespace {

struct Chain {
  std::vector<std::vector<std::uint32_t>> successors;  // per token
  std::vector<std::vector<double>> weights;
};

}  // namespace

double domain0_share(const SyntheticSpec& spec) {
  return spec.skew / (spec.skew + static_cast<double>(spec.num_domains) - 1.0);
}

Corpus generate_corpus(const SyntheticSpec& spec) {
  if (spec.num_domains == 0 || spec.vocab_size < spec.num_domains) throw ConfigError("synthetic corpus: need 1 <= domains <= vocab");
  if (spec.seq_len == 0 || spec.branching == 0) throw ConfigError("synthetic corpus: seq_len and branching must be positive");
  if (spec.vocab_size > 65536) throw ConfigError("synthetic corpus: vocab exceeds 16-bit token ids");
  if (!(spec.skew > 0.0)) throw ConfigError("synthetic corpus: skew must be positive");
  const std::size_t slice = spec.vocab_size / spec.num_domains;

  std::mt19937_64 srng(spec.structure_seed);
  std::vector<Chain> chains(spec.num_domains);
  for (std::size_t d = 0; d < spec.num_domains; ++d) {
    auto& c = chains[d];
    c.successors.resize(spec.vocab_size);
    c.weights.resize(spec.vocab_size);
    std::uniform_int_distribution<std::size_t> in_slice(d * slice, d * slice + slice - 1);
    std::uniform_int_distribution<std::size_t> any(0, spec.vocab_size - 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t t = 0; t < spec.vocab_size; ++t) {
      for (std::size_t b = 0; b < spec.branching; ++b) {
        const std::size_t next = u(srng) < spec.in_domain ? in_slice(srng) : any(srng);
        c.successors[t].push_back(static_cast<std::uint32_t>(next));
        c.weights[t].push_back(0.2 + u(srng));
      }
    }
  }

  std::vector<double> domain_weights(spec.num_domains, 1.0);
  domain_weights[0] = spec.skew;
  std::discrete_distribution<std::size_t> pick_domain(domain_weights.begin(), domain_weights.end());
  std::mt19937_64 rng(spec.sample_seed);
  Corpus corpus;
  corpus.vocab_size = spec.vocab_size;
  corpus.seq_len = spec.seq_len;
  for (std::size_t i = 0; i < spec.num_sequences; ++i) {
    const std::size_t d = pick_domain(rng);
    std::uniform_int_distribution<std::size_t> start(d * slice, d * slice + slice - 1);
    std::vector<std::uint32_t> seq(spec.seq_len);
    seq[0] = static_cast<std::uint32_t>(start(rng));
    for (std::size_t t = 1; t < spec.seq_len; ++t) {
      const auto& w = chains[d].weights[seq[t - 1]];
      std::discrete_distribution<std::size_t> step(w.begin(), w.end());
      seq[t] = chains[d].successors[seq[t - 1]][step(rng)];
    }
    corpus.sequences.push_back(std::move(seq));
    corpus.domains.push_back(static_cast<std::uint16_t>(d));
  }
  return corpus;
}

}  // namespace preroute
