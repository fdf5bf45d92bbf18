#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "preroute/autodiff/tensor.hpp"
#include "preroute/moe/config.hpp"

namespace preroute::moe {

// Per-token top-k selection: k ascending expert indices and k gating weights.
struct RoutingDecision {
  std::size_t num_experts = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;  // tokens x k
  std::vector<double> weights;         // tokens x k

  std::size_t tokens() const { return k == 0 ? 0 : indices.size() / k; }
  std::span<const std::uint32_t> experts_of(std::size_t token) const {
    return std::span<const std::uint32_t>(indices).subspan(token * k, k);
  }
  std::span<const double> weights_of(std::size_t token) const {
    return std::span<const double>(weights).subspan(token * k, k);
  }
  // Throws when an index is out of range, duplicated within a token, or
  // when a weight is negative.
  void validate() const;
  // Concatenates decisions token-wise; all parts must share E and k.
  static RoutingDecision concat(const std::vector<RoutingDecision>& parts);
  bool operator==(const RoutingDecision&) const = default;
};

// Applies the normalizer to k selected logits.
void normalize_gates(std::span<const double> selected_logits, Normalizer normalizer, std::span<double> out);

// Top-k routing of `scores` (tokens x E, row-major). Ties go to the lower
// index; weights come from the normalizer over the selected logits only.
// Throws NonFiniteError on a non-finite logit.
RoutingDecision route(std::span<const double> scores, std::size_t num_experts, std::size_t k, Normalizer normalizer);
RoutingDecision route(const ad::Tensor& scores, std::size_t k, Normalizer normalizer);

// Per-expert token counts.
class ExpertLoad {
 public:
  ExpertLoad() = default;
  ExpertLoad(std::size_t num_experts, std::size_t k) : counts_(num_experts, 0), k_(k) {}
  explicit ExpertLoad(std::vector<std::uint64_t> counts, std::size_t k = 1);

  void add(const RoutingDecision& decision);
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  std::uint64_t tokens_processed() const { return tokens_; }
  std::uint64_t total() const;
  double mean() const;

 private:
  std::vector<std::uint64_t> counts_;
  std::size_t k_ = 1;
  std::uint64_t tokens_ = 0;
};

// (max load - mean load) / mean load. Throws Error when the mean is 0.
double maxvio_global(const ExpertLoad& load);

// coeff * E * sum_i f_i * p_i where f_i is the fraction of (token, slot)
// pairs routed to expert i and p_i the mean softmax router probability.
// Differentiable through `scores` (tokens x E).
ad::Tensor aux_loss(const RoutingDecision& decision, const ad::Tensor& scores, double coeff);

// coeff * mean_t (logsumexp_j s_tj)^2.
ad::Tensor z_loss(const ad::Tensor& scores, double coeff);

// Greedy balanced token->expert table: tokens by descending frequency (ties
// to the lower id) go to the currently least-loaded expert (ties to the
// lower expert id), where load is assigned frequency mass.
std::vector<std::uint32_t> hash_layer_table(std::span<const double> token_freqs, std::size_t num_experts);

// Routing from a hash table: slot j of token t uses expert
// (table[t] + j) mod E, with uniform weights 1/k.
RoutingDecision hash_route(std::span<const std::uint32_t> tokens, std::span<const std::uint32_t> table,
                           std::size_t num_experts, std::size_t k);

}  // namespace preroute::moe
