#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "preroute/autodiff/tensor.hpp"
#include "preroute/moe/routing.hpp"

namespace preroute::grouter {
class Grouter;
}

namespace preroute::folding {

// Symmetric co-activation counts with a zero diagonal.
class AffinityMatrix {
 public:
  AffinityMatrix() = default;
  explicit AffinityMatrix(std::size_t experts) : n_(experts), counts_(experts * experts, 0) {}

  std::size_t experts() const { return n_; }
  std::uint64_t at(std::size_t i, std::size_t j) const { return counts_[i * n_ + j]; }
  // Counts every unordered pair of experts in each token's selection.
  void add(const moe::RoutingDecision& decision);
  bool operator==(const AffinityMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
};

AffinityMatrix coactivation_matrix(std::span<const moe::RoutingDecision> decisions, std::size_t num_experts);

// E_S mod E_T groups of size floor(E_S/E_T)+1 first, then the rest.
std::vector<std::size_t> group_sizes(std::size_t source_experts, std::size_t target_experts);

using Groups = std::vector<std::vector<std::uint32_t>>;

// Sequential greedy affinity merge. Members are listed in the order they
// joined the group.
Groups greedy_merge(const AffinityMatrix& p, const std::vector<std::size_t>& sizes);

// Baselines: pair the highest-load unassigned expert with the lowest-load one
// while filling each group, and a seeded random partition.
Groups load_balance_merge(std::span<const double> loads, const std::vector<std::size_t>& sizes);
Groups random_merge(std::size_t source_experts, const std::vector<std::size_t>& sizes, std::uint64_t seed);

// Binary E_S x E_T mapping stored as the target column of each source row.
struct MappingMatrix {
  std::size_t source = 0;
  std::size_t target = 0;
  std::vector<std::uint32_t> target_of;

  std::uint8_t at(std::size_t i, std::size_t j) const { return target_of[i] == j ? 1 : 0; }
  std::vector<std::size_t> column_sums() const;
  ad::Tensor dense() const;
  // Row sums are 1 by construction; checks ranges and column balance.
  void validate() const;
  bool operator==(const MappingMatrix&) const = default;
};

MappingMatrix mapping_matrix(const Groups& groups, std::size_t source_experts);

// W_s [d, E_S] times M: column j is the sum of the source columns mapped to j,
// added in increasing source index.
ad::Tensor fold_weights(const ad::Tensor& w, const MappingMatrix& m);

grouter::Grouter fold_grouter(const grouter::Grouter& g, const MappingMatrix& m);

// Two-column text file, one "source_expert target_expert" pair per line.
void save_mapping(const MappingMatrix& m, const std::filesystem::path& path);
MappingMatrix load_mapping(const std::filesystem::path& path);

}  // namespace preroute::folding
