#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "preroute/cache/route_cache.hpp"
#include "preroute/moe/routing.hpp"

namespace preroute::ep {

struct AffinityVector {
  std::size_t sequence = 0;
  std::size_t tokens = 0;
  std::vector<double> phi;  // E entries, sum k
};

// One vector per sequence: phi_e = (# tokens selecting e) / |X|.
std::vector<AffinityVector> affinity_vectors(const cache::RouteCache& cache);
std::vector<AffinityVector> affinity_vectors(std::span<const moe::RoutingDecision> per_sequence);

// Shannon entropy in bits of phi normalised to sum 1.
double entropy_bits(std::span<const double> phi);
// 6.85 for 128 experts, log2(E) - 0.15 otherwise.
double default_entropy_threshold(std::size_t num_experts);

struct FilterResult {
  std::vector<AffinityVector> retained;
  std::vector<std::size_t> discarded;  // sequence ids
};

// Discards vectors whose entropy exceeds the threshold.
FilterResult entropy_filter(std::vector<AffinityVector> phi, double threshold_bits);

using Point = std::vector<double>;

struct Clustering {
  std::vector<Point> centroids;
  std::vector<double> masses;           // points per cluster
  std::vector<std::size_t> membership;  // point -> cluster
};

// Seeded k-means++ (plus Lloyd refinement) to min(init_clusters, |points|)
// clusters, then mass-weighted average-linkage merging down to `clusters`.
// Final clusters are ordered by their lowest member point.
Clustering cluster(const std::vector<Point>& points, std::size_t clusters, std::uint64_t seed, std::size_t init_clusters = 100);

double wcss(const std::vector<Point>& points, const std::vector<std::size_t>& membership, std::size_t clusters);

// Capacity of partition p: floor(E/N) plus one for the first E mod N.
std::vector<std::size_t> partition_capacities(std::size_t num_experts, std::size_t partitions);

// Expert groups maximising sum_p sum_{e in group p} mass_p * centroid_p[e]
// under the capacities, via optimal matching on an expert x slot matrix.
// Cluster p is served by partition p.
std::vector<std::vector<std::uint32_t>> assign_experts(const std::vector<Point>& centroids, std::span<const double> masses,
                                                       std::size_t num_experts, std::size_t partitions);

// Objective value of a grouping, summed in expert order per partition.
double assignment_score(const std::vector<Point>& centroids, std::span<const double> masses,
                        const std::vector<std::vector<std::uint32_t>>& groups);

// Expert -> partition lookup.
std::vector<std::uint32_t> partition_of_expert(const std::vector<std::vector<std::uint32_t>>& groups, std::size_t num_experts);

// argmax_n |T_s(n)|, ties to the lowest partition.
std::size_t place_sample(const moe::RoutingDecision& sequence, std::span<const std::uint32_t> partition_of, std::size_t partitions);

// sum_t |N(t) \ {p}|.
std::uint64_t remote_messages(const moe::RoutingDecision& sequence, std::span<const std::uint32_t> partition_of, std::size_t p);
// sum_t |N(t)|.
std::uint64_t dispatch_messages(const moe::RoutingDecision& sequence, std::span<const std::uint32_t> partition_of);

enum class Granularity { node, gpu };
std::string to_string(Granularity g);
Granularity parse_granularity(const std::string& text);

struct PlacementPlan {
  static constexpr int kVersion = 1;

  std::size_t num_experts = 0;
  std::size_t num_partitions = 0;
  Granularity granularity = Granularity::gpu;
  std::size_t gpus_per_node = 1;
  std::vector<std::vector<std::uint32_t>> expert_groups;
  std::vector<std::uint32_t> assignment;  // sequence -> partition
  double entropy_threshold = 0.0;
  std::size_t retained = 0;
  std::vector<std::size_t> discarded;
  bool filter_fallback = false;

  void validate() const;
  std::vector<std::size_t> population() const;
  // Node granularity: experts of each node spread round-robin over its GPUs.
  std::vector<std::vector<std::uint32_t>> device_groups() const;

  std::string to_json() const;
  static PlacementPlan from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static PlacementPlan load(const std::filesystem::path& path);

  bool operator==(const PlacementPlan&) const = default;
};

struct PlanOptions {
  std::size_t partitions = 4;
  Granularity granularity = Granularity::gpu;
  std::size_t gpus_per_node = 1;
  std::optional<double> entropy_threshold;
  std::uint64_t seed = 0;
  std::size_t init_clusters = 100;
};

// affinity -> entropy filter -> cluster -> assign experts -> place every
// sequence. If fewer than N_p sequences survive the filter, all sequences
// are clustered and filter_fallback is set.
PlacementPlan build_plan(const cache::RouteCache& cache, const PlanOptions& options);

}  // namespace preroute::ep
