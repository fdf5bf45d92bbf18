#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "preroute/cache/route_cache.hpp"
#include "preroute/ep/planner.hpp"

namespace preroute::comm {

// Remote dispatch volume of a placement. A token placed on partition p sends
// one message to every other partition holding one of its experts.
struct CommReport {
  std::size_t num_partitions = 0;
  std::size_t payload_bytes = 0;
  std::uint64_t tokens = 0;
  std::uint64_t dispatch = 0;  // sum_t |N(t)|, placement independent
  std::vector<std::uint64_t> per_partition_remote;
  std::uint64_t total_remote = 0;
  std::uint64_t bytes = 0;
  std::uint64_t random_remote = 0;
  std::uint64_t round_robin_remote = 0;
  // Exact mean over uniformly random placement of every sequence.
  double expected_random_remote = 0.0;

  double remote_fraction() const;              // total_remote / dispatch
  double random_remote_fraction() const;
  double round_robin_remote_fraction() const;
  // 1 - optimized / baseline (0 when the baseline sends nothing).
  double savings_vs_random() const;
  double savings_vs_round_robin() const;
  // Share of all dispatch messages that stop being remote relative to random
  // placement: random_remote_fraction - remote_fraction.
  double fraction_saved_vs_random() const;

  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

// Same expert groups as `plan`; sequences placed by the plan, uniformly at
// random (seeded) and round-robin.
CommReport simulate(const cache::RouteCache& cache, const ep::PlacementPlan& plan, std::size_t payload_bytes, std::uint64_t seed);

struct TraceSpec {
  std::size_t domains = 4;
  // Probability that a token draws its k experts from its domain's disjoint
  // expert block; otherwise k distinct experts uniformly from all E.
  double skew = 1.0;
  std::size_t sequences = 64;
  std::size_t tokens = 64;  // per sequence
  std::size_t experts = 16;
  std::size_t k = 2;
  std::uint64_t seed = 0;
};

// Synthetic routing cache with domain-clustered traces. Sequence s belongs to
// domain s mod D; stored logits are 0.
cache::RouteCache synth_trace(const TraceSpec& spec);

}  // namespace preroute::comm
