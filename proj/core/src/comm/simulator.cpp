#include "preroute/comm/simulator.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "preroute/error.hpp"

namespace preroute::comm {
namespace {

double ratio(std::uint64_t a, std::uint64_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

}  // namespace

double CommReport::remote_fraction() const { return ratio(total_remote, dispatch); }
double CommReport::random_remote_fraction() const { return ratio(random_remote, dispatch); }
double CommReport::round_robin_remote_fraction() const { return ratio(round_robin_remote, dispatch); }
double CommReport::savings_vs_random() const { return random_remote == 0 ? 0.0 : 1.0 - ratio(total_remote, random_remote); }
double CommReport::savings_vs_round_robin() const {
  return round_robin_remote == 0 ? 0.0 : 1.0 - ratio(total_remote, round_robin_remote);
}
double CommReport::fraction_saved_vs_random() const { return random_remote_fraction() - remote_fraction(); }

std::string CommReport::to_json() const {
  nlohmann::ordered_json j;
  j["num_partitions"] = num_partitions;
  j["payload_bytes"] = payload_bytes;
  j["tokens"] = tokens;
  j["dispatch_messages"] = dispatch;
  j["per_partition_remote"] = per_partition_remote;
  j["total_remote"] = total_remote;
  j["bytes"] = bytes;
  j["remote_fraction"] = remote_fraction();
  j["baselines"] = {{"random", {{"remote", random_remote}, {"remote_fraction", random_remote_fraction()}, {"expected_remote", expected_random_remote}}},
                    {"round_robin", {{"remote", round_robin_remote}, {"remote_fraction", round_robin_remote_fraction()}}}};
  j["savings_vs_random"] = savings_vs_random();
  j["savings_vs_round_robin"] = savings_vs_round_robin();
  j["fraction_saved_vs_random"] = fraction_saved_vs_random();
  return j.dump(1);
}

std::string CommReport::csv_header() {
  return "label,partitions,tokens,dispatch,remote,random_remote,round_robin_remote,bytes,remote_fraction,"
         "random_remote_fraction,savings_vs_random,savings_vs_round_robin,fraction_saved_vs_random";
}

std::string CommReport::csv_row(const std::string& label) const {
  std::ostringstream out;
  out.precision(10);
  out << label << ',' << num_partitions << ',' << tokens << ',' << dispatch << ',' << total_remote << ',' << random_remote << ','
      << round_robin_remote << ',' << bytes << ',' << remote_fraction() << ',' << random_remote_fraction() << ','
      << savings_vs_random() << ',' << savings_vs_round_robin() << ',' << fraction_saved_vs_random();
  return out.str();
}

CommReport simulate(const cache::RouteCache& cache, const ep::PlacementPlan& plan, std::size_t payload_bytes, std::uint64_t seed) {
  plan.validate();
  if (plan.num_experts != cache.header().num_experts) throw ConfigError("simulate: plan and cache disagree on the expert count");
  const std::size_t n = cache.num_sequences();
  if (plan.assignment.size() != n) {
    throw ConfigError("simulate: plan places " + std::to_string(plan.assignment.size()) + " sequences, cache has " + std::to_string(n));
  }
  const auto of = ep::partition_of_expert(plan.expert_groups, plan.num_experts);
  const std::size_t np = plan.num_partitions;
  CommReport r;
  r.num_partitions = np;
  r.payload_bytes = payload_bytes;
  r.per_partition_remote.assign(np, 0);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, np - 1);
  for (std::size_t s = 0; s < n; ++s) {
    const std::vector<std::size_t> ids{s};
    const auto d = cache.replay_sequences(ids, moe::Normalizer::softmax);
    r.tokens += d.tokens();
    r.dispatch += ep::dispatch_messages(d, of);
    const std::size_t p = plan.assignment[s];
    const auto remote = ep::remote_messages(d, of, p);
    r.per_partition_remote[p] += remote;
    r.total_remote += remote;
    r.random_remote += ep::remote_messages(d, of, pick(rng));
    r.round_robin_remote += ep::remote_messages(d, of, s % np);
    for (std::size_t q = 0; q < np; ++q) r.expected_random_remote += static_cast<double>(ep::remote_messages(d, of, q)) / static_cast<double>(np);
  }
  r.bytes = r.total_remote * payload_bytes;
  return r;
}

cache::RouteCache synth_trace(const TraceSpec& spec) {
  if (spec.domains == 0 || spec.experts % spec.domains != 0) throw ConfigError("synth_trace: experts must split evenly over domains");
  const std::size_t block = spec.experts / spec.domains;
  if (spec.k == 0 || spec.k > block) throw ConfigError("synth_trace: k must fit inside a domain's expert block");
  if (spec.skew < 0.0 || spec.skew > 1.0) throw ConfigError("synth_trace: skew must lie in [0, 1]");
  if (spec.tokens == 0) throw ConfigError("synth_trace: tokens per sequence must be positive");
  cache::RouteCache c(static_cast<std::uint32_t>(spec.experts), static_cast<std::uint8_t>(spec.k), static_cast<std::uint32_t>(spec.tokens));
  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution local(spec.skew);
  std::vector<std::uint32_t> pool;
  for (std::size_t s = 0; s < spec.sequences; ++s) {
    const std::size_t domain = s % spec.domains;
    moe::RoutingDecision d;
    d.num_experts = spec.experts;
    d.k = spec.k;
    d.weights.assign(spec.tokens * spec.k, 1.0 / static_cast<double>(spec.k));
    for (std::size_t t = 0; t < spec.tokens; ++t) {
      const bool in_block = local(rng);
      const std::size_t base = in_block ? domain * block : 0;
      const std::size_t width = in_block ? block : spec.experts;
      pool.resize(width);
      std::iota(pool.begin(), pool.end(), static_cast<std::uint32_t>(base));
      for (std::size_t j = 0; j < spec.k; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, width - 1);
        std::swap(pool[j], pool[pick(rng)]);
      }
      std::sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.k));
      d.indices.insert(d.indices.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.k));
    }
    c.append(d, std::vector<double>(d.indices.size(), 0.0));
  }
  return c;
}

}  // namespace preroute::comm
