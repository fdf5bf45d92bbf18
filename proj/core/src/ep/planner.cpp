#include "preroute/ep/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "preroute/ep/hungarian.hpp"
#include "preroute/error.hpp"
#include "preroute/io/binary.hpp"

namespace preroute::ep {
namespace {

double dist2(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::size_t nearest(const Point& p, const std::vector<Point>& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = dist2(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<Point> kmeans_pp_init(const std::vector<Point>& points, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = points.size();
  std::vector<Point> centroids;
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  const std::size_t f = first(rng);
  centroids.push_back(points[f]);
  chosen[f] = true;
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = dist2(points[i], points[f]);
  while (centroids.size() < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        r -= d2[i];
        if (r <= 0.0) break;
      }
    } else {
      // Every remaining point duplicates a centroid.
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i]) pick = i;
    }
    chosen[pick] = true;
    centroids.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], dist2(points[i], points[pick]));
  }
  return centroids;
}

}  // namespace

std::vector<AffinityVector> affinity_vectors(std::span<const moe::RoutingDecision> per_sequence) {
  std::vector<AffinityVector> out;
  out.reserve(per_sequence.size());
  for (std::size_t s = 0; s < per_sequence.size(); ++s) {
    const auto& d = per_sequence[s];
    AffinityVector v;
    v.sequence = s;
    v.tokens = d.tokens();
    v.phi.assign(d.num_experts, 0.0);
    for (auto e : d.indices) v.phi[e] += 1.0;
    if (v.tokens > 0)
      for (double& x : v.phi) x /= static_cast<double>(v.tokens);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<AffinityVector> affinity_vectors(const cache::RouteCache& cache) {
  const auto& h = cache.header();
  if (h.sequence_length == 0) throw ConfigError("affinity_vectors: cache has no sequence length");
  std::vector<AffinityVector> out;
  out.reserve(cache.num_sequences());
  for (std::size_t s = 0; s < cache.num_sequences(); ++s) {
    AffinityVector v;
    v.sequence = s;
    v.tokens = h.sequence_length;
    v.phi.assign(h.num_experts, 0.0);
    for (std::uint64_t t = 0; t < h.sequence_length; ++t)
      for (auto e : cache.indices(s * h.sequence_length + t)) v.phi[e] += 1.0;
    for (double& x : v.phi) x /= static_cast<double>(v.tokens);
    out.push_back(std::move(v));
  }
  return out;
}

double entropy_bits(std::span<const double> phi) {
  const double total = std::accumulate(phi.begin(), phi.end(), 0.0);
  if (!(total > 0.0)) throw Error("entropy of an empty affinity vector");
  double h = 0.0;
  for (double x : phi) {
    if (x <= 0.0) continue;
    const double p = x / total;
    h -= p * std::log2(p);
  }
  return h;
}

double default_entropy_threshold(std::size_t num_experts) {
  if (num_experts == 128) return 6.85;
  return std::log2(static_cast<double>(num_experts)) - 0.15;
}

FilterResult entropy_filter(std::vector<AffinityVector> phi, double threshold_bits) {
  FilterResult r;
  for (auto& v : phi) {
    if (entropy_bits(v.phi) > threshold_bits) {
      r.discarded.push_back(v.sequence);
    } else {
      r.retained.push_back(std::move(v));
    }
  }
  return r;
}

Clustering cluster(const std::vector<Point>& points, std::size_t clusters, std::uint64_t seed, std::size_t init_clusters) {
  const std::size_t n = points.size();
  if (clusters == 0) throw ConfigError("cluster: need at least one cluster");
  if (n < clusters) throw ConfigError("cluster: " + std::to_string(n) + " points cannot form " + std::to_string(clusters) + " clusters");
  for (const auto& p : points)
    if (p.size() != points.front().size()) throw ShapeError("cluster: points of different dimension");
  std::mt19937_64 rng(seed);
  const std::size_t k = std::max(clusters, std::min(init_clusters, n));
  std::vector<Point> centroids = kmeans_pp_init(points, k, rng);

  std::vector<std::size_t> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = nearest(points[i], centroids);
      if (c != assign[i]) changed = true;
      assign[i] = c;
    }
    if (!changed) break;
    std::vector<Point> sums(k, Point(points.front().size(), 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t d = 0; d < points[i].size(); ++d) sums[assign[i]][d] += points[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (double& x : sums[c]) x /= static_cast<double>(counts[c]);
      centroids[c] = std::move(sums[c]);
    }
  }

  std::vector<double> mass(k, 0.0);
  for (auto a : assign) mass[a] += 1.0;
  // Live clusters: drop empty ones while more than `clusters` remain.
  std::vector<std::size_t> live;
  for (std::size_t c = 0; c < k; ++c) live.push_back(c);
  for (std::size_t c = k; c-- > 0 && live.size() > clusters;) {
    if (mass[c] == 0.0) live.erase(live.begin() + static_cast<std::ptrdiff_t>(c));
  }

  // Average linkage via Lance-Williams with mass weights.
  const std::size_t m = live.size();
  std::vector<double> d(m * m, 0.0);
  std::vector<double> w(m);
  for (std::size_t a = 0; a < m; ++a) w[a] = std::max(mass[live[a]], 1e-12);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) d[a * m + b] = std::sqrt(dist2(centroids[live[a]], centroids[live[b]]));
  std::vector<std::vector<std::size_t>> members(m);
  for (std::size_t a = 0; a < m; ++a) members[a] = {live[a]};
  std::vector<bool> alive(m, true);
  for (std::size_t remaining = m; remaining > clusters; --remaining) {
    std::size_t ba = 0, bb = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < m; ++a) {
      if (!alive[a]) continue;
      for (std::size_t b = a + 1; b < m; ++b) {
        if (alive[b] && d[a * m + b] < best) {
          best = d[a * m + b];
          ba = a;
          bb = b;
        }
      }
    }
    for (std::size_t c = 0; c < m; ++c) {
      if (!alive[c] || c == ba || c == bb) continue;
      const double merged = (w[ba] * d[ba * m + c] + w[bb] * d[bb * m + c]) / (w[ba] + w[bb]);
      d[ba * m + c] = d[c * m + ba] = merged;
    }
    w[ba] += w[bb];
    members[ba].insert(members[ba].end(), members[bb].begin(), members[bb].end());
    alive[bb] = false;
  }

  std::vector<std::size_t> final_of(k, 0);
  std::vector<std::size_t> groups;
  for (std::size_t a = 0; a < m; ++a)
    if (alive[a]) groups.push_back(a);
  std::vector<std::size_t> lowest(groups.size(), n);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto c : members[groups[g]]) final_of[c] = g;
  for (std::size_t i = 0; i < n; ++i) lowest[final_of[assign[i]]] = std::min(lowest[final_of[assign[i]]], i);
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return lowest[a] < lowest[b]; });
  std::vector<std::size_t> rank(groups.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r;

  Clustering out;
  const std::size_t dim = points.front().size();
  out.centroids.assign(groups.size(), Point(dim, 0.0));
  out.masses.assign(groups.size(), 0.0);
  out.membership.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t g = rank[final_of[assign[i]]];
    out.membership[i] = g;
    out.masses[g] += 1.0;
    for (std::size_t x = 0; x < dim; ++x) out.centroids[g][x] += points[i][x];
  }
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (out.masses[g] > 0)
      for (double& x : out.centroids[g]) x /= out.masses[g];
  return out;
}

double wcss(const std::vector<Point>& points, const std::vector<std::size_t>& membership, std::size_t clusters) {
  if (points.empty()) return 0.0;
  const std::size_t dim = points.front().size();
  std::vector<Point> mean(clusters, Point(dim, 0.0));
  std::vector<double> count(clusters, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    count[membership[i]] += 1.0;
    for (std::size_t x = 0; x < dim; ++x) mean[membership[i]][x] += points[i][x];
  }
  for (std::size_t c = 0; c < clusters; ++c)
    if (count[c] > 0)
      for (double& x : mean[c]) x /= count[c];
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) s += dist2(points[i], mean[membership[i]]);
  return s;
}

std::vector<std::size_t> partition_capacities(std::size_t num_experts, std::size_t partitions) {
  if (partitions == 0 || partitions > num_experts) {
    throw ConfigError("cannot split " + std::to_string(num_experts) + " experts over " + std::to_string(partitions) + " partitions");
  }
  std::vector<std::size_t> cap(partitions, num_experts / partitions);
  for (std::size_t p = 0; p < num_experts % partitions; ++p) ++cap[p];
  return cap;
}

std::vector<std::vector<std::uint32_t>> assign_experts(const std::vector<Point>& centroids, std::span<const double> masses,
                                                       std::size_t num_experts, std::size_t partitions) {
  const auto cap = partition_capacities(num_experts, partitions);
  if (centroids.size() != partitions || masses.size() != partitions) {
    throw ConfigError("assign_experts: need one centroid and mass per partition");
  }
  for (const auto& c : centroids)
    if (c.size() != num_experts) throw ShapeError("assign_experts: centroid dimension differs from expert count");
  std::vector<std::size_t> slot_owner;
  for (std::size_t p = 0; p < partitions; ++p) slot_owner.insert(slot_owner.end(), cap[p], p);
  const std::size_t n = num_experts;
  std::vector<double> cost(n * n);
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t s = 0; s < n; ++s) cost[e * n + s] = -masses[slot_owner[s]] * centroids[slot_owner[s]][e];
  const auto slot_of = hungarian_min(cost, n);
  std::vector<std::vector<std::uint32_t>> groups(partitions);
  for (std::size_t e = 0; e < n; ++e) groups[slot_owner[slot_of[e]]].push_back(static_cast<std::uint32_t>(e));
  return groups;
}

double assignment_score(const std::vector<Point>& centroids, std::span<const double> masses,
                        const std::vector<std::vector<std::uint32_t>>& groups) {
  double s = 0.0;
  for (std::size_t p = 0; p < groups.size(); ++p) {
    auto g = groups[p];
    std::sort(g.begin(), g.end());
    for (auto e : g) s += masses[p] * centroids[p][e];
  }
  return s;
}

std::vector<std::uint32_t> partition_of_expert(const std::vector<std::vector<std::uint32_t>>& groups, std::size_t num_experts) {
  std::vector<std::uint32_t> of(num_experts, static_cast<std::uint32_t>(-1));
  for (std::size_t p = 0; p < groups.size(); ++p) {
    for (auto e : groups[p]) {
      if (e >= num_experts || of[e] != static_cast<std::uint32_t>(-1)) throw ConfigError("expert groups do not partition the experts");
      of[e] = static_cast<std::uint32_t>(p);
    }
  }
  for (auto p : of)
    if (p == static_cast<std::uint32_t>(-1)) throw ConfigError("expert groups do not cover every expert");
  return of;
}

std::size_t place_sample(const moe::RoutingDecision& sequence, std::span<const std::uint32_t> partition_of, std::size_t partitions) {
  std::vector<std::uint64_t> overlap(partitions, 0);
  std::vector<std::size_t> seen(partitions, static_cast<std::size_t>(-1));
  const std::size_t k = sequence.k;
  for (std::size_t t = 0; t < sequence.tokens(); ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto p = partition_of[sequence.indices[t * k + j]];
      if (seen[p] != t) {
        seen[p] = t;
        ++overlap[p];
      }
    }
  }
  return static_cast<std::size_t>(std::max_element(overlap.begin(), overlap.end()) - overlap.begin());
}

std::uint64_t dispatch_messages(const moe::RoutingDecision& sequence, std::span<const std::uint32_t> partition_of) {
  std::uint64_t total = 0;
  const std::size_t k = sequence.k;
  std::vector<std::uint32_t> nodes;
  for (std::size_t t = 0; t < sequence.tokens(); ++t) {
    nodes.clear();
    for (std::size_t j = 0; j < k; ++j) nodes.push_back(partition_of[sequence.indices[t * k + j]]);
    std::sort(nodes.begin(), nodes.end());
    total += static_cast<std::uint64_t>(std::unique(nodes.begin(), nodes.end()) - nodes.begin());
  }
  return total;
}

std::uint64_t remote_messages(const moe::RoutingDecision& sequence, std::span<const std::uint32_t> partition_of, std::size_t p) {
  std::uint64_t total = 0;
  const std::size_t k = sequence.k;
  std::vector<std::uint32_t> nodes;
  for (std::size_t t = 0; t < sequence.tokens(); ++t) {
    nodes.clear();
    for (std::size_t j = 0; j < k; ++j) {
      const auto n = partition_of[sequence.indices[t * k + j]];
      if (n != p) nodes.push_back(n);
    }
    std::sort(nodes.begin(), nodes.end());
    total += static_cast<std::uint64_t>(std::unique(nodes.begin(), nodes.end()) - nodes.begin());
  }
  return total;
}

std::string to_string(Granularity g) { return g == Granularity::node ? "node" : "gpu"; }

Granularity parse_granularity(const std::string& text) {
  if (text == "node") return Granularity::node;
  if (text == "gpu") return Granularity::gpu;
  throw ConfigError("unknown granularity '" + text + "' (expected node or gpu)");
}

void PlacementPlan::validate() const {
  if (num_partitions == 0 || expert_groups.size() != num_partitions) throw FormatError("plan: partition count mismatch");
  partition_of_expert(expert_groups, num_experts);
  std::size_t lo = num_experts, hi = 0;
  for (const auto& g : expert_groups) {
    lo = std::min(lo, g.size());
    hi = std::max(hi, g.size());
  }
  if (hi - lo > 1) throw FormatError("plan: expert group sizes differ by more than one");
  for (auto p : assignment)
    if (p >= num_partitions) throw FormatError("plan: sequence assigned to partition " + std::to_string(p));
  if (gpus_per_node == 0) throw FormatError("plan: gpus_per_node must be positive");
}

std::vector<std::size_t> PlacementPlan::population() const {
  std::vector<std::size_t> pop(num_partitions, 0);
  for (auto p : assignment) ++pop[p];
  return pop;
}

std::vector<std::vector<std::uint32_t>> PlacementPlan::device_groups() const {
  if (granularity == Granularity::gpu) return expert_groups;
  std::vector<std::vector<std::uint32_t>> devices(num_partitions * gpus_per_node);
  for (std::size_t p = 0; p < num_partitions; ++p) {
    auto g = expert_groups[p];
    std::sort(g.begin(), g.end());
    for (std::size_t i = 0; i < g.size(); ++i) devices[p * gpus_per_node + i % gpus_per_node].push_back(g[i]);
  }
  return devices;
}

std::string PlacementPlan::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "preroute-plan";
  j["version"] = kVersion;
  j["num_experts"] = num_experts;
  j["num_partitions"] = num_partitions;
  j["granularity"] = to_string(granularity);
  j["gpus_per_node"] = gpus_per_node;
  j["entropy_threshold"] = entropy_threshold;
  j["retained"] = retained;
  j["filter_fallback"] = filter_fallback;
  j["expert_groups"] = expert_groups;
  if (granularity == Granularity::node) j["device_groups"] = device_groups();
  j["population"] = population();
  j["discarded"] = discarded;
  j["assignment"] = assignment;
  return j.dump(1);
}

PlacementPlan PlacementPlan::from_json(const std::string& text) {
  PlacementPlan p;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "preroute-plan") throw FormatError("not a placement plan");
    if (j.at("version").get<int>() != kVersion) throw FormatError("unsupported plan version");
    p.num_experts = j.at("num_experts").get<std::size_t>();
    p.num_partitions = j.at("num_partitions").get<std::size_t>();
    p.granularity = parse_granularity(j.at("granularity").get<std::string>());
    p.gpus_per_node = j.at("gpus_per_node").get<std::size_t>();
    p.entropy_threshold = j.at("entropy_threshold").get<double>();
    p.retained = j.at("retained").get<std::size_t>();
    p.filter_fallback = j.at("filter_fallback").get<bool>();
    p.expert_groups = j.at("expert_groups").get<std::vector<std::vector<std::uint32_t>>>();
    p.discarded = j.at("discarded").get<std::vector<std::size_t>>();
    p.assignment = j.at("assignment").get<std::vector<std::uint32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed plan: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed plan: ") + e.what());
  }
  p.validate();
  return p;
}

void PlacementPlan::save(const std::filesystem::path& path) const {
  const auto text = to_json();
  io::write_file(path, std::vector<unsigned char>(text.begin(), text.end()));
}

PlacementPlan PlacementPlan::load(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return from_json(std::string(bytes.begin(), bytes.end()));
}

PlacementPlan build_plan(const cache::RouteCache& cache, const PlanOptions& options) {
  const std::size_t e = cache.header().num_experts;
  partition_capacities(e, options.partitions);
  if (options.gpus_per_node == 0) throw ConfigError("gpus_per_node must be positive");
  PlacementPlan plan;
  plan.num_experts = e;
  plan.num_partitions = options.partitions;
  plan.granularity = options.granularity;
  plan.gpus_per_node = options.granularity == Granularity::node ? options.gpus_per_node : 1;
  plan.entropy_threshold = options.entropy_threshold.value_or(default_entropy_threshold(e));

  auto phi = affinity_vectors(cache);
  if (phi.size() < options.partitions) {
    throw ConfigError("build_plan: " + std::to_string(phi.size()) + " sequences cannot fill " + std::to_string(options.partitions) +
                      " partitions");
  }
  auto filtered = entropy_filter(phi, plan.entropy_threshold);
  plan.discarded = filtered.discarded;
  std::vector<AffinityVector>* basis = &filtered.retained;
  if (filtered.retained.size() < options.partitions) {
    plan.filter_fallback = true;
    basis = &phi;
  }
  plan.retained = filtered.retained.size();
  std::vector<Point> points;
  points.reserve(basis->size());
  for (const auto& v : *basis) points.push_back(v.phi);
  const auto cl = cluster(points, options.partitions, options.seed, options.init_clusters);
  plan.expert_groups = assign_experts(cl.centroids, cl.masses, e, options.partitions);

  const auto of = partition_of_expert(plan.expert_groups, e);
  plan.assignment.resize(cache.num_sequences());
  for (std::size_t s = 0; s < cache.num_sequences(); ++s) {
    const std::vector<std::size_t> ids{s};
    plan.assignment[s] = static_cast<std::uint32_t>(place_sample(cache.replay_sequences(ids, moe::Normalizer::softmax), of, options.partitions));
  }
  plan.validate();
  return plan;
}

}  // namespace preroute::ep
