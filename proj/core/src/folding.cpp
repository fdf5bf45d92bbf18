#include "preroute/folding.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "preroute/error.hpp"
#include "preroute/grouter/grouter.hpp"

namespace preroute::folding {

void AffinityMatrix::add(const moe::RoutingDecision& decision) {
  if (decision.num_experts != n_) {
    throw ConfigError("coactivation: decision has E=" + std::to_string(decision.num_experts) + ", matrix has " + std::to_string(n_));
  }
  const std::size_t k = decision.k;
  for (std::size_t t = 0; t < decision.tokens(); ++t) {
    const auto* idx = decision.indices.data() + t * k;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = a + 1; b < k; ++b) {
        if (idx[a] == idx[b]) continue;
        ++counts_[idx[a] * n_ + idx[b]];
        ++counts_[idx[b] * n_ + idx[a]];
      }
    }
  }
}

AffinityMatrix coactivation_matrix(std::span<const moe::RoutingDecision> decisions, std::size_t num_experts) {
  AffinityMatrix p(num_experts);
  for (const auto& d : decisions) p.add(d);
  return p;
}

std::vector<std::size_t> group_sizes(std::size_t source_experts, std::size_t target_experts) {
  if (target_experts == 0 || target_experts > source_experts) {
    throw ConfigError("cannot fold " + std::to_string(source_experts) + " experts into " + std::to_string(target_experts));
  }
  const std::size_t base = source_experts / target_experts;
  const std::size_t extra = source_experts % target_experts;
  std::vector<std::size_t> sizes(target_experts, base);
  for (std::size_t i = 0; i < extra; ++i) ++sizes[i];
  return sizes;
}

namespace {

void check_sizes(std::size_t n, const std::vector<std::size_t>& sizes) {
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != n) {
    throw ConfigError("group sizes do not add up to " + std::to_string(n) + " experts");
  }
  for (auto s : sizes)
    if (s == 0) throw ConfigError("group sizes must be positive");
}

}  // namespace

Groups greedy_merge(const AffinityMatrix& p, const std::vector<std::size_t>& sizes) {
  const std::size_t n = p.experts();
  check_sizes(n, sizes);
  std::vector<bool> assigned(n, false);
  Groups groups;
  for (const auto size : sizes) {
    std::vector<std::uint32_t> group;
    std::size_t seed = 0;
    while (assigned[seed]) ++seed;
    group.push_back(static_cast<std::uint32_t>(seed));
    assigned[seed] = true;
    // Running affinity of every expert to the current members.
    std::vector<std::uint64_t> affinity(n, 0);
    for (std::size_t j = 0; j < n; ++j) affinity[j] = p.at(seed, j);
    while (group.size() < size) {
      std::size_t best = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (assigned[j]) continue;
        if (best == n || affinity[j] > affinity[best]) best = j;
      }
      group.push_back(static_cast<std::uint32_t>(best));
      assigned[best] = true;
      for (std::size_t j = 0; j < n; ++j) affinity[j] += p.at(best, j);
    }
    groups.push_back(std::move(group));
  }
  return groups;
}

Groups load_balance_merge(std::span<const double> loads, const std::vector<std::size_t>& sizes) {
  const std::size_t n = loads.size();
  check_sizes(n, sizes);
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0U);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return loads[a] > loads[b]; });
  std::size_t hi = 0;
  std::size_t lo = n;
  Groups groups;
  for (const auto size : sizes) {
    std::vector<std::uint32_t> group;
    bool take_high = true;
    while (group.size() < size) {
      group.push_back(take_high ? order[hi++] : order[--lo]);
      take_high = !take_high;
    }
    groups.push_back(std::move(group));
  }
  return groups;
}

Groups random_merge(std::size_t source_experts, const std::vector<std::size_t>& sizes, std::uint64_t seed) {
  check_sizes(source_experts, sizes);
  std::vector<std::uint32_t> order(source_experts);
  std::iota(order.begin(), order.end(), 0U);
  std::mt19937_64 rng(seed);
  for (std::size_t i = source_experts; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  Groups groups;
  std::size_t at = 0;
  for (const auto size : sizes) {
    groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(at + size));
    at += size;
  }
  return groups;
}

std::vector<std::size_t> MappingMatrix::column_sums() const {
  std::vector<std::size_t> sums(target, 0);
  for (auto j : target_of) ++sums.at(j);
  return sums;
}

ad::Tensor MappingMatrix::dense() const {
  std::vector<double> v(source * target, 0.0);
  for (std::size_t i = 0; i < source; ++i) v[i * target + target_of[i]] = 1.0;
  return ad::Tensor({source, target}, std::move(v));
}

void MappingMatrix::validate() const {
  if (target_of.size() != source) throw FormatError("mapping has " + std::to_string(target_of.size()) + " rows, expected " + std::to_string(source));
  if (target == 0 || target > source) throw FormatError("mapping target count out of range");
  for (auto j : target_of)
    if (j >= target) throw FormatError("mapping column " + std::to_string(j) + " >= " + std::to_string(target));
  const std::size_t base = source / target;
  for (auto s : column_sums()) {
    if (s != base && s != base + 1) throw FormatError("mapping column sums are not balanced");
  }
}

MappingMatrix mapping_matrix(const Groups& groups, std::size_t source_experts) {
  MappingMatrix m;
  m.source = source_experts;
  m.target = groups.size();
  m.target_of.assign(source_experts, static_cast<std::uint32_t>(-1));
  for (std::size_t j = 0; j < groups.size(); ++j) {
    for (auto i : groups[j]) {
      if (i >= source_experts) throw ConfigError("group member " + std::to_string(i) + " out of range");
      if (m.target_of[i] != static_cast<std::uint32_t>(-1)) throw ConfigError("expert " + std::to_string(i) + " in two groups");
      m.target_of[i] = static_cast<std::uint32_t>(j);
    }
  }
  for (std::size_t i = 0; i < source_experts; ++i)
    if (m.target_of[i] == static_cast<std::uint32_t>(-1)) throw ConfigError("expert " + std::to_string(i) + " not in any group");
  return m;
}

ad::Tensor fold_weights(const ad::Tensor& w, const MappingMatrix& m) {
  if (w.rank() != 2 || w.dim(1) != m.source) {
    throw ShapeError("fold_weights: expected [d, " + std::to_string(m.source) + "], got " + ad::to_string(w.shape()));
  }
  const std::size_t d = w.dim(0);
  const auto x = w.data();
  std::vector<double> out(d * m.target, 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t i = 0; i < m.source; ++i) out[r * m.target + m.target_of[i]] += x[r * m.source + i];
  return ad::Tensor({d, m.target}, std::move(out));
}

grouter::Grouter fold_grouter(const grouter::Grouter& g, const MappingMatrix& m) {
  if (g.config().num_experts != m.source) {
    throw ConfigError("grouter has " + std::to_string(g.config().num_experts) + " outputs, mapping expects " + std::to_string(m.source));
  }
  return g.with_score_weights(fold_weights(g.params().at(grouter::Grouter::kScoreWeights), m));
}

void save_mapping(const MappingMatrix& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write mapping '" + path.string() + "'");
  out << "# source_expert target_expert\n";
  for (std::size_t i = 0; i < m.source; ++i) out << i << ' ' << m.target_of[i] << '\n';
}

MappingMatrix load_mapping(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read mapping '" + path.string() + "'");
  MappingMatrix m;
  std::string line;
  std::uint32_t max_target = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::size_t src = 0;
    std::uint32_t dst = 0;
    std::string rest;
    if (!(ss >> src >> dst) || (ss >> rest)) throw FormatError("malformed mapping line: " + line);
    if (src != m.target_of.size()) throw FormatError("mapping rows must list source experts in order, got " + std::to_string(src));
    m.target_of.push_back(dst);
    max_target = std::max(max_target, dst);
  }
  m.source = m.target_of.size();
  m.target = m.source == 0 ? 0 : max_target + 1;
  m.validate();
  return m;
}

}  // namespace preroute::folding
