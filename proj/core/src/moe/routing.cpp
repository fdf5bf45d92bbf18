#include "preroute/moe/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "preroute/autodiff/ops.hpp"
#include "preroute/error.hpp"

namespace preroute::moe {

void RoutingDecision::validate() const {
  if (k == 0 || indices.size() % k != 0 || weights.size() != indices.size()) {
    throw Error("routing decision has inconsistent sizes");
  }
  for (std::size_t t = 0; t < tokens(); ++t) {
    auto ex = experts_of(t);
    for (std::size_t j = 0; j < k; ++j) {
      if (ex[j] >= num_experts) {
        throw Error("token " + std::to_string(t) + " routed to expert " + std::to_string(ex[j]) + " >= E=" + std::to_string(num_experts));
      }
      for (std::size_t i = 0; i < j; ++i)
        if (ex[i] == ex[j]) throw Error("token " + std::to_string(t) + " selects expert " + std::to_string(ex[j]) + " twice");
      if (!(weights[t * k + j] >= 0.0)) throw Error("negative gating weight for token " + std::to_string(t));
    }
  }
}

RoutingDecision RoutingDecision::concat(const std::vector<RoutingDecision>& parts) {
  RoutingDecision out;
  if (parts.empty()) return out;
  out.num_experts = parts.front().num_experts;
  out.k = parts.front().k;
  for (const auto& p : parts) {
    if (p.num_experts != out.num_experts || p.k != out.k) throw Error("cannot concatenate decisions with different E or k");
    out.indices.insert(out.indices.end(), p.indices.begin(), p.indices.end());
    out.weights.insert(out.weights.end(), p.weights.begin(), p.weights.end());
  }
  return out;
}

void normalize_gates(std::span<const double> selected, Normalizer normalizer, std::span<double> out) {
  if (normalizer == Normalizer::sigmoid) {
    for (std::size_t j = 0; j < selected.size(); ++j) out[j] = 1.0 / (1.0 + std::exp(-selected[j]));
    return;
  }
  const double mx = *std::max_element(selected.begin(), selected.end());
  double s = 0.0;
  for (std::size_t j = 0; j < selected.size(); ++j) s += (out[j] = std::exp(selected[j] - mx));
  for (std::size_t j = 0; j < selected.size(); ++j) out[j] /= s;
}

RoutingDecision route(std::span<const double> scores, std::size_t num_experts, std::size_t k, Normalizer normalizer) {
  if (num_experts == 0 || k == 0 || k > num_experts) {
    throw ConfigError("route: k=" + std::to_string(k) + " invalid for E=" + std::to_string(num_experts));
  }
  if (scores.size() % num_experts != 0) throw ShapeError("route: score buffer is not a multiple of E");
  const std::size_t n = scores.size() / num_experts;
  RoutingDecision d;
  d.num_experts = num_experts;
  d.k = k;
  d.indices.resize(n * k);
  d.weights.resize(n * k);
  std::vector<std::uint32_t> order(num_experts);
  std::vector<double> selected(k);
  for (std::size_t t = 0; t < n; ++t) {
    const double* s = scores.data() + t * num_experts;
    for (std::size_t e = 0; e < num_experts; ++e) {
      if (!std::isfinite(s[e])) {
        throw NonFiniteError("route: non-finite logit for token " + std::to_string(t) + ", expert " + std::to_string(e));
      }
    }
    std::iota(order.begin(), order.end(), 0U);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [s](std::uint32_t a, std::uint32_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t j = 0; j < k; ++j) {
      d.indices[t * k + j] = order[j];
      selected[j] = s[order[j]];
    }
    normalize_gates(selected, normalizer, std::span<double>(d.weights).subspan(t * k, k));
  }
  return d;
}

RoutingDecision route(const ad::Tensor& scores, std::size_t k, Normalizer normalizer) {
  if (scores.rank() == 0) throw ShapeError("route: scores must have an expert dimension");
  return route(scores.data(), scores.shape().back(), k, normalizer);
}

ExpertLoad::ExpertLoad(std::vector<std::uint64_t> counts, std::size_t k) : counts_(std::move(counts)), k_(k) {
  tokens_ = k_ == 0 ? 0 : total() / k_;
}

void ExpertLoad::add(const RoutingDecision& decision) {
  if (decision.num_experts != counts_.size() || decision.k != k_) throw Error("ExpertLoad: decision shape mismatch");
  for (auto e : decision.indices) ++counts_[e];
  tokens_ += decision.tokens();
}

std::uint64_t ExpertLoad::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

double ExpertLoad::mean() const {
  return counts_.empty() ? 0.0 : static_cast<double>(total()) / static_cast<double>(counts_.size());
}

double maxvio_global(const ExpertLoad& load) {
  const double avg = load.mean();
  if (avg == 0.0) throw Error("maxvio_global: mean expert load is zero");
  const auto mx = *std::max_element(load.counts().begin(), load.counts().end());
  return (static_cast<double>(mx) - avg) / avg;
}

ad::Tensor aux_loss(const RoutingDecision& decision, const ad::Tensor& scores, double coeff) {
  const std::size_t n = decision.tokens();
  if (n == 0) throw Error("aux_loss: empty batch");
  const std::size_t e = decision.num_experts;
  if (scores.rank() != 2 || scores.dim(0) != n || scores.dim(1) != e) {
    throw ShapeError("aux_loss: scores " + ad::to_string(scores.shape()) + " do not match " + std::to_string(n) + " tokens x " +
                     std::to_string(e) + " experts");
  }
  std::vector<double> f(e, 0.0);
  for (auto idx : decision.indices) f[idx] += 1.0;
  for (auto& v : f) v /= static_cast<double>(n * decision.k);
  const ad::Tensor p = ad::mean_rows(ad::softmax(scores));
  const ad::Tensor dot = ad::sum(ad::mul(p, ad::Tensor({e}, std::move(f))));
  return ad::scale(dot, coeff * static_cast<double>(e));
}

ad::Tensor z_loss(const ad::Tensor& scores, double coeff) {
  return ad::scale(ad::mean(ad::square(ad::logsumexp(scores))), coeff);
}

std::vector<std::uint32_t> hash_layer_table(std::span<const double> token_freqs, std::size_t num_experts) {
  if (num_experts == 0) throw ConfigError("hash_layer_table: E must be positive");
  std::vector<std::uint32_t> order(token_freqs.size());
  std::iota(order.begin(), order.end(), 0U);
  for (double f : token_freqs)
    if (!(f >= 0.0)) throw ConfigError("hash_layer_table: frequencies must be non-negative");
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return token_freqs[a] > token_freqs[b]; });
  std::vector<double> load(num_experts, 0.0);
  std::vector<std::uint32_t> table(token_freqs.size(), 0);
  for (auto tok : order) {
    const auto best = static_cast<std::uint32_t>(std::min_element(load.begin(), load.end()) - load.begin());
    table[tok] = best;
    load[best] += token_freqs[tok];
  }
  return table;
}

RoutingDecision hash_route(std::span<const std::uint32_t> tokens, std::span<const std::uint32_t> table,
                           std::size_t num_experts, std::size_t k) {
  if (k == 0 || k > num_experts) throw ConfigError("hash_route: invalid k");
  RoutingDecision d;
  d.num_experts = num_experts;
  d.k = k;
  d.indices.reserve(tokens.size() * k);
  d.weights.assign(tokens.size() * k, 1.0 / static_cast<double>(k));
  std::vector<std::uint32_t> slot(k);
  for (auto tok : tokens) {
    if (tok >= table.size()) throw Error("hash_route: token " + std::to_string(tok) + " missing from table");
    for (std::size_t j = 0; j < k; ++j) slot[j] = static_cast<std::uint32_t>((table[tok] + j) % num_experts);
    std::sort(slot.begin(), slot.end());
    d.indices.insert(d.indices.end(), slot.begin(), slot.end());
  }
  return d;
}

}  // namespace preroute::moe
