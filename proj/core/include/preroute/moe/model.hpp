#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "preroute/autodiff/optim.hpp"
#include "preroute/autodiff/tensor.hpp"
#include "preroute/moe/config.hpp"
#include "preroute/moe/routing.hpp"

namespace preroute::moe {

using Batch = std::vector<std::vector<std::uint32_t>>;

// Expert function: maps the gathered rows [n_e, d] for expert `e` to its output.
using ExpertFn = std::function<ad::Tensor(const ad::Tensor& rows, std::size_t expert)>;

// y = sum over selected experts of gate * f_e(x). `gates` holds the tokens x k
// gating weights (may carry a graph back to the router); unselected experts
// are never evaluated and receive no gradient.
ad::Tensor moe_layer_forward(const ad::Tensor& x, const ExpertFn& experts, const RoutingDecision& decision,
                             const ad::Tensor& gates);
// Same, with constant gates taken from decision.weights.
ad::Tensor moe_layer_forward(const ad::Tensor& x, const ExpertFn& experts, const RoutingDecision& decision);

enum class RouterMode { learned, external, hash };

std::string to_string(RouterMode mode);
RouterMode parse_router_mode(const std::string& text);

struct ForwardOptions {
  RouterMode mode = RouterMode::learned;
  // External routing, one decision for all batch tokens, shared by every layer.
  const RoutingDecision* external = nullptr;
  const std::vector<std::uint32_t>* hash_table = nullptr;
  // Learned mode only: take router weights "layer{i}.router" from this store
  // as constants instead of the model's own.
  const ad::ParameterStore* router_override = nullptr;
  // Replaces the routing of a layer when it returns a decision.
  std::function<std::optional<RoutingDecision>(std::size_t layer, std::size_t tokens)> perturb;
  // (layer, expert): evaluate that expert with a separate leaf copy of its
  // weights per routed token, so each copy's grad is that token's share.
  std::optional<std::pair<std::size_t, std::size_t>> split_expert;
};

struct TokenExpertParams {
  std::size_t token = 0;
  ad::Tensor w1, w3, w2;
};

struct ForwardResult {
  ad::Tensor logits;                        // [B*T, V]
  std::vector<ad::Tensor> router_logits;    // per layer [B*T, E]; learned mode only
  std::vector<RoutingDecision> decisions;   // per layer
  std::vector<TokenExpertParams> split;     // filled when split_expert is set
};

// Decoder-only transformer with one MoE FFN per block and learned absolute
// positions.
class MoeModel {
 public:
  MoeModel(const MoeConfig& config, std::uint64_t seed);
  MoeModel(const MoeConfig& config, ad::ParameterStore params);

  const MoeConfig& config() const { return config_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }

  ForwardResult forward(const Batch& batch, const ForwardOptions& options = {}) const;
  // Mean next-token cross-entropy over positions 0..T-2.
  ad::Tensor lm_loss(const ForwardResult& result, const Batch& batch) const;
  // Raw logits of the first MoE layer's router, [B*T, E], no graph.
  ad::Tensor first_router_logits(const Batch& batch) const;

  std::vector<std::string> router_param_names() const;
  std::vector<std::string> expert_param_names() const;

  static std::string router_name(std::size_t layer);

  void save(const std::filesystem::path& path) const;
  static MoeModel load(const std::filesystem::path& path);

 private:
  ad::Tensor embed(const Batch& batch) const;
  ad::Tensor block(std::size_t layer, const ad::Tensor& x, const ForwardOptions& options, ForwardResult& out) const;

  MoeConfig config_;
  ad::ParameterStore params_;
};

inline constexpr char kModelMagic[] = "MOEC";

}  // namespace preroute::moe
