#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "preroute/autodiff/optim.hpp"
#include "preroute/autodiff/tensor.hpp"

namespace preroute::moe {

// Pre-norm multi-head self-attention sublayer parameters.
struct AttentionWeights {
  ad::Tensor norm;  // [d]
  ad::Tensor wq, wk, wv, wo;  // [d, d]
};

// x + MHA(rms_norm(x)) for x of shape [B, T, d]. `causal` masks future
// positions; the grouter encoder runs with causal = false.
ad::Tensor attention_block(const ad::Tensor& x, const AttentionWeights& w, std::size_t num_heads, bool causal);

// silu(x W1) * (x W3) W2, x of shape [n, d].
ad::Tensor gated_ffn(const ad::Tensor& x, const ad::Tensor& w1, const ad::Tensor& w3, const ad::Tensor& w2);

// Registers the attention parameters under `prefix` and returns handles.
AttentionWeights add_attention_params(ad::ParameterStore& params, const std::string& prefix, std::size_t d,
                                      std::mt19937_64& rng);
AttentionWeights attention_params(const ad::ParameterStore& params, const std::string& prefix);

// Normal(0, stddev) initialised tensor.
ad::Tensor random_normal(ad::Shape shape, double stddev, std::mt19937_64& rng);

}  // namespace preroute::moe
