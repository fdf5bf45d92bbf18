#pragma once

// Randomised instances of every differentiable op, for finite-difference
// sweeps. Dimensions are drawn from [1, 8].

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "preroute/autodiff/ops.hpp"
#include "preroute/moe/transformer.hpp"

namespace preroute::oracle {

struct OpCase {
  std::vector<ad::Tensor> inputs;
  std::function<ad::Tensor(const std::vector<ad::Tensor>&)> loss;
};

struct OpSpec {
  std::string name;
  std::function<OpCase(std::mt19937_64&)> make;
};

inline std::size_t dim(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 8) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<OpSpec> op_catalog() {
  using ad::Tensor;
  std::vector<OpSpec> ops;
  auto unary = [&ops](std::string name, std::function<Tensor(const Tensor&)> op, double lo = -2.0, double hi = 2.0) {
    ops.push_back({name, [op, lo, hi](std::mt19937_64& rng) {
                     const auto seed = rng();
                     return OpCase{{random_tensor({dim(rng), dim(rng)}, rng, lo, hi)},
                                   [op, seed](const std::vector<Tensor>& in) { return project(op(in[0]), seed); }};
                   }});
  };
  auto binary = [&ops](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op, bool broadcast) {
    ops.push_back({name, [op, broadcast](std::mt19937_64& rng) {
                     const auto seed = rng();
                     const std::size_t m = dim(rng);
                     const std::size_t n = dim(rng);
                     const ad::Shape bs = broadcast ? ad::Shape{n} : ad::Shape{m, n};
                     return OpCase{{random_tensor({m, n}, rng), random_tensor(bs, rng)},
                                   [op, seed](const std::vector<Tensor>& in) { return project(op(in[0], in[1]), seed); }};
                   }});
  };
  binary("add", ad::add, false);
  binary("add_broadcast", ad::add, true);
  binary("sub", ad::sub, false);
  binary("sub_broadcast", ad::sub, true);
  binary("mul", ad::mul, false);
  binary("mul_broadcast", ad::mul, true);
  unary("scale", [](const Tensor& x) { return ad::scale(x, -1.7); });
  unary("add_scalar", [](const Tensor& x) { return ad::add_scalar(x, 0.3); });
  unary("square", ad::square);
  unary("exp", ad::exp);
  unary("log", ad::log, 0.2, 3.0);
  unary("sigmoid", ad::sigmoid);
  unary("silu", ad::silu);
  unary("gelu", ad::gelu);
  unary("transpose", ad::transpose);
  unary("softmax", ad::softmax, -4.0, 4.0);
  unary("log_softmax", ad::log_softmax, -4.0, 4.0);
  unary("logsumexp", ad::logsumexp, -4.0, 4.0);
  unary("sum_last", ad::sum_last);
  unary("sum", ad::sum);
  unary("mean", ad::mean);
  unary("mean_rows", ad::mean_rows);
  unary("reshape", [](const Tensor& x) { return ad::reshape(x, {x.size()}); });

  ops.push_back({"matmul", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t m = dim(rng), n = dim(rng), p = dim(rng);
                   return OpCase{{random_tensor({m, n}, rng), random_tensor({n, p}, rng)},
                                 [seed](const std::vector<Tensor>& in) { return project(ad::matmul(in[0], in[1]), seed); }};
                 }});
  ops.push_back({"matmul_batched", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t b = dim(rng, 1, 3), m = dim(rng), n = dim(rng), p = dim(rng);
                   return OpCase{{random_tensor({b, m, n}, rng), random_tensor({b, n, p}, rng)},
                                 [seed](const std::vector<Tensor>& in) { return project(ad::matmul(in[0], in[1]), seed); }};
                 }});
  ops.push_back({"matmul_shared_rhs", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t b = dim(rng, 1, 3), m = dim(rng), n = dim(rng), p = dim(rng);
                   return OpCase{{random_tensor({b, m, n}, rng), random_tensor({n, p}, rng)},
                                 [seed](const std::vector<Tensor>& in) { return project(ad::matmul(in[0], in[1]), seed); }};
                 }});
  ops.push_back({"rms_norm", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t m = dim(rng), n = dim(rng);
                   return OpCase{{random_tensor({m, n}, rng), random_tensor({n}, rng, 0.5, 1.5)},
                                 [seed](const std::vector<Tensor>& in) { return project(ad::rms_norm(in[0], in[1]), seed); }};
                 }});
  ops.push_back({"embedding", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t v = dim(rng), d = dim(rng), n = dim(rng);
                   std::vector<std::uint32_t> ids(n);
                   for (auto& id : ids) id = static_cast<std::uint32_t>(dim(rng, 0, v - 1));
                   return OpCase{{random_tensor({v, d}, rng)},
                                 [seed, ids](const std::vector<Tensor>& in) { return project(ad::embedding(in[0], ids), seed); }};
                 }});
  ops.push_back({"gather_rows", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t n = dim(rng), d = dim(rng), m = dim(rng);
                   std::vector<std::size_t> rows(m);
                   for (auto& r : rows) r = dim(rng, 0, n - 1);
                   return OpCase{{random_tensor({n, d}, rng)},
                                 [seed, rows](const std::vector<Tensor>& in) { return project(ad::gather_rows(in[0], rows), seed); }};
                 }});
  ops.push_back({"scatter_rows", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t n = dim(rng), d = dim(rng), m = dim(rng);
                   std::vector<std::size_t> rows(m);
                   for (auto& r : rows) r = dim(rng, 0, n - 1);
                   return OpCase{{random_tensor({m, d}, rng)}, [seed, rows, n](const std::vector<Tensor>& in) {
                                   return project(ad::scatter_rows(in[0], rows, n), seed);
                                 }};
                 }});
  ops.push_back({"take", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t n = dim(rng), d = dim(rng), m = dim(rng);
                   std::vector<std::size_t> pos(m);
                   for (auto& p : pos) p = dim(rng, 0, n * d - 1);
                   return OpCase{{random_tensor({n, d}, rng)},
                                 [seed, pos](const std::vector<Tensor>& in) { return project(ad::take(in[0], pos), seed); }};
                 }});
  ops.push_back({"scale_rows", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t n = dim(rng), d = dim(rng);
                   return OpCase{{random_tensor({n, d}, rng), random_tensor({n}, rng)},
                                 [seed](const std::vector<Tensor>& in) { return project(ad::scale_rows(in[0], in[1]), seed); }};
                 }});
  ops.push_back({"slice_last", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t n = dim(rng), d = dim(rng);
                   const std::size_t start = dim(rng, 0, d - 1);
                   const std::size_t len = dim(rng, 1, d - start);
                   return OpCase{{random_tensor({n, d}, rng)}, [seed, start, len](const std::vector<Tensor>& in) {
                                   return project(ad::slice_last(in[0], start, len), seed);
                                 }};
                 }});
  ops.push_back({"concat_last", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t n = dim(rng);
                   return OpCase{{random_tensor({n, dim(rng)}, rng), random_tensor({n, dim(rng)}, rng), random_tensor({n, dim(rng)}, rng)},
                                 [seed](const std::vector<Tensor>& in) { return project(ad::concat_last(in), seed); }};
                 }});
  ops.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                   const std::size_t n = dim(rng), v = dim(rng, 2, 8);
                   std::vector<std::uint32_t> targets(n);
                   for (auto& t : targets) t = static_cast<std::uint32_t>(dim(rng, 0, v - 1));
                   return OpCase{{random_tensor({n, v}, rng, -3.0, 3.0)},
                                 [targets](const std::vector<Tensor>& in) { return ad::cross_entropy(in[0], targets); }};
                 }});
  ops.push_back({"kl_divergence", [](std::mt19937_64& rng) {
                   const std::size_t n = dim(rng), e = dim(rng);
                   return OpCase{{random_tensor({n, e}, rng, 0.05, 1.0), random_tensor({n, e}, rng, 0.05, 1.0)},
                                 [](const std::vector<Tensor>& in) { return ad::kl_divergence(in[0], in[1]); }};
                 }});
  ops.push_back({"kl_divergence_logits", [](std::mt19937_64& rng) {
                   const std::size_t n = dim(rng), e = dim(rng);
                   return OpCase{{random_tensor({n, e}, rng, -3.0, 3.0), random_tensor({n, e}, rng, -3.0, 3.0)},
                                 [](const std::vector<Tensor>& in) { return ad::kl_divergence_logits(in[0], in[1]); }};
                 }});
  ops.push_back({"attention_block", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t heads = dim(rng, 1, 2);
                   const std::size_t d = heads * dim(rng, 1, 4);
                   const std::size_t b = dim(rng, 1, 2), t = dim(rng, 1, 5);
                   const bool causal = (rng() & 1U) != 0;
                   std::vector<Tensor> in{random_tensor({b, t, d}, rng), random_tensor({d}, rng, 0.5, 1.5)};
                   for (int i = 0; i < 4; ++i) in.push_back(random_tensor({d, d}, rng, -0.7, 0.7));
                   return OpCase{in, [seed, heads, causal](const std::vector<Tensor>& p) {
                                   const moe::AttentionWeights w{p[1], p[2], p[3], p[4], p[5]};
                                   return project(moe::attention_block(p[0], w, heads, causal), seed);
                                 }};
                 }});
  ops.push_back({"gated_ffn", [](std::mt19937_64& rng) {
                   const auto seed = rng();
                   const std::size_t n = dim(rng), d = dim(rng), h = dim(rng);
                   return OpCase{{random_tensor({n, d}, rng), random_tensor({d, h}, rng), random_tensor({d, h}, rng), random_tensor({h, d}, rng)},
                                 [seed](const std::vector<Tensor>& p) { return project(moe::gated_ffn(p[0], p[1], p[2], p[3]), seed); }};
                 }});
  return ops;
}

}  // namespace preroute::oracle
