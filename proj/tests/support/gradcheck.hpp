#pragma once

// Central finite-difference oracle for reverse-mode gradients. Independent of
// the backward rules: it only evaluates the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "preroute/autodiff/tensor.hpp"

namespace preroute::oracle {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

// `f` builds a scalar loss from fresh leaf tensors with the given values.
inline GradCheckResult gradcheck(const std::function<ad::Tensor(const std::vector<ad::Tensor>&)>& f,
                                 const std::vector<ad::Tensor>& inputs, double h = 1e-6) {
  std::vector<ad::Tensor> leaves;
  for (const auto& in : inputs) {
    leaves.emplace_back(in.shape(), std::vector<double>(in.data().begin(), in.data().end()), true);
  }
  f(leaves).backward();

  GradCheckResult res;
  for (std::size_t a = 0; a < leaves.size(); ++a) {
    std::vector<double> analytic(leaves[a].size(), 0.0);
    if (leaves[a].has_grad()) analytic.assign(leaves[a].grad().begin(), leaves[a].grad().end());
    for (std::size_t i = 0; i < leaves[a].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<ad::Tensor> probe;
        for (std::size_t b = 0; b < inputs.size(); ++b) {
          std::vector<double> v(inputs[b].data().begin(), inputs[b].data().end());
          if (b == a) v[i] += delta;
          probe.emplace_back(inputs[b].shape(), std::move(v), false);
        }
        return f(probe).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double rel_err = abs_err / std::max({std::abs(numeric), std::abs(analytic[i]), 1e-3});
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, rel_err);
    }
  }
  return res;
}

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = dist(rng);
  return ad::Tensor(std::move(shape), std::move(v));
}

// Fixed random projection so that vector-valued ops reduce to a scalar with
// non-trivial upstream gradients.
inline ad::Tensor project(const ad::Tensor& t, std::uint64_t seed);

}  // namespace preroute::oracle

#include "preroute/autodiff/ops.hpp"

namespace preroute::oracle {

inline ad::Tensor project(const ad::Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto weights = random_tensor(t.shape(), rng);
  return ad::sum(ad::mul(t, weights));
}

}  // namespace preroute::oracle
