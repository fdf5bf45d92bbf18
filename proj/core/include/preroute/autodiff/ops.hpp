#pragma once

#include <cstdint>
#include <vector>

#include "preroute/autodiff/tensor.hpp"

namespace preroute::ad {

// Elementwise binary ops. `b` must either match `a` exactly or match a
// trailing suffix of a's shape (broadcast over leading batch dimensions).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

// a: [..., m, n]; b: [n, p] or [..., n, p] with the same leading dims as a.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two dimensions.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Reductions over the last dimension; output drops that dimension.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor logsumexp(const Tensor& a);
Tensor sum_last(const Tensor& a);

// x / rms(x) * weight along the last dimension.
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps = 1e-6);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [n, d] -> [d], averaging over rows.
Tensor mean_rows(const Tensor& a);

// table: [V, d] -> [ids.size(), d]
Tensor embedding(const Tensor& table, const std::vector<std::uint32_t>& ids);
// x: [n, d] -> [rows.size(), d]
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);
// x: [m, d] -> [n, d] with row i added into output row rows[i].
Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& rows, std::size_t n);
// Flat element gather: out[i] = a.data()[positions[i]], shape [positions.size()].
Tensor take(const Tensor& a, const std::vector<std::size_t>& positions);
// x: [n, d], w: [n] -> x[i, :] * w[i]
Tensor scale_rows(const Tensor& x, const Tensor& w);
// Column slice/concat along the last dimension.
Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length);
Tensor concat_last(const std::vector<Tensor>& parts);

// Mean token cross-entropy of logits [n, V] against target ids.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& targets);
// Mean over rows of sum_j p_j log(p_j / q_j) for distributions along the last
// dimension. Terms with p_j = 0 contribute 0.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
// KL(softmax(teacher) || softmax(student)) from raw logits, mean over rows.
Tensor kl_divergence_logits(const Tensor& teacher_logits, const Tensor& student_logits);

// Per-row top-k over the last dimension. Not differentiable.
struct TopK {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;  // rows x k, ascending within a row
  Tensor mask;                         // same shape as input, 1 where selected
};
// Ties between equal scores resolve to the lower index.
TopK topk_select(const Tensor& scores, std::size_t k);

}  // namespace preroute::ad
