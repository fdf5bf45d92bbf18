#include "preroute/moe/transformer.hpp"

#include <cmath>
#include <vector>

#include "preroute/autodiff/ops.hpp"

namespace preroute::moe {

ad::Tensor random_normal(ad::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = dist(rng);
  return ad::Tensor(std::move(shape), std::move(v));
}

AttentionWeights add_attention_params(ad::ParameterStore& params, const std::string& prefix, std::size_t d,
                                      std::mt19937_64& rng) {
  const double std = 1.0 / std::sqrt(static_cast<double>(d));
  params.add(prefix + "attn_norm", ad::Tensor::full({d}, 1.0));
  params.add(prefix + "wq", random_normal({d, d}, std, rng));
  params.add(prefix + "wk", random_normal({d, d}, std, rng));
  params.add(prefix + "wv", random_normal({d, d}, std, rng));
  params.add(prefix + "wo", random_normal({d, d}, std * 0.5, rng));
  return attention_params(params, prefix);
}

AttentionWeights attention_params(const ad::ParameterStore& params, const std::string& prefix) {
  return {params.at(prefix + "attn_norm"), params.at(prefix + "wq"), params.at(prefix + "wk"), params.at(prefix + "wv"),
          params.at(prefix + "wo")};
}

ad::Tensor attention_block(const ad::Tensor& x, const AttentionWeights& w, std::size_t num_heads, bool causal) {
  const std::size_t seq = x.dim(1);
  const std::size_t d = x.dim(2);
  const std::size_t head_dim = d / num_heads;
  const ad::Tensor h = ad::rms_norm(x, w.norm);
  const ad::Tensor q = ad::matmul(h, w.wq);
  const ad::Tensor k = ad::matmul(h, w.wk);
  const ad::Tensor v = ad::matmul(h, w.wv);
  std::vector<double> mask(seq * seq, 0.0);
  if (causal) {
    for (std::size_t i = 0; i < seq; ++i)
      for (std::size_t j = i + 1; j < seq; ++j) mask[i * seq + j] = -1e30;
  }
  const ad::Tensor mask_t({seq, seq}, std::move(mask));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<ad::Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t hd = 0; hd < num_heads; ++hd) {
    const ad::Tensor qh = ad::slice_last(q, hd * head_dim, head_dim);
    const ad::Tensor kh = ad::slice_last(k, hd * head_dim, head_dim);
    const ad::Tensor vh = ad::slice_last(v, hd * head_dim, head_dim);
    ad::Tensor att = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    if (causal) att = ad::add(att, mask_t);
    heads.push_back(ad::matmul(ad::softmax(att), vh));
  }
  const ad::Tensor merged = num_heads == 1 ? heads.front() : ad::concat_last(heads);
  return ad::add(x, ad::matmul(merged, w.wo));
}

ad::Tensor gated_ffn(const ad::Tensor& x, const ad::Tensor& w1, const ad::Tensor& w3, const ad::Tensor& w2) {
  return ad::matmul(ad::mul(ad::silu(ad::matmul(x, w1)), ad::matmul(x, w3)), w2);
}

}  // namespace preroute::moe
