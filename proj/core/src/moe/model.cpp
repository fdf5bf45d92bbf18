#include "preroute/moe/model.hpp"

#include <cmath>
#include <random>

#include "preroute/autodiff/ops.hpp"
#include "preroute/error.hpp"
#include "preroute/io/checkpoint.hpp"
#include "preroute/moe/transformer.hpp"

namespace preroute::moe {
namespace {

std::string layer_prefix(std::size_t layer) { return "layer" + std::to_string(layer) + "."; }

std::string expert_prefix(std::size_t layer, std::size_t expert) {
  return layer_prefix(layer) + "expert" + std::to_string(expert) + ".";
}

}  // namespace

std::string to_string(RouterMode mode) {
  switch (mode) {
    case RouterMode::learned: return "learned";
    case RouterMode::external: return "frozen-grouter";
    case RouterMode::hash: return "hash";
  }
  return "unknown";
}

RouterMode parse_router_mode(const std::string& text) {
  if (text == "learned") return RouterMode::learned;
  if (text == "frozen-grouter" || text == "external") return RouterMode::external;
  if (text == "hash") return RouterMode::hash;
  throw ConfigError("unknown router mode '" + text + "'");
}

ad::Tensor moe_layer_forward(const ad::Tensor& x, const ExpertFn& experts, const RoutingDecision& decision,
                             const ad::Tensor& gates) {
  if (x.rank() != 2) throw ShapeError("moe_layer_forward: x must be [n, d], got " + ad::to_string(x.shape()));
  const std::size_t n = x.dim(0);
  if (decision.tokens() != n) {
    throw ShapeError("moe_layer_forward: decision covers " + std::to_string(decision.tokens()) + " tokens, input has " +
                     std::to_string(n));
  }
  if (gates.size() != decision.indices.size()) throw ShapeError("moe_layer_forward: gate count does not match decision");
  const std::size_t k = decision.k;
  std::vector<std::vector<std::size_t>> rows(decision.num_experts);
  std::vector<std::vector<std::size_t>> slots(decision.num_experts);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto e = decision.indices[t * k + j];
      if (e >= decision.num_experts) {
        throw Error("moe_layer_forward: expert index " + std::to_string(e) + " >= E=" + std::to_string(decision.num_experts));
      }
      rows[e].push_back(t);
      slots[e].push_back(t * k + j);
    }
  }
  ad::Tensor y;
  for (std::size_t e = 0; e < decision.num_experts; ++e) {
    if (rows[e].empty()) continue;
    const ad::Tensor out = experts(ad::gather_rows(x, rows[e]), e);
    const ad::Tensor weighted = ad::scale_rows(out, ad::take(gates, slots[e]));
    const ad::Tensor spread = ad::scatter_rows(weighted, rows[e], n);
    y = y.defined() ? ad::add(y, spread) : spread;
  }
  if (!y.defined()) y = ad::Tensor::zeros({n, x.dim(1)});
  return y;
}

ad::Tensor moe_layer_forward(const ad::Tensor& x, const ExpertFn& experts, const RoutingDecision& decision) {
  return moe_layer_forward(x, experts, decision, ad::Tensor({decision.weights.size()}, decision.weights));
}

MoeModel::MoeModel(const MoeConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.hidden;
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double std_h = 1.0 / std::sqrt(static_cast<double>(config_.expert_hidden));
  params_.add("tok_emb", random_normal({config_.vocab_size, d}, 0.5, rng));
  params_.add("pos_emb", random_normal({config_.seq_len, d}, 0.1, rng));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const auto p = layer_prefix(l);
    add_attention_params(params_, p, d, rng);
    params_.add(p + "ffn_norm", ad::Tensor::full({d}, 1.0));
    params_.add(router_name(l), random_normal({d, config_.num_experts}, std_d, rng));
    for (std::size_t e = 0; e < config_.num_experts; ++e) {
      const auto ep = expert_prefix(l, e);
      params_.add(ep + "w1", random_normal({d, config_.expert_hidden}, std_d, rng));
      params_.add(ep + "w3", random_normal({d, config_.expert_hidden}, std_d, rng));
      params_.add(ep + "w2", random_normal({config_.expert_hidden, d}, std_h * 0.5, rng));
    }
  }
  params_.add("final_norm", ad::Tensor::full({d}, 1.0));
  params_.add("lm_head", random_normal({d, config_.vocab_size}, std_d, rng));
}

MoeModel::MoeModel(const MoeConfig& config, ad::ParameterStore params) : config_(config), params_(std::move(params)) {
  config_.validate();
  MoeModel reference(config_, 0);
  for (const auto& [name, t] : reference.params().entries()) {
    if (!params_.contains(name)) throw FormatError("model parameters missing '" + name + "'");
    if (params_.at(name).shape() != t.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + ad::to_string(params_.at(name).shape()) + ", expected " +
                        ad::to_string(t.shape()));
    }
  }
}

std::string MoeModel::router_name(std::size_t layer) { return layer_prefix(layer) + "router"; }

std::vector<std::string> MoeModel::router_param_names() const {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < config_.num_layers; ++l) names.push_back(router_name(l));
  return names;
}

std::vector<std::string> MoeModel::expert_param_names() const {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < config_.num_layers; ++l)
    for (std::size_t e = 0; e < config_.num_experts; ++e)
      for (const char* w : {"w1", "w3", "w2"}) names.push_back(expert_prefix(l, e) + w);
  return names;
}

ad::Tensor MoeModel::embed(const Batch& batch) const {
  if (batch.empty()) throw ShapeError("empty batch");
  const std::size_t seq = batch.front().size();
  if (seq == 0 || seq > config_.seq_len) {
    throw ShapeError("sequence length " + std::to_string(seq) + " outside [1, " + std::to_string(config_.seq_len) + "]");
  }
  std::vector<std::uint32_t> ids;
  std::vector<std::uint32_t> positions;
  ids.reserve(batch.size() * seq);
  for (const auto& s : batch) {
    if (s.size() != seq) throw ShapeError("ragged batch");
    ids.insert(ids.end(), s.begin(), s.end());
    for (std::size_t t = 0; t < seq; ++t) positions.push_back(static_cast<std::uint32_t>(t));
  }
  const ad::Tensor tok = ad::embedding(params_.at("tok_emb"), ids);
  const ad::Tensor pos = ad::embedding(params_.at("pos_emb"), positions);
  return ad::reshape(ad::add(tok, pos), {batch.size(), seq, config_.hidden});
}

ad::Tensor MoeModel::block(std::size_t layer, const ad::Tensor& x, const ForwardOptions& options, ForwardResult& out) const {
  const auto p = layer_prefix(layer);
  const std::size_t b = x.dim(0);
  const std::size_t seq = x.dim(1);
  const std::size_t n = b * seq;
  const std::size_t d = config_.hidden;
  const std::size_t k = config_.top_k;
  const ad::Tensor a = attention_block(x, attention_params(params_, p), config_.num_heads, true);
  const ad::Tensor flat = ad::reshape(a, {n, d});
  const ad::Tensor h = ad::rms_norm(flat, params_.at(p + "ffn_norm"));

  RoutingDecision decision;
  ad::Tensor gates;
  switch (options.mode) {
    case RouterMode::learned: {
      const ad::Tensor w = options.router_override ? options.router_override->at(router_name(layer)).detach()
                                                   : params_.at(router_name(layer));
      const ad::Tensor logits = ad::matmul(h, w);
      decision = route(logits, k, config_.router_normalizer);
      std::vector<std::size_t> positions(n * k);
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < k; ++j) positions[t * k + j] = t * config_.num_experts + decision.indices[t * k + j];
      const ad::Tensor selected = ad::reshape(ad::take(logits, positions), {n, k});
      gates = config_.router_normalizer == Normalizer::softmax ? ad::softmax(selected) : ad::sigmoid(selected);
      out.router_logits.push_back(logits);
      break;
    }
    case RouterMode::external: {
      if (!options.external) throw ConfigError("external router mode without a routing decision");
      decision = *options.external;
      if (decision.num_experts != config_.num_experts || decision.k != k) {
        throw ConfigError("external routing has E=" + std::to_string(decision.num_experts) + ", k=" + std::to_string(decision.k) +
                          " but model expects E=" + std::to_string(config_.num_experts) + ", k=" + std::to_string(k));
      }
      break;
    }
    case RouterMode::hash: {
      if (!options.hash_table) throw ConfigError("hash router mode without a table");
      throw Error("hash routing needs token ids; use MoeModel::forward");
    }
  }
  if (options.perturb) {
    if (auto replaced = options.perturb(layer, n)) {
      decision = std::move(*replaced);
      gates = ad::Tensor();
    }
  }
  if (!gates.defined()) gates = ad::Tensor({decision.weights.size()}, decision.weights);
  out.decisions.push_back(decision);

  std::vector<TokenExpertParams> out_split;
  const ExpertFn experts = [&](const ad::Tensor& rows, std::size_t e) {
    const auto ep = expert_prefix(layer, e);
    const auto& w1 = params_.at(ep + "w1");
    const auto& w3 = params_.at(ep + "w3");
    const auto& w2 = params_.at(ep + "w2");
    if (!options.split_expert || *options.split_expert != std::pair{layer, e}) return gated_ffn(rows, w1, w3, w2);
    auto copy = [](const ad::Tensor& t) {
      ad::Tensor c(t.shape(), {t.data().begin(), t.data().end()});
      c.set_requires_grad(true);
      return c;
    };
    ad::Tensor out;
    for (std::size_t r = 0; r < rows.dim(0); ++r) {
      TokenExpertParams tp{0, copy(w1), copy(w3), copy(w2)};
      const ad::Tensor y = gated_ffn(ad::gather_rows(rows, {r}), tp.w1, tp.w3, tp.w2);
      const ad::Tensor spread = ad::scatter_rows(y, {r}, rows.dim(0));
      out = out.defined() ? ad::add(out, spread) : spread;
      out_split.push_back(std::move(tp));
    }
    return out;
  };
  const ad::Tensor y = moe_layer_forward(h, experts, decision, gates);
  if (!out_split.empty()) {
    std::size_t i = 0;
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < k; ++j)
        if (decision.indices[t * k + j] == options.split_expert->second) out_split[i++].token = t;
    for (auto& tp : out_split) out.split.push_back(std::move(tp));
  }
  return ad::reshape(ad::add(flat, y), {b, seq, d});
}

ForwardResult MoeModel::forward(const Batch& batch, const ForwardOptions& options) const {
  ForwardResult out;
  ad::Tensor x = embed(batch);
  ForwardOptions opts = options;
  RoutingDecision hashed;
  if (options.mode == RouterMode::hash) {
    if (!options.hash_table) throw ConfigError("hash router mode without a table");
    std::vector<std::uint32_t> ids;
    for (const auto& s : batch) ids.insert(ids.end(), s.begin(), s.end());
    hashed = hash_route(ids, *options.hash_table, config_.num_experts, config_.top_k);
    opts.mode = RouterMode::external;
    opts.external = &hashed;
  }
  for (std::size_t l = 0; l < config_.num_layers; ++l) x = block(l, x, opts, out);
  const std::size_t n = x.dim(0) * x.dim(1);
  const ad::Tensor h = ad::rms_norm(ad::reshape(x, {n, config_.hidden}), params_.at("final_norm"));
  out.logits = ad::matmul(h, params_.at("lm_head"));
  return out;
}

ad::Tensor MoeModel::lm_loss(const ForwardResult& result, const Batch& batch) const {
  const std::size_t seq = batch.front().size();
  if (seq < 2) throw ShapeError("lm_loss needs sequences of length >= 2");
  std::vector<std::size_t> rows;
  std::vector<std::uint32_t> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t t = 0; t + 1 < seq; ++t) {
      rows.push_back(b * seq + t);
      targets.push_back(batch[b][t + 1]);
    }
  }
  return ad::cross_entropy(ad::gather_rows(result.logits, rows), targets);
}

ad::Tensor MoeModel::first_router_logits(const Batch& batch) const {
  const ad::Tensor x = embed(batch);
  const auto p = layer_prefix(0);
  const ad::Tensor a = attention_block(x, attention_params(params_, p), config_.num_heads, true);
  const std::size_t n = x.dim(0) * x.dim(1);
  const ad::Tensor h = ad::rms_norm(ad::reshape(a, {n, config_.hidden}), params_.at(p + "ffn_norm"));
  return ad::matmul(h, params_.at(router_name(0))).detach();
}

void MoeModel::save(const std::filesystem::path& path) const {
  io::CheckpointData data;
  data.fields = {{"vocab_size", static_cast<std::int64_t>(config_.vocab_size)},
                 {"hidden", static_cast<std::int64_t>(config_.hidden)},
                 {"num_layers", static_cast<std::int64_t>(config_.num_layers)},
                 {"num_heads", static_cast<std::int64_t>(config_.num_heads)},
                 {"num_experts", static_cast<std::int64_t>(config_.num_experts)},
                 {"top_k", static_cast<std::int64_t>(config_.top_k)},
                 {"expert_hidden", static_cast<std::int64_t>(config_.expert_hidden)},
                 {"seq_len", static_cast<std::int64_t>(config_.seq_len)},
                 {"router_normalizer", static_cast<std::int64_t>(config_.router_normalizer)}};
  data.params = params_.clone();
  io::save_checkpoint(path, std::string(kModelMagic, 4), data);
}

MoeModel MoeModel::load(const std::filesystem::path& path) {
  auto data = io::load_checkpoint(path, std::string(kModelMagic, 4));
  auto field = [&](const char* key) {
    auto it = data.fields.find(key);
    if (it == data.fields.end() || it->second < 0) throw FormatError(std::string("model checkpoint missing field '") + key + "'");
    return static_cast<std::size_t>(it->second);
  };
  MoeConfig c;
  c.vocab_size = field("vocab_size");
  c.hidden = field("hidden");
  c.num_layers = field("num_layers");
  c.num_heads = field("num_heads");
  c.num_experts = field("num_experts");
  c.top_k = field("top_k");
  c.expert_hidden = field("expert_hidden");
  c.seq_len = field("seq_len");
  const auto norm = field("router_normalizer");
  if (norm > 1) throw FormatError("bad router_normalizer in checkpoint");
  c.router_normalizer = static_cast<Normalizer>(norm);
  return MoeModel(c, std::move(data.params));
}

}  // namespace preroute::moe
