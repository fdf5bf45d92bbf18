#include "preroute/grouter/grouter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "preroute/autodiff/ops.hpp"
#include "preroute/error.hpp"
#include "preroute/io/checkpoint.hpp"
#include "preroute/moe/train.hpp"
#include "preroute/moe/transformer.hpp"

namespace preroute::grouter {
namespace {

std::string block_prefix(std::size_t i) { return "enc" + std::to_string(i) + "."; }

Batch gather(const Corpus& corpus, const std::vector<std::size_t>& ids) {
  Batch b;
  b.reserve(ids.size());
  for (auto i : ids) b.push_back(corpus.sequences[i]);
  return b;
}

void clip(ad::ParameterStore& params, const std::vector<std::string>& names, double norm, double max_norm) {
  if (max_norm <= 0.0 || norm <= max_norm) return;
  const double c = max_norm / norm;
  for (const auto& name : names)
    for (double& g : params.at(name).mutable_grad()) g *= c;
}

}  // namespace

void GrouterConfig::validate() const {
  if (num_blocks < 1) throw ConfigError("grouter needs at least one encoder block");
  if (num_experts < 1) throw ConfigError("grouter needs at least one output expert");
  if (vocab_size < 1 || embed < 1 || ffn_hidden < 1 || max_seq_len < 1) throw ConfigError("grouter dimensions must be positive");
  if (num_heads < 1 || embed % num_heads != 0) {
    throw ConfigError("grouter embed " + std::to_string(embed) + " not divisible by heads " + std::to_string(num_heads));
  }
}

Grouter::Grouter(const GrouterConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.embed;
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  params_.add("emb", moe::random_normal({config_.vocab_size, d}, 0.5, rng));
  if (config_.use_positions) params_.add("pos", moe::random_normal({config_.max_seq_len, d}, 0.1, rng));
  for (std::size_t i = 0; i < config_.num_blocks; ++i) {
    const auto p = block_prefix(i);
    moe::add_attention_params(params_, p, d, rng);
    params_.add(p + "ffn_norm", ad::Tensor::full({d}, 1.0));
    params_.add(p + "w1", moe::random_normal({d, config_.ffn_hidden}, std_d, rng));
    params_.add(p + "w3", moe::random_normal({d, config_.ffn_hidden}, std_d, rng));
    params_.add(p + "w2", moe::random_normal({config_.ffn_hidden, d}, 0.5 / std::sqrt(double(config_.ffn_hidden)), rng));
  }
  params_.add(kScoreWeights, moe::random_normal({d, config_.num_experts}, std_d, rng));
}

Grouter::Grouter(const GrouterConfig& config, ad::ParameterStore params, bool frozen)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  Grouter reference(config_, 0);
  for (const auto& [name, t] : reference.params().entries()) {
    if (!params_.contains(name)) throw FormatError("grouter parameters missing '" + name + "'");
    if (params_.at(name).shape() != t.shape()) {
      throw FormatError("grouter parameter '" + name + "' has shape " + ad::to_string(params_.at(name).shape()) +
                        ", expected " + ad::to_string(t.shape()));
    }
  }
  if (frozen) freeze();
}

ad::Tensor Grouter::forward(const Batch& batch) const {
  if (batch.empty() || batch.front().empty()) throw ShapeError("grouter_forward: empty sequence");
  const std::size_t seq = batch.front().size();
  if (config_.use_positions && seq > config_.max_seq_len) {
    throw ShapeError("grouter_forward: sequence length " + std::to_string(seq) + " exceeds " +
                     std::to_string(config_.max_seq_len));
  }
  std::vector<std::uint32_t> ids;
  std::vector<std::uint32_t> positions;
  for (const auto& s : batch) {
    if (s.size() != seq) throw ShapeError("grouter_forward: ragged batch");
    for (std::size_t t = 0; t < seq; ++t) {
      if (s[t] >= config_.vocab_size) {
        throw ShapeError("grouter_forward: token id " + std::to_string(s[t]) + " >= vocab " + std::to_string(config_.vocab_size));
      }
      ids.push_back(s[t]);
      positions.push_back(static_cast<std::uint32_t>(t));
    }
  }
  const std::size_t n = ids.size();
  const std::size_t d = config_.embed;
  ad::Tensor x = ad::embedding(params_.at("emb"), ids);
  if (config_.use_positions) x = ad::add(x, ad::embedding(params_.at("pos"), positions));
  x = ad::reshape(x, {batch.size(), seq, d});
  for (std::size_t i = 0; i < config_.num_blocks; ++i) {
    const auto p = block_prefix(i);
    const ad::Tensor a = ad::reshape(moe::attention_block(x, moe::attention_params(params_, p), config_.num_heads, false), {n, d});
    const ad::Tensor f = moe::gated_ffn(ad::rms_norm(a, params_.at(p + "ffn_norm")), params_.at(p + "w1"), params_.at(p + "w3"),
                                        params_.at(p + "w2"));
    x = ad::reshape(ad::add(a, f), {batch.size(), seq, d});
  }
  return ad::matmul(ad::reshape(x, {n, d}), params_.at(kScoreWeights));
}

ad::Tensor Grouter::scores(const Batch& batch) const { return forward(batch).detach(); }

ad::Tensor Grouter::scores(const std::vector<std::uint32_t>& tokens) const { return scores(Batch{tokens}); }

moe::RoutingDecision Grouter::shared_route(const Batch& batch, std::size_t k, moe::Normalizer normalizer) const {
  return moe::route(scores(batch), k, normalizer);
}

void Grouter::freeze() {
  params_.freeze_all();
  frozen_ = true;
}

std::vector<std::string> Grouter::encoder_param_names() const {
  std::vector<std::string> names;
  for (const auto& [name, t] : params_.entries())
    if (name != kScoreWeights) names.push_back(name);
  return names;
}

Grouter Grouter::with_score_weights(const ad::Tensor& w) const {
  if (w.rank() != 2 || w.dim(0) != config_.embed) {
    throw ShapeError("score weights must be [" + std::to_string(config_.embed) + ", E], got " + ad::to_string(w.shape()));
  }
  GrouterConfig c = config_;
  c.num_experts = w.dim(1);
  ad::ParameterStore p;
  for (const auto& [name, t] : params_.entries()) {
    if (name == kScoreWeights) {
      p.add(name, ad::Tensor(w.shape(), {w.data().begin(), w.data().end()}));
    } else {
      p.add(name, ad::Tensor(t.shape(), {t.data().begin(), t.data().end()}));
    }
  }
  return Grouter(c, std::move(p), frozen_);
}

void Grouter::save(const std::filesystem::path& path) const {
  io::CheckpointData data;
  data.fields = {{"vocab_size", static_cast<std::int64_t>(config_.vocab_size)},
                 {"embed", static_cast<std::int64_t>(config_.embed)},
                 {"num_blocks", static_cast<std::int64_t>(config_.num_blocks)},
                 {"num_heads", static_cast<std::int64_t>(config_.num_heads)},
                 {"num_experts", static_cast<std::int64_t>(config_.num_experts)},
                 {"ffn_hidden", static_cast<std::int64_t>(config_.ffn_hidden)},
                 {"max_seq_len", static_cast<std::int64_t>(config_.max_seq_len)},
                 {"use_positions", config_.use_positions ? 1 : 0},
                 {"frozen", frozen_ ? 1 : 0}};
  data.params = params_.clone();
  io::save_checkpoint(path, kGrouterMagic, data);
}

Grouter Grouter::load(const std::filesystem::path& path) {
  auto data = io::load_checkpoint(path, kGrouterMagic);
  auto field = [&](const char* key) {
    auto it = data.fields.find(key);
    if (it == data.fields.end() || it->second < 0) throw FormatError(std::string("grouter checkpoint missing field '") + key + "'");
    return static_cast<std::size_t>(it->second);
  };
  GrouterConfig c;
  c.vocab_size = field("vocab_size");
  c.embed = field("embed");
  c.num_blocks = field("num_blocks");
  c.num_heads = field("num_heads");
  c.num_experts = field("num_experts");
  c.ffn_hidden = field("ffn_hidden");
  c.max_seq_len = field("max_seq_len");
  c.use_positions = field("use_positions") != 0;
  const bool frozen = field("frozen") != 0;
  return Grouter(c, std::move(data.params), frozen);
}

DistillResult distill(Grouter& grouter, const Teacher& teacher, std::size_t teacher_experts, const Corpus& corpus,
                      const DistillOptions& options) {
  if (teacher_experts != grouter.config().num_experts) {
    throw ConfigError("distill: source router has " + std::to_string(teacher_experts) + " experts, grouter outputs " +
                      std::to_string(grouter.config().num_experts));
  }
  if (grouter.frozen()) throw FrozenParameterError("distill: grouter is frozen");
  corpus.validate();
  if (corpus.size() == 0) throw ConfigError("distill: empty corpus");
  auto& params = grouter.params();
  std::vector<std::string> names;
  for (const auto& [name, t] : params.entries()) names.push_back(name);
  ad::Optimizer optimizer(options.optimizer);
  const double peak = options.optimizer.learning_rate;
  DistillResult result;
  for (std::size_t step = 0; step < options.steps; ++step) {
    const Batch batch = gather(corpus, moe::sample_batch(corpus.size(), options.batch_size, options.seed, step));
    const ad::Tensor target = teacher(batch).detach();
    params.zero_grad();
    const ad::Tensor loss = ad::kl_divergence_logits(target, grouter.forward(batch));
    if (!std::isfinite(loss.item())) throw DivergenceError("distill: non-finite loss at step " + std::to_string(step));
    loss.backward();
    clip(params, names, params.grad_norm(names), options.clip_norm);
    if (options.cosine_schedule) {
      optimizer.set_learning_rate(ad::warmup_cosine_lr(peak, static_cast<long long>(step), static_cast<long long>(options.warmup_steps),
                                                       static_cast<long long>(options.steps)));
    }
    optimizer.step(params, names);
    result.loss.push_back(loss.item());
  }
  params.zero_grad();
  return result;
}

DistillResult distill(Grouter& grouter, const moe::MoeModel& source, const Corpus& corpus, const DistillOptions& options) {
  return distill(
      grouter, [&source](const Batch& b) { return source.first_router_logits(b); }, source.config().num_experts, corpus,
      options);
}

double distill_loss(const Grouter& grouter, const Teacher& teacher, const Corpus& corpus, std::size_t max_sequences) {
  const std::size_t n = std::min(max_sequences, corpus.size());
  if (n == 0) throw ConfigError("distill_loss: empty corpus");
  double total = 0.0;
  for (std::size_t begin = 0; begin < n; begin += 8) {
    std::vector<std::size_t> ids(std::min<std::size_t>(8, n - begin));
    std::iota(ids.begin(), ids.end(), begin);
    const Batch batch = gather(corpus, ids);
    total += ad::kl_divergence_logits(teacher(batch), grouter.scores(batch)).item() * static_cast<double>(ids.size());
  }
  return total / static_cast<double>(n);
}

TuneResult expert_tune(Grouter& grouter, const Corpus& target, const TuneOptions& options) {
  if (!grouter.frozen()) throw ConfigError("expert_tune: grouter must be frozen first");
  if (options.top_k == 0 || options.top_k > grouter.config().num_experts) throw ConfigError("expert_tune: invalid top_k");
  TuneResult result;
  if (options.steps == 0) return result;
  target.validate();
  if (target.size() == 0) throw ConfigError("expert_tune: empty corpus");
  auto& params = grouter.params();
  const std::vector<std::string> names{Grouter::kScoreWeights};
  params.unfreeze(Grouter::kScoreWeights);
  ad::Optimizer optimizer(options.optimizer);
  try {
    for (std::size_t step = 0; step < options.steps; ++step) {
      const Batch batch = gather(target, moe::sample_batch(target.size(), options.batch_size, options.seed, step));
      params.zero_grad();
      const ad::Tensor s = grouter.forward(batch);
      const auto decision = moe::route(s, options.top_k, options.normalizer);
      const ad::Tensor loss = moe::aux_loss(decision, s, options.aux_coeff);
      loss.backward();
      optimizer.step(params, names);
      result.aux.push_back(loss.item());
      moe::ExpertLoad load(decision.num_experts, decision.k);
      load.add(decision);
      result.maxvio.push_back(moe::maxvio_global(load));
    }
  } catch (...) {
    params.zero_grad();
    params.freeze(Grouter::kScoreWeights);
    throw;
  }
  params.zero_grad();
  params.freeze(Grouter::kScoreWeights);
  return result;
}

moe::ExpertLoad routing_load(const Grouter& grouter, const Corpus& corpus, std::size_t k, moe::Normalizer normalizer,
                             std::size_t max_sequences) {
  moe::ExpertLoad load(grouter.config().num_experts, k);
  const std::size_t n = std::min(max_sequences, corpus.size());
  for (std::size_t begin = 0; begin < n; begin += 16) {
    std::vector<std::size_t> ids(std::min<std::size_t>(16, n - begin));
    std::iota(ids.begin(), ids.end(), begin);
    load.add(grouter.shared_route(gather(corpus, ids), k, normalizer));
  }
  return load;
}

moe::ExternalRouter make_external_router(const Grouter& grouter, std::size_t k, moe::Normalizer normalizer) {
  if (!grouter.frozen()) throw ConfigError("external routing needs a frozen grouter");
  return [&grouter, k, normalizer](const std::vector<std::size_t>&, const Batch& batch) {
    return grouter.shared_route(batch, k, normalizer);
  };
}

}  // namespace preroute::grouter
