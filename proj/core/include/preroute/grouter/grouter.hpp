#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "preroute/autodiff/optim.hpp"
#include "preroute/autodiff/tensor.hpp"
#include "preroute/corpus.hpp"
#include "preroute/moe/model.hpp"
#include "preroute/moe/routing.hpp"
#include "preroute/moe/train.hpp"

namespace preroute::grouter {

using moe::Batch;

struct GrouterConfig {
  std::size_t vocab_size = 64;
  std::size_t embed = 32;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 2;
  std::size_t num_experts = 16;  // E_out
  std::size_t ffn_hidden = 64;
  std::size_t max_seq_len = 32;
  bool use_positions = true;

  void validate() const;
  bool operator==(const GrouterConfig&) const = default;
};

// Standalone structure extractor: W_s(Enc^N(Emb(X))) with bidirectional
// pre-norm encoder blocks.
class Grouter {
 public:
  static constexpr const char* kScoreWeights = "w_s";

  Grouter(const GrouterConfig& config, std::uint64_t seed);
  Grouter(const GrouterConfig& config, ad::ParameterStore params, bool frozen);

  const GrouterConfig& config() const { return config_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }

  // Scores [B*T, E_out], differentiable w.r.t. the parameters.
  ad::Tensor forward(const Batch& batch) const;
  // Detached scores.
  ad::Tensor scores(const Batch& batch) const;
  ad::Tensor scores(const std::vector<std::uint32_t>& tokens) const;

  // One decision for every token of the batch, meant to be shared by all
  // layers of a target model.
  moe::RoutingDecision shared_route(const Batch& batch, std::size_t k, moe::Normalizer normalizer) const;

  void freeze();
  bool frozen() const { return frozen_; }
  // Names of everything except W_s.
  std::vector<std::string> encoder_param_names() const;

  // Copy with W_s replaced by `w` of shape [embed, E'] (folding). Keeps the
  // frozen flag.
  Grouter with_score_weights(const ad::Tensor& w) const;

  void save(const std::filesystem::path& path) const;
  static Grouter load(const std::filesystem::path& path);

 private:
  GrouterConfig config_;
  ad::ParameterStore params_;
  bool frozen_ = false;
};

inline constexpr char kGrouterMagic[] = "GRTC-CKPT";

// Teacher logits [B*T, E] for a batch.
using Teacher = std::function<ad::Tensor(const Batch&)>;

struct DistillOptions {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  ad::OptimizerConfig optimizer{ad::OptimizerKind::adamw, 3e-3, 0.9, 0.999, 1e-8, 0.0};
  std::size_t warmup_steps = 50;
  bool cosine_schedule = true;
  double clip_norm = 1.0;
};

struct DistillResult {
  std::vector<double> loss;  // mean per-token KL, one entry per step
};

// Minimises KL(softmax(teacher) || softmax(G(X))) per token.
DistillResult distill(Grouter& grouter, const Teacher& teacher, std::size_t teacher_experts, const Corpus& corpus,
                      const DistillOptions& options);
// Teacher = the source model's first MoE-layer router.
DistillResult distill(Grouter& grouter, const moe::MoeModel& source, const Corpus& corpus, const DistillOptions& options);

// Mean per-token KL between teacher and grouter over the first
// `max_sequences` sequences.
double distill_loss(const Grouter& grouter, const Teacher& teacher, const Corpus& corpus, std::size_t max_sequences);

struct TuneOptions {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t top_k = 2;
  moe::Normalizer normalizer = moe::Normalizer::softmax;
  double aux_coeff = 0.01;
  ad::OptimizerConfig optimizer{ad::OptimizerKind::adamw, 1e-2, 0.9, 0.999, 1e-8, 0.0};
};

struct TuneResult {
  std::vector<double> aux;     // per step
  std::vector<double> maxvio;  // per step, on the training batch
};

// Updates W_s only, with the load-balancing loss as sole objective. The
// grouter must be frozen and stays frozen.
TuneResult expert_tune(Grouter& grouter, const Corpus& target, const TuneOptions& options);

// Expert load of the grouter's routing over the first `max_sequences`
// sequences.
moe::ExpertLoad routing_load(const Grouter& grouter, const Corpus& corpus, std::size_t k, moe::Normalizer normalizer,
                             std::size_t max_sequences = static_cast<std::size_t>(-1));

// External router for train_lm backed by a frozen grouter.
moe::ExternalRouter make_external_router(const Grouter& grouter, std::size_t k, moe::Normalizer normalizer);

}  // namespace preroute::grouter
