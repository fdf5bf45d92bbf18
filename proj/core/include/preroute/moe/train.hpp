#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "preroute/autodiff/optim.hpp"
#include "preroute/corpus.hpp"
#include "preroute/moe/model.hpp"

namespace preroute::moe {

enum class Balance { none, aux, aux_z };

std::string to_string(Balance b);
Balance parse_balance(const std::string& text);

// Routing for the sequences of a batch, identified by corpus index.
using ExternalRouter = std::function<RoutingDecision(const std::vector<std::size_t>& sequence_ids, const Batch& batch)>;

struct TrainOptions {
  RouterMode mode = RouterMode::learned;
  Balance balance = Balance::aux;
  double aux_coeff = 0.01;
  double z_coeff = 0.001;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  ad::OptimizerConfig optimizer{ad::OptimizerKind::adamw, 3e-3, 0.9, 0.999, 1e-8, 0.0};
  std::size_t warmup_steps = 0;
  bool cosine_schedule = false;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t checkpoint_every = 0;  // 0: initial and final only

  ExternalRouter external_router;       // RouterMode::external
  std::vector<std::uint32_t> hash_table;  // RouterMode::hash

  // When set, every step also computes the expert gradient under these
  // (fixed) router weights and logs its distance to the observed one. In
  // external mode the external router itself is the reference.
  std::optional<ad::ParameterStore> ideal_router;
  bool track_ideal_gap = false;

  // Per-step routing override (perturbation probes).
  std::function<bool(std::size_t step)> randomize_routing_at;

  const Corpus* validation = nullptr;
  std::size_t eval_every = 0;
  std::size_t eval_sequences = 32;
};

struct StepRecord {
  std::size_t step = 0;
  std::uint64_t tokens = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double maxvio = 0.0;
  double router_grad_norm = 0.0;
  double ideal_gap = 0.0;
};

struct Checkpoint {
  std::size_t step = 0;
  ad::ParameterStore params;
};

struct TrainResult {
  std::vector<StepRecord> log;
  std::vector<Checkpoint> checkpoints;
  std::vector<std::pair<std::size_t, double>> validation;  // (step, loss)
  bool diverged = false;
  std::string divergence_reason;
};

// Trains `model` in place. Deterministic given options.seed. On a
// non-finite loss or gradient training stops, the model is restored to the
// last good parameters and `diverged` is set.
TrainResult train_lm(MoeModel& model, const Corpus& corpus, const TrainOptions& options);

// Mean next-token cross-entropy over the first `max_sequences` sequences.
double evaluate_loss(const MoeModel& model, const Corpus& corpus, const ForwardOptions& options,
                     std::size_t max_sequences, std::size_t batch_size = 8,
                     const ExternalRouter& external_router = {});

// Batch sampling used by train_lm: sequence ids for `step`.
std::vector<std::size_t> sample_batch(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed, std::size_t step);

// Uniformly random routing: k distinct experts per token, weights 1/k.
RoutingDecision random_routing(std::size_t tokens, std::size_t num_experts, std::size_t k, std::uint64_t seed);

// CSV with header step,tokens,loss,grad_norm,maxvio.
void write_metric_log(const std::filesystem::path& path, const std::vector<StepRecord>& log);
std::vector<StepRecord> read_metric_log(const std::filesystem::path& path);

}  // namespace preroute::moe
