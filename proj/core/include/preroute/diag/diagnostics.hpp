#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "preroute/autodiff/tensor.hpp"
#include "preroute/corpus.hpp"
#include "preroute/grouter/grouter.hpp"
#include "preroute/moe/model.hpp"
#include "preroute/moe/train.hpp"

namespace preroute::diag {

// Routing of a fixed probe batch at one checkpoint.
struct RoutingSnapshot {
  std::string checkpoint;
  moe::RoutingDecision decision;
  std::size_t experts = 0;
  std::vector<double> scores;  // tokens x experts
};

RoutingSnapshot snapshot(std::string checkpoint, const ad::Tensor& scores, std::size_t k, moe::Normalizer normalizer);
// Learned router of `layer`.
RoutingSnapshot snapshot(std::string checkpoint, const moe::MoeModel& model, const moe::Batch& probe, std::size_t layer = 0);
RoutingSnapshot snapshot(std::string checkpoint, const grouter::Grouter& g, const moe::Batch& probe, std::size_t k,
                         moe::Normalizer normalizer);

// Fraction of tokens whose expert sets are equal.
double exact_match_rate(const RoutingSnapshot& a, const RoutingSnapshot& b);
// Mean per-token cosine similarity of the score vectors. Two zero vectors
// count as 1, one zero vector as 0.
double score_cosine(const RoutingSnapshot& a, const RoutingSnapshot& b);

// Trailing-window population stdev / mean; NaN until the window is full or
// when the window mean is 0.
std::vector<double> grad_norm_cv(const std::vector<double>& trace, std::size_t window);
double max_defined(const std::vector<double>& series);

// sum_t || observed_t - ideal_t ||.
double e_opt(const std::vector<std::vector<double>>& observed, const std::vector<std::vector<double>>& ideal);
// Same quantity from a training log with ideal-gap tracking enabled.
double e_opt(const std::vector<moe::StepRecord>& log);

struct GradAlignment {
  double sum_sq = 0.0;      // sum_i |g_i|^2
  double cross_term = 0.0;  // sum_{i != j} g_i . g_j
  double norm_sq = 0.0;     // |sum_i g_i|^2
  bool stagnating = false;  // cross_term ~ -sum_sq
};

GradAlignment grad_alignment(const std::vector<std::vector<double>>& grads, double tolerance = 1e-6);

// Per-token gradients of the LM loss w.r.t. one expert's weights (flattened
// w1, w3, w2), one entry per token routed to it. Leaves the model's own
// grads zeroed.
struct TokenGrads {
  std::vector<std::size_t> tokens;
  std::vector<std::vector<double>> grads;
};
TokenGrads per_token_expert_grads(moe::MoeModel& model, const moe::Batch& batch, const moe::ForwardOptions& options,
                                  std::size_t layer, std::size_t expert);

struct ProbeOptions {
  std::size_t interval = 10;  // randomize routing when (step + 1) % interval == 0
  std::size_t steps = 50;
  double learning_rate = 1e-5;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::vector<moe::StepRecord> baseline;
  std::vector<moe::StepRecord> perturbed;
  std::vector<double> loss_delta;  // perturbed - baseline, per step
  std::vector<std::size_t> probe_steps;
  double max_spike = 0.0;  // largest loss delta at a probe step
  double mean_grad_norm_baseline = 0.0;
  double mean_grad_norm_perturbed = 0.0;
};

// Continues training copies of `model` at a fixed learning rate, with and
// without uniformly random routing at every probe interval.
ProbeResult perturb_probe(const moe::MoeModel& model, const Corpus& corpus, const ProbeOptions& options);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
void write_csv(const std::filesystem::path& path, const CsvTable& table);
std::string format_number(double v);

}  // namespace preroute::diag
