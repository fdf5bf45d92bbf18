#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "preroute/ep/planner.hpp"
#include "preroute/grouter/grouter.hpp"
#include "preroute/moe/config.hpp"
#include "preroute/synthetic.hpp"

namespace preroute::pipeline {

struct CorpusSpec {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 32;
  std::size_t train_sequences = 4096;
  std::size_t valid_sequences = 64;
  std::size_t target_sequences = 4096;
  std::size_t domains = 4;
  std::size_t branching = 3;
  double in_domain = 0.85;
  double skew = 1.0;         // source corpus
  double target_skew = 1.0;  // target (tuning / target training) corpus

  bool operator==(const CorpusSpec&) const = default;
};

struct TrainBudget {
  std::uint64_t tokens = 0;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;

  // ceil(tokens / (batch * seq_len)).
  std::size_t steps(std::size_t seq_len) const;
  bool operator==(const TrainBudget&) const = default;
};

enum class FoldMethod { greedy, load_balance, random };

std::string to_string(FoldMethod m);
FoldMethod parse_fold_method(const std::string& text);

// Resolved experiment configuration. Text form is one `key = value` per line
// with `#` comments; keys are the dotted names listed by keys(). corpus.vocab
// and corpus.seq_len also size every model, and source.experts sizes the
// grouter output.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  CorpusSpec corpus;

  moe::MoeConfig source{64, 32, 2, 2, 16, 2, 16, 32, moe::Normalizer::softmax};
  TrainBudget source_budget{204800, 8, 3e-3};

  grouter::GrouterConfig grouter{64, 16, 1, 2, 16, 32, 32, true};
  TrainBudget distill_budget{153600, 8, 3e-3};

  FoldMethod fold_method = FoldMethod::greedy;
  std::size_t fold_probe_sequences = 64;

  TrainBudget tune_budget{128000, 8, 1e-2};

  moe::MoeConfig target{64, 32, 2, 2, 8, 2, 16, 32, moe::Normalizer::softmax};
  TrainBudget target_budget{256000, 8, 3e-3};
  std::vector<std::string> arms{"grouter", "aux"};
  std::size_t checkpoint_every = 250;

  std::size_t partitions = 4;
  ep::Granularity granularity = ep::Granularity::gpu;
  std::size_t gpus_per_node = 1;
  std::size_t payload_bytes = 0;  // 0: target hidden * 2

  std::size_t cv_window = 100;
  std::size_t probe_interval = 10;
  std::size_t probe_steps = 50;
  double probe_lr = 1e-5;
  std::size_t probe_sequences = 8;

  // Throws ConfigError on empty budgets or inconsistent shapes.
  void validate() const;

  std::string to_text() const;
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  // Applies PREROUTE_SEED when set.
  void apply_environment();

  static std::vector<std::string> keys();
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  SyntheticSpec source_corpus_spec() const;
  SyntheticSpec target_corpus_spec() const;
  std::size_t effective_payload_bytes() const;

  bool operator==(const ExperimentConfig&) const = default;
};

// Smallest end-to-end configuration (the defaults).
ExperimentConfig nano_config();

}  // namespace preroute::pipeline
