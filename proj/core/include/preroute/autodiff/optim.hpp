#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "preroute/autodiff/tensor.hpp"

namespace preroute::ad {

// Ordered collection of named leaf parameters with per-parameter freeze flags.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor value);
  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  void freeze(const std::string& name);
  void unfreeze(const std::string& name);
  void freeze_all();
  bool is_frozen(const std::string& name) const;

  void zero_grad();
  // Euclidean norm over the gradients of the named parameters (all when empty).
  double grad_norm(const std::vector<std::string>& names = {}) const;
  // Deep copy of values, detached, without grads.
  ParameterStore clone() const;
  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum(const std::vector<std::string>& names = {}) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, bool> frozen_;
};

enum class OptimizerKind { sgd, adamw };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// SGD / AdamW over a subset of a ParameterStore. Moment state is keyed by
// parameter name so the optimizer can outlive reorderings of the store.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  // Updates every named parameter (all parameters when `names` is empty)
  // using its current grad. Parameters without a grad are skipped. Throws
  // FrozenParameterError when a named parameter is frozen, NonFiniteError
  // naming the parameter when its grad holds NaN/inf.
  void step(ParameterStore& params, const std::vector<std::string>& names = {});

  void set_learning_rate(double lr);
  double learning_rate() const { return config_.learning_rate; }
  const OptimizerConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    long long steps = 0;
  };
  OptimizerConfig config_;
  std::map<std::string, Moments> state_;
};

// Linear warmup then cosine decay to `min_ratio * peak`.
double warmup_cosine_lr(double peak, long long step, long long warmup, long long total,
                        double min_ratio = 0.1);

}  // namespace preroute::ad
