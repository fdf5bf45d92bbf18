#include "preroute/autodiff/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "preroute/error.hpp"

namespace preroute::ad {

Tensor& ParameterStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
  value.set_requires_grad(true);
  index_[name] = entries_.size();
  frozen_[name] = false;
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

bool ParameterStore::contains(const std::string& name) const { return index_.count(name) != 0; }

Tensor& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

void ParameterStore::freeze(const std::string& name) {
  at(name);
  frozen_[name] = true;
}

void ParameterStore::unfreeze(const std::string& name) {
  at(name);
  frozen_[name] = false;
}

void ParameterStore::freeze_all() {
  for (auto& [name, flag] : frozen_) flag = true;
}

bool ParameterStore::is_frozen(const std::string& name) const {
  auto it = frozen_.find(name);
  if (it == frozen_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

double ParameterStore::grad_norm(const std::vector<std::string>& names) const {
  double ss = 0.0;
  auto accumulate = [&ss](const Tensor& t) {
    for (double g : t.grad()) ss += g * g;
  };
  if (names.empty()) {
    for (const auto& [name, t] : entries_) accumulate(t);
  } else {
    for (const auto& name : names) accumulate(at(name));
  }
  return std::sqrt(ss);
}

ParameterStore ParameterStore::clone() const {
  ParameterStore copy;
  for (const auto& [name, t] : entries_) {
    copy.add(name, Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end())));
    copy.frozen_[name] = frozen_.at(name);
  }
  return copy;
}

std::uint64_t ParameterStore::checksum(const std::vector<std::string>& names) const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  auto visit = [&](const std::string& name, const Tensor& t) {
    mix(name.data(), name.size());
    for (auto d : t.shape()) mix(&d, sizeof(d));
    mix(t.data().data(), t.data().size_bytes());
  };
  if (names.empty()) {
    for (const auto& [name, t] : entries_) visit(name, t);
  } else {
    for (const auto& name : names) visit(name, at(name));
  }
  return h;
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
}

void Optimizer::set_learning_rate(double lr) {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  config_.learning_rate = lr;
}

void Optimizer::step(ParameterStore& params, const std::vector<std::string>& names) {
  std::vector<std::string> targets = names;
  if (targets.empty()) {
    for (const auto& [name, t] : params.entries()) targets.push_back(name);
  }
  // Validate everything before touching any value so a failed step leaves
  // the store unchanged.
  for (const auto& name : targets) {
    const Tensor& t = params.at(name);
    if (!t.has_grad()) continue;
    if (params.is_frozen(name)) throw FrozenParameterError("parameter '" + name + "' is frozen");
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in parameter '" + name + "'");
    }
  }
  const double lr = config_.learning_rate;
  for (const auto& name : targets) {
    Tensor& t = params.at(name);
    if (!t.has_grad()) continue;
    auto theta = t.mutable_data();
    const auto grad = t.grad();
    if (config_.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
      continue;
    }
    auto& st = state_[name];
    if (st.m.size() != theta.size()) {
      st.m.assign(theta.size(), 0.0);
      st.v.assign(theta.size(), 0.0);
      st.steps = 0;
    }
    ++st.steps;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.steps));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.steps));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
      st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
      const double m_hat = st.m[i] / c1;
      const double v_hat = st.v[i] / c2;
      theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + config_.eps) + config_.weight_decay * theta[i]);
    }
  }
}

double warmup_cosine_lr(double peak, long long step, long long warmup, long long total, double min_ratio) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long long span = std::max(total - warmup, 1LL);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return peak * (min_ratio + (1.0 - min_ratio) * cosine);
}

}  // namespace preroute::ad
