#include "preroute/diag/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "preroute/autodiff/ops.hpp"
#include "preroute/error.hpp"

namespace preroute::diag {
namespace {

void check_pair(const RoutingSnapshot& a, const RoutingSnapshot& b) {
  if (a.decision.tokens() != b.decision.tokens() || a.experts != b.experts) {
    throw ShapeError("routing snapshots cover different probe batches");
  }
}

}  // namespace

RoutingSnapshot snapshot(std::string checkpoint, const ad::Tensor& scores, std::size_t k, moe::Normalizer normalizer) {
  RoutingSnapshot s;
  s.checkpoint = std::move(checkpoint);
  s.decision = moe::route(scores, k, normalizer);
  s.experts = scores.dim(1);
  s.scores.assign(scores.data().begin(), scores.data().end());
  return s;
}

RoutingSnapshot snapshot(std::string checkpoint, const moe::MoeModel& model, const moe::Batch& probe, std::size_t layer) {
  const auto r = model.forward(probe);
  if (layer >= r.router_logits.size()) throw ConfigError("snapshot: layer " + std::to_string(layer) + " out of range");
  return snapshot(std::move(checkpoint), r.router_logits[layer].detach(), model.config().top_k, model.config().router_normalizer);
}

RoutingSnapshot snapshot(std::string checkpoint, const grouter::Grouter& g, const moe::Batch& probe, std::size_t k,
                         moe::Normalizer normalizer) {
  return snapshot(std::move(checkpoint), g.scores(probe), k, normalizer);
}

double exact_match_rate(const RoutingSnapshot& a, const RoutingSnapshot& b) {
  check_pair(a, b);
  const std::size_t n = a.decision.tokens();
  if (n == 0) return 1.0;
  std::size_t same = 0;
  for (std::size_t t = 0; t < n; ++t) {
    auto x = a.decision.experts_of(t);
    auto y = b.decision.experts_of(t);
    std::vector<std::uint32_t> sx(x.begin(), x.end()), sy(y.begin(), y.end());
    std::sort(sx.begin(), sx.end());
    std::sort(sy.begin(), sy.end());
    same += sx == sy;
  }
  return static_cast<double>(same) / static_cast<double>(n);
}

double score_cosine(const RoutingSnapshot& a, const RoutingSnapshot& b) {
  check_pair(a, b);
  const std::size_t n = a.decision.tokens();
  const std::size_t e = a.experts;
  if (n == 0) return 1.0;
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < e; ++i) {
      const double x = a.scores[t * e + i], y = b.scores[t * e + i];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    if (na == 0.0 && nb == 0.0) {
      total += 1.0;
    } else if (na > 0.0 && nb > 0.0) {
      total += dot / (std::sqrt(na) * std::sqrt(nb));
    }
  }
  return total / static_cast<double>(n);
}

std::vector<double> grad_norm_cv(const std::vector<double>& trace, std::size_t window) {
  if (window == 0) throw ConfigError("grad_norm_cv: window must be positive");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> out(trace.size(), nan);
  for (std::size_t i = window - 1; i < trace.size(); ++i) {
    const std::size_t begin = i + 1 - window;
    double mean = 0.0;
    for (std::size_t j = begin; j <= i; ++j) mean += trace[j];
    mean /= static_cast<double>(window);
    if (mean == 0.0) continue;
    double var = 0.0;
    for (std::size_t j = begin; j <= i; ++j) var += (trace[j] - mean) * (trace[j] - mean);
    out[i] = std::sqrt(var / static_cast<double>(window)) / mean;
  }
  return out;
}

double max_defined(const std::vector<double>& series) {
  double best = std::numeric_limits<double>::quiet_NaN();
  for (double v : series)
    if (!std::isnan(v) && (std::isnan(best) || v > best)) best = v;
  return best;
}

double e_opt(const std::vector<std::vector<double>>& observed, const std::vector<std::vector<double>>& ideal) {
  if (observed.size() != ideal.size()) throw ShapeError("e_opt: gradient series have different lengths");
  double total = 0.0;
  for (std::size_t t = 0; t < observed.size(); ++t) {
    if (observed[t].size() != ideal[t].size()) throw ShapeError("e_opt: gradient sizes differ at step " + std::to_string(t));
    double s = 0.0;
    for (std::size_t i = 0; i < observed[t].size(); ++i) s += (observed[t][i] - ideal[t][i]) * (observed[t][i] - ideal[t][i]);
    total += std::sqrt(s);
  }
  return total;
}

double e_opt(const std::vector<moe::StepRecord>& log) {
  double total = 0.0;
  for (const auto& r : log) total += r.ideal_gap;
  return total;
}

GradAlignment grad_alignment(const std::vector<std::vector<double>>& grads, double tolerance) {
  GradAlignment a;
  if (grads.empty()) return a;
  const std::size_t d = grads.front().size();
  for (const auto& g : grads)
    if (g.size() != d) throw ShapeError("grad_alignment: gradients of different sizes");
  std::vector<double> total(d, 0.0);
  for (const auto& g : grads) {
    for (std::size_t x = 0; x < d; ++x) {
      a.sum_sq += g[x] * g[x];
      total[x] += g[x];
    }
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (std::size_t j = 0; j < grads.size(); ++j) {
      if (i == j) continue;
      double dot = 0.0;
      for (std::size_t x = 0; x < d; ++x) dot += grads[i][x] * grads[j][x];
      a.cross_term += dot;
    }
  }
  for (double v : total) a.norm_sq += v * v;
  a.stagnating = a.sum_sq > 0.0 && std::abs(a.cross_term + a.sum_sq) <= tolerance * a.sum_sq;
  return a;
}

TokenGrads per_token_expert_grads(moe::MoeModel& model, const moe::Batch& batch, const moe::ForwardOptions& options,
                                  std::size_t layer, std::size_t expert) {
  if (layer >= model.config().num_layers || expert >= model.config().num_experts) {
    throw ConfigError("per_token_expert_grads: layer or expert out of range");
  }
  moe::ForwardOptions fo = options;
  fo.split_expert = std::pair{layer, expert};
  const auto r = model.forward(batch, fo);
  model.lm_loss(r, batch).backward();
  TokenGrads out;
  for (const auto& tp : r.split) {
    out.tokens.push_back(tp.token);
    std::vector<double> g;
    for (const auto* t : {&tp.w1, &tp.w3, &tp.w2}) {
      if (t->has_grad()) {
        g.insert(g.end(), t->grad().begin(), t->grad().end());
      } else {
        g.insert(g.end(), t->size(), 0.0);
      }
    }
    out.grads.push_back(std::move(g));
  }
  model.params().zero_grad();
  return out;
}

ProbeResult perturb_probe(const moe::MoeModel& model, const Corpus& corpus, const ProbeOptions& options) {
  if (options.interval == 0) throw ConfigError("perturb_probe: interval must be positive");
  moe::TrainOptions t;
  t.steps = options.steps;
  t.batch_size = options.batch_size;
  t.seed = options.seed;
  t.optimizer.learning_rate = options.learning_rate;
  t.balance = moe::Balance::none;
  t.clip_norm = 0.0;

  moe::MoeModel base(model.config(), model.params().clone());
  moe::MoeModel probe(model.config(), model.params().clone());
  ProbeResult r;
  r.baseline = moe::train_lm(base, corpus, t).log;
  const std::size_t interval = options.interval;
  t.randomize_routing_at = [interval](std::size_t step) { return (step + 1) % interval == 0; };
  r.perturbed = moe::train_lm(probe, corpus, t).log;
  const std::size_t n = std::min(r.baseline.size(), r.perturbed.size());
  for (std::size_t i = 0; i < n; ++i) {
    r.loss_delta.push_back(r.perturbed[i].loss - r.baseline[i].loss);
    r.mean_grad_norm_baseline += r.baseline[i].grad_norm / static_cast<double>(n);
    r.mean_grad_norm_perturbed += r.perturbed[i].grad_norm / static_cast<double>(n);
    if ((i + 1) % interval == 0) {
      r.probe_steps.push_back(i);
      r.max_spike = std::max(r.max_spike, r.loss_delta.back());
    }
  }
  return r;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) throw Error("csv row width differs from header");
    line(row);
  }
}

}  // namespace preroute::diag
