#include "preroute/moe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "preroute/autodiff/ops.hpp"
#include "preroute/error.hpp"

namespace preroute::moe {
namespace {

std::vector<double> collect_grads(const ad::ParameterStore& params, const std::vector<std::string>& names) {
  std::vector<double> out;
  for (const auto& name : names) {
    const auto& t = params.at(name);
    if (t.has_grad()) {
      out.insert(out.end(), t.grad().begin(), t.grad().end());
    } else {
      out.insert(out.end(), t.size(), 0.0);
    }
  }
  return out;
}

Batch gather_batch(const Corpus& corpus, const std::vector<std::size_t>& ids) {
  Batch batch;
  batch.reserve(ids.size());
  for (auto i : ids) batch.push_back(corpus.sequences[i]);
  return batch;
}

}  // namespace

std::string to_string(Balance b) {
  switch (b) {
    case Balance::none: return "none";
    case Balance::aux: return "aux";
    case Balance::aux_z: return "zloss";
  }
  return "unknown";
}

Balance parse_balance(const std::string& text) {
  if (text == "none") return Balance::none;
  if (text == "aux") return Balance::aux;
  if (text == "zloss" || text == "aux_z") return Balance::aux_z;
  throw ConfigError("unknown balance mode '" + text + "'");
}

std::vector<std::size_t> sample_batch(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed, std::size_t step) {
  if (corpus_size == 0) throw ConfigError("cannot sample from an empty corpus");
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + step);
  std::uniform_int_distribution<std::size_t> pick(0, corpus_size - 1);
  std::vector<std::size_t> ids(batch_size);
  for (auto& i : ids) i = pick(rng);
  return ids;
}

RoutingDecision random_routing(std::size_t tokens, std::size_t num_experts, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > num_experts) throw ConfigError("random_routing: invalid k");
  std::mt19937_64 rng(seed);
  RoutingDecision d;
  d.num_experts = num_experts;
  d.k = k;
  d.indices.reserve(tokens * k);
  d.weights.assign(tokens * k, 1.0 / static_cast<double>(k));
  std::vector<std::uint32_t> all(num_experts);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::iota(all.begin(), all.end(), 0U);
    // Partial Fisher-Yates for k distinct experts.
    for (std::size_t j = 0; j < k; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, num_experts - 1);
      std::swap(all[j], all[pick(rng)]);
    }
    std::sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
    d.indices.insert(d.indices.end(), all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return d;
}

double evaluate_loss(const MoeModel& model, const Corpus& corpus, const ForwardOptions& options, std::size_t max_sequences,
                     std::size_t batch_size, const ExternalRouter& external_router) {
  const std::size_t n = std::min(max_sequences, corpus.size());
  if (n == 0) throw ConfigError("evaluate_loss: empty corpus");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    std::vector<std::size_t> ids(end - begin);
    std::iota(ids.begin(), ids.end(), begin);
    const Batch batch = gather_batch(corpus, ids);
    ForwardOptions fo = options;
    RoutingDecision ext;
    if (fo.mode == RouterMode::external) {
      if (!external_router) throw ConfigError("evaluate_loss: external mode needs a router");
      ext = external_router(ids, batch);
      fo.external = &ext;
    }
    const auto result = model.forward(batch, fo);
    const double loss = model.lm_loss(result, batch).item();
    total += loss * static_cast<double>(ids.size());
    count += ids.size();
  }
  return total / static_cast<double>(count);
}

TrainResult train_lm(MoeModel& model, const Corpus& corpus, const TrainOptions& options) {
  corpus.validate();
  if (corpus.size() == 0) throw ConfigError("train_lm: empty corpus");
  if (corpus.seq_len > model.config().seq_len) throw ConfigError("train_lm: corpus sequences longer than model context");
  if (corpus.vocab_size > model.config().vocab_size) throw ConfigError("train_lm: corpus vocabulary exceeds model vocabulary");
  if (options.mode == RouterMode::external && !options.external_router) throw ConfigError("train_lm: external mode needs a router");
  if (options.mode == RouterMode::hash && options.hash_table.empty()) throw ConfigError("train_lm: hash mode needs a table");

  auto& params = model.params();
  const auto router_names = model.router_param_names();
  const auto expert_names = model.expert_param_names();
  if (options.mode != RouterMode::learned) {
    for (const auto& name : router_names) params.freeze(name);
  }
  std::vector<std::string> trainable;
  for (const auto& [name, t] : params.entries())
    if (!params.is_frozen(name)) trainable.push_back(name);

  ad::Optimizer optimizer(options.optimizer);
  const double peak_lr = options.optimizer.learning_rate;
  const auto& cfg = model.config();

  TrainResult result;
  result.checkpoints.push_back({0, params.clone()});
  std::uint64_t tokens = 0;

  auto base_options = [&](const Batch& batch, const std::vector<std::size_t>& ids, RoutingDecision& ext) {
    ForwardOptions fo;
    fo.mode = options.mode;
    if (options.mode == RouterMode::external) {
      ext = options.external_router(ids, batch);
      fo.external = &ext;
    } else if (options.mode == RouterMode::hash) {
      fo.hash_table = &options.hash_table;
    }
    return fo;
  };

  for (std::size_t step = 0; step < options.steps; ++step) {
    const auto ids = sample_batch(corpus.size(), options.batch_size, options.seed, step);
    const Batch batch = gather_batch(corpus, ids);
    RoutingDecision ext;
    ForwardOptions fo = base_options(batch, ids, ext);
    if (options.randomize_routing_at && options.randomize_routing_at(step)) {
      const std::uint64_t seed = options.seed ^ (0xA5A5A5A5ULL + step * 1315423911ULL);
      fo.perturb = [seed, &cfg](std::size_t layer, std::size_t n) -> std::optional<RoutingDecision> {
        return random_routing(n, cfg.num_experts, cfg.top_k, seed + layer);
      };
    }

    std::vector<double> ideal;
    if (options.track_ideal_gap) {
      params.zero_grad();
      ForwardOptions io = fo;
      if (options.mode == RouterMode::learned) {
        if (!options.ideal_router) throw ConfigError("train_lm: ideal gap tracking in learned mode needs ideal_router");
        io.router_override = &*options.ideal_router;
      }
      const auto r = model.forward(batch, io);
      model.lm_loss(r, batch).backward();
      ideal = collect_grads(params, expert_names);
    }

    params.zero_grad();
    const auto fwd = model.forward(batch, fo);
    const ad::Tensor lm = model.lm_loss(fwd, batch);
    ad::Tensor total = lm;
    if (options.mode == RouterMode::learned && options.balance != Balance::none) {
      for (std::size_t l = 0; l < fwd.router_logits.size(); ++l) {
        total = ad::add(total, aux_loss(fwd.decisions[l], fwd.router_logits[l], options.aux_coeff));
        if (options.balance == Balance::aux_z) total = ad::add(total, z_loss(fwd.router_logits[l], options.z_coeff));
      }
    }
    if (!std::isfinite(total.item())) {
      result.diverged = true;
      result.divergence_reason = "non-finite loss at step " + std::to_string(step);
      break;
    }
    total.backward();

    StepRecord rec;
    rec.step = step;
    rec.loss = lm.item();
    rec.grad_norm = params.grad_norm(trainable);
    rec.router_grad_norm = params.grad_norm(router_names);
    if (options.track_ideal_gap) {
      const auto observed = collect_grads(params, expert_names);
      double ss = 0.0;
      for (std::size_t i = 0; i < observed.size(); ++i) ss += (observed[i] - ideal[i]) * (observed[i] - ideal[i]);
      rec.ideal_gap = std::sqrt(ss);
    }
    if (!std::isfinite(rec.grad_norm)) {
      result.diverged = true;
      result.divergence_reason = "non-finite gradient at step " + std::to_string(step);
      break;
    }
    if (options.clip_norm > 0.0 && rec.grad_norm > options.clip_norm) {
      const double c = options.clip_norm / rec.grad_norm;
      for (const auto& name : trainable) {
        auto& t = params.at(name);
        for (double& g : t.mutable_grad()) g *= c;
      }
    }
    if (options.cosine_schedule) {
      optimizer.set_learning_rate(ad::warmup_cosine_lr(peak_lr, static_cast<long long>(step),
                                                       static_cast<long long>(options.warmup_steps),
                                                       static_cast<long long>(options.steps)));
    } else if (options.warmup_steps > 0 && step < options.warmup_steps) {
      optimizer.set_learning_rate(peak_lr * static_cast<double>(step + 1) / static_cast<double>(options.warmup_steps));
    } else {
      optimizer.set_learning_rate(peak_lr);
    }
    optimizer.step(params, trainable);

    ExpertLoad load(cfg.num_experts, cfg.top_k);
    for (const auto& d : fwd.decisions) load.add(d);
    rec.maxvio = maxvio_global(load);
    tokens += static_cast<std::uint64_t>(batch.size() * batch.front().size());
    rec.tokens = tokens;
    result.log.push_back(rec);

    if (options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0) {
      result.checkpoints.push_back({step + 1, params.clone()});
    }
    if (options.validation && options.eval_every > 0 && ((step + 1) % options.eval_every == 0 || step + 1 == options.steps)) {
      ForwardOptions eo;
      eo.mode = options.mode;
      if (options.mode == RouterMode::hash) eo.hash_table = &options.hash_table;
      result.validation.emplace_back(step + 1, evaluate_loss(model, *options.validation, eo, options.eval_sequences,
                                                             options.batch_size, options.external_router));
    }
  }
  params.zero_grad();
  const std::size_t last = result.log.empty() ? 0 : result.log.back().step + 1;
  if (result.checkpoints.back().step != last) result.checkpoints.push_back({last, params.clone()});
  return result;
}

void write_metric_log(const std::filesystem::path& path, const std::vector<StepRecord>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write metric log '" + path.string() + "'");
  out.precision(17);
  out << "step,tokens,loss,grad_norm,maxvio\n";
  for (const auto& r : log) out << r.step << ',' << r.tokens << ',' << r.loss << ',' << r.grad_norm << ',' << r.maxvio << '\n';
}

std::vector<StepRecord> read_metric_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read metric log '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "step,tokens,loss,grad_norm,maxvio") throw FormatError("unexpected metric log header in '" + path.string() + "'");
  std::vector<StepRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    StepRecord r;
    char c1, c2, c3, c4;
    if (!(ss >> r.step >> c1 >> r.tokens >> c2 >> r.loss >> c3 >> r.grad_norm >> c4 >> r.maxvio)) {
      throw FormatError("malformed metric log row: " + line);
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace preroute::moe
