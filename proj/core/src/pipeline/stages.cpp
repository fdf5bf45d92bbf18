#include "preroute/pipeline/stages.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <sstream>

#include "preroute/cache/route_cache.hpp"
#include "preroute/comm/simulator.hpp"
#include "preroute/diag/diagnostics.hpp"
#include "preroute/ep/planner.hpp"
#include "preroute/folding.hpp"
#include "preroute/grouter/grouter.hpp"
#include "preroute/moe/train.hpp"
#include "preroute/synthetic.hpp"

namespace preroute::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace artifact {
std::string target_model(const std::string& arm) { return "target_" + arm + ".ckpt"; }
std::string target_metrics(const std::string& arm) { return "target_" + arm + "_metrics.csv"; }
std::string target_summary(const std::string& arm) { return "target_" + arm + "_summary.json"; }
std::string diag_summary(const std::string& arm) { return "diag_" + arm + ".json"; }
}  // namespace artifact

namespace {

const std::map<std::string, std::string>& producers() {
  using namespace artifact;
  static const std::map<std::string, std::string> m{
      {kCorpusSource, "corpus"},   {kCorpusSourceValid, "corpus"}, {kCorpusTarget, "corpus"},
      {kCorpusValid, "corpus"},    {kSource, "pretrain-source"},   {kSourceMetrics, "pretrain-source"},
      {kGrouter, "distill"},       {kDistillLoss, "distill"},      {kFolded, "fold"},
      {kFoldMap, "fold"},          {kTuned, "tune"},               {kTuneMetrics, "tune"},
      {kRoutes, "cache"},          {kPlan, "plan"},                {kComm, "simulate"},
      {kCommCsv, "simulate"},      {kComparison, "train-target"},
  };
  return m;
}

// Seed offsets per stage, so stages stay independent of each other's draws.
enum SeedSlot : std::uint64_t {
  kSourceInit = 10, kSourceTrain, kGrouterInit = 20, kDistillSeed, kFoldSeed = 30, kTuneSeed = 40,
  kPlanSeed = 50, kSimulateSeed, kTargetInit = 60, kTargetTrain, kProbeSeed = 70,
};

class Recorder {
 public:
  Recorder(const Run& run, std::string stage) : run_(run), start_(std::chrono::steady_clock::now()) {
    entry_.stage = std::move(stage);
    entry_.seed = run.config().seed;
    entry_.config_sha256 = run.config_sha256();
  }

  fs::path input(const std::string& name) {
    const auto p = run_.require(name);
    entry_.inputs[name] = sha256_file(p);
    return p;
  }
  fs::path output(const std::string& name) { return run_.path(name); }
  void written(const std::string& name) { entry_.outputs[name] = sha256_file(run_.path(name)); }
  void stat(const std::string& key, double v) { entry_.stats[key] = v; }

  ManifestEntry finish() {
    entry_.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    append_manifest(run_.path(artifact::kManifest), entry_);
    return entry_;
  }

 private:
  const Run& run_;
  std::chrono::steady_clock::time_point start_;
  ManifestEntry entry_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Numeric CSV with a header row; empty cells read as NaN.
struct NumericCsv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("csv: missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  }
  std::vector<double> values(const std::string& name) const {
    const auto c = column(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r.at(c));
    return out;
  }
};

NumericCsv read_numeric_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  NumericCsv csv;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty csv");
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ',');) csv.header.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) row.push_back(cell.empty() ? std::nan("") : std::stod(cell));
    while (row.size() < csv.header.size()) row.push_back(std::nan(""));
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

ad::OptimizerConfig adamw(double lr) { return {ad::OptimizerKind::adamw, lr, 0.9, 0.999, 1e-8, 0.0}; }

void check_grouter(const grouter::Grouter& g, std::size_t experts, const std::string& what, const ExperimentConfig& c) {
  if (g.config().num_experts != experts)
    throw ConfigError(what + " has " + std::to_string(g.config().num_experts) + " experts but the config expects " +
                      std::to_string(experts));
  if (g.config().vocab_size != c.corpus.vocab_size) throw ConfigError(what + " vocabulary differs from corpus.vocab");
}

void check_corpus(const Corpus& corpus, const ExperimentConfig& c, const std::string& name) {
  if (corpus.vocab_size != c.corpus.vocab_size || corpus.seq_len != c.corpus.seq_len)
    throw ConfigError(name + " was generated with a different vocab/seq_len; rerun 'preroute corpus'");
}

moe::TrainOptions source_options(const ExperimentConfig& c) {
  moe::TrainOptions o;
  o.balance = moe::Balance::aux;
  o.steps = c.source_budget.steps(c.corpus.seq_len);
  o.batch_size = c.source_budget.batch_size;
  o.seed = c.seed + kSourceTrain;
  o.optimizer = adamw(c.source_budget.learning_rate);
  o.warmup_steps = o.steps / 10;
  o.cosine_schedule = true;
  return o;
}

bool learned_arm(const std::string& arm) { return arm == "aux" || arm == "aux_z" || arm == "none"; }

void check_arm(const ExperimentConfig& c, const std::string& arm) {
  if (arm != "grouter" && arm != "hash" && !learned_arm(arm)) throw ConfigError("unknown target arm '" + arm + "'");
  (void)c;
}

// Everything train-target needs for one arm, loaded and shape-checked.
struct ArmSetup {
  Corpus target;
  Corpus valid;
  std::optional<cache::RouteCache> routes;
  std::optional<grouter::Grouter> tuned;
  moe::TrainOptions options;
  moe::ExternalRouter valid_router;
};

ArmSetup prepare_arm(const Run& run, Recorder& rec, const std::string& arm) {
  const auto& c = run.config();
  check_arm(c, arm);
  ArmSetup s;
  s.target = load_corpus(rec.input(artifact::kCorpusTarget));
  s.valid = load_corpus(rec.input(artifact::kCorpusValid));
  check_corpus(s.target, c, artifact::kCorpusTarget);
  check_corpus(s.valid, c, artifact::kCorpusValid);

  auto& o = s.options;
  o.steps = c.target_budget.steps(c.corpus.seq_len);
  o.batch_size = c.target_budget.batch_size;
  o.seed = c.seed + kTargetTrain;
  o.optimizer = adamw(c.target_budget.learning_rate);
  o.warmup_steps = o.steps / 10;
  o.cosine_schedule = true;
  o.checkpoint_every = c.checkpoint_every;

  if (arm == "grouter") {
    s.routes = cache::RouteCache::load(rec.input(artifact::kRoutes));
    s.tuned = grouter::Grouter::load(rec.input(artifact::kTuned));
    const auto& h = s.routes->header();
    if (h.num_experts != c.target.num_experts || h.k != c.target.top_k)
      throw ConfigError("route cache holds E=" + std::to_string(h.num_experts) + ", k=" + std::to_string(h.k) +
                        " but the target model needs E=" + std::to_string(c.target.num_experts) +
                        ", k=" + std::to_string(c.target.top_k));
    if (h.sequence_length != s.target.seq_len || h.token_count != s.target.token_count())
      throw ConfigError("route cache does not cover " + std::string(artifact::kCorpusTarget) + "; rerun 'preroute cache'");
    check_grouter(*s.tuned, c.target.num_experts, artifact::kTuned, c);
    if (!s.tuned->frozen()) throw ConfigError(std::string(artifact::kTuned) + " is not frozen");
    o.mode = moe::RouterMode::external;
    o.balance = moe::Balance::none;
    o.external_router = cache::make_cache_router(*s.routes, c.target.router_normalizer);
    s.valid_router = grouter::make_external_router(*s.tuned, c.target.top_k, c.target.router_normalizer);
  } else if (arm == "hash") {
    std::vector<double> freq(c.corpus.vocab_size, 0.0);
    for (const auto& seq : s.target.sequences)
      for (auto t : seq) freq[t] += 1.0;
    o.mode = moe::RouterMode::hash;
    o.balance = moe::Balance::none;
    o.hash_table = moe::hash_layer_table(freq, c.target.num_experts);
  } else {
    o.mode = moe::RouterMode::learned;
    o.balance = arm == "aux" ? moe::Balance::aux : arm == "aux_z" ? moe::Balance::aux_z : moe::Balance::none;
  }
  return s;
}

double evaluate_arm(const moe::MoeModel& model, const ArmSetup& s) {
  moe::ForwardOptions fo;
  fo.mode = s.options.mode;
  if (fo.mode == moe::RouterMode::hash) fo.hash_table = &s.options.hash_table;
  return moe::evaluate_loss(model, s.valid, fo, s.valid.size(), 8, s.valid_router);
}

fs::path checkpoint_path(const Run& run, const std::string& arm, std::size_t step) {
  return run.path("checkpoints") / arm / ("step_" + std::to_string(step) + ".ckpt");
}

std::vector<double> column(const std::vector<moe::StepRecord>& log, double moe::StepRecord::*m) {
  std::vector<double> out;
  for (const auto& r : log) out.push_back(r.*m);
  return out;
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double tail_mean(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  const std::size_t n = std::max<std::size_t>(1, v.size() / 10);
  double s = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(n);
}

json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double as_double(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

void write_comparison(const Run& run) {
  diag::CsvTable t{{"arm", "tokens", "final_val_loss", "cv_max", "final_maxvio", "max_router_grad_norm"}, {}};
  for (const auto& arm : run.config().arms) {
    const auto p = run.path(artifact::target_summary(arm));
    if (!fs::exists(p)) continue;
    const auto j = read_json(p);
    t.rows.push_back({arm, std::to_string(j.at("tokens").get<std::uint64_t>()),
                      diag::format_number(as_double(j.at("final_val_loss"))), diag::format_number(as_double(j.at("cv_max"))),
                      diag::format_number(as_double(j.at("final_maxvio"))),
                      diag::format_number(as_double(j.at("max_router_grad_norm")))});
  }
  diag::write_csv(run.path(artifact::kComparison), t);
}

}  // namespace

std::string producer_of(const std::string& name) {
  const auto it = producers().find(name);
  if (it != producers().end()) return it->second;
  if (name.rfind("target_", 0) == 0) return "train-target";
  if (name.rfind("diag_", 0) == 0) return "diagnose";
  return "";
}

Run::Run(fs::path dir, ExperimentConfig config) : dir_(std::move(dir)), config_(std::move(config)) {
  config_.validate();
  fs::create_directories(dir_);
  write_text(path(artifact::kConfig), config_.to_text());
}

Run Run::open(const fs::path& dir) {
  const auto p = dir / artifact::kConfig;
  if (!fs::exists(p)) throw MissingArtifactError(p.string() + " not found; start the run with 'preroute corpus --config <file>'");
  return Run(dir, ExperimentConfig::load(p));
}

fs::path Run::require(const std::string& name) const {
  const auto p = path(name);
  if (!fs::exists(p)) {
    const auto stage = producer_of(name);
    throw MissingArtifactError(p.string() + " not found" + (stage.empty() ? "" : "; run 'preroute " + stage + "' first"));
  }
  return p;
}

std::string Run::config_sha256() const { return sha256_hex(config_.to_text()); }

ManifestEntry stage_corpus(const Run& run) {
  Recorder rec(run, "corpus");
  const auto& c = run.config();
  const auto source = generate_corpus(c.source_corpus_spec());
  const auto target = generate_corpus(c.target_corpus_spec());
  const auto ns = c.corpus.train_sequences, nt = c.corpus.target_sequences;
  save_corpus(source.slice(0, ns), rec.output(artifact::kCorpusSource));
  save_corpus(source.slice(ns, source.size()), rec.output(artifact::kCorpusSourceValid));
  save_corpus(target.slice(0, nt), rec.output(artifact::kCorpusTarget));
  save_corpus(target.slice(nt, target.size()), rec.output(artifact::kCorpusValid));
  for (const char* a : {artifact::kCorpusSource, artifact::kCorpusSourceValid, artifact::kCorpusTarget, artifact::kCorpusValid})
    rec.written(a);
  const auto share = [](const Corpus& k) {
    const auto zero = std::count(k.domains.begin(), k.domains.end(), 0);
    return static_cast<double>(zero) / static_cast<double>(k.size());
  };
  rec.stat("source_domain0_share", share(source));
  rec.stat("target_domain0_share", share(target));
  rec.stat("target_domain0_expected", domain0_share(c.target_corpus_spec()));
  return rec.finish();
}

ManifestEntry stage_pretrain_source(const Run& run) {
  Recorder rec(run, "pretrain-source");
  const auto& c = run.config();
  const auto train = load_corpus(rec.input(artifact::kCorpusSource));
  const auto valid = load_corpus(rec.input(artifact::kCorpusSourceValid));
  check_corpus(train, c, artifact::kCorpusSource);
  moe::MoeModel model(c.source, c.seed + kSourceInit);
  const auto r = moe::train_lm(model, train, source_options(c));
  if (r.diverged) throw DivergenceError("pretrain-source: " + r.divergence_reason);
  model.save(rec.output(artifact::kSource));
  moe::write_metric_log(rec.output(artifact::kSourceMetrics), r.log);
  rec.written(artifact::kSource);
  rec.written(artifact::kSourceMetrics);
  rec.stat("steps", static_cast<double>(r.log.size()));
  rec.stat("final_train_loss", r.log.back().loss);
  rec.stat("val_loss", moe::evaluate_loss(model, valid, {}, valid.size()));
  return rec.finish();
}

ManifestEntry stage_distill(const Run& run) {
  Recorder rec(run, "distill");
  const auto& c = run.config();
  const auto train = load_corpus(rec.input(artifact::kCorpusSource));
  const auto valid = load_corpus(rec.input(artifact::kCorpusSourceValid));
  const auto source = moe::MoeModel::load(rec.input(artifact::kSource));
  if (!(source.config() == c.source)) throw ConfigError("source.ckpt was trained with a different source config; rerun 'preroute pretrain-source'");
  grouter::Grouter g(c.grouter, c.seed + kGrouterInit);
  grouter::DistillOptions o;
  o.steps = c.distill_budget.steps(c.corpus.seq_len);
  o.batch_size = c.distill_budget.batch_size;
  o.seed = c.seed + kDistillSeed;
  o.optimizer = adamw(c.distill_budget.learning_rate);
  o.warmup_steps = std::min<std::size_t>(50, o.steps / 10);
  const auto r = grouter::distill(g, source, train, o);
  g.freeze();
  g.save(rec.output(artifact::kGrouter));
  diag::CsvTable t{{"step", "kl"}, {}};
  for (std::size_t i = 0; i < r.loss.size(); ++i) t.rows.push_back({std::to_string(i), diag::format_number(r.loss[i])});
  diag::write_csv(rec.output(artifact::kDistillLoss), t);
  rec.written(artifact::kGrouter);
  rec.written(artifact::kDistillLoss);
  const grouter::Teacher teacher = [&source](const moe::Batch& b) { return source.first_router_logits(b); };
  rec.stat("steps", static_cast<double>(o.steps));
  rec.stat("final_train_kl", r.loss.back());
  rec.stat("val_kl", grouter::distill_loss(g, teacher, valid, valid.size()));
  return rec.finish();
}

ManifestEntry stage_fold(const Run& run) {
  Recorder rec(run, "fold");
  const auto& c = run.config();
  const auto g = grouter::Grouter::load(rec.input(artifact::kGrouter));
  const auto train = load_corpus(rec.input(artifact::kCorpusSource));
  check_grouter(g, c.source.num_experts, artifact::kGrouter, c);
  const std::size_t es = c.source.num_experts, et = c.target.num_experts;
  const auto sizes = folding::group_sizes(es, et);
  const std::size_t probe = std::min(c.fold_probe_sequences, train.size());
  std::vector<moe::RoutingDecision> decisions;
  for (std::size_t i = 0; i < probe; ++i)
    decisions.push_back(g.shared_route({train.sequences[i]}, c.source.top_k, c.source.router_normalizer));
  folding::Groups groups;
  switch (c.fold_method) {
    case FoldMethod::greedy:
      groups = folding::greedy_merge(folding::coactivation_matrix(decisions, es), sizes);
      break;
    case FoldMethod::load_balance: {
      moe::ExpertLoad load(es, c.source.top_k);
      for (const auto& d : decisions) load.add(d);
      std::vector<double> loads(load.counts().begin(), load.counts().end());
      groups = folding::load_balance_merge(loads, sizes);
      break;
    }
    case FoldMethod::random:
      groups = folding::random_merge(es, sizes, c.seed + kFoldSeed);
      break;
  }
  const auto m = folding::mapping_matrix(groups, es);
  folding::fold_grouter(g, m).save(rec.output(artifact::kFolded));
  folding::save_mapping(m, rec.output(artifact::kFoldMap));
  rec.written(artifact::kFolded);
  rec.written(artifact::kFoldMap);
  rec.stat("source_experts", static_cast<double>(es));
  rec.stat("target_experts", static_cast<double>(et));
  return rec.finish();
}

ManifestEntry stage_tune(const Run& run) {
  Recorder rec(run, "tune");
  const auto& c = run.config();
  auto g = grouter::Grouter::load(rec.input(artifact::kFolded));
  const auto target = load_corpus(rec.input(artifact::kCorpusTarget));
  const auto held_out = load_corpus(rec.input(artifact::kCorpusValid));
  check_grouter(g, c.target.num_experts, artifact::kFolded, c);
  check_corpus(target, c, artifact::kCorpusTarget);
  const auto enc = g.encoder_param_names();
  const auto before_sum = g.params().checksum(enc);
  const std::size_t k = c.target.top_k;
  const auto norm = c.target.router_normalizer;
  const double before = moe::maxvio_global(grouter::routing_load(g, held_out, k, norm, held_out.size()));
  grouter::TuneOptions o;
  o.steps = c.tune_budget.steps(c.corpus.seq_len);
  o.batch_size = c.tune_budget.batch_size;
  o.seed = c.seed + kTuneSeed;
  o.top_k = k;
  o.normalizer = norm;
  o.optimizer = adamw(c.tune_budget.learning_rate);
  const auto r = grouter::expert_tune(g, target, o);
  g.save(rec.output(artifact::kTuned));
  diag::CsvTable t{{"step", "aux", "maxvio"}, {}};
  for (std::size_t i = 0; i < r.aux.size(); ++i)
    t.rows.push_back({std::to_string(i), diag::format_number(r.aux[i]), diag::format_number(r.maxvio[i])});
  diag::write_csv(rec.output(artifact::kTuneMetrics), t);
  rec.written(artifact::kTuned);
  rec.written(artifact::kTuneMetrics);
  rec.stat("maxvio_before", before);
  rec.stat("maxvio_after", moe::maxvio_global(grouter::routing_load(g, held_out, k, norm, held_out.size())));
  rec.stat("encoder_unchanged", g.params().checksum(enc) == before_sum ? 1.0 : 0.0);
  return rec.finish();
}

ManifestEntry stage_cache(const Run& run) {
  Recorder rec(run, "cache");
  const auto& c = run.config();
  const auto g = grouter::Grouter::load(rec.input(artifact::kTuned));
  const auto target = load_corpus(rec.input(artifact::kCorpusTarget));
  check_grouter(g, c.target.num_experts, artifact::kTuned, c);
  check_corpus(target, c, artifact::kCorpusTarget);
  const auto routes = cache::build_cache(g, target, c.target.top_k);
  routes.save(rec.output(artifact::kRoutes));
  rec.written(artifact::kRoutes);
  rec.stat("tokens", static_cast<double>(routes.token_count()));
  rec.stat("bytes", static_cast<double>(fs::file_size(run.path(artifact::kRoutes))));
  return rec.finish();
}

ManifestEntry stage_plan(const Run& run) {
  Recorder rec(run, "plan");
  const auto& c = run.config();
  const auto routes = cache::RouteCache::load(rec.input(artifact::kRoutes));
  if (routes.header().num_experts != c.target.num_experts) throw ConfigError("route cache expert count differs from target.experts");
  ep::PlanOptions o;
  o.partitions = c.partitions;
  o.granularity = c.granularity;
  o.gpus_per_node = c.gpus_per_node;
  o.seed = c.seed + kPlanSeed;
  const auto plan = ep::build_plan(routes, o);
  plan.save(rec.output(artifact::kPlan));
  rec.written(artifact::kPlan);
  const auto pop = plan.population();
  const double mean = static_cast<double>(plan.assignment.size()) / static_cast<double>(pop.size());
  rec.stat("retained", static_cast<double>(plan.retained));
  rec.stat("discarded", static_cast<double>(plan.discarded.size()));
  rec.stat("filter_fallback", plan.filter_fallback ? 1.0 : 0.0);
  rec.stat("population_skew", static_cast<double>(*std::max_element(pop.begin(), pop.end())) / mean - 1.0);
  return rec.finish();
}

ManifestEntry stage_simulate(const Run& run) {
  Recorder rec(run, "simulate");
  const auto& c = run.config();
  const auto routes = cache::RouteCache::load(rec.input(artifact::kRoutes));
  const auto plan = ep::PlacementPlan::load(rec.input(artifact::kPlan));
  if (plan.num_experts != routes.header().num_experts || plan.assignment.size() != routes.num_sequences())
    throw ConfigError("plan.json does not match routes.grtc; rerun 'preroute plan'");
  const auto report = comm::simulate(routes, plan, c.effective_payload_bytes(), c.seed + kSimulateSeed);
  write_text(rec.output(artifact::kComm), report.to_json() + "\n");
  write_text(rec.output(artifact::kCommCsv), comm::CommReport::csv_header() + "\n" + report.csv_row("plan") + "\n");
  rec.written(artifact::kComm);
  rec.written(artifact::kCommCsv);
  rec.stat("remote_fraction", report.remote_fraction());
  rec.stat("savings_vs_random", report.savings_vs_random());
  rec.stat("savings_vs_round_robin", report.savings_vs_round_robin());
  return rec.finish();
}

ManifestEntry stage_train_target(const Run& run, const std::string& arm) {
  Recorder rec(run, "train-target:" + arm);
  const auto& c = run.config();
  auto setup = prepare_arm(run, rec, arm);
  moe::MoeModel model(c.target, c.seed + kTargetInit);
  const auto r = moe::train_lm(model, setup.target, setup.options);
  if (r.diverged) throw DivergenceError("train-target " + arm + ": " + r.divergence_reason);

  const auto ckdir = run.path("checkpoints") / arm;
  fs::remove_all(ckdir);
  fs::create_directories(ckdir);
  for (const auto& ck : r.checkpoints) moe::MoeModel(c.target, ck.params.clone()).save(checkpoint_path(run, arm, ck.step));
  model.save(rec.output(artifact::target_model(arm)));

  diag::CsvTable t{{"step", "tokens", "loss", "grad_norm", "maxvio", "router_grad_norm"}, {}};
  for (const auto& s : r.log)
    t.rows.push_back({std::to_string(s.step), std::to_string(s.tokens), diag::format_number(s.loss),
                      diag::format_number(s.grad_norm), diag::format_number(s.maxvio), diag::format_number(s.router_grad_norm)});
  diag::write_csv(rec.output(artifact::target_metrics(arm)), t);

  const double val = evaluate_arm(model, setup);
  const double cv_max = diag::max_defined(diag::grad_norm_cv(column(r.log, &moe::StepRecord::grad_norm), c.cv_window));
  const double router_max = max_abs(column(r.log, &moe::StepRecord::router_grad_norm));
  const double maxvio = tail_mean(column(r.log, &moe::StepRecord::maxvio));
  json s;
  s["arm"] = arm;
  s["steps"] = r.log.size();
  s["tokens"] = r.log.back().tokens;
  s["final_val_loss"] = number(val);
  s["final_train_loss"] = number(r.log.back().loss);
  s["cv_window"] = c.cv_window;
  s["cv_max"] = number(cv_max);
  s["final_maxvio"] = number(maxvio);
  s["max_router_grad_norm"] = number(router_max);
  json steps = json::array();
  for (const auto& ck : r.checkpoints) steps.push_back(ck.step);
  s["checkpoints"] = steps;
  write_text(rec.output(artifact::target_summary(arm)), s.dump(1) + "\n");
  write_comparison(run);
  for (const auto& a : {artifact::target_model(arm), artifact::target_metrics(arm), artifact::target_summary(arm)}) rec.written(a);
  rec.written(artifact::kComparison);
  rec.stat("final_val_loss", val);
  rec.stat("cv_max", cv_max);
  rec.stat("final_maxvio", maxvio);
  rec.stat("max_router_grad_norm", router_max);
  rec.stat("tokens", static_cast<double>(r.log.back().tokens));
  return rec.finish();
}

ManifestEntry stage_diagnose(const Run& run, const std::string& arm) {
  Recorder rec(run, "diagnose:" + arm);
  const auto& c = run.config();
  const auto summary = read_json(rec.input(artifact::target_summary(arm)));
  const auto metrics = read_numeric_csv(rec.input(artifact::target_metrics(arm)));
  const auto final_model = moe::MoeModel::load(rec.input(artifact::target_model(arm)));
  auto setup = prepare_arm(run, rec, arm);
  if (!(final_model.config() == c.target)) throw ConfigError(artifact::target_model(arm) + " does not match the target config");

  const std::size_t np = std::min(c.probe_sequences, setup.valid.size());
  const moe::Batch probe(setup.valid.sequences.begin(), setup.valid.sequences.begin() + static_cast<long>(np));
  std::vector<std::size_t> ck_steps;
  for (const auto& s : summary.at("checkpoints")) ck_steps.push_back(s.get<std::size_t>());
  std::vector<moe::MoeModel> checkpoints;
  for (auto s : ck_steps) {
    const auto p = checkpoint_path(run, arm, s);
    if (!fs::exists(p)) throw MissingArtifactError(p.string() + " not found; run 'preroute train-target --router " + arm + "' first");
    checkpoints.push_back(moe::MoeModel::load(p));
  }

  // Routing seen by each checkpoint on the probe batch.
  std::vector<diag::RoutingSnapshot> snaps;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const auto id = std::to_string(ck_steps[i]);
    if (arm == "grouter") {
      snaps.push_back(diag::snapshot(id, *setup.tuned, probe, c.target.top_k, c.target.router_normalizer));
    } else if (arm == "hash") {
      const auto scores = checkpoints[i].first_router_logits(probe);
      std::vector<std::uint32_t> flat;
      for (const auto& seq : probe) flat.insert(flat.end(), seq.begin(), seq.end());
      auto snap = diag::snapshot(id, scores, c.target.top_k, c.target.router_normalizer);
      snap.decision = moe::hash_route(flat, setup.options.hash_table, c.target.num_experts, c.target.top_k);
      snaps.push_back(std::move(snap));
    } else {
      snaps.push_back(diag::snapshot(id, checkpoints[i], probe, 0));
    }
  }
  diag::CsvTable routing{{"checkpoint_a", "checkpoint_b", "exact_match", "score_cosine"}, {}};
  double min_match = 1.0, min_cos = 1.0;
  for (std::size_t a = 0; a < snaps.size(); ++a)
    for (std::size_t b = a + 1; b < snaps.size(); ++b) {
      const double m = diag::exact_match_rate(snaps[a], snaps[b]);
      const double cs = diag::score_cosine(snaps[a], snaps[b]);
      min_match = std::min(min_match, m);
      min_cos = std::min(min_cos, cs);
      routing.rows.push_back({snaps[a].checkpoint, snaps[b].checkpoint, diag::format_number(m), diag::format_number(cs)});
    }
  const std::string routing_csv = "diag_" + arm + "_routing.csv";
  diag::write_csv(rec.output(routing_csv), routing);

  const auto grad = metrics.values("grad_norm");
  const auto cv = diag::grad_norm_cv(grad, c.cv_window);
  diag::CsvTable cvt{{"step", "grad_norm", "cv"}, {}};
  for (std::size_t i = 0; i < grad.size(); ++i)
    cvt.rows.push_back({std::to_string(i), diag::format_number(grad[i]), diag::format_number(cv[i])});
  const std::string cv_csv = "diag_" + arm + "_cv.csv";
  diag::write_csv(rec.output(cv_csv), cvt);

  // E_opt: replay the identical run while also computing expert gradients
  // under the reference router (the arm's own final router for learned arms).
  double eopt = std::nan("");
  double replay_match = std::nan("");
  std::vector<double> gaps;
  if (arm != "hash") {
    auto o = setup.options;
    o.checkpoint_every = 0;
    o.track_ideal_gap = true;
    if (learned_arm(arm)) {
      ad::ParameterStore ideal;
      for (const auto& name : final_model.router_param_names()) ideal.add(name, final_model.params().at(name).detach());
      o.ideal_router = std::move(ideal);
    }
    moe::MoeModel model(c.target, c.seed + kTargetInit);
    const auto r = moe::train_lm(model, setup.target, o);
    gaps = column(r.log, &moe::StepRecord::ideal_gap);
    eopt = diag::e_opt(r.log);
    const auto recorded = metrics.values("loss");
    bool same = recorded.size() == r.log.size();
    for (std::size_t i = 0; same && i < recorded.size(); ++i)
      same = diag::format_number(r.log[i].loss) == diag::format_number(recorded[i]);
    replay_match = same ? 1.0 : 0.0;
  }
  diag::CsvTable et{{"step", "ideal_gap"}, {}};
  for (std::size_t i = 0; i < gaps.size(); ++i) et.rows.push_back({std::to_string(i), diag::format_number(gaps[i])});
  const std::string eopt_csv = "diag_" + arm + "_eopt.csv";
  diag::write_csv(rec.output(eopt_csv), et);

  double early_spike = std::nan(""), late_spike = std::nan("");
  diag::CsvTable pt{{"checkpoint", "step", "loss_delta", "probe"}, {}};
  if (learned_arm(arm) && checkpoints.size() >= 2) {
    diag::ProbeOptions po;
    po.interval = c.probe_interval;
    po.steps = c.probe_steps;
    po.learning_rate = c.probe_lr;
    po.batch_size = c.target_budget.batch_size;
    po.seed = c.seed + kProbeSeed;
    for (std::size_t which : {std::size_t{1}, checkpoints.size() - 1}) {
      const auto pr = diag::perturb_probe(checkpoints[which], setup.target, po);
      (which == 1 ? early_spike : late_spike) = pr.max_spike;
      for (std::size_t i = 0; i < pr.loss_delta.size(); ++i) {
        const bool at = std::find(pr.probe_steps.begin(), pr.probe_steps.end(), i) != pr.probe_steps.end();
        pt.rows.push_back({std::to_string(ck_steps[which]), std::to_string(i), diag::format_number(pr.loss_delta[i]), at ? "1" : "0"});
      }
    }
  }
  const std::string probe_csv = "diag_" + arm + "_probe.csv";
  diag::write_csv(rec.output(probe_csv), pt);

  json d;
  d["arm"] = arm;
  d["checkpoints"] = ck_steps;
  d["exact_match_min"] = number(min_match);
  d["score_cosine_min"] = number(min_cos);
  d["cv_window"] = c.cv_window;
  d["cv_max"] = number(diag::max_defined(cv));
  d["e_opt"] = number(eopt);
  d["e_opt_max_step_gap"] = number(gaps.empty() ? std::nan("") : max_abs(gaps));
  d["replay_matches_training"] = number(replay_match);
  d["max_router_grad_norm"] = number(max_abs(metrics.values("router_grad_norm")));
  d["probe_early_spike"] = number(early_spike);
  d["probe_late_spike"] = number(late_spike);
  write_text(rec.output(artifact::diag_summary(arm)), d.dump(1) + "\n");
  for (const auto& a : {routing_csv, cv_csv, eopt_csv, probe_csv, artifact::diag_summary(arm)}) rec.written(a);
  rec.stat("exact_match_min", min_match);
  rec.stat("score_cosine_min", min_cos);
  rec.stat("e_opt", eopt);
  rec.stat("replay_matches_training", replay_match);
  return rec.finish();
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string quadrant(double loss, double maxvio, double loss_median, double maxvio_median) {
  return std::string(loss <= loss_median ? "low_loss" : "high_loss") + (maxvio <= maxvio_median ? "_balanced" : "_imbalanced");
}

namespace {

void check_provenance(const fs::path& dir) {
  const auto entries = read_manifest(dir / artifact::kManifest);
  // Latest producer of every artifact.
  std::map<std::string, const ManifestEntry*> producer;
  for (const auto& e : entries)
    for (const auto& [name, hash] : e.outputs) producer[name] = &e;
  for (const auto& [name, e] : producer) {
    const auto p = dir / name;
    if (fs::exists(p) && sha256_file(p) != e->outputs.at(name))
      throw ProvenanceError(name + " was modified after stage '" + e->stage + "' wrote it");
  }
  std::map<std::string, const ManifestEntry*> latest;
  for (const auto& e : entries) latest[e.stage] = &e;
  for (const auto& [stage, e] : latest) {
    for (const auto& [name, hash] : e->inputs) {
      const auto it = producer.find(name);
      if (it != producer.end() && it->second->outputs.at(name) != hash)
        throw ProvenanceError("stage '" + stage + "' consumed an older " + name + " than the one now in the run; rerun '" +
                              stage.substr(0, stage.find(':')) + "'");
    }
  }
}

}  // namespace

ReportSummary build_report(const fs::path& dir) {
  ReportSummary out;
  fs::create_directories(dir);
  check_provenance(dir);
  const auto start = std::chrono::steady_clock::now();

  std::vector<std::string> arms;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    const std::string prefix = "target_", suffix = "_summary.json";
    if (name.size() > prefix.size() + suffix.size() && name.rfind(prefix, 0) == 0 &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      arms.push_back(name.substr(prefix.size(), name.size() - prefix.size() - suffix.size()));
  }
  std::sort(arms.begin(), arms.end());

  diag::CsvTable loss{{"arm", "step", "tokens", "loss"}, {}};
  diag::CsvTable cvs{{"arm", "step", "cv"}, {}};
  diag::CsvTable scatter{{"arm", "final_val_loss", "final_maxvio", "quadrant"}, {}};
  diag::CsvTable commt{{"label", "partitions", "total_remote", "random_remote", "round_robin_remote", "remote_fraction",
                        "savings_vs_random", "savings_vs_round_robin"},
                       {}};
  json report;
  report["format"] = "preroute-report";
  json arm_rows = json::array();
  std::vector<double> losses, maxvios;
  std::vector<json> summaries;
  for (const auto& arm : arms) {
    const auto s = read_json(dir / artifact::target_summary(arm));
    const auto m = read_numeric_csv(dir / artifact::target_metrics(arm));
    const auto steps = m.values("step"), tokens = m.values("tokens"), l = m.values("loss");
    for (std::size_t i = 0; i < steps.size(); ++i)
      loss.rows.push_back({arm, diag::format_number(steps[i]), diag::format_number(tokens[i]), diag::format_number(l[i])});
    const auto cv = diag::grad_norm_cv(m.values("grad_norm"), s.at("cv_window").get<std::size_t>());
    for (std::size_t i = 0; i < cv.size(); ++i)
      if (!std::isnan(cv[i])) cvs.rows.push_back({arm, diag::format_number(steps[i]), diag::format_number(cv[i])});
    losses.push_back(as_double(s.at("final_val_loss")));
    maxvios.push_back(as_double(s.at("final_maxvio")));
    summaries.push_back(s);
  }
  const double lm = median(losses), mm = median(maxvios);
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const auto q = quadrant(losses[i], maxvios[i], lm, mm);
    scatter.rows.push_back({arms[i], diag::format_number(losses[i]), diag::format_number(maxvios[i]), q});
    json a;
    a["arm"] = arms[i];
    a["final_val_loss"] = number(losses[i]);
    a["final_maxvio"] = number(maxvios[i]);
    a["cv_max"] = summaries[i].at("cv_max");
    a["max_router_grad_norm"] = summaries[i].at("max_router_grad_norm");
    a["quadrant"] = q;
    const auto dp = dir / artifact::diag_summary(arms[i]);
    if (fs::exists(dp)) {
      const auto d = read_json(dp);
      a["e_opt"] = d.at("e_opt");
      a["exact_match_min"] = d.at("exact_match_min");
      a["score_cosine_min"] = d.at("score_cosine_min");
    }
    arm_rows.push_back(a);
  }
  report["arms"] = arm_rows;
  report["loss_median"] = number(lm);
  report["maxvio_median"] = number(mm);
  if (const auto cp = dir / artifact::kComm; fs::exists(cp)) {
    const auto cj = read_json(cp);
    report["comm"] = cj;
    const auto& b = cj.at("baselines");
    commt.rows.push_back({"plan", std::to_string(cj.at("num_partitions").get<std::size_t>()),
                          diag::format_number(cj.at("total_remote").get<double>()),
                          diag::format_number(b.at("random").at("remote").get<double>()),
                          diag::format_number(b.at("round_robin").at("remote").get<double>()),
                          diag::format_number(cj.at("remote_fraction").get<double>()),
                          diag::format_number(cj.at("savings_vs_random").get<double>()),
                          diag::format_number(cj.at("savings_vs_round_robin").get<double>())});
    out.has_comm = true;
  }
  diag::write_csv(dir / "report_loss.csv", loss);
  diag::write_csv(dir / "report_cv.csv", cvs);
  diag::write_csv(dir / "report_scatter.csv", scatter);
  diag::write_csv(dir / "report_comm.csv", commt);
  write_text(dir / "report.json", report.dump(1) + "\n");
  out.arms = arms;

  ManifestEntry e;
  e.stage = "report";
  if (fs::exists(dir / artifact::kConfig)) {
    e.config_sha256 = sha256_hex(read_text(dir / artifact::kConfig));
    e.seed = ExperimentConfig::load(dir / artifact::kConfig).seed;
  }
  for (const auto& arm : arms) {
    for (const auto& a : {artifact::target_summary(arm), artifact::target_metrics(arm)}) e.inputs[a] = sha256_file(dir / a);
    if (fs::exists(dir / artifact::diag_summary(arm))) e.inputs[artifact::diag_summary(arm)] = sha256_file(dir / artifact::diag_summary(arm));
  }
  if (out.has_comm) e.inputs[artifact::kComm] = sha256_file(dir / artifact::kComm);
  for (const char* f : {"report.json", "report_loss.csv", "report_cv.csv", "report_scatter.csv", "report_comm.csv"})
    e.outputs[f] = sha256_file(dir / f);
  e.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  e.stats["arms"] = static_cast<double>(arms.size());
  append_manifest(dir / artifact::kManifest, e);
  return out;
}

void run_all(const Run& run) {
  stage_corpus(run);
  stage_pretrain_source(run);
  stage_distill(run);
  stage_fold(run);
  stage_tune(run);
  stage_cache(run);
  stage_plan(run);
  stage_simulate(run);
  for (const auto& arm : run.config().arms) stage_train_target(run, arm);
  for (const auto& arm : run.config().arms) stage_diagnose(run, arm);
  build_report(run.dir());
}

}  // namespace preroute::pipeline
