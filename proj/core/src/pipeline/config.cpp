#include "preroute/pipeline/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include "preroute/error.hpp"

namespace preroute::pipeline {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
Field uint_field(T ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return std::to_string(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_uint("", v)); }};
}

template <class S, class T>
Field uint_field(S ExperimentConfig::*outer, T S::*member) {
  return {[=](const ExperimentConfig& c) { return std::to_string(c.*outer.*member); },
          [=](ExperimentConfig& c, const std::string& v) { c.*outer.*member = static_cast<T>(parse_uint("", v)); }};
}

template <class S>
Field real_field(S ExperimentConfig::*outer, double S::*member) {
  return {[=](const ExperimentConfig& c) { return fmt(c.*outer.*member); },
          [=](ExperimentConfig& c, const std::string& v) { c.*outer.*member = parse_double("", v); }};
}

void add_model(std::vector<std::pair<std::string, Field>>& f, const std::string& prefix, moe::MoeConfig ExperimentConfig::*m) {
  using M = moe::MoeConfig;
  f.emplace_back(prefix + ".hidden", uint_field(m, &M::hidden));
  f.emplace_back(prefix + ".layers", uint_field(m, &M::num_layers));
  f.emplace_back(prefix + ".heads", uint_field(m, &M::num_heads));
  f.emplace_back(prefix + ".experts", uint_field(m, &M::num_experts));
  f.emplace_back(prefix + ".top_k", uint_field(m, &M::top_k));
  f.emplace_back(prefix + ".expert_hidden", uint_field(m, &M::expert_hidden));
  f.emplace_back(prefix + ".normalizer",
                 Field{[=](const ExperimentConfig& c) { return moe::to_string((c.*m).router_normalizer); },
                       [=](ExperimentConfig& c, const std::string& v) { (c.*m).router_normalizer = moe::parse_normalizer(v); }});
}

void add_budget(std::vector<std::pair<std::string, Field>>& f, const std::string& prefix, TrainBudget ExperimentConfig::*b) {
  f.emplace_back(prefix + ".tokens", uint_field(b, &TrainBudget::tokens));
  f.emplace_back(prefix + ".batch", uint_field(b, &TrainBudget::batch_size));
  f.emplace_back(prefix + ".lr", real_field(b, &TrainBudget::learning_rate));
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const auto table = [] {
    using C = ExperimentConfig;
    using P = CorpusSpec;
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("seed", uint_field(&C::seed));
    f.emplace_back("corpus.vocab", Field{[](const C& c) { return std::to_string(c.corpus.vocab_size); },
                                         [](C& c, const std::string& v) {
                                           const auto n = static_cast<std::size_t>(parse_uint("", v));
                                           c.corpus.vocab_size = c.source.vocab_size = c.target.vocab_size = c.grouter.vocab_size = n;
                                         }});
    f.emplace_back("corpus.seq_len", Field{[](const C& c) { return std::to_string(c.corpus.seq_len); },
                                           [](C& c, const std::string& v) {
                                             const auto n = static_cast<std::size_t>(parse_uint("", v));
                                             c.corpus.seq_len = c.source.seq_len = c.target.seq_len = c.grouter.max_seq_len = n;
                                           }});
    f.emplace_back("corpus.train_sequences", uint_field(&C::corpus, &P::train_sequences));
    f.emplace_back("corpus.valid_sequences", uint_field(&C::corpus, &P::valid_sequences));
    f.emplace_back("corpus.target_sequences", uint_field(&C::corpus, &P::target_sequences));
    f.emplace_back("corpus.domains", uint_field(&C::corpus, &P::domains));
    f.emplace_back("corpus.branching", uint_field(&C::corpus, &P::branching));
    f.emplace_back("corpus.in_domain", real_field(&C::corpus, &P::in_domain));
    f.emplace_back("corpus.skew", real_field(&C::corpus, &P::skew));
    f.emplace_back("corpus.target_skew", real_field(&C::corpus, &P::target_skew));
    add_model(f, "source", &C::source);
    for (auto& [k, fld] : f)
      if (k == "source.experts")
        fld.set = [](C& c, const std::string& v) {
          c.source.num_experts = c.grouter.num_experts = static_cast<std::size_t>(parse_uint("", v));
        };
    add_budget(f, "source", &C::source_budget);
    using G = grouter::GrouterConfig;
    f.emplace_back("grouter.embed", uint_field(&C::grouter, &G::embed));
    f.emplace_back("grouter.blocks", uint_field(&C::grouter, &G::num_blocks));
    f.emplace_back("grouter.heads", uint_field(&C::grouter, &G::num_heads));
    f.emplace_back("grouter.ffn_hidden", uint_field(&C::grouter, &G::ffn_hidden));
    f.emplace_back("grouter.positions",
                   Field{[](const C& c) { return std::string(c.grouter.use_positions ? "true" : "false"); },
                         [](C& c, const std::string& v) { c.grouter.use_positions = parse_bool("", v); }});
    add_budget(f, "distill", &C::distill_budget);
    f.emplace_back("fold.method", Field{[](const C& c) { return to_string(c.fold_method); },
                                        [](C& c, const std::string& v) { c.fold_method = parse_fold_method(v); }});
    f.emplace_back("fold.probe_sequences", uint_field(&C::fold_probe_sequences));
    add_budget(f, "tune", &C::tune_budget);
    add_model(f, "target", &C::target);
    add_budget(f, "target", &C::target_budget);
    f.emplace_back("target.arms", Field{[](const C& c) {
                                          std::string s;
                                          for (const auto& a : c.arms) s += (s.empty() ? "" : ",") + a;
                                          return s;
                                        },
                                        [](C& c, const std::string& v) {
                                          c.arms.clear();
                                          std::stringstream ss(v);
                                          for (std::string a; std::getline(ss, a, ',');)
                                            if (!trim(a).empty()) c.arms.push_back(trim(a));
                                        }});
    f.emplace_back("target.checkpoint_every", uint_field(&C::checkpoint_every));
    f.emplace_back("ep.partitions", uint_field(&C::partitions));
    f.emplace_back("ep.granularity", Field{[](const C& c) { return ep::to_string(c.granularity); },
                                           [](C& c, const std::string& v) { c.granularity = ep::parse_granularity(v); }});
    f.emplace_back("ep.gpus_per_node", uint_field(&C::gpus_per_node));
    f.emplace_back("ep.payload_bytes", uint_field(&C::payload_bytes));
    f.emplace_back("diag.cv_window", uint_field(&C::cv_window));
    f.emplace_back("diag.probe_interval", uint_field(&C::probe_interval));
    f.emplace_back("diag.probe_steps", uint_field(&C::probe_steps));
    f.emplace_back("diag.probe_lr", Field{[](const C& c) { return fmt(c.probe_lr); },
                                          [](C& c, const std::string& v) { c.probe_lr = parse_double("", v); }});
    f.emplace_back("diag.probe_sequences", uint_field(&C::probe_sequences));
    return f;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

const std::vector<std::string> kArms{"grouter", "aux", "aux_z", "none", "hash"};

}  // namespace

std::size_t TrainBudget::steps(std::size_t seq_len) const {
  const std::uint64_t per_step = static_cast<std::uint64_t>(batch_size) * seq_len;
  return static_cast<std::size_t>((tokens + per_step - 1) / per_step);
}

std::string to_string(FoldMethod m) {
  switch (m) {
    case FoldMethod::greedy: return "greedy";
    case FoldMethod::load_balance: return "load_balance";
    case FoldMethod::random: return "random";
  }
  return "?";
}

FoldMethod parse_fold_method(const std::string& text) {
  if (text == "greedy") return FoldMethod::greedy;
  if (text == "load_balance") return FoldMethod::load_balance;
  if (text == "random") return FoldMethod::random;
  throw ConfigError("unknown fold method '" + text + "'");
}

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  try {
    field(key).set(*this, value);
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    throw ConfigError(what.rfind(": ", 0) == 0 ? key + what : what);
  }
}

std::string ExperimentConfig::get(const std::string& key) const { return field(key).get(*this); }

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::apply_environment() {
  if (const char* s = std::getenv("PREROUTE_SEED"); s != nullptr && *s != '\0') seed = parse_uint("PREROUTE_SEED", s);
}

void ExperimentConfig::validate() const {
  source.validate();
  grouter.validate();
  target.validate();
  for (const auto* b : {&source_budget, &distill_budget, &tune_budget, &target_budget}) {
    if (b->tokens == 0) throw ConfigError("token budgets must be positive");
    if (b->batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (!(b->learning_rate > 0)) throw ConfigError("learning rates must be positive");
  }
  const auto& c = corpus;
  if (c.vocab_size == 0 || c.seq_len < 2 || c.domains == 0 || c.vocab_size < c.domains)
    throw ConfigError("corpus: need vocab >= domains >= 1 and seq_len >= 2");
  if (c.train_sequences == 0 || c.valid_sequences == 0 || c.target_sequences == 0)
    throw ConfigError("corpus: sequence counts must be positive");
  if (!(c.skew > 0) || !(c.target_skew > 0)) throw ConfigError("corpus: skew must be positive");
  for (const auto* m : {&source, &target}) {
    if (m->vocab_size != c.vocab_size) throw ConfigError("model vocab differs from corpus.vocab");
    if (m->seq_len != c.seq_len) throw ConfigError("model seq_len differs from corpus.seq_len");
  }
  if (grouter.vocab_size != c.vocab_size || grouter.max_seq_len < c.seq_len)
    throw ConfigError("grouter vocab/max_seq_len inconsistent with the corpus");
  if (grouter.num_experts != source.num_experts)
    throw ConfigError("grouter experts (" + std::to_string(grouter.num_experts) + ") must equal source.experts (" +
                      std::to_string(source.num_experts) + ")");
  if (target.num_experts > source.num_experts)
    throw ConfigError("fold: target.experts (" + std::to_string(target.num_experts) + ") exceeds source.experts (" +
                      std::to_string(source.num_experts) + ")");
  if (partitions == 0 || partitions > target.num_experts) throw ConfigError("ep.partitions must be in [1, target.experts]");
  if (gpus_per_node == 0) throw ConfigError("ep.gpus_per_node must be positive");
  if (arms.empty()) throw ConfigError("target.arms is empty");
  for (const auto& a : arms)
    if (std::find(kArms.begin(), kArms.end(), a) == kArms.end()) throw ConfigError("unknown target arm '" + a + "'");
  if (cv_window == 0) throw ConfigError("diag.cv_window must be positive");
  if (fold_probe_sequences == 0 || probe_sequences == 0) throw ConfigError("probe sizes must be positive");
}

SyntheticSpec ExperimentConfig::source_corpus_spec() const {
  SyntheticSpec s;
  s.vocab_size = corpus.vocab_size;
  s.seq_len = corpus.seq_len;
  s.num_sequences = corpus.train_sequences + corpus.valid_sequences;
  s.num_domains = corpus.domains;
  s.branching = corpus.branching;
  s.in_domain = corpus.in_domain;
  s.skew = corpus.skew;
  s.structure_seed = seed + 1;
  s.sample_seed = seed + 2;
  return s;
}

SyntheticSpec ExperimentConfig::target_corpus_spec() const {
  SyntheticSpec s = source_corpus_spec();
  s.num_sequences = corpus.target_sequences + corpus.valid_sequences;
  s.skew = corpus.target_skew;
  s.sample_seed = seed + 3;
  return s;
}

std::size_t ExperimentConfig::effective_payload_bytes() const {
  return payload_bytes != 0 ? payload_bytes : target.hidden * 2;
}

ExperimentConfig nano_config() { return {}; }

}  // namespace preroute::pipeline
