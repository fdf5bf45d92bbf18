#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "preroute/cache/route_cache.hpp"
#include "preroute/comm/simulator.hpp"
#include "preroute/ep/planner.hpp"
#include "preroute/pipeline/stages.hpp"

namespace fs = std::filesystem;
using namespace preroute;
using namespace preroute::pipeline;

namespace {

struct RunArgs {
  std::string dir;
  std::string config;
  std::vector<std::string> overrides;
};

void add_run_options(CLI::App* sub, RunArgs& a, bool required = true) {
  auto* opt = sub->add_option("--run", a.dir, "Run directory");
  if (required) opt->required();
  sub->add_option("--config", a.config, "Config file (key = value lines); replaces the run's config");
  sub->add_option("--set", a.overrides, "Override one key, e.g. --set target.tokens=64000")->take_all();
}

// Config resolution: --config, else the run's config.txt, else defaults;
// then --set overrides and PREROUTE_SEED.
Run open_run(const RunArgs& a) {
  const fs::path dir(a.dir);
  ExperimentConfig c;
  if (!a.config.empty()) {
    c = ExperimentConfig::load(a.config);
  } else if (fs::exists(dir / artifact::kConfig)) {
    c = ExperimentConfig::load(dir / artifact::kConfig);
  }
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.apply_environment();
  c.validate();
  return Run(dir, c);
}

void print(const ManifestEntry& e) { std::cout << e.to_json() << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"preroute: frozen routing priors for MoE training"};
  app.require_subcommand(1);

  RunArgs ra;
  std::string arm;
  std::vector<std::string> arms;

  struct Stage {
    const char* name;
    const char* help;
    ManifestEntry (*fn)(const Run&);
  };
  const Stage stages[] = {
      {"corpus", "Generate the synthetic multi-domain corpora", stage_corpus},
      {"pretrain-source", "Train the source MoE model", stage_pretrain_source},
      {"distill", "Distill the grouter from the source router", stage_distill},
      {"fold", "Fold grouter experts to the target expert count", stage_fold},
      {"tune", "Expert-tune the folded grouter on the target corpus", stage_tune},
      {"cache", "Precompute target-corpus routing into a route cache", stage_cache},
  };
  std::vector<std::pair<CLI::App*, const Stage*>> simple;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_run_options(sub, ra);
    simple.emplace_back(sub, &s);
  }

  std::string cache_path, plan_path, out_path;
  std::size_t partitions = 0, gpus_per_node = 1, payload = 0;
  std::string granularity = "gpu";
  std::uint64_t seed = 0;

  auto* plan = app.add_subcommand("plan", "Build an expert-parallel placement plan");
  add_run_options(plan, ra, false);
  plan->add_option("--cache", cache_path, "Route cache (standalone mode)");
  plan->add_option("--partitions", partitions, "Number of partitions N_p");
  plan->add_option("--granularity", granularity, "node or gpu")->check(CLI::IsMember({"node", "gpu"}));
  plan->add_option("--gpus-per-node", gpus_per_node, "GPUs per node (node granularity)");
  plan->add_option("--seed", seed, "Clustering seed (standalone mode)");
  plan->add_option("--out", out_path, "Output plan file (standalone mode)");

  auto* sim = app.add_subcommand("simulate", "Simulate dispatch volume of a plan against baselines");
  add_run_options(sim, ra, false);
  sim->add_option("--cache", cache_path, "Route cache (standalone mode)");
  sim->add_option("--plan", plan_path, "Plan file (standalone mode)");
  sim->add_option("--payload", payload, "Bytes per token message");
  sim->add_option("--seed", seed, "Random-baseline seed (standalone mode)");
  sim->add_option("--csv", out_path, "Append a CSV row to this file (standalone mode)");

  comm::TraceSpec trace;
  auto* tr = app.add_subcommand("trace", "Write a synthetic domain-clustered route cache");
  tr->add_option("--domains", trace.domains);
  tr->add_option("--skew", trace.skew)->check(CLI::Range(0.0, 1.0));
  tr->add_option("--sequences", trace.sequences);
  tr->add_option("--tokens", trace.tokens, "Tokens per sequence");
  tr->add_option("--experts", trace.experts);
  tr->add_option("--k", trace.k);
  tr->add_option("--seed", trace.seed);
  tr->add_option("--out", out_path)->required();

  auto* train = app.add_subcommand("train-target", "Train the target model under one routing arm");
  add_run_options(train, ra);
  train->add_option("--router", arm, "grouter, aux, aux_z, none or hash")->required();

  auto* diagnose = app.add_subcommand("diagnose", "Routing stability, gradient CV, E_opt and probes");
  add_run_options(diagnose, ra);
  diagnose->add_option("--router", arms, "Arms to diagnose (default: every configured arm)")->take_all();

  auto* report = app.add_subcommand("report", "Consolidate a run into report tables");
  report->add_option("--run", ra.dir, "Run directory")->required();

  auto* all = app.add_subcommand("run", "Run the whole pipeline");
  add_run_options(all, ra);

  auto* cfg = app.add_subcommand("config", "Print the resolved configuration");
  add_run_options(cfg, ra, false);

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& [sub, s] : simple)
      if (sub->parsed()) print(s->fn(open_run(ra)));

    if (plan->parsed()) {
      if (!cache_path.empty()) {
        if (partitions == 0) throw ConfigError("plan: --partitions is required with --cache");
        ep::PlanOptions o;
        o.partitions = partitions;
        o.granularity = ep::parse_granularity(granularity);
        o.gpus_per_node = gpus_per_node;
        o.seed = seed;
        const auto p = ep::build_plan(cache::RouteCache::load(cache_path), o);
        if (out_path.empty()) {
          std::cout << p.to_json() << '\n';
        } else {
          p.save(out_path);
        }
      } else {
        if (ra.dir.empty()) throw ConfigError("plan: give --run or --cache");
        if (partitions != 0) ra.overrides.push_back("ep.partitions=" + std::to_string(partitions));
        if (plan->count("--granularity") != 0) ra.overrides.push_back("ep.granularity=" + granularity);
        if (plan->count("--gpus-per-node") != 0) ra.overrides.push_back("ep.gpus_per_node=" + std::to_string(gpus_per_node));
        print(stage_plan(open_run(ra)));
      }
    }

    if (sim->parsed()) {
      if (!cache_path.empty()) {
        if (plan_path.empty()) throw ConfigError("simulate: --plan is required with --cache");
        const auto r = comm::simulate(cache::RouteCache::load(cache_path), ep::PlacementPlan::load(plan_path), payload, seed);
        std::cout << r.to_json() << '\n';
        if (!out_path.empty()) {
          const bool fresh = !fs::exists(out_path);
          std::ofstream csv(out_path, std::ios::app);
          if (fresh) csv << comm::CommReport::csv_header() << '\n';
          csv << r.csv_row(fs::path(plan_path).stem().string()) << '\n';
        }
      } else {
        if (ra.dir.empty()) throw ConfigError("simulate: give --run or --cache");
        if (payload != 0) ra.overrides.push_back("ep.payload_bytes=" + std::to_string(payload));
        print(stage_simulate(open_run(ra)));
      }
    }

    if (tr->parsed()) {
      comm::synth_trace(trace).save(out_path);
    }

    if (train->parsed()) print(stage_train_target(open_run(ra), arm));

    if (diagnose->parsed()) {
      const auto run = open_run(ra);
      for (const auto& a : arms.empty() ? run.config().arms : arms) print(stage_diagnose(run, a));
    }

    if (report->parsed()) {
      const auto r = build_report(ra.dir);
      std::cout << "report: " << r.arms.size() << " arm(s)" << (r.has_comm ? ", comm table" : "") << " -> "
                << (fs::path(ra.dir) / "report.json").string() << '\n';
    }

    if (all->parsed()) {
      run_all(open_run(ra));
      std::cout << "run complete: " << ra.dir << '\n';
    }

    if (cfg->parsed()) {
      if (ra.dir.empty()) {
        ExperimentConfig c;
        for (const auto& kv : ra.overrides) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
          c.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        c.apply_environment();
        c.validate();
        std::cout << c.to_text();
      } else {
        std::cout << open_run(ra).config().to_text();
      }
    }
  } catch (const Error& e) {
    std::cerr << "preroute: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "preroute: unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
