#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "preroute/error.hpp"
#include "preroute/pipeline/config.hpp"
#include "preroute/pipeline/manifest.hpp"

namespace preroute::pipeline {

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

class ProvenanceError : public Error {
 public:
  using Error::Error;
};

namespace artifact {
inline constexpr char kConfig[] = "config.txt";
inline constexpr char kManifest[] = "manifest.jsonl";
inline constexpr char kCorpusSource[] = "corpus_source.bin";
inline constexpr char kCorpusSourceValid[] = "corpus_source_valid.bin";
inline constexpr char kCorpusTarget[] = "corpus_target.bin";
inline constexpr char kCorpusValid[] = "corpus_valid.bin";
inline constexpr char kSource[] = "source.ckpt";
inline constexpr char kSourceMetrics[] = "source_metrics.csv";
inline constexpr char kGrouter[] = "grouter.ckpt";
inline constexpr char kDistillLoss[] = "distill_loss.csv";
inline constexpr char kFolded[] = "grouter_folded.ckpt";
inline constexpr char kFoldMap[] = "fold_map.txt";
inline constexpr char kTuned[] = "grouter_tuned.ckpt";
inline constexpr char kTuneMetrics[] = "tune_metrics.csv";
inline constexpr char kRoutes[] = "routes.grtc";
inline constexpr char kPlan[] = "plan.json";
inline constexpr char kComm[] = "comm.json";
inline constexpr char kCommCsv[] = "comm.csv";
inline constexpr char kComparison[] = "comparison.csv";

std::string target_model(const std::string& arm);
std::string target_metrics(const std::string& arm);
std::string target_summary(const std::string& arm);
std::string diag_summary(const std::string& arm);
}  // namespace artifact

// Stage that writes `artifact_name`, or "" when unknown.
std::string producer_of(const std::string& artifact_name);

// A run directory holding the resolved config, artifacts and manifest.
class Run {
 public:
  // Creates the directory and writes the resolved config.
  Run(std::filesystem::path dir, ExperimentConfig config);
  // Existing run; reads its config.txt.
  static Run open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return config_; }
  std::filesystem::path path(const std::string& artifact_name) const { return dir_ / artifact_name; }
  // Throws MissingArtifactError naming the stage to run.
  std::filesystem::path require(const std::string& artifact_name) const;
  std::string config_sha256() const;

 private:
  std::filesystem::path dir_;
  ExperimentConfig config_;
};

ManifestEntry stage_corpus(const Run& run);
ManifestEntry stage_pretrain_source(const Run& run);
ManifestEntry stage_distill(const Run& run);
ManifestEntry stage_fold(const Run& run);
ManifestEntry stage_tune(const Run& run);
ManifestEntry stage_cache(const Run& run);
ManifestEntry stage_plan(const Run& run);
ManifestEntry stage_simulate(const Run& run);
// arm: grouter (frozen, replayed from the route cache), aux, aux_z, none
// (learned router without balancing) or hash.
ManifestEntry stage_train_target(const Run& run, const std::string& arm);
// Routing stability across checkpoints, gradient-norm CV, E_opt against the
// arm's reference router and perturbation probes for learned arms.
ManifestEntry stage_diagnose(const Run& run, const std::string& arm);

struct ReportSummary {
  std::vector<std::string> arms;
  bool has_comm = false;
};

// Consolidates every finished arm of the run directory. Refuses artifacts
// whose recorded hashes disagree with the manifest.
ReportSummary build_report(const std::filesystem::path& dir);

// Every stage in order, then all configured arms, diagnostics and report.
void run_all(const Run& run);

// Median with the even-count midpoint convention; NaN when empty.
double median(std::vector<double> v);
// "low_loss"/"high_loss" + "_balanced"/"_imbalanced" against the medians.
std::string quadrant(double loss, double maxvio, double loss_median, double maxvio_median);

}  // namespace preroute::pipeline
