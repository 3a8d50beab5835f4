#pragma once

#include "occ3d/training.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace occ3d::cli {

struct ParseError : std::runtime_error {
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct EvalSettings {
  MetricConfig metrics;
  std::vector<int> views = {1, 5};
  int resolution = 64;
  double iso = 0.5;
  bool mesh_metrics = true;
  std::size_t meshes_per_family = 3;
  std::size_t max_per_family = 0;
  int ablation_views = 4;
  int ablation_seeds = 3;
};

// Config grammar, one file:
//   # comment
//   [section]            experiment, dataset, model, train, eval
//   key = value          lists are comma separated
// Seeds not given explicitly derive from experiment.seed: dataset, training
// (model init and batch draws) and evaluation each get their own stream.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  int threads = 0;  // 0: OpenMP default
  std::filesystem::path out = "runs/default";
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  EvalSettings eval;

  std::optional<std::uint64_t> dataset_seed, init_seed, train_seed, eval_seed;

  // Fills every seed that was not given explicitly.
  void resolve_seeds();
  // Every violated constraint across sections, including cross-section ones.
  std::vector<std::string> violations() const;
  // Resolved configuration with explicit seeds; parses back to itself.
  std::string to_text() const;
};

std::uint64_t training_seed(std::uint64_t root);
// Training stream of ablation repeat `run`; run 0 is the plain training stream.
std::uint64_t repeat_seed(std::uint64_t training_root, int run);

// Throws ParseError on malformed lines, unknown sections or keys, and
// unreadable values. Does not check semantic constraints.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

struct ConfigReport {
  std::optional<ExperimentConfig> config;
  std::vector<std::string> errors;
  bool ok() const { return errors.empty(); }
};
// Parses and checks every constraint; reports all violations at once.
ConfigReport validate_config(const std::filesystem::path& path);

// Means grouped by (family, n_views) plus an "all" row per view count.
inline const char* kSummaryHeader = "family,n_views,count,iou,chamfer_l1,normal_consistency,f_score";
std::string summary_csv(const EvalTable& table);

struct AblationRun {
  Variant variant = Variant::PCV;
  int repeat = 0;
  EvalTable table;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<std::string> families;
  // Rows {P, PC, PCV} x families, metric means over repeats.
  std::string to_csv() const;
  double mean_iou(Variant v) const;
  double mean_iou(Variant v, int repeat) const;
};

inline const char* kAblationHeader = "variant,family,repeats,iou,chamfer_l1,normal_consistency,f_score";

// Trains each variant on identical seeds and evaluates the unseen families
// at eval.ablation_views. Checkpoints go under out_dir when given.
AblationResult run_ablation(const ExperimentConfig& cfg, const Dataset& ds,
                            const std::optional<std::filesystem::path>& out_dir, std::ostream& log);

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// Entry point shared by the executable and the tests; args excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace occ3d::cli
