#pragma once

#include "occ3d/metrics.hpp"
#include "occ3d/model.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace occ3d {

struct InsufficientViews : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InsufficientPoints : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t points_per_sample = 2048;
  std::size_t views_per_sample = 4;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  int epochs = 60;
  // Stops training after this many optimizer steps; 0 means no cap.
  std::size_t max_steps = 0;
  std::uint64_t seed = 1;
  std::vector<int> eval_views = {1, 5};
  // Validation IoU cadence in epochs; 0 disables best-checkpoint tracking.
  int eval_every = 1;
  std::size_t val_iou_samples = 10000;
  std::size_t val_shapes = 24;

  std::vector<std::string> violations() const;
  // Adds the constraints that depend on the dataset.
  std::vector<std::string> violations(const DatasetConfig& ds) const;
  std::vector<std::string> violations(const Dataset& ds) const { return violations(ds.config); }
  void validate(const Dataset& ds) const;
};

struct Batch {
  std::vector<ViewSet> sets;
  std::vector<std::vector<Vec3>> points;
  std::vector<nn::Real> labels;  // sample-major, matching the model output rows
  std::vector<std::size_t> view_ids;   // per sample, the drawn rig indices
  std::vector<std::size_t> point_ids;  // per sample, the drawn pool indices
};

// k distinct indices of [0, n) in draw order.
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, Rng& rng);

// Per sample: views_per_sample distinct rigs and points_per_sample distinct
// pool entries. The first drawn view is the reference view.
Batch build_batch(const Dataset& ds, std::span<const std::size_t> indices, const TrainConfig& cfg, Rng& rng);

class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg);
  // forward, loss, backward, Adam update; returns the loss.
  double step(const Batch& batch);
  nn::OptimizerState& optimizer() { return opt_; }
  std::size_t steps() const { return opt_.step; }

 private:
  Model& model_;
  nn::ParameterSet params_;
  nn::OptimizerState opt_;
};

struct EvalRecord {
  int epoch = 0;
  int n_views = 0;
  std::string split;
  double mean_iou = 0.0;
};

struct RunManifest {
  std::string config;
  std::string dataset_hash;
  std::string code_version;
  std::vector<double> epoch_loss;
  std::vector<EvalRecord> evals;
  std::size_t steps = 0;
  double wall_clock_s = 0.0;

  // Deterministic content first; the timing line is optional so identical
  // runs compare equal.
  std::string to_text(bool with_timing = true) const;
  void write(const std::filesystem::path& path) const;
};

std::string code_version();

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints and manifest
  std::string config_snapshot;
  std::function<void(int epoch, double loss)> on_epoch;
  // Leaves the model at its best validation weights instead of the last ones.
  bool restore_best = false;
};

// Epochs of shuffled mini-batches over the training split. Writes last.ckpt
// every epoch and best.ckpt at the best validation IoU when out_dir is set.
RunManifest train(const Dataset& ds, Model& model, const TrainConfig& cfg, const TrainOptions& opts = {});

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  MetricConfig metrics;
  bool mesh_metrics = true;
  int resolution = 64;
  double iso = 0.5;
  std::uint64_t view_seed = 0;
  std::vector<std::string> families;  // empty: every family of the split
  std::size_t max_per_family = 0;     // 0: all shapes
  std::optional<std::filesystem::path> mesh_dir;
  std::size_t meshes_per_family = 3;
};

struct EvalRow {
  std::string shape_id;
  std::string family;
  int n_views = 0;
  MetricRow metrics;
};

struct EvalSummary {
  std::string family;  // "all" for the overall row
  std::size_t count = 0;
  double iou = 0.0;
  double chamfer_l1 = 0.0;
  double normal_consistency = 0.0;
  double f_score = 0.0;
};

struct EvalTable {
  std::vector<EvalRow> rows;

  // Means per family in order of first appearance; NaN entries are skipped.
  std::vector<EvalSummary> family_means() const;
  EvalSummary overall() const;
  std::string to_csv() const;
  static EvalTable from_csv(const std::string& text);
};

inline const char* kCsvHeader = "shape_id,family,n_views,iou,chamfer_l1,normal_consistency,f_score";

// World-frame probabilities for query points given the drawn views.
using Predictor = std::function<std::vector<double>(const Sample&, const ViewSet&, std::span<const Vec3>)>;
Predictor model_predictor(Model& model);

// Rig indices drawn for evaluation; seeded per (shape, n_views).
std::vector<std::size_t> eval_view_indices(const Sample& s, std::size_t sample_index, int n_views,
                                           std::uint64_t seed);

// Oracle meshes keyed by sample id, built on first use.
class GroundTruthCache {
 public:
  explicit GroundTruthCache(int resolution = kGroundTruthResolution) : resolution_(resolution) {}
  const TriangleMesh& get(const Sample& s);

 private:
  int resolution_;
  std::map<std::string, TriangleMesh> meshes_;
};

EvalTable evaluate_split(const Dataset& ds, const Predictor& predict, Split split, int n_views,
                         const EvalOptions& opts, GroundTruthCache* cache = nullptr);
EvalTable evaluate_split(const Dataset& ds, Model& model, Split split, int n_views, const EvalOptions& opts,
                         GroundTruthCache* cache = nullptr);

}  // namespace occ3d
