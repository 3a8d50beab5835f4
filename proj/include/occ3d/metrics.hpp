#pragma once

#include "occ3d/mesh.hpp"
#include "occ3d/meshing.hpp"
#include "occ3d/scenegen.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace occ3d {

struct EmptyTarget : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// 1% of the diagonal of the scene cube.
inline const double kDefaultFThreshold = 0.01 * std::sqrt(3.0) * 2.0 * kSceneHalfExtent;
inline constexpr int kGroundTruthResolution = 128;

struct MetricConfig {
  std::size_t iou_samples = 100000;
  std::size_t surface_samples = 10000;
  double f_threshold = kDefaultFThreshold;
  std::uint64_t seed = 0;

  std::vector<std::string> violations() const;
  void validate() const;
};

struct MetricRow {
  double iou = 0.0;
  double chamfer_l1 = 0.0;
  double normal_consistency = 0.0;
  double f_score = 0.0;
  // Empty when every metric is defined; "empty_mesh" when the prediction
  // produced no surface (mesh metrics are then NaN).
  std::string flag;
};

// ---------------------------------------------------------------------------
// Nearest neighbors

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;
};

// Exact search through a uniform bucket grid over the target points.
class NearestNeighbors {
 public:
  explicit NearestNeighbors(std::span<const Vec3> target);
  Neighbor query(const Vec3& q) const;
  std::vector<Neighbor> query(std::span<const Vec3> queries) const;

 private:
  std::vector<Vec3> points_;
  Vec3 lo_;
  double cell_ = 1.0;
  std::array<int, 3> dims_{1, 1, 1};
  std::vector<std::uint32_t> start_;  // bucket offsets into order_
  std::vector<std::uint32_t> order_;
};

std::vector<Neighbor> nearest_neighbors(std::span<const Vec3> queries, std::span<const Vec3> target);
// O(n m) reference.
std::vector<Neighbor> nearest_neighbors_brute(std::span<const Vec3> queries, std::span<const Vec3> target);

// ---------------------------------------------------------------------------
// Volumetric IoU

using OccupancyFn = std::function<std::vector<std::uint8_t>(std::span<const Vec3>)>;

// Uniform points over the scene cube.
std::vector<Vec3> uniform_cube_points(std::size_t n, std::uint64_t seed);

// |A and B| / |A or B| over paired labels; 1 when both are empty.
double iou_from_labels(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
double volumetric_iou(const OccupancyFn& a, const OccupancyFn& b, const MetricConfig& cfg);

OccupancyFn oracle_occupancy(const ShapeSpec& shape);
// Inside test by ray-crossing parity along +x; meant for closed meshes.
std::vector<std::uint8_t> mesh_occupancy(const TriangleMesh& mesh, std::span<const Vec3> points);

// ---------------------------------------------------------------------------
// Surface metrics

struct SurfaceScores {
  double chamfer_l1 = 0.0;
  double normal_consistency = 0.0;
  double f_score = 0.0;
};

// All three scores from one pair of sample sets.
SurfaceScores surface_scores(const SurfaceSamples& a, const SurfaceSamples& b, double f_threshold);

double chamfer_l1(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg);
double normal_consistency(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg);
double f_score(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg);

// Mesh against mesh; IoU from the inside tests of both meshes.
MetricRow compare_meshes(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg);

// Oracle marching-cubes mesh of sigmoid(-sdf / kOracleSmoothing).
inline constexpr double kOracleSmoothing = 0.02;
TriangleMesh oracle_mesh(const ShapeSpec& shape, int resolution = kGroundTruthResolution);

// Prediction against ground truth. IoU compares the oracle with `predicted`
// when given, otherwise with the inside test of the predicted mesh. An empty
// predicted mesh yields a flagged row rather than an error.
MetricRow evaluate_pair(const TriangleMesh& predicted, const ShapeSpec& shape, const TriangleMesh& gt_mesh,
                        const MetricConfig& cfg, const OccupancyFn* predicted_field = nullptr);

}  // namespace occ3d
