#pragma once

#include "occ3d/geometry.hpp"
#include "occ3d/mesh.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace occ3d {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Random streams

using Rng = std::mt19937_64;

// Stateless 64-bit mixer used to derive independent streams from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

// Uniform in [0, 1) from the top 53 bits of one draw; stable across standard libraries.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
int uniform_int(Rng& rng, int lo, int hi);  // inclusive bounds
// Unit vector uniform on the sphere.
Vec3 random_unit_vector(Rng& rng);
Mat3 random_rotation(Rng& rng);

// ---------------------------------------------------------------------------
// CSG shapes

struct ShapeNode;

struct Sphere {
  Vec3 center;
  double radius;
};
struct Box {
  Vec3 center;
  Vec3 half_extents;
};
struct Capsule {
  Vec3 a;
  Vec3 b;
  double radius;
};
struct Torus {
  Vec3 center;
  double major;
  double minor;
  Vec3 axis;  // unit
};
struct Union {
  std::vector<ShapeNode> children;
};
struct Intersection {
  std::vector<ShapeNode> children;
};
struct Difference {
  std::vector<ShapeNode> operands;  // exactly {left, right}
};
// The child lives in a frame rotated by `rotation` and then shifted by `translation`.
struct Transformed {
  Mat3 rotation;
  Vec3 translation;
  std::vector<ShapeNode> child;  // exactly one
};

struct ShapeNode {
  std::variant<Sphere, Box, Capsule, Torus, Union, Intersection, Difference, Transformed> node;
};

ShapeNode make_union(std::vector<ShapeNode> children);
ShapeNode make_intersection(std::vector<ShapeNode> children);
ShapeNode make_difference(ShapeNode left, ShapeNode right);
ShapeNode make_transformed(const Mat3& rotation, const Vec3& translation, ShapeNode child);

struct Aabb {
  Vec3 lo;
  Vec3 hi;
};

struct ShapeSpec {
  ShapeNode root;
  std::string family;
  std::array<double, 3> albedo{0.7, 0.7, 0.7};

  // Throws ConfigError when a primitive is malformed, the tree is deeper than
  // 8 levels, or the conservative bounds leave the scene cube.
  void validate() const;
};

int tree_depth(const ShapeNode& node);
// Conservative bounds of the solid.
Aabb bounds(const ShapeNode& node);

// Signed distance bound: exact for primitives, min/max composition for CSG.
double sdf(const ShapeNode& node, const Vec3& p);
inline double sdf(const ShapeSpec& shape, const Vec3& p) { return sdf(shape.root, p); }
inline int occupancy_at(const ShapeSpec& shape, const Vec3& p) { return sdf(shape.root, p) < 0.0 ? 1 : 0; }
Vec3 sdf_normal(const ShapeNode& node, const Vec3& p, double h = 5e-4);

// ---------------------------------------------------------------------------
// Sampling

struct PointBatch {
  std::vector<Vec3> points;
  std::vector<std::uint8_t> labels;
  std::size_t size() const { return points.size(); }
  double positive_fraction() const;
};

PointBatch sample_occupancy_points(const ShapeSpec& shape, std::size_t n, std::uint64_t seed);

struct SurfaceSamples {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
};

// Area-weighted samples; throws EmptyMesh.
SurfaceSamples sample_surface_points(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Rendering

inline constexpr double kSceneBoundRadius = 0.96;
inline constexpr double kBackground = 0.9;
inline constexpr double kAmbient = 0.15;
inline constexpr int kMaxTraceSteps = 128;
inline constexpr double kHitTolerance = 1e-4;

// 8-bit quantized RGB in [0, 1], row-major, channel-interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;
  std::vector<std::uint8_t> mask;  // diagnostic only

  float at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double foreground_fraction() const;
};

struct RayHit {
  bool hit = false;
  Vec3 point = Vec3::Zero();
};

// World-space ray through the center of pixel (px, py).
Vec3 pixel_ray_direction(const CameraRig& rig, double px, double py);
RayHit sphere_trace(const ShapeNode& node, const Vec3& origin, const Vec3& dir);
Image render_view(const ShapeSpec& shape, const CameraRig& rig);

Extrinsics sample_camera_pose(Rng& rng, double r_min, double r_max);

// ---------------------------------------------------------------------------
// Dataset

inline const std::vector<std::string> kSeenFamilies = {"blobby", "cuboid", "capsule"};
inline const std::vector<std::string> kUnseenFamilies = {"torus", "wedge", "mixed"};

ShapeSpec random_shape(const std::string& family, Rng& rng);

struct DatasetConfig {
  std::vector<std::string> seen_families = kSeenFamilies;
  std::vector<std::string> unseen_families = kUnseenFamilies;
  int train_per_family = 200;
  int test_per_family = 25;
  int image_size = 64;
  // Focal length as a multiple of the image width.
  double focal_ratio = 1.0;
  int views_per_shape = 8;
  std::size_t pool_size = 16384;
  double radius_min = 1.9;
  double radius_max = 2.4;
  std::uint64_t seed = 7;

  std::vector<std::string> violations() const;
  void validate() const;
};

enum class Split { Train, Test };

struct Sample {
  std::string id;
  Split split = Split::Train;
  ShapeSpec shape;
  std::vector<CameraRig> rigs;
  std::vector<Image> views;
  PointBatch point_pool;
};

struct Dataset {
  DatasetConfig config;
  Intrinsics intrinsics;
  std::vector<Sample> samples;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;

  bool is_seen(const std::string& family) const;
};

Sample generate_sample(const DatasetConfig& config, const Intrinsics& k, const std::string& family,
                       std::size_t index, Split split);
Dataset generate_dataset(const DatasetConfig& config);

}  // namespace occ3d
