#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace occ3d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct PointBehindCamera : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateFrame : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadIndex : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct InvalidCamera : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kDepthEpsilon = 1e-6;

// Pinhole intrinsics shared by every view of a dataset. Pixel (i, j) has its
// center at (u, v) = (i, j); u grows rightward and v downward.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  Mat3 matrix() const;
  void validate() const;

  // Square image of `size` pixels with the principal point at its center.
  static Intrinsics centered(int size, double focal);
};

// World-to-camera rigid transform x_cam = R x_world + t.
struct Extrinsics {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  void validate() const;
  static Extrinsics identity() { return {}; }
};

struct CameraRig {
  Intrinsics intrinsics;
  Extrinsics extrinsics;
};

enum class CoordinateMode { ViewCentric, ObjectCentric };

std::string to_string(CoordinateMode mode);
CoordinateMode coordinate_mode_from_string(const std::string& text);

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

Vec3 world_to_camera(const Vec3& p, const Extrinsics& e);

// Throws PointBehindCamera when the camera-frame depth is <= eps.
Projection project(const Vec3& p, const CameraRig& rig, double eps = kDepthEpsilon);

// World-frame position of the camera, -R^T t.
Vec3 camera_center(const Extrinsics& e);

// Camera at `eye` whose +z axis points at `target`; image v runs opposite to `up`.
Extrinsics look_at(const Vec3& eye, const Vec3& target, const Vec3& up);

Mat3 rotation_about_axis(const Vec3& axis, double angle_rad);

// max |R^T R - I|
double orthonormality_error(const Mat3& r);

struct RigidMotionResult {
  std::vector<Vec3> points;
  std::vector<CameraRig> rigs;
};

// Moves the world by x -> Q x + d while keeping every camera-frame coordinate fixed.
RigidMotionResult apply_rigid_motion(std::span<const Vec3> points, std::span<const CameraRig> rigs,
                                     const Mat3& q, const Vec3& d);

struct CanonicalFrame {
  std::vector<CameraRig> rigs;
  std::vector<Vec3> points;
  // World point p maps to canonical point rotation * p + translation.
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

// ObjectCentric leaves the inputs untouched. ViewCentric re-bases the world
// frame onto the camera frame of view `ref`.
CanonicalFrame canonicalize(std::span<const CameraRig> rigs, std::span<const Vec3> points,
                            CoordinateMode mode, std::size_t ref = 0);

}  // namespace occ3d
