#include "occ3d/geometry.hpp"

#include <cmath>

namespace occ3d {

Mat3 Intrinsics::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidCamera("focal lengths must be positive");
  if (width <= 0 || height <= 0) throw InvalidCamera("image size must be positive");
  if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
    throw InvalidCamera("principal point outside image");
  }
}

Intrinsics Intrinsics::centered(int size, double focal) {
  Intrinsics k;
  k.fx = focal;
  k.fy = focal;
  k.cx = 0.5 * (size - 1);
  k.cy = 0.5 * (size - 1);
  k.width = size;
  k.height = size;
  return k;
}

double orthonormality_error(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

void Extrinsics::validate() const {
  if (!rotation.allFinite() || !translation.allFinite()) throw InvalidCamera("non-finite extrinsics");
  if (orthonormality_error(rotation) > 1e-9 || std::abs(rotation.determinant() - 1.0) > 1e-9) {
    throw InvalidCamera("rotation is not a proper orthonormal matrix");
  }
}

std::string to_string(CoordinateMode mode) {
  return mode == CoordinateMode::ViewCentric ? "view_centric" : "object_centric";
}

CoordinateMode coordinate_mode_from_string(const std::string& text) {
  if (text == "view_centric" || text == "view") return CoordinateMode::ViewCentric;
  if (text == "object_centric" || text == "object") return CoordinateMode::ObjectCentric;
  throw std::invalid_argument("unknown coordinate mode '" + text + "'");
}

Vec3 world_to_camera(const Vec3& p, const Extrinsics& e) { return e.rotation * p + e.translation; }

Projection project(const Vec3& p, const CameraRig& rig, double eps) {
  const Vec3 pc = world_to_camera(p, rig.extrinsics);
  const double w = pc.z();
  if (!(w > eps)) throw PointBehindCamera("point projects behind the camera");
  const Intrinsics& k = rig.intrinsics;
  // K * pc with the zero off-diagonal terms dropped.
  const double u = k.fx * pc.x() + k.cx * w;
  const double v = k.fy * pc.y() + k.cy * w;
  return {u / w, v / w, w};
}

Vec3 camera_center(const Extrinsics& e) { return -(e.rotation.transpose() * e.translation); }

Extrinsics look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 forward_raw = target - eye;
  const double dist = forward_raw.norm();
  if (!(dist > 1e-9)) throw DegenerateFrame("eye coincides with target");
  const Vec3 z = forward_raw / dist;
  const Vec3 up_perp = up - up.dot(z) * z;
  const double up_norm = up_perp.norm();
  if (!(up_norm > 1e-9 * std::max(1.0, up.norm()))) {
    throw DegenerateFrame("up vector is parallel to the viewing direction");
  }
  const Vec3 y = -up_perp / up_norm;
  const Vec3 x = y.cross(z);
  Extrinsics e;
  e.rotation.row(0) = x.transpose();
  e.rotation.row(1) = y.transpose();
  e.rotation.row(2) = z.transpose();
  e.translation = -(e.rotation * eye);
  return e;
}

Mat3 rotation_about_axis(const Vec3& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

RigidMotionResult apply_rigid_motion(std::span<const Vec3> points, std::span<const CameraRig> rigs,
                                     const Mat3& q, const Vec3& d) {
  RigidMotionResult out;
  out.points.reserve(points.size());
  for (const Vec3& p : points) out.points.push_back(q * p + d);
  out.rigs.reserve(rigs.size());
  for (const CameraRig& rig : rigs) {
    CameraRig moved = rig;
    const Mat3 rq = rig.extrinsics.rotation * q.transpose();
    moved.extrinsics.rotation = rq;
    moved.extrinsics.translation = rig.extrinsics.translation - rq * d;
    out.rigs.push_back(moved);
  }
  return out;
}

CanonicalFrame canonicalize(std::span<const CameraRig> rigs, std::span<const Vec3> points,
                            CoordinateMode mode, std::size_t ref) {
  if (ref >= rigs.size()) throw BadIndex("reference view index out of range");
  CanonicalFrame out;
  if (mode == CoordinateMode::ObjectCentric) {
    out.rigs.assign(rigs.begin(), rigs.end());
    out.points.assign(points.begin(), points.end());
    return out;
  }
  const Extrinsics& e_ref = rigs[ref].extrinsics;
  RigidMotionResult moved = apply_rigid_motion(points, rigs, e_ref.rotation, e_ref.translation);
  // The reference camera is the new world frame by definition.
  moved.rigs[ref].extrinsics = Extrinsics::identity();
  out.rigs = std::move(moved.rigs);
  out.points = std::move(moved.points);
  out.rotation = e_ref.rotation;
  out.translation = e_ref.translation;
  return out;
}

}  // namespace occ3d
