#include "occ3d/scenegen.hpp"

#include <algorithm>
#include <cmath>

namespace occ3d {

double Image::foreground_fraction() const {
  if (mask.empty()) return 0.0;
  const auto fg = std::count(mask.begin(), mask.end(), std::uint8_t{1});
  return static_cast<double>(fg) / static_cast<double>(mask.size());
}

Vec3 pixel_ray_direction(const CameraRig& rig, double px, double py) {
  const Intrinsics& k = rig.intrinsics;
  const Vec3 dc((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
  return (rig.extrinsics.rotation.transpose() * dc).normalized();
}

RayHit sphere_trace(const ShapeNode& node, const Vec3& origin, const Vec3& dir) {
  // Clip the ray to the sphere enclosing the scene cube.
  const double b = origin.dot(dir);
  const double c = origin.squaredNorm() - kSceneBoundRadius * kSceneBoundRadius;
  const double disc = b * b - c;
  if (disc < 0.0) return {};
  const double root = std::sqrt(disc);
  double t = std::max(0.0, -b - root);
  const double t_exit = -b + root;
  if (t_exit <= 0.0) return {};
  for (int step = 0; step < kMaxTraceSteps && t <= t_exit; ++step) {
    const Vec3 p = origin + t * dir;
    const double d = sdf(node, p);
    if (d < kHitTolerance) return {true, p};
    t += d;
  }
  return {};
}

namespace {

float quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(clamped * 255.0)) / 255.0f;
}

}  // namespace

Image render_view(const ShapeSpec& shape, const CameraRig& rig) {
  const Vec3 origin = camera_center(rig.extrinsics);
  if (!(origin.norm() > kSceneBoundRadius)) throw std::invalid_argument("camera inside the scene bound");
  const Intrinsics& k = rig.intrinsics;
  Image img;
  img.width = k.width;
  img.height = k.height;
  img.rgb.assign(static_cast<std::size_t>(k.width) * k.height * 3, quantize(kBackground));
  img.mask.assign(static_cast<std::size_t>(k.width) * k.height, 0);
  const Vec3 light = Vec3(1.0, 1.0, -1.0).normalized();

#pragma omp parallel for schedule(dynamic)
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dir = pixel_ray_direction(rig, x, y);
      const RayHit hit = sphere_trace(shape.root, origin, dir);
      if (!hit.hit) continue;
      const Vec3 n = sdf_normal(shape.root, hit.point);
      const double diffuse = std::max(0.0, n.dot(light));
      const std::size_t px = static_cast<std::size_t>(y) * k.width + x;
      for (int ch = 0; ch < 3; ++ch) img.rgb[px * 3 + ch] = quantize(shape.albedo[ch] * diffuse + kAmbient);
      img.mask[px] = 1;
    }
  }
  return img;
}

}  // namespace occ3d
