#include "occ3d/meshing.hpp"
#include "occ3d/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace occ3d {

double PointBatch::positive_fraction() const {
  if (labels.empty()) return 0.0;
  const auto pos = std::count(labels.begin(), labels.end(), std::uint8_t{1});
  return static_cast<double>(pos) / static_cast<double>(labels.size());
}

PointBatch sample_occupancy_points(const ShapeSpec& shape, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("need at least one point");
  Rng rng(seed);
  PointBatch batch;
  batch.points.resize(n);
  batch.labels.resize(n);
  for (auto& p : batch.points) {
    const double x = uniform(rng, -kSceneHalfExtent, kSceneHalfExtent);
    const double y = uniform(rng, -kSceneHalfExtent, kSceneHalfExtent);
    const double z = uniform(rng, -kSceneHalfExtent, kSceneHalfExtent);
    p = {x, y, z};
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    batch.labels[i] = static_cast<std::uint8_t>(occupancy_at(shape, batch.points[i]));
  }
  return batch;
}

SurfaceSamples sample_surface_points(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (mesh.empty()) throw EmptyMesh("cannot sample an empty mesh");
  std::vector<double> cdf(mesh.triangles.size());
  double acc = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    acc += mesh.triangle_area(t);
    cdf[t] = acc;
  }
  if (!(acc > 0.0)) throw EmptyMesh("mesh has zero surface area");
  Rng rng(seed);
  SurfaceSamples out;
  out.points.reserve(n);
  out.normals.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double target = uniform01(rng) * acc;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), target);
    const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
    double r1 = uniform01(rng);
    double r2 = uniform01(rng);
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const Triangle& tri = mesh.triangles[t];
    const Vec3& a = mesh.vertices[tri[0]];
    const Vec3& b = mesh.vertices[tri[1]];
    const Vec3& c = mesh.vertices[tri[2]];
    out.points.push_back(a + r1 * (b - a) + r2 * (c - a));
    out.normals.push_back(mesh.normals[t]);
  }
  return out;
}

Extrinsics sample_camera_pose(Rng& rng, double r_min, double r_max) {
  if (!(r_min > kSceneBoundRadius) || !(r_max >= r_min)) {
    throw std::invalid_argument("camera radius range must lie outside the scene bound");
  }
  for (;;) {
    const Vec3 dir = random_unit_vector(rng);
    const double r = uniform(rng, r_min, r_max);
    try {
      return look_at(r * dir, Vec3::Zero(), Vec3(0.0, 1.0, 0.0));
    } catch (const DegenerateFrame&) {
      continue;
    }
  }
}

}  // namespace occ3d
