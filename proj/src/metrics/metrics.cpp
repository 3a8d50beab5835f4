#include "occ3d/metrics.hpp"

#include <algorithm>
#include <numeric>

namespace occ3d {

std::vector<std::string> MetricConfig::violations() const {
  std::vector<std::string> v;
  if (iou_samples < 1) v.push_back("eval.iou_samples must be at least 1");
  if (surface_samples < 1) v.push_back("eval.surface_samples must be at least 1");
  if (!(f_threshold > 0.0)) v.push_back("eval.f_threshold must be positive");
  return v;
}

void MetricConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg;
  for (const auto& s : v) msg += (msg.empty() ? "" : "; ") + s;
  throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Nearest neighbors

NearestNeighbors::NearestNeighbors(std::span<const Vec3> target) : points_(target.begin(), target.end()) {
  if (points_.empty()) throw EmptyTarget("nearest neighbor search needs a non-empty target");
  Vec3 lo = points_[0], hi = points_[0];
  for (const Vec3& p : points_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 extent = hi - lo;
  const double longest = std::max(extent.maxCoeff(), 1e-9);
  // Roughly two points per occupied cell on surface-like sets, capped per axis.
  const double n = static_cast<double>(points_.size());
  cell_ = std::max(longest / 256.0, longest / std::max(1.0, std::sqrt(n / 2.0)));
  lo_ = lo;
  for (int a = 0; a < 3; ++a) dims_[a] = std::max(1, static_cast<int>(std::floor(extent[a] / cell_)) + 1);

  const std::size_t cells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
  std::vector<std::uint32_t> cell_of(points_.size());
  start_.assign(cells + 1, 0);
  for (std::size_t i = 0; i < points_.size(); ++i) {
    std::array<int, 3> c;
    for (int a = 0; a < 3; ++a) {
      c[a] = std::clamp(static_cast<int>((points_[i][a] - lo_[a]) / cell_), 0, dims_[a] - 1);
    }
    cell_of[i] = static_cast<std::uint32_t>((static_cast<std::size_t>(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0]);
    ++start_[cell_of[i] + 1];
  }
  std::partial_sum(start_.begin(), start_.end(), start_.begin());
  order_.resize(points_.size());
  std::vector<std::uint32_t> fill(start_.begin(), start_.end() - 1);
  for (std::size_t i = 0; i < points_.size(); ++i) order_[fill[cell_of[i]]++] = static_cast<std::uint32_t>(i);
}

Neighbor NearestNeighbors::query(const Vec3& q) const {
  std::array<int, 3> c;
  for (int a = 0; a < 3; ++a) c[a] = std::clamp(static_cast<int>(std::floor((q[a] - lo_[a]) / cell_)), 0, dims_[a] - 1);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  auto visit = [&](int x, int y, int z) {
    const std::size_t cell = (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
    for (std::uint32_t k = start_[cell]; k < start_[cell + 1]; ++k) {
      const std::uint32_t i = order_[k];
      const double d2 = (points_[i] - q).squaredNorm();
      if (d2 < best || (d2 == best && i < best_index)) {
        best = d2;
        best_index = i;
      }
    }
  };
  const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
  for (int r = 0; r <= max_ring; ++r) {
    // Visit the shell of cells at Chebyshev distance r from c.
    for (int z = c[2] - r; z <= c[2] + r; ++z) {
      if (z < 0 || z >= dims_[2]) continue;
      for (int y = c[1] - r; y <= c[1] + r; ++y) {
        if (y < 0 || y >= dims_[1]) continue;
        const bool face = std::abs(z - c[2]) == r || std::abs(y - c[1]) == r;
        if (face) {
          for (int x = std::max(0, c[0] - r); x <= std::min(dims_[0] - 1, c[0] + r); ++x) visit(x, y, z);
        } else {
          if (c[0] - r >= 0) visit(c[0] - r, y, z);
          if (r > 0 && c[0] + r < dims_[0]) visit(c[0] + r, y, z);
        }
      }
    }
    // An unvisited point lies beyond one face of the visited block and no
    // closer than the grid box along the other axes.
    std::array<double, 3> sep;
    double sep2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      sep[a] = std::max({0.0, lo_[a] - q[a], q[a] - (lo_[a] + dims_[a] * cell_)});
      sep2 += sep[a] * sep[a];
    }
    double bound2 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double rest = sep2 - sep[a] * sep[a];
      if (c[a] - r > 0) {
        const double f = std::max(sep[a], q[a] - (lo_[a] + (c[a] - r) * cell_));
        bound2 = std::min(bound2, rest + f * f);
      }
      if (c[a] + r < dims_[a] - 1) {
        const double f = std::max(sep[a], lo_[a] + (c[a] + r + 1) * cell_ - q[a]);
        bound2 = std::min(bound2, rest + f * f);
      }
    }
    if (best <= bound2) break;
  }
  return {best_index, std::sqrt(best)};
}

std::vector<Neighbor> NearestNeighbors::query(std::span<const Vec3> queries) const {
  std::vector<Neighbor> out(queries.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(queries.size()); ++i) out[i] = query(queries[i]);
  return out;
}

std::vector<Neighbor> nearest_neighbors(std::span<const Vec3> queries, std::span<const Vec3> target) {
  return NearestNeighbors(target).query(queries);
}

std::vector<Neighbor> nearest_neighbors_brute(std::span<const Vec3> queries, std::span<const Vec3> target) {
  if (target.empty()) throw EmptyTarget("nearest neighbor search needs a non-empty target");
  std::vector<Neighbor> out(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < target.size(); ++j) {
      const double d2 = (target[j] - queries[i]).squaredNorm();
      if (d2 < best) {
        best = d2;
        out[i].index = j;
      }
    }
    out[i].distance = std::sqrt(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Volumetric IoU

std::vector<Vec3> uniform_cube_points(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vec3> pts(n);
  for (Vec3& p : pts) {
    const double x = uniform(rng, -kSceneHalfExtent, kSceneHalfExtent);
    const double y = uniform(rng, -kSceneHalfExtent, kSceneHalfExtent);
    const double z = uniform(rng, -kSceneHalfExtent, kSceneHalfExtent);
    p = {x, y, z};
  }
  return pts;
}

double iou_from_labels(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("iou: label counts differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double volumetric_iou(const OccupancyFn& a, const OccupancyFn& b, const MetricConfig& cfg) {
  const auto pts = uniform_cube_points(cfg.iou_samples, cfg.seed);
  return iou_from_labels(a(pts), b(pts));
}

OccupancyFn oracle_occupancy(const ShapeSpec& shape) {
  return [&shape](std::span<const Vec3> pts) {
    std::vector<std::uint8_t> out(pts.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pts.size()); ++i) {
      out[i] = static_cast<std::uint8_t>(occupancy_at(shape, pts[i]));
    }
    return out;
  };
}

namespace {

struct Tri2 {
  double au, av, bu, bv, cu, cv;  // counter-clockwise in the (y, z) plane
  Vec3 p0, n;                     // plane of the 3D triangle
};

// Edge a->b of a counter-clockwise triangle owns its boundary points when it
// is a left or top edge, so shared edges count exactly once.
bool owns(double w, double au, double av, double bu, double bv) {
  if (w > 0) return true;
  if (w < 0) return false;
  return bv < av || (bv == av && bu < au);
}

bool covers(const Tri2& t, double u, double v) {
  const double w0 = (t.bu - t.au) * (v - t.av) - (t.bv - t.av) * (u - t.au);
  const double w1 = (t.cu - t.bu) * (v - t.bv) - (t.cv - t.bv) * (u - t.bu);
  const double w2 = (t.au - t.cu) * (v - t.cv) - (t.av - t.cv) * (u - t.cu);
  return owns(w0, t.au, t.av, t.bu, t.bv) && owns(w1, t.bu, t.bv, t.cu, t.cv) && owns(w2, t.cu, t.cv, t.au, t.av);
}

}  // namespace

std::vector<std::uint8_t> mesh_occupancy(const TriangleMesh& mesh, std::span<const Vec3> points) {
  std::vector<std::uint8_t> out(points.size(), 0);
  if (mesh.empty()) return out;
  std::vector<Tri2> tris;
  double ulo = 1e300, uhi = -1e300, vlo = 1e300, vhi = -1e300;
  for (const auto& tri : mesh.triangles) {
    const Vec3 &a = mesh.vertices[tri[0]], &b = mesh.vertices[tri[1]], &c = mesh.vertices[tri[2]];
    const double area = (b.y() - a.y()) * (c.z() - a.z()) - (b.z() - a.z()) * (c.y() - a.y());
    if (area == 0.0) continue;  // parallel to the ray
    Tri2 t{a.y(), a.z(), b.y(), b.z(), c.y(), c.z(), a, (b - a).cross(c - a)};
    if (area < 0) {
      std::swap(t.bu, t.cu);
      std::swap(t.bv, t.cv);
    }
    tris.push_back(t);
    ulo = std::min({ulo, a.y(), b.y(), c.y()});
    uhi = std::max({uhi, a.y(), b.y(), c.y()});
    vlo = std::min({vlo, a.z(), b.z(), c.z()});
    vhi = std::max({vhi, a.z(), b.z(), c.z()});
  }
  if (tris.empty()) return out;

  const int g = std::clamp(static_cast<int>(std::sqrt(static_cast<double>(tris.size()))), 1, 512);
  const double su = std::max(uhi - ulo, 1e-12) / g, sv = std::max(vhi - vlo, 1e-12) / g;
  auto bin = [&](double x, double lo, double s) { return std::clamp(static_cast<int>((x - lo) / s), 0, g - 1); };
  std::vector<std::vector<std::uint32_t>> buckets(static_cast<std::size_t>(g) * g);
  for (std::size_t i = 0; i < tris.size(); ++i) {
    const Tri2& t = tris[i];
    const int u0 = bin(std::min({t.au, t.bu, t.cu}), ulo, su), u1 = bin(std::max({t.au, t.bu, t.cu}), ulo, su);
    const int v0 = bin(std::min({t.av, t.bv, t.cv}), vlo, sv), v1 = bin(std::max({t.av, t.bv, t.cv}), vlo, sv);
    for (int v = v0; v <= v1; ++v)
      for (int u = u0; u <= u1; ++u) buckets[static_cast<std::size_t>(v) * g + u].push_back(static_cast<std::uint32_t>(i));
  }

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(points.size()); ++i) {
    const Vec3& p = points[i];
    if (p.y() < ulo || p.y() > uhi || p.z() < vlo || p.z() > vhi) continue;
    const auto& bucket = buckets[static_cast<std::size_t>(bin(p.z(), vlo, sv)) * g + bin(p.y(), ulo, su)];
    int crossings = 0;
    for (std::uint32_t k : bucket) {
      const Tri2& t = tris[k];
      if (!covers(t, p.y(), p.z())) continue;
      // x where the ray meets the triangle plane.
      const double x = t.p0.x() - (t.n.y() * (p.y() - t.p0.y()) + t.n.z() * (p.z() - t.p0.z())) / t.n.x();
      if (x > p.x()) ++crossings;
    }
    out[i] = static_cast<std::uint8_t>(crossings & 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Surface metrics

SurfaceScores surface_scores(const SurfaceSamples& a, const SurfaceSamples& b, double f_threshold) {
  if (a.points.empty() || b.points.empty()) throw EmptyMesh("surface metrics need samples on both meshes");
  const auto ab = nearest_neighbors(a.points, b.points);
  const auto ba = nearest_neighbors(b.points, a.points);
  double acc = 0, comp = 0, nc_a = 0, nc_b = 0;
  std::size_t prec = 0, rec = 0;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    acc += ab[i].distance;
    nc_a += std::abs(a.normals[i].dot(b.normals[ab[i].index]));
    prec += ab[i].distance <= f_threshold ? 1 : 0;
  }
  for (std::size_t i = 0; i < ba.size(); ++i) {
    comp += ba[i].distance;
    nc_b += std::abs(b.normals[i].dot(a.normals[ba[i].index]));
    rec += ba[i].distance <= f_threshold ? 1 : 0;
  }
  const double na = static_cast<double>(ab.size()), nb = static_cast<double>(ba.size());
  SurfaceScores s;
  s.chamfer_l1 = 0.5 * (acc / na + comp / nb);
  s.normal_consistency = std::min(1.0, 0.5 * (nc_a / na + nc_b / nb));
  const double p = static_cast<double>(prec) / na, r = static_cast<double>(rec) / nb;
  s.f_score = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  return s;
}

namespace {

SurfaceScores mesh_scores(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg) {
  if (a.empty() || b.empty()) throw EmptyMesh("surface metrics need two non-empty meshes");
  return surface_scores(sample_surface_points(a, cfg.surface_samples, cfg.seed),
                        sample_surface_points(b, cfg.surface_samples, cfg.seed), cfg.f_threshold);
}

}  // namespace

double chamfer_l1(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg) {
  return mesh_scores(a, b, cfg).chamfer_l1;
}

double normal_consistency(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg) {
  return mesh_scores(a, b, cfg).normal_consistency;
}

double f_score(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg) {
  return mesh_scores(a, b, cfg).f_score;
}

MetricRow compare_meshes(const TriangleMesh& a, const TriangleMesh& b, const MetricConfig& cfg) {
  const SurfaceScores s = mesh_scores(a, b, cfg);
  const auto pts = uniform_cube_points(cfg.iou_samples, cfg.seed);
  MetricRow row;
  row.iou = iou_from_labels(mesh_occupancy(a, pts), mesh_occupancy(b, pts));
  row.chamfer_l1 = s.chamfer_l1;
  row.normal_consistency = s.normal_consistency;
  row.f_score = s.f_score;
  return row;
}

TriangleMesh oracle_mesh(const ShapeSpec& shape, int resolution) {
  const FieldFn field = [&shape](std::span<const Vec3> pts) {
    std::vector<double> v(pts.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pts.size()); ++i) {
      v[i] = 1.0 / (1.0 + std::exp(sdf(shape, pts[i]) / kOracleSmoothing));
    }
    return v;
  };
  return marching_cubes(evaluate_grid(field, resolution), 0.5);
}

MetricRow evaluate_pair(const TriangleMesh& predicted, const ShapeSpec& shape, const TriangleMesh& gt_mesh,
                        const MetricConfig& cfg, const OccupancyFn* predicted_field) {
  const auto pts = uniform_cube_points(cfg.iou_samples, cfg.seed);
  MetricRow row;
  const auto truth = oracle_occupancy(shape)(pts);
  row.iou = iou_from_labels(truth, predicted_field ? (*predicted_field)(pts) : mesh_occupancy(predicted, pts));
  if (predicted.empty()) {
    row.flag = "empty_mesh";
    row.chamfer_l1 = row.normal_consistency = row.f_score = std::numeric_limits<double>::quiet_NaN();
    return row;
  }
  const SurfaceScores s = mesh_scores(predicted, gt_mesh, cfg);
  row.chamfer_l1 = s.chamfer_l1;
  row.normal_consistency = s.normal_consistency;
  row.f_score = s.f_score;
  return row;
}

}  // namespace occ3d
