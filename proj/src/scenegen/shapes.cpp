#include "occ3d/scenegen.hpp"
#include "occ3d/meshing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace occ3d {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

constexpr int kMaxTreeDepth = 8;

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = seed ^ (index + 0x9E3779B97F4A7C15ULL + (seed << 6) + (seed >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

int uniform_int(Rng& rng, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(rng() % span);
}

Vec3 random_unit_vector(Rng& rng) {
  const double z = uniform(rng, -1.0, 1.0);
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), r * std::sin(phi), z};
}

Mat3 random_rotation(Rng& rng) {
  // Uniform unit quaternion (Shoemake).
  const double u1 = uniform01(rng), u2 = uniform01(rng), u3 = uniform01(rng);
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double t2 = 2.0 * std::numbers::pi * u2, t3 = 2.0 * std::numbers::pi * u3;
  Eigen::Quaterniond q(b * std::cos(t3), a * std::sin(t2), a * std::cos(t2), b * std::sin(t3));
  return q.normalized().toRotationMatrix();
}

ShapeNode make_union(std::vector<ShapeNode> children) { return {Union{std::move(children)}}; }
ShapeNode make_intersection(std::vector<ShapeNode> children) { return {Intersection{std::move(children)}}; }
ShapeNode make_difference(ShapeNode left, ShapeNode right) {
  std::vector<ShapeNode> ops;
  ops.push_back(std::move(left));
  ops.push_back(std::move(right));
  return {Difference{std::move(ops)}};
}
ShapeNode make_transformed(const Mat3& rotation, const Vec3& translation, ShapeNode child) {
  std::vector<ShapeNode> c;
  c.push_back(std::move(child));
  return {Transformed{rotation, translation, std::move(c)}};
}

int tree_depth(const ShapeNode& node) {
  auto max_child = [](const std::vector<ShapeNode>& kids) {
    int d = 0;
    for (const auto& k : kids) d = std::max(d, tree_depth(k));
    return d;
  };
  return std::visit(Overloaded{[](const Sphere&) { return 1; }, [](const Box&) { return 1; },
                               [](const Capsule&) { return 1; }, [](const Torus&) { return 1; },
                               [&](const Union& u) { return 1 + max_child(u.children); },
                               [&](const Intersection& u) { return 1 + max_child(u.children); },
                               [&](const Difference& u) { return 1 + max_child(u.operands); },
                               [&](const Transformed& u) { return 1 + max_child(u.child); }},
                    node.node);
}

Aabb bounds(const ShapeNode& node) {
  return std::visit(
      Overloaded{
          [](const Sphere& s) {
            const Vec3 r = Vec3::Constant(s.radius);
            return Aabb{s.center - r, s.center + r};
          },
          [](const Box& b) { return Aabb{b.center - b.half_extents, b.center + b.half_extents}; },
          [](const Capsule& c) {
            const Vec3 r = Vec3::Constant(c.radius);
            return Aabb{c.a.cwiseMin(c.b) - r, c.a.cwiseMax(c.b) + r};
          },
          [](const Torus& t) {
            Vec3 ext;
            for (int k = 0; k < 3; ++k) {
              ext[k] = t.major * std::sqrt(std::max(0.0, 1.0 - t.axis[k] * t.axis[k])) + t.minor;
            }
            return Aabb{t.center - ext, t.center + ext};
          },
          [](const Union& u) {
            Aabb box = bounds(u.children.front());
            for (const auto& c : u.children) {
              const Aabb b = bounds(c);
              box.lo = box.lo.cwiseMin(b.lo);
              box.hi = box.hi.cwiseMax(b.hi);
            }
            return box;
          },
          [](const Intersection& u) {
            Aabb box = bounds(u.children.front());
            for (const auto& c : u.children) {
              const Aabb b = bounds(c);
              box.lo = box.lo.cwiseMax(b.lo);
              box.hi = box.hi.cwiseMin(b.hi);
            }
            box.hi = box.hi.cwiseMax(box.lo);
            return box;
          },
          [](const Difference& d) { return bounds(d.operands.front()); },
          [](const Transformed& t) {
            const Aabb cb = bounds(t.child.front());
            Aabb box{Vec3::Constant(1e300), Vec3::Constant(-1e300)};
            for (int c = 0; c < 8; ++c) {
              const Vec3 corner((c & 1) ? cb.hi.x() : cb.lo.x(), (c & 2) ? cb.hi.y() : cb.lo.y(),
                                (c & 4) ? cb.hi.z() : cb.lo.z());
              const Vec3 w = t.rotation * corner + t.translation;
              box.lo = box.lo.cwiseMin(w);
              box.hi = box.hi.cwiseMax(w);
            }
            return box;
          }},
      node.node);
}

namespace {

void validate_node(const ShapeNode& node) {
  std::visit(Overloaded{[](const Sphere& s) {
                          if (!(s.radius > 0.0)) throw ConfigError("sphere radius must be positive");
                        },
                        [](const Box& b) {
                          if (!(b.half_extents.minCoeff() > 0.0)) throw ConfigError("box extents must be positive");
                        },
                        [](const Capsule& c) {
                          if (!(c.radius > 0.0)) throw ConfigError("capsule radius must be positive");
                        },
                        [](const Torus& t) {
                          if (!(t.minor > 0.0 && t.minor < t.major)) throw ConfigError("torus needs 0 < minor < major");
                          if (std::abs(t.axis.norm() - 1.0) > 1e-9) throw ConfigError("torus axis must be unit");
                        },
                        [](const Union& u) {
                          if (u.children.empty()) throw ConfigError("empty union");
                          for (const auto& c : u.children) validate_node(c);
                        },
                        [](const Intersection& u) {
                          if (u.children.empty()) throw ConfigError("empty intersection");
                          for (const auto& c : u.children) validate_node(c);
                        },
                        [](const Difference& d) {
                          if (d.operands.size() != 2) throw ConfigError("difference needs two operands");
                          for (const auto& c : d.operands) validate_node(c);
                        },
                        [](const Transformed& t) {
                          if (t.child.size() != 1) throw ConfigError("transform needs one child");
                          if (orthonormality_error(t.rotation) > 1e-9) throw ConfigError("transform is not a rotation");
                          validate_node(t.child.front());
                        }},
             node.node);
}

}  // namespace

void ShapeSpec::validate() const {
  validate_node(root);
  if (tree_depth(root) > kMaxTreeDepth) throw ConfigError("shape tree deeper than 8");
  const Aabb box = bounds(root);
  if (box.lo.minCoeff() < -kSceneHalfExtent || box.hi.maxCoeff() > kSceneHalfExtent) {
    throw ConfigError("shape leaves the scene cube");
  }
  for (double c : albedo) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("albedo outside [0, 1]");
  }
}

double sdf(const ShapeNode& node, const Vec3& p) {
  return std::visit(
      Overloaded{[&](const Sphere& s) { return (p - s.center).norm() - s.radius; },
                 [&](const Box& b) {
                   const Vec3 q = (p - b.center).cwiseAbs() - b.half_extents;
                   return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
                 },
                 [&](const Capsule& c) {
                   const Vec3 pa = p - c.a;
                   const Vec3 ba = c.b - c.a;
                   const double denom = ba.squaredNorm();
                   const double h = denom > 0.0 ? std::clamp(pa.dot(ba) / denom, 0.0, 1.0) : 0.0;
                   return (pa - h * ba).norm() - c.radius;
                 },
                 [&](const Torus& t) {
                   const Vec3 d = p - t.center;
                   const double along = d.dot(t.axis);
                   const double radial = (d - along * t.axis).norm();
                   return std::hypot(radial - t.major, along) - t.minor;
                 },
                 [&](const Union& u) {
                   double v = sdf(u.children.front(), p);
                   for (std::size_t i = 1; i < u.children.size(); ++i) v = std::min(v, sdf(u.children[i], p));
                   return v;
                 },
                 [&](const Intersection& u) {
                   double v = sdf(u.children.front(), p);
                   for (std::size_t i = 1; i < u.children.size(); ++i) v = std::max(v, sdf(u.children[i], p));
                   return v;
                 },
                 [&](const Difference& d) { return std::max(sdf(d.operands[0], p), -sdf(d.operands[1], p)); },
                 [&](const Transformed& t) {
                   return sdf(t.child.front(), t.rotation.transpose() * (p - t.translation));
                 }},
      node.node);
}

Vec3 sdf_normal(const ShapeNode& node, const Vec3& p, double h) {
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 e = Vec3::Zero();
    e[k] = h;
    g[k] = sdf(node, p + e) - sdf(node, p - e);
  }
  const double n = g.norm();
  return n > 0.0 ? Vec3(g / n) : Vec3(0.0, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Families

namespace {

Vec3 uniform_vec(Rng& rng, double lo, double hi) {
  const double x = uniform(rng, lo, hi);
  const double y = uniform(rng, lo, hi);
  const double z = uniform(rng, lo, hi);
  return {x, y, z};
}

ShapeNode blobby(Rng& rng) {
  const int count = uniform_int(rng, 2, 4);
  std::vector<ShapeNode> kids;
  for (int i = 0; i < count; ++i) {
    const double r = uniform(rng, 0.12, 0.26);
    kids.push_back({Sphere{uniform_vec(rng, -0.22, 0.22), r}});
  }
  return make_union(std::move(kids));
}

ShapeNode cuboid(Rng& rng) {
  const int count = uniform_int(rng, 1, 3);
  std::vector<ShapeNode> kids;
  for (int i = 0; i < count; ++i) {
    const Vec3 half = uniform_vec(rng, 0.06, 0.22);
    const Vec3 center = uniform_vec(rng, -0.15, 0.15);
    ShapeNode box{Box{Vec3::Zero(), half}};
    kids.push_back(make_transformed(random_rotation(rng), center, std::move(box)));
  }
  return make_union(std::move(kids));
}

ShapeNode capsules(Rng& rng) {
  const int count = uniform_int(rng, 1, 3);
  std::vector<ShapeNode> kids;
  for (int i = 0; i < count; ++i) {
    const Vec3 a = uniform_vec(rng, -0.32, 0.32);
    const Vec3 b = uniform_vec(rng, -0.32, 0.32);
    kids.push_back({Capsule{a, b, uniform(rng, 0.06, 0.15)}});
  }
  return make_union(std::move(kids));
}

ShapeNode tori(Rng& rng) {
  const int count = uniform_int(rng, 1, 2);
  std::vector<ShapeNode> kids;
  for (int i = 0; i < count; ++i) {
    const double major = uniform(rng, 0.18, 0.32);
    const double minor = uniform(rng, 0.06, 0.12);
    kids.push_back({Torus{uniform_vec(rng, -0.1, 0.1), major, minor, random_unit_vector(rng)}});
  }
  return make_union(std::move(kids));
}

ShapeNode wedge(Rng& rng) {
  const Vec3 half = uniform_vec(rng, 0.15, 0.28);
  ShapeNode body{Box{Vec3::Zero(), half}};
  // A large box rotated about a random axis slices off part of the body.
  const Vec3 normal = random_unit_vector(rng);
  const double offset = uniform(rng, -0.05, 0.1);
  const double big = 0.6;
  Mat3 frame;
  Vec3 tangent = normal.unitOrthogonal();
  frame.col(0) = tangent;
  frame.col(1) = normal.cross(tangent);
  frame.col(2) = normal;
  ShapeNode cutter = make_transformed(frame, normal * (offset + big), {Box{Vec3::Zero(), Vec3::Constant(big)}});
  ShapeNode cut = make_difference(std::move(body), std::move(cutter));
  return make_transformed(random_rotation(rng), uniform_vec(rng, -0.05, 0.05), std::move(cut));
}

ShapeNode mixed(Rng& rng) {
  const int variant = uniform_int(rng, 0, 2);
  if (variant == 0) {
    // Rounded block: sphere intersected with a box, plus a handle.
    const double r = uniform(rng, 0.25, 0.34);
    std::vector<ShapeNode> parts;
    parts.push_back({Sphere{Vec3::Zero(), r}});
    parts.push_back({Box{Vec3::Zero(), uniform_vec(rng, 0.15, 0.26)}});
    std::vector<ShapeNode> all;
    all.push_back(make_intersection(std::move(parts)));
    all.push_back({Capsule{uniform_vec(rng, -0.3, 0.3), uniform_vec(rng, -0.3, 0.3), uniform(rng, 0.04, 0.08)}});
    return make_transformed(random_rotation(rng), Vec3::Zero(), make_union(std::move(all)));
  }
  if (variant == 1) {
    // Bowl: sphere minus an offset sphere.
    const double r = uniform(rng, 0.24, 0.34);
    const Vec3 dir = random_unit_vector(rng);
    return make_difference({Sphere{Vec3::Zero(), r}}, {Sphere{dir * (r * uniform(rng, 0.5, 0.8)), r * 0.9}});
  }
  // Box with a cylindrical-ish bore made from a capsule.
  const Vec3 half = uniform_vec(rng, 0.16, 0.28);
  const Vec3 axis = random_unit_vector(rng);
  const double bore = 0.4 * half.minCoeff();
  ShapeNode hole{Capsule{-0.6 * axis, 0.6 * axis, bore}};
  return make_transformed(random_rotation(rng), Vec3::Zero(), make_difference({Box{Vec3::Zero(), half}}, std::move(hole)));
}

}  // namespace

ShapeSpec random_shape(const std::string& family, Rng& rng) {
  ShapeNode (*gen)(Rng&) = nullptr;
  if (family == "blobby") gen = blobby;
  else if (family == "cuboid") gen = cuboid;
  else if (family == "capsule") gen = capsules;
  else if (family == "torus") gen = tori;
  else if (family == "wedge") gen = wedge;
  else if (family == "mixed") gen = mixed;
  else throw ConfigError("unknown shape family '" + family + "'");

  for (int attempt = 0; attempt < 1000; ++attempt) {
    ShapeSpec spec;
    spec.root = gen(rng);
    spec.family = family;
    for (double& c : spec.albedo) c = uniform(rng, 0.35, 1.0);
    const Aabb box = bounds(spec.root);
    if (box.lo.minCoeff() < -0.5 || box.hi.maxCoeff() > 0.5) continue;
    // Reject nearly empty solids; a small fixed probe set keeps this cheap.
    Rng probe(mix_seed(rng(), 17));
    int inside = 0;
    for (int i = 0; i < 512; ++i) inside += occupancy_at(spec, uniform_vec(probe, -0.55, 0.55));
    if (inside < 8) continue;
    spec.validate();
    return spec;
  }
  throw ConfigError("could not draw a valid '" + family + "' shape");
}

}  // namespace occ3d
