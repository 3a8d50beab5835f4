#include "occ3d/geometry.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace occ3d;

namespace {

Mat3 random_rot(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

Vec3 random_vec(std::mt19937_64& rng, double s) {
  std::uniform_real_distribution<double> u(-s, s);
  return {u(rng), u(rng), u(rng)};
}

CameraRig random_rig(std::mt19937_64& rng) {
  CameraRig rig;
  rig.intrinsics = Intrinsics::centered(64, 64.0);
  rig.extrinsics.rotation = random_rot(rng);
  rig.extrinsics.translation = random_vec(rng, 2.0);
  return rig;
}

// Explicit 3x3 product, written out without Eigen.
Vec3 manual_transform(const double r[3][3], const double t[3], const double p[3]) {
  Vec3 out;
  for (int i = 0; i < 3; ++i) out[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
  return out;
}

}  // namespace

TEST_CASE("world_to_camera fixed cases") {
  Extrinsics e;
  CHECK((world_to_camera({1, 2, 3}, e) - Vec3(1, 2, 3)).norm() == 0.0);

  e.rotation = rotation_about_axis({0, 0, 1}, M_PI / 2);
  CHECK((world_to_camera({1, 0, 0}, e) - Vec3(0, 1, 0)).norm() < 1e-15);

  const double a = M_PI / 6;
  const double r[3][3] = {{std::cos(a), 0, std::sin(a)}, {0, 1, 0}, {-std::sin(a), 0, std::cos(a)}};
  const double t[3] = {0.5, 0, 2};
  const double p[3] = {0.1, -0.2, 0.3};
  e.rotation = rotation_about_axis({0, 1, 0}, a);
  e.translation = {0.5, 0, 2};
  CHECK((world_to_camera({0.1, -0.2, 0.3}, e) - manual_transform(r, t, p)).norm() < 1e-14);
}

TEST_CASE("world_to_camera is an isometry") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const Extrinsics e = random_rig(rng).extrinsics;
    const Vec3 a = random_vec(rng, 1), b = random_vec(rng, 1);
    CHECK(std::abs((world_to_camera(a, e) - world_to_camera(b, e)).norm() - (a - b).norm()) < 1e-12);
  }
}

TEST_CASE("project fixed cases") {
  CameraRig rig;
  rig.intrinsics = {1, 1, 0, 0, 1, 1};
  const Projection p0 = project({0, 0, 1}, rig);
  CHECK(p0.u == 0.0);
  CHECK(p0.v == 0.0);
  CHECK(p0.depth == 1.0);

  rig.intrinsics = {100, 100, 32, 32, 64, 64};
  const Projection p1 = project({0.5, 0, 2}, rig);
  CHECK(p1.u == doctest::Approx(57.0).epsilon(1e-14));
  CHECK(p1.v == doctest::Approx(32.0).epsilon(1e-14));
  CHECK(p1.depth == 2.0);

  CHECK_THROWS_AS(project({0, 0, -1}, rig), PointBehindCamera);
  CHECK_THROWS_AS(project({0, 0, 1e-7}, rig), PointBehindCamera);
}

TEST_CASE("projection depth equals camera-frame z") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 200; ++i) {
    CameraRig rig = random_rig(rng);
    const Vec3 p = random_vec(rng, 1);
    const Vec3 pc = world_to_camera(p, rig.extrinsics);
    if (pc.z() <= kDepthEpsilon) {
      CHECK_THROWS_AS(project(p, rig), PointBehindCamera);
      continue;
    }
    CHECK(std::abs(project(p, rig).depth - pc.z()) <= 1e-12);
  }
}

TEST_CASE("camera_center") {
  Extrinsics e;
  CHECK(camera_center(e).norm() == 0.0);
  e.translation = {0, 0, 2};
  CHECK((camera_center(e) - Vec3(0, 0, -2)).norm() == 0.0);
  e.rotation = rotation_about_axis({0, 1, 0}, M_PI / 2);
  e.translation = {1, 0, 3};
  CHECK(world_to_camera(camera_center(e), e).norm() < 1e-9);
}

TEST_CASE("look_at contract") {
  const Extrinsics e0 = look_at({0, 0, -2}, {0, 0, 0}, {0, 1, 0});
  CHECK((camera_center(e0) - Vec3(0, 0, -2)).norm() < 1e-9);
  CHECK((world_to_camera({0, 0, 0}, e0) - Vec3(0, 0, 2)).norm() < 1e-9);

  const Extrinsics e1 = look_at({2, 0, 0}, {0, 0, 0}, {0, 1, 0});
  CHECK((world_to_camera({0, 0, 0}, e1) - Vec3(0, 0, 2)).norm() < 1e-9);

  CHECK_THROWS_AS(look_at({0, 1, 0}, {0, 0, 0}, {0, 1, 0}), DegenerateFrame);
  CHECK_THROWS_AS(look_at({0, 0, 0}, {0, 0, 0}, {0, 1, 0}), DegenerateFrame);

  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const Vec3 eye = random_vec(rng, 3), target = random_vec(rng, 0.5);
    const Extrinsics e = look_at(eye, target, {0, 1, 0});
    CHECK(orthonormality_error(e.rotation) <= 1e-9);
    CHECK(e.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((camera_center(e) - eye).norm() < 1e-9);
    CHECK((world_to_camera(target, e) - Vec3(0, 0, (target - eye).norm())).norm() < 1e-9);
    // Image v runs opposite to world up.
    CHECK(world_to_camera(target + Vec3(0, 0.01, 0), e).y() < world_to_camera(target, e).y() + 1e-15);
  }
}

TEST_CASE("intrinsics validation") {
  CHECK_NOTHROW(Intrinsics::centered(64, 64).validate());
  Intrinsics k = Intrinsics::centered(64, 64);
  k.fx = 0;
  CHECK_THROWS_AS(k.validate(), InvalidCamera);
  k = Intrinsics::centered(64, 64);
  k.cx = 64;
  CHECK_THROWS_AS(k.validate(), InvalidCamera);
  Extrinsics e;
  e.rotation(0, 0) = -1;
  CHECK_THROWS_AS(e.validate(), InvalidCamera);
}

TEST_CASE("apply_rigid_motion preserves camera-frame coordinates") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const CameraRig rig = random_rig(rng);
    const Vec3 p = random_vec(rng, 1);
    const Mat3 q = random_rot(rng);
    const Vec3 d = random_vec(rng, 2);
    const auto moved = apply_rigid_motion(std::span(&p, 1), std::span(&rig, 1), q, d);
    CHECK((world_to_camera(moved.points[0], moved.rigs[0].extrinsics) - world_to_camera(p, rig.extrinsics)).norm() <
          1e-9);
    CHECK((camera_center(moved.rigs[0].extrinsics) - (q * camera_center(rig.extrinsics) + d)).norm() < 1e-9);
  }
}

TEST_CASE("apply_rigid_motion identity and quarter turn") {
  std::mt19937_64 rng(5);
  const CameraRig rig = random_rig(rng);
  const Vec3 p = random_vec(rng, 1);
  const auto same = apply_rigid_motion(std::span(&p, 1), std::span(&rig, 1), Mat3::Identity(), Vec3::Zero());
  CHECK(same.points[0] == p);
  CHECK(same.rigs[0].extrinsics.rotation == rig.extrinsics.rotation);
  CHECK(same.rigs[0].extrinsics.translation == rig.extrinsics.translation);

  const auto turned =
      apply_rigid_motion(std::span(&p, 1), std::span(&rig, 1), rotation_about_axis({0, 0, 1}, M_PI / 2), {1, 0, 0});
  CHECK((world_to_camera(turned.points[0], turned.rigs[0].extrinsics) - world_to_camera(p, rig.extrinsics)).norm() <
        1e-9);
}

TEST_CASE("canonicalize") {
  std::mt19937_64 rng(6);
  std::vector<CameraRig> rigs = {random_rig(rng), random_rig(rng)};
  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i) pts.push_back(random_vec(rng, 0.5));

  SUBCASE("object centric is the identity") {
    const auto c = canonicalize(rigs, pts, CoordinateMode::ObjectCentric);
    CHECK(c.points == pts);
    CHECK(c.rigs[1].extrinsics.rotation == rigs[1].extrinsics.rotation);
  }
  SUBCASE("single view becomes identity") {
    const auto c = canonicalize(std::span(rigs.data(), 1), pts, CoordinateMode::ViewCentric);
    CHECK(c.rigs[0].extrinsics.rotation == Mat3::Identity());
    CHECK(c.rigs[0].extrinsics.translation == Vec3::Zero());
    for (std::size_t j = 0; j < pts.size(); ++j) {
      CHECK((c.points[j] - world_to_camera(pts[j], rigs[0].extrinsics)).norm() < 1e-12);
    }
  }
  SUBCASE("projections are preserved") {
    // Push points in front of both cameras.
    for (auto& rig : rigs) rig.extrinsics = look_at(random_vec(rng, 1).normalized() * 2.2, {0, 0, 0}, {0, 1, 0});
    for (std::size_t ref = 0; ref < 2; ++ref) {
      const auto c = canonicalize(rigs, pts, CoordinateMode::ViewCentric, ref);
      CHECK(c.rigs[ref].extrinsics.rotation == Mat3::Identity());
      for (std::size_t v = 0; v < rigs.size(); ++v) {
        for (std::size_t j = 0; j < pts.size(); ++j) {
          const Projection a = project(pts[j], rigs[v]);
          const Projection b = project(c.points[j], c.rigs[v]);
          CHECK(std::abs(a.u - b.u) < 1e-9);
          CHECK(std::abs(a.v - b.v) < 1e-9);
        }
      }
    }
  }
  SUBCASE("idempotent") {
    const auto once = canonicalize(rigs, pts, CoordinateMode::ViewCentric);
    const auto twice = canonicalize(once.rigs, once.points, CoordinateMode::ViewCentric);
    CHECK(twice.points == once.points);
    for (std::size_t v = 0; v < rigs.size(); ++v) {
      CHECK(twice.rigs[v].extrinsics.rotation == once.rigs[v].extrinsics.rotation);
      CHECK(twice.rigs[v].extrinsics.translation == once.rigs[v].extrinsics.translation);
    }
  }
  SUBCASE("bad reference index") {
    CHECK_THROWS_AS(canonicalize(rigs, pts, CoordinateMode::ViewCentric, 2), BadIndex);
  }
}

TEST_CASE("coordinate mode strings") {
  CHECK(coordinate_mode_from_string(to_string(CoordinateMode::ViewCentric)) == CoordinateMode::ViewCentric);
  CHECK(coordinate_mode_from_string(to_string(CoordinateMode::ObjectCentric)) == CoordinateMode::ObjectCentric);
  CHECK_THROWS(coordinate_mode_from_string("sideways"));
}
