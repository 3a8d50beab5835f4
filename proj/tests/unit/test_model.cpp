#include "occ3d/model.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace occ3d;
using nn::Real;
using nn::Tensor;

namespace {

ModelConfig tiny_config(Variant variant = Variant::PCV) {
  ModelConfig c;
  c.image_size = 16;
  c.feature_channels = c.hidden = 8;
  c.g_blocks = 2;
  c.f_blocks = 2;
  c.encoder_depth = 2;
  c.encoder_channels = 4;
  c.variant = variant;
  c.init_seed = 11;
  return c;
}

struct Scene {
  Dataset data;
  const Sample& sample() const { return data.samples.front(); }

  ViewSet views(std::vector<std::size_t> order, std::size_t reference = 0) const {
    ViewSet v;
    for (std::size_t i : order) {
      v.images.push_back(&sample().views[i]);
      v.rigs.push_back(sample().rigs[i]);
    }
    v.reference = reference;
    return v;
  }
  std::vector<Vec3> points(std::size_t n) const {
    return {sample().point_pool.points.begin(), sample().point_pool.points.begin() + static_cast<long>(n)};
  }
};

const Scene& scene() {
  static const Scene s = [] {
    DatasetConfig cfg;
    cfg.train_per_family = 1;
    cfg.test_per_family = 1;
    cfg.image_size = 16;
    cfg.views_per_shape = 4;
    cfg.pool_size = 256;
    cfg.seed = 5;
    return Scene{generate_dataset(cfg)};
  }();
  return s;
}

std::vector<Real> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::vector<Real> probs(Model& m, const ViewSet& v, const std::vector<Vec3>& pts) {
  nn::NoGradGuard guard;
  const ModelOutput o = m.forward(std::span(&v, 1), std::span(&pts, 1), false);
  return vec(o.probabilities);
}

double max_rel_diff(const std::vector<Real>& a, const std::vector<Real>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(double(a[i]) - b[i]) / std::max(std::abs(double(a[i])), 1e-12));
  }
  return m;
}

const Tensor& param(const nn::ParameterSet& set, const std::string& name) {
  for (const auto& p : set.parameters())
    if (p.name == name) return p.tensor;
  throw std::runtime_error("no parameter " + name);
}

// Camera at the world origin looking down +z with a 16 pixel centered image.
CameraRig origin_rig() { return {Intrinsics::centered(16, 16.0), Extrinsics::identity()}; }

}  // namespace

TEST_CASE("model config validation and text round trip") {
  ModelConfig c = tiny_config();
  CHECK(c.violations().empty());
  c.hidden = 9;
  c.image_size = 18;
  CHECK(c.violations().size() == 2);
  CHECK_THROWS_AS(c.validate(), ConfigError);

  ModelConfig d = tiny_config(Variant::PC);
  d.coordinate_mode = CoordinateMode::ObjectCentric;
  d.variance_form = VarianceForm::ScalarNorm;
  d.norm = nn::NormKind::Layer;
  const ModelConfig e = ModelConfig::from_text(d.to_text());
  CHECK(e.to_text() == d.to_text());
  CHECK_THROWS_AS(variant_from_string("Q"), ConfigError);
}

TEST_CASE("input arity grows from P to PC and stays for PCV") {
  CHECK(tiny_config(Variant::P).geo_input_width() == 8 + 3);
  CHECK(tiny_config(Variant::PC).geo_input_width() == 8 + 6);
  CHECK(tiny_config(Variant::PCV).geo_input_width() == 8 + 6);
  ModelConfig wide;
  wide.feature_channels = wide.hidden = 256;
  CHECK(wide.geo_input_width() == 262);

  Model m(tiny_config());
  const Tensor c = Tensor::zeros({5, 8});
  CHECK_THROWS_AS(m.geo_feature(c, Tensor::zeros({5, 3})), nn::ShapeMismatch);
  CHECK(m.geo_feature(c, Tensor::zeros({5, 6})).dim(1) == 8);
}

TEST_CASE("encoder shape contract and view dependence") {
  Model m(tiny_config());
  const auto& s = scene().sample();
  const Image* imgs[] = {&s.views[0], &s.views[1]};
  nn::NoGradGuard guard;
  const Tensor maps = m.encode(imgs);
  CHECK(maps.shape() == nn::Shape{2, 8, 16, 16});
  const std::size_t plane = 8 * 16 * 16;
  double diff = 0;
  for (std::size_t i = 0; i < plane; ++i) diff += std::abs(maps.values()[i] - maps.values()[plane + i]);
  CHECK(diff > 1e-3);

  Image wrong;
  wrong.width = wrong.height = 12;
  wrong.rgb.assign(12 * 12 * 3, 0.5f);
  const Image* bad[] = {&wrong};
  CHECK_THROWS_AS(m.encode(bad), nn::ShapeMismatch);
}

TEST_CASE("integer downscaling of larger views") {
  Image img;
  img.width = img.height = 4;
  img.rgb.resize(4 * 4 * 3);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) img.rgb[(y * 4 + x) * 3 + c] = (x < 2 && y < 2) ? 1.0f : 0.0f;
  const Image* imgs[] = {&img};
  const Tensor t = images_to_tensor(imgs, 2);
  CHECK(t.shape() == nn::Shape{1, 3, 2, 2});
  CHECK(t.values()[0] == doctest::Approx(1.0));
  CHECK(t.values()[1] == doctest::Approx(-1.0));
}

TEST_CASE("point features from sampled maps") {
  const CameraRig rig = origin_rig();
  PreparedViews pv;
  pv.rigs = {rig};
  const double z = 2.0;
  auto at_pixel = [&](double u, double v) {
    return Vec3((u - rig.intrinsics.cx) * z / rig.intrinsics.fx, (v - rig.intrinsics.cy) * z / rig.intrinsics.fy, z);
  };

  SUBCASE("constant map gives the constant") {
    const Tensor maps = Tensor::full({1, 2, 16, 16}, Real(0.75));
    const std::vector<std::vector<Vec3>> pts = {{at_pixel(3.3, 7.9), at_pixel(-5, 40), Vec3(0.1, -0.2, 1.5)}};
    const PointSamples s = sample_point_features(maps, std::span(&pv, 1), pts, Variant::PC);
    for (Real v : s.features.values()) CHECK(v == doctest::Approx(0.75));
  }

  std::vector<Real> ramp(2 * 16 * 16);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<Real>(std::sin(0.37 * i));
  const Tensor maps = Tensor::from({1, 2, 16, 16}, ramp);
  auto texel = [&](int c, int x, int y) { return ramp[(static_cast<std::size_t>(c) * 16 + y) * 16 + x]; };

  SUBCASE("integer projection picks the texel") {
    const std::vector<std::vector<Vec3>> pts = {{at_pixel(5, 9), at_pixel(0, 15)}};
    const PointSamples s = sample_point_features(maps, std::span(&pv, 1), pts, Variant::PCV);
    CHECK(s.features.values()[0] == doctest::Approx(texel(0, 5, 9)).epsilon(1e-5));
    CHECK(s.features.values()[1] == doctest::Approx(texel(1, 5, 9)).epsilon(1e-5));
    CHECK(s.features.values()[2] == doctest::Approx(texel(0, 0, 15)).epsilon(1e-5));
  }

  SUBCASE("out-of-image projection equals the clamped border sample") {
    const std::vector<std::vector<Vec3>> pts = {{at_pixel(-3.5, 6.0), at_pixel(20.2, 30.1)}};
    const PointSamples s = sample_point_features(maps, std::span(&pv, 1), pts, Variant::PCV);
    // Oracle: clamp to the image rectangle, then sample at the integer texel.
    CHECK(s.features.values()[0] == doctest::Approx(texel(0, 0, 6)).epsilon(1e-5));
    CHECK(s.features.values()[3] == doctest::Approx(texel(1, 15, 15)).epsilon(1e-5));
  }

  SUBCASE("geometry columns") {
    const Vec3 p(0.1, 0.2, 3.0);
    const std::vector<std::vector<Vec3>> pts = {{p}};
    CHECK(sample_point_features(maps, std::span(&pv, 1), pts, Variant::P).geometry.dim(1) == 3);
    PreparedViews moved;
    CameraRig r = rig;
    r.extrinsics.translation = Vec3(0.5, 0, 0);
    moved.rigs = {r};
    const PointSamples s = sample_point_features(maps, std::span(&moved, 1), pts, Variant::PC);
    const auto g = s.geometry.values();
    REQUIRE(g.size() == 6);
    CHECK(g[0] == doctest::Approx(0.6));
    CHECK(g[2] == doctest::Approx(3.0));
    CHECK(g[3] == doctest::Approx(-0.5));
  }

  SUBCASE("feature-map scale") {
    const Tensor half = Tensor::from({1, 2, 8, 8}, std::vector<Real>(ramp.begin(), ramp.begin() + 128));
    const std::vector<std::vector<Vec3>> pts = {{at_pixel(4.5, 8.5)}};
    const PointSamples s = sample_point_features(half, std::span(&pv, 1), pts, Variant::PC, 0.5);
    // Full-resolution pixel center 4.5 maps to half-resolution coordinate 2.0.
    CHECK(s.features.values()[0] == doctest::Approx(ramp[4 * 8 + 2]).epsilon(1e-5));
  }
}

TEST_CASE("behind-camera points") {
  const Tensor maps = Tensor::full({2, 2, 16, 16}, Real(1));
  PreparedViews pv;
  CameraRig back = origin_rig();
  back.extrinsics.rotation = rotation_about_axis(Vec3::UnitY(), M_PI);
  pv.rigs = {origin_rig(), back};
  const std::vector<std::vector<Vec3>> pts = {{Vec3(0, 0, 2.0)}};
  const PointSamples s = sample_point_features(maps, std::span(&pv, 1), pts, Variant::PC);
  CHECK(s.weights[0] == 1);
  CHECK(s.weights[1] == 0);

  PreparedViews single;
  single.rigs = {back};
  const Tensor one = Tensor::full({1, 2, 16, 16}, Real(1));
  CHECK_THROWS_AS(sample_point_features(one, std::span(&single, 1), pts, Variant::PC), PointBehindCamera);
}

TEST_CASE("zero-initialized residual tails leave the linear lift") {
  Model m(tiny_config());
  auto set = m.parameters();
  const Tensor& w = param(set, "g.lift.weight");
  const Tensor& b = param(set, "g.lift.bias");
  std::vector<Real> c(3 * 8), geo(3 * 6);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = static_cast<Real>(std::cos(1.3 * i));
  for (std::size_t i = 0; i < geo.size(); ++i) geo[i] = static_cast<Real>(0.1 * i - 0.4);
  const Tensor g = m.geo_feature(Tensor::from({3, 8}, c), Tensor::from({3, 6}, geo));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t o = 0; o < 8; ++o) {
      double acc = b.values()[o];
      for (std::size_t i = 0; i < 8; ++i) acc += double(c[r * 8 + i]) * w.values()[i * 8 + o];
      for (std::size_t i = 0; i < 6; ++i) acc += double(geo[r * 6 + i]) * w.values()[(8 + i) * 8 + o];
      CHECK(g.values()[r * 8 + o] == doctest::Approx(acc).epsilon(1e-5));
    }
  }
}

TEST_CASE("multi-view aggregation") {
  SUBCASE("single view has exactly zero variance") {
    std::vector<Real> v(4 * 3);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(std::exp(0.3 * i) - 2.1);
    const Tensor g = Tensor::from({4, 3}, v);
    const std::vector<Real> w(4, 1);
    for (VarianceForm form : {VarianceForm::Elementwise, VarianceForm::ScalarNorm}) {
      const Aggregate a = aggregate_views(g, {1, 1, 4}, w, true, form);
      CHECK(vec(a.mean) == v);
      for (Real x : a.variance.values()) CHECK(x == Real(0));
    }
  }
  SUBCASE("identical views") {
    const Tensor g = Tensor::from({3, 2}, {0.4f, -1.5f, 0.4f, -1.5f, 0.4f, -1.5f});
    const Aggregate a = aggregate_views(g, {1, 3, 1}, std::vector<Real>(3, 1), true);
    CHECK(a.mean.values()[0] == doctest::Approx(0.4));
    CHECK(a.mean.values()[1] == doctest::Approx(-1.5));
    for (Real x : a.variance.values()) CHECK(x == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("hand variance") {
    const Tensor g = Tensor::from({2, 1}, {1.0f, 3.0f});
    const Aggregate a = aggregate_views(g, {1, 2, 1}, std::vector<Real>(2, 1), true);
    CHECK(a.mean.item() == doctest::Approx(2.0));
    CHECK(a.variance.item() == doctest::Approx(1.0));
    const Aggregate s = aggregate_views(g, {1, 2, 1}, std::vector<Real>(2, 1), true, VarianceForm::ScalarNorm);
    CHECK(s.variance.item() == doctest::Approx(1.0));
  }
  SUBCASE("dropped view") {
    const Tensor g = Tensor::from({3, 1}, {1.0f, 9.0f, 3.0f});
    const Aggregate a = aggregate_views(g, {1, 3, 1}, std::vector<Real>{1, 0, 1}, true);
    CHECK(a.mean.item() == doctest::Approx(2.0));
    CHECK(a.variance.item() == doctest::Approx(1.0));
  }
  SUBCASE("no views") {
    CHECK_THROWS_AS(aggregate_views(Tensor::zeros({0, 1}), {1, 0, 1}, {}, true), EmptyViewSet);
    CHECK_THROWS_AS(global_feature(Tensor::zeros({1, 1, 2, 2}), 0), EmptyViewSet);
  }
  SUBCASE("mean without variance for plain pooling") {
    const Tensor g = Tensor::from({2, 1}, {1.0f, 3.0f});
    CHECK_FALSE(aggregate_views(g, {1, 2, 1}, std::vector<Real>(2, 1), false).variance.defined());
  }
}

TEST_CASE("global feature pooling") {
  const Tensor c = global_feature(Tensor::full({1, 3, 4, 4}, Real(2.5)), 1);
  for (Real x : c.values()) CHECK(x == doctest::Approx(2.5));

  std::vector<Real> ab(2 * 2 * 9);
  for (std::size_t i = 0; i < ab.size(); ++i) ab[i] = i < 18 ? Real(1) : Real(4);
  const Tensor two = global_feature(Tensor::from({2, 2, 3, 3}, ab), 2);
  CHECK(vec(two) == std::vector<Real>{2.5f, 2.5f});

  std::vector<Real> r(3 * 2 * 4), p(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<Real>(std::sin(2.1 * i));
  const std::size_t order[] = {2, 0, 1};
  for (std::size_t v = 0; v < 3; ++v) std::copy_n(r.begin() + order[v] * 8, 8, p.begin() + v * 8);
  const auto a = vec(global_feature(Tensor::from({3, 2, 2, 2}, r), 3));
  const auto b = vec(global_feature(Tensor::from({3, 2, 2, 2}, p), 3));
  CHECK(max_rel_diff(a, b) < 1e-6);
}

TEST_CASE("occupancy predictions") {
  const auto pts = scene().points(64);
  for (Variant variant : {Variant::P, Variant::PC, Variant::PCV}) {
    CAPTURE(to_string(variant));
    Model m(tiny_config(variant));
    const auto out = probs(m, scene().views({0, 1, 2}), pts);
    REQUIRE(out.size() == pts.size());
    for (Real p : out) {
      CHECK(p > 0);
      CHECK(p < 1);
    }
  }

  Model m(tiny_config());
  const ViewSet one = scene().views({1});
  nn::NoGradGuard guard;
  const ModelOutput o = m.forward(std::span(&one, 1), std::span(&pts, 1), false);
  for (Real x : o.aggregate.variance.values()) CHECK(x == Real(0));
  CHECK(o.probabilities.dim(0) == pts.size());

  const std::vector<double> occ = m.occupancy(one, pts, 10);
  REQUIRE(occ.size() == pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK(occ[i] == doctest::Approx(o.probabilities.values()[i]).epsilon(1e-5));
}

TEST_CASE("view permutation invariance") {
  const auto pts = scene().points(96);
  for (CoordinateMode mode : {CoordinateMode::ViewCentric, CoordinateMode::ObjectCentric}) {
    for (Variant variant : {Variant::P, Variant::PC, Variant::PCV}) {
      CAPTURE(to_string(variant));
      ModelConfig cfg = tiny_config(variant);
      cfg.coordinate_mode = mode;
      Model m(cfg);
      const auto a = probs(m, scene().views({0, 1, 2, 3}, 0), pts);
      // The reference view keeps its identity: view 0 now sits at position 2.
      const auto b = probs(m, scene().views({3, 1, 0, 2}, 2), pts);
      CHECK(max_rel_diff(a, b) < 1e-5);
    }
  }
}

TEST_CASE("rigid-motion invariance in view-centric mode") {
  const auto pts = scene().points(96);
  Rng rng(21);
  for (Variant variant : {Variant::P, Variant::PC, Variant::PCV}) {
    CAPTURE(to_string(variant));
    Model m(tiny_config(variant));
    const ViewSet base = scene().views({0, 1, 2});
    const auto a = probs(m, base, pts);
    for (int trial = 0; trial < 3; ++trial) {
      const Mat3 q = random_rotation(rng);
      const Vec3 d(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2));
      const RigidMotionResult moved = apply_rigid_motion(pts, base.rigs, q, d);
      ViewSet v = base;
      v.rigs = moved.rigs;
      const auto b = probs(m, v, moved.points);
      CHECK(max_rel_diff(a, b) < 1e-5);
    }
  }
}

TEST_CASE("object-centric outputs depend on the world frame") {
  const auto pts = scene().points(96);
  ModelConfig cfg = tiny_config(Variant::PCV);
  cfg.coordinate_mode = CoordinateMode::ObjectCentric;
  Model m(cfg);
  const ViewSet base = scene().views({0, 1, 2});
  const auto a = probs(m, base, pts);
  const RigidMotionResult moved =
      apply_rigid_motion(pts, base.rigs, rotation_about_axis(Vec3(0.3, 1, -0.2).normalized(), 1.1), Vec3(0.4, -0.3, 0.9));
  ViewSet v = base;
  v.rigs = moved.rigs;
  const auto b = probs(m, v, moved.points);
  CHECK(max_rel_diff(a, b) > 1e-3);
}

TEST_CASE("every parameter receives gradient") {
  const auto& s = scene().sample();
  const auto pts = scene().points(48);
  std::vector<Real> labels;
  for (std::size_t i = 0; i < pts.size(); ++i) labels.push_back(s.point_pool.labels[i]);
  for (Variant variant : {Variant::P, Variant::PC, Variant::PCV}) {
    CAPTURE(to_string(variant));
    Model m(tiny_config(variant));
    auto set = m.parameters();
    nn::OptimizerState opt;
    const ViewSet v = scene().views({0, 1, 2});
    // Zero-initialized residual tails block their block's first linear on the
    // very first pass; one update opens every path.
    for (int step = 0; step < 2; ++step) {
      set.zero_grads();
      Tensor loss = occupancy_loss(m.forward(std::span(&v, 1), std::span(&pts, 1), true).probabilities, labels);
      loss.backward();
      if (step == 0) nn::adam_step(set, opt);
    }
    for (const auto& p : set.parameters()) {
      CAPTURE(p.name);
      REQUIRE(p.tensor.has_grad());
      double norm = 0;
      for (Real g : p.tensor.grad()) norm += double(g) * g;
      CHECK(norm > 0);
    }
    CHECK(param(set, "encoder.stem.kernel").has_grad());
  }
}

TEST_CASE("loss values") {
  const std::vector<Real> y = {1, 0};
  CHECK(occupancy_loss(Tensor::full({2, 1}, Real(0.5)), y).item() == doctest::Approx(std::log(2.0)));
  CHECK(occupancy_loss(Tensor::full({2, 1}, Real(0.9)), y).item() == doctest::Approx(1.2040).epsilon(1e-4));
  CHECK(occupancy_loss(Tensor::from({2, 1}, {1.0f, 0.0f}), y).item() < 1e-6);
  CHECK_THROWS_AS(occupancy_loss(Tensor::full({3, 1}, Real(0.5)), y), nn::ShapeMismatch);
}

TEST_CASE("checkpoint round trip through the model") {
  const auto dir = std::filesystem::temp_directory_path() / "occ3d_test_model";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ckpt";
  const auto pts = scene().points(32);
  const ViewSet v = scene().views({0, 2});

  Model a(tiny_config());
  {
    auto set = a.parameters();
    nn::OptimizerState opt;
    std::vector<Real> labels(pts.size(), 1);
    Tensor loss = occupancy_loss(a.forward(std::span(&v, 1), std::span(&pts, 1), true).probabilities, labels);
    loss.backward();
    nn::adam_step(set, opt);
  }
  a.save(path);
  const auto pa = probs(a, v, pts);
  auto b = Model::from_checkpoint(path);
  CHECK(probs(*b, v, pts) == pa);
  {
    auto sa = a.parameters();
    auto sb = b->parameters();
    for (std::size_t i = 0; i < sa.parameters().size(); ++i) {
      CHECK(vec(sa.parameters()[i].tensor) == vec(sb.parameters()[i].tensor));
    }
    for (std::size_t i = 0; i < sa.buffers().size(); ++i) CHECK(*sa.buffers()[i].values == *sb.buffers()[i].values);
  }

  ModelConfig other = tiny_config();
  other.init_seed = 99;
  Model c(other);
  c.load(path);
  CHECK(probs(c, v, pts) == pa);

  Model wrong(tiny_config(Variant::PC));
  CHECK_THROWS_AS(wrong.load(path), nn::NameMismatch);

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS_AS(Model::from_checkpoint(path), nn::IoError);
  std::filesystem::remove_all(dir);
}
