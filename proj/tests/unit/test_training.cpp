#include "occ3d/training.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

using namespace occ3d;
using nn::Real;

namespace {

ModelConfig tiny_model(std::uint64_t seed = 11) {
  ModelConfig c;
  c.image_size = 16;
  c.feature_channels = c.hidden = 8;
  c.g_blocks = 1;
  c.f_blocks = 1;
  c.encoder_depth = 2;
  c.encoder_channels = 4;
  c.init_seed = seed;
  return c;
}

const Dataset& data() {
  static const Dataset ds = [] {
    DatasetConfig cfg;
    cfg.train_per_family = 2;
    cfg.test_per_family = 1;
    cfg.image_size = 16;
    cfg.views_per_shape = 5;
    cfg.pool_size = 512;
    cfg.seed = 9;
    return generate_dataset(cfg);
  }();
  return ds;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.points_per_sample = 128;
  t.views_per_sample = 3;
  t.batch_size = 3;
  t.lr = 1e-3;
  t.epochs = 2;
  t.val_iou_samples = 500;
  t.val_shapes = 3;
  return t;
}

std::vector<std::vector<Real>> snapshot(Model& m, bool with_buffers = true) {
  std::vector<std::vector<Real>> out;
  const auto set = m.parameters();
  for (const auto& p : set.parameters()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  if (with_buffers)
    for (const auto& b : set.buffers()) out.push_back(*b.values);
  return out;
}

// Sharp occupancy straight from the signed distance.
Predictor oracle_predictor() {
  return [](const Sample& s, const ViewSet&, std::span<const Vec3> pts) {
    std::vector<double> p(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) p[i] = sdf(s.shape, pts[i]) < 0.0 ? 1.0 : 0.0;
    return p;
  };
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("draws without replacement are distinct and reproducible") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng a(seed), b(seed);
    const auto x = draw_without_replacement(50, 20, a);
    CHECK(x == draw_without_replacement(50, 20, b));
    CHECK(std::set<std::size_t>(x.begin(), x.end()).size() == 20);
    CHECK(*std::max_element(x.begin(), x.end()) < 50);
  }
  Rng r(0);
  const auto all = draw_without_replacement(7, 7, r);
  CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == 7);
  CHECK_THROWS_AS(draw_without_replacement(3, 4, r), std::invalid_argument);
}

TEST_CASE("batches follow the requested draw sizes") {
  const Dataset& ds = data();
  TrainConfig cfg = tiny_train();
  Rng rng(4);
  const std::vector<std::size_t> idx = {ds.train_indices[0], ds.train_indices[3]};
  const Batch b = build_batch(ds, idx, cfg, rng);
  REQUIRE(b.sets.size() == 2);
  CHECK(b.labels.size() == 2 * cfg.points_per_sample);
  CHECK(b.view_ids.size() == 2 * cfg.views_per_sample);
  for (std::size_t g = 0; g < 2; ++g) {
    const Sample& s = ds.samples[idx[g]];
    const auto v0 = b.view_ids.begin() + static_cast<long>(g * cfg.views_per_sample);
    CHECK(std::set<std::size_t>(v0, v0 + static_cast<long>(cfg.views_per_sample)).size() == cfg.views_per_sample);
    CHECK(b.sets[g].reference == 0);
    CHECK(b.sets[g].images[0] == &s.views[*v0]);
    const auto p0 = b.point_ids.begin() + static_cast<long>(g * cfg.points_per_sample);
    CHECK(std::set<std::size_t>(p0, p0 + static_cast<long>(cfg.points_per_sample)).size() == cfg.points_per_sample);
    for (std::size_t j = 0; j < cfg.points_per_sample; ++j) {
      const std::size_t pid = p0[static_cast<long>(j)];
      CHECK(b.points[g][j] == s.point_pool.points[pid]);
      CHECK(b.labels[g * cfg.points_per_sample + j] == Real(s.point_pool.labels[pid]));
    }
  }

  cfg.views_per_sample = 6;
  CHECK_THROWS_AS(build_batch(ds, idx, cfg, rng), InsufficientViews);
  cfg = tiny_train();
  cfg.points_per_sample = 513;
  CHECK_THROWS_AS(build_batch(ds, idx, cfg, rng), InsufficientPoints);
  CHECK_THROWS_AS(build_batch(ds, std::vector<std::size_t>{ds.samples.size()}, tiny_train(), rng),
                  std::out_of_range);
}

TEST_CASE("positive fraction of drawn points matches the pool") {
  // Hypergeometric draws: mean equals the pool fraction, variance shrinks by
  // the finite-population factor.
  const Dataset& ds = data();
  const Sample& s = ds.samples[ds.train_indices[1]];
  const double frac = s.point_pool.positive_fraction();
  TrainConfig cfg = tiny_train();
  const double n = double(cfg.points_per_sample), N = double(s.point_pool.size());
  const double sd = std::sqrt(frac * (1 - frac) / n * (N - n) / (N - 1));
  Rng rng(12);
  const int trials = 200;
  double mean = 0.0;
  for (int t = 0; t < trials; ++t) {
    const Batch b = build_batch(ds, std::vector<std::size_t>{ds.train_indices[1]}, cfg, rng);
    double pos = 0.0;
    for (Real l : b.labels) pos += l;
    mean += pos / n / trials;
  }
  CHECK(std::abs(mean - frac) < 4.0 * sd / std::sqrt(double(trials)));
}

TEST_CASE("training config reports dataset conflicts") {
  TrainConfig cfg = tiny_train();
  CHECK(cfg.violations(data()).empty());
  cfg.points_per_sample = 1024;
  cfg.views_per_sample = 9;
  cfg.eval_views = {1, 6};
  cfg.lr = 0.0;
  const auto v = cfg.violations(data());
  CHECK(v.size() == 4);
  CHECK_THROWS_AS(cfg.validate(data()), ConfigError);
}

TEST_CASE("loss decreases over fifty steps") {
  const Dataset& ds = data();
  std::vector<double> gains;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model m(tiny_model(seed));
    TrainConfig cfg = tiny_train();
    cfg.seed = seed;
    Trainer tr(m, cfg);
    Rng rng(seed);
    std::vector<double> losses;
    for (int s = 0; s < 50; ++s) {
      const Batch b = build_batch(ds, std::vector<std::size_t>{ds.train_indices[0], ds.train_indices[2]}, cfg, rng);
      losses.push_back(tr.step(b));
    }
    CHECK(tr.steps() == 50);
    double head = 0, tail = 0;
    for (int k = 0; k < 10; ++k) {
      head += losses[k];
      tail += losses[40 + k];
    }
    gains.push_back(head - tail);
  }
  std::sort(gains.begin(), gains.end());
  CHECK(gains[1] > 0.0);
}

TEST_CASE("non-finite loss aborts the step") {
  const Dataset& ds = data();
  Model m(tiny_model());
  TrainConfig cfg = tiny_train();
  Trainer tr(m, cfg);
  Rng rng(1);
  Batch b = build_batch(ds, std::vector<std::size_t>{ds.train_indices[0]}, cfg, rng);
  b.labels[0] = std::numeric_limits<Real>::quiet_NaN();
  // Running statistics move during the forward pass; weights must not.
  const auto before = snapshot(m, false);
  CHECK_THROWS_AS(tr.step(b), NonFiniteLoss);
  CHECK(snapshot(m, false) == before);
}

TEST_CASE("training runs are reproducible and write checkpoints") {
  const Dataset& ds = data();
  TempDir dir("occ3d_train_test");
  TrainConfig cfg = tiny_train();
  Model a(tiny_model()), b(tiny_model());
  std::vector<int> seen;
  TrainOptions opts;
  opts.out_dir = dir.path;
  opts.on_epoch = [&](int e, double) { seen.push_back(e); };
  const RunManifest ma = train(ds, a, cfg, opts);
  const RunManifest mb = train(ds, b, cfg);
  CHECK(ma.to_text(false) == mb.to_text(false));
  CHECK(snapshot(a) == snapshot(b));
  CHECK(seen == std::vector<int>{0, 1});
  CHECK(ma.epoch_loss.size() == 2);
  CHECK(ma.steps == 2 * ((ds.train_indices.size() + cfg.batch_size - 1) / cfg.batch_size));
  REQUIRE(ma.evals.size() == 2);
  CHECK(ma.evals[0].mean_iou >= 0.0);
  CHECK(ma.evals[0].mean_iou <= 1.0);
  CHECK(ma.dataset_hash.size() == 16);
  CHECK(ma.code_version.rfind("occ3d ", 0) == 0);

  CHECK(std::filesystem::exists(dir.path / "last.ckpt"));
  CHECK(std::filesystem::exists(dir.path / "best.ckpt"));
  CHECK(std::filesystem::exists(dir.path / "manifest.txt"));
  auto restored = Model::from_checkpoint(dir.path / "last.ckpt");
  CHECK(snapshot(*restored) == snapshot(a));

  TrainConfig capped = cfg;
  capped.max_steps = 3;
  Model c(tiny_model());
  CHECK(train(ds, c, capped).steps == 3);

  TrainConfig none = cfg;
  none.epochs = 0;
  Model d(tiny_model());
  const auto before = snapshot(d);
  CHECK(train(ds, d, none).steps == 0);
  CHECK(snapshot(d) == before);
}

TEST_CASE("restoring the best validation weights") {
  const Dataset& ds = data();
  TempDir dir("occ3d_restore_test");
  TrainConfig cfg = tiny_train();
  cfg.epochs = 4;
  Model a(tiny_model());
  TrainOptions opts;
  opts.out_dir = dir.path;
  opts.restore_best = true;
  const RunManifest m = train(ds, a, cfg, opts);
  auto best = Model::from_checkpoint(dir.path / "best.ckpt");
  CHECK(snapshot(a) == snapshot(*best));
  REQUIRE(m.evals.size() == 4);
  auto last = Model::from_checkpoint(dir.path / "last.ckpt");
  const auto best_eval = std::max_element(m.evals.begin(), m.evals.end(),
                                          [](const auto& x, const auto& y) { return x.mean_iou < y.mean_iou; });
  if (best_eval != m.evals.end() - 1) CHECK(snapshot(*last) != snapshot(a));

  Model b(tiny_model());
  opts.out_dir.reset();
  train(ds, b, cfg, opts);
  CHECK(snapshot(b) == snapshot(a));
}

TEST_CASE("oracle predictor scores perfect IoU") {
  const Dataset& ds = data();
  EvalOptions opts;
  opts.metrics.iou_samples = 4000;
  opts.metrics.surface_samples = 2000;
  opts.resolution = 32;
  const EvalTable t = evaluate_split(ds, oracle_predictor(), Split::Test, 1, opts);
  REQUIRE(t.rows.size() == ds.test_indices.size());
  for (const auto& r : t.rows) {
    CHECK(std::abs(r.metrics.iou - 1.0) <= 0.005);
    CHECK(r.metrics.flag.empty());
    CHECK(r.metrics.chamfer_l1 < 0.05);
    CHECK(r.metrics.f_score > 0.5);
  }
}

TEST_CASE("evaluation tables share one schema across view counts") {
  const Dataset& ds = data();
  Model m(tiny_model());
  EvalOptions opts;
  opts.metrics.iou_samples = 500;
  opts.mesh_metrics = false;
  opts.families = {"cuboid", "torus"};
  const EvalTable one = evaluate_split(ds, m, Split::Test, 1, opts);
  const EvalTable five = evaluate_split(ds, m, Split::Test, 5, opts);
  REQUIRE(one.rows.size() == 2);
  REQUIRE(five.rows.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(one.rows[i].shape_id == five.rows[i].shape_id);
    CHECK(one.rows[i].n_views == 1);
    CHECK(five.rows[i].n_views == 5);
  }
  const auto h1 = one.to_csv().substr(0, one.to_csv().find('\n'));
  CHECK(h1 == kCsvHeader);
  CHECK(h1 == five.to_csv().substr(0, five.to_csv().find('\n')));
  CHECK_THROWS_AS(evaluate_split(ds, m, Split::Test, 6, opts), InsufficientViews);

  // Same view draw for the same shape and count.
  const Sample& s = ds.samples[ds.test_indices[0]];
  CHECK(eval_view_indices(s, ds.test_indices[0], 3, 0) == eval_view_indices(s, ds.test_indices[0], 3, 0));
}

TEST_CASE("family means recompute from the CSV rows") {
  EvalTable t;
  const double nan = std::nan("");
  t.rows = {{"a", "cuboid", 1, {0.5, 0.1, 0.9, 0.7, ""}},
            {"b", "cuboid", 1, {0.7, 0.3, 0.7, 0.5, ""}},
            {"c", "torus", 1, {0.2, nan, nan, nan, "empty_mesh"}},
            {"d", "torus", 1, {0.4, 0.2, 0.6, 0.4, ""}}};
  const EvalTable back = EvalTable::from_csv(t.to_csv());
  REQUIRE(back.rows.size() == 4);
  CHECK(std::isnan(back.rows[2].metrics.chamfer_l1));
  const auto m = back.family_means();
  REQUIRE(m.size() == 2);
  CHECK(m[0].family == "cuboid");
  CHECK(m[0].count == 2);
  CHECK(m[0].iou == doctest::Approx(0.6));
  CHECK(m[0].chamfer_l1 == doctest::Approx(0.2));
  CHECK(m[1].iou == doctest::Approx(0.3));
  CHECK(m[1].chamfer_l1 == doctest::Approx(0.2));
  CHECK(m[1].f_score == doctest::Approx(0.4));
  const auto all = back.overall();
  CHECK(all.family == "all");
  CHECK(all.count == 4);
  CHECK(all.iou == doctest::Approx(0.45));
  CHECK(all.chamfer_l1 == doctest::Approx(0.2));
  CHECK_THROWS(EvalTable::from_csv("bad,header\n"));
}
