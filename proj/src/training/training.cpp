#include "occ3d/training.hpp"

#include "occ3d/dataset_io.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#ifndef OCC3D_VERSION
#define OCC3D_VERSION "unknown"
#endif

namespace occ3d {

std::string code_version() { return std::string("occ3d ") + OCC3D_VERSION; }

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> v;
  if (points_per_sample < 1) v.push_back("train.points_per_sample must be at least 1");
  if (views_per_sample < 1) v.push_back("train.views_per_sample must be at least 1");
  if (batch_size < 1) v.push_back("train.batch_size must be at least 1");
  if (!(lr > 0.0)) v.push_back("train.lr must be positive");
  if (epochs < 0) v.push_back("train.epochs must be non-negative");
  if (eval_every < 0) v.push_back("train.eval_every must be non-negative");
  if (val_iou_samples < 1) v.push_back("train.val_iou_samples must be at least 1");
  for (int n : eval_views) {
    if (n < 1) v.push_back("train.eval_views entries must be at least 1");
  }
  return v;
}

std::vector<std::string> TrainConfig::violations(const DatasetConfig& ds) const {
  auto v = violations();
  if (points_per_sample > ds.pool_size) {
    v.push_back("train.points_per_sample (" + std::to_string(points_per_sample) + ") exceeds dataset.pool_size (" +
                std::to_string(ds.pool_size) + ")");
  }
  const auto rigs = static_cast<std::size_t>(ds.views_per_shape);
  if (views_per_sample > rigs) {
    v.push_back("train.views_per_sample (" + std::to_string(views_per_sample) +
                ") exceeds dataset.views_per_shape (" + std::to_string(rigs) + ")");
  }
  for (int n : eval_views) {
    if (n > 0 && static_cast<std::size_t>(n) > rigs) {
      v.push_back("train.eval_views entry " + std::to_string(n) + " exceeds dataset.views_per_shape (" +
                  std::to_string(rigs) + ")");
    }
  }
  return v;
}

void TrainConfig::validate(const Dataset& ds) const {
  const auto v = violations(ds);
  if (v.empty()) return;
  std::string msg;
  for (const auto& s : v) msg += (msg.empty() ? "" : "; ") + s;
  throw ConfigError(msg);
}

std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) throw std::invalid_argument("cannot draw " + std::to_string(k) + " of " + std::to_string(n));
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  // Partial Fisher-Yates with an explicit draw so results do not depend on
  // the standard library's shuffle.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

Batch build_batch(const Dataset& ds, std::span<const std::size_t> indices, const TrainConfig& cfg, Rng& rng) {
  Batch b;
  for (std::size_t idx : indices) {
    if (idx >= ds.samples.size()) throw std::out_of_range("sample index " + std::to_string(idx) + " out of range");
    const Sample& s = ds.samples[idx];
    if (cfg.views_per_sample > s.rigs.size()) {
      throw InsufficientViews("sample " + s.id + " has " + std::to_string(s.rigs.size()) + " views, " +
                              std::to_string(cfg.views_per_sample) + " requested");
    }
    if (cfg.points_per_sample > s.point_pool.size()) {
      throw InsufficientPoints("sample " + s.id + " has " + std::to_string(s.point_pool.size()) + " points, " +
                               std::to_string(cfg.points_per_sample) + " requested");
    }
    ViewSet vs;
    for (std::size_t v : draw_without_replacement(s.rigs.size(), cfg.views_per_sample, rng)) {
      vs.images.push_back(&s.views[v]);
      vs.rigs.push_back(s.rigs[v]);
      b.view_ids.push_back(v);
    }
    std::vector<Vec3> pts;
    for (std::size_t p : draw_without_replacement(s.point_pool.size(), cfg.points_per_sample, rng)) {
      pts.push_back(s.point_pool.points[p]);
      b.labels.push_back(static_cast<nn::Real>(s.point_pool.labels[p]));
      b.point_ids.push_back(p);
    }
    b.sets.push_back(std::move(vs));
    b.points.push_back(std::move(pts));
  }
  return b;
}

Trainer::Trainer(Model& model, const TrainConfig& cfg) : model_(model), params_(model.parameters()) {
  opt_.config.lr = cfg.lr;
}

double Trainer::step(const Batch& batch) {
  params_.zero_grads();
  const ModelOutput out = model_.forward(batch.sets, batch.points, true);
  nn::Tensor loss = occupancy_loss(out.probabilities, batch.labels);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw NonFiniteLoss("non-finite loss " + std::to_string(value) + " at optimizer step " +
                        std::to_string(opt_.step + 1));
  }
  loss.backward();
  nn::adam_step(params_, opt_);
  return value;
}

namespace {

std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

}  // namespace

std::string RunManifest::to_text(bool with_timing) const {
  std::ostringstream os;
  os << "# occ3d run manifest\n"
     << "code_version = " << code_version << "\n"
     << "dataset_hash = " << dataset_hash << "\n"
     << "steps = " << steps << "\n"
     << "\n[config]\n"
     << config << (config.empty() || config.back() == '\n' ? "" : "\n") << "\n[epoch_loss]\n";
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) os << e << " " << fmt(epoch_loss[e]) << "\n";
  os << "\n[evals]\n";
  for (const auto& r : evals) os << r.epoch << " " << r.split << " " << r.n_views << " " << fmt(r.mean_iou) << "\n";
  if (with_timing) os << "\n[timing]\nwall_clock_s = " << fmt(wall_clock_s) << "\n";
  return os.str();
}

void RunManifest::write(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw nn::IoError("cannot write " + tmp);
    f << to_text();
  }
  std::filesystem::rename(tmp, path);
}

namespace {

// Test-split shapes of the training families, spread evenly across families.
EvalOptions validation_options(const Dataset& ds, const TrainConfig& cfg) {
  EvalOptions o;
  o.mesh_metrics = false;
  o.families = ds.config.seen_families;
  o.metrics.iou_samples = cfg.val_iou_samples;
  const std::size_t fam = std::max<std::size_t>(1, o.families.size());
  o.max_per_family = std::max<std::size_t>(1, (cfg.val_shapes + fam - 1) / fam);
  return o;
}

}  // namespace

RunManifest train(const Dataset& ds, Model& model, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate(ds);
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.config = opts.config_snapshot.empty() ? model.config().to_text() : opts.config_snapshot;
  manifest.dataset_hash = hex_hash(dataset_hash(ds));
  manifest.code_version = code_version();
  if (opts.out_dir) std::filesystem::create_directories(*opts.out_dir);

  Trainer trainer(model, cfg);
  Rng rng(cfg.seed);
  const int val_views = static_cast<int>(cfg.views_per_sample);
  const EvalOptions val = validation_options(ds, cfg);
  double best = -1.0;
  nn::ParameterSet params = model.parameters();
  std::vector<std::vector<nn::Real>> best_values;
  auto capped = [&] { return cfg.max_steps > 0 && trainer.steps() >= cfg.max_steps; };

  for (int epoch = 0; epoch < cfg.epochs && !capped(); ++epoch) {
    std::vector<std::size_t> order;
    for (std::size_t k : draw_without_replacement(ds.train_indices.size(), ds.train_indices.size(), rng)) {
      order.push_back(ds.train_indices[k]);
    }
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < order.size() && !capped(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const Batch batch = build_batch(ds, std::span(order).subspan(start, end - start), cfg, rng);
      total += trainer.step(batch);
      ++count;
    }
    const double mean_loss = count ? total / static_cast<double>(count) : 0.0;
    manifest.epoch_loss.push_back(mean_loss);
    manifest.steps = trainer.steps();
    if (opts.out_dir) model.save(*opts.out_dir / "last.ckpt", &trainer.optimizer());
    if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
      const double iou = evaluate_split(ds, model, Split::Test, val_views, val).overall().iou;
      manifest.evals.push_back({epoch, val_views, "val", iou});
      if (iou > best) {
        best = iou;
        if (opts.out_dir) model.save(*opts.out_dir / "best.ckpt", &trainer.optimizer());
        if (opts.restore_best) {
          best_values.clear();
          for (const auto& p : params.parameters()) {
            best_values.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
          }
          for (const auto& b : params.buffers()) best_values.push_back(*b.values);
        }
      }
    }
    manifest.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opts.out_dir) manifest.write(*opts.out_dir / "manifest.txt");
    if (opts.on_epoch) opts.on_epoch(epoch, mean_loss);
  }
  if (!best_values.empty()) {
    std::size_t k = 0;
    for (const auto& p : params.parameters()) {
      nn::Tensor t = p.tensor;
      std::copy(best_values[k].begin(), best_values[k].end(), t.values().begin());
      ++k;
    }
    for (const auto& b : params.buffers()) *b.values = best_values[k++];
  }
  manifest.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (opts.out_dir) manifest.write(*opts.out_dir / "manifest.txt");
  return manifest;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<EvalSummary> EvalTable::family_means() const {
  std::vector<EvalSummary> out;
  std::vector<std::array<std::size_t, 3>> valid;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const EvalSummary& s) { return s.family == r.family; });
    if (it == out.end()) {
      out.push_back({r.family});
      valid.push_back({0, 0, 0});
      it = out.end() - 1;
    }
    auto& v = valid[static_cast<std::size_t>(it - out.begin())];
    ++it->count;
    it->iou += r.metrics.iou;
    const double m[3] = {r.metrics.chamfer_l1, r.metrics.normal_consistency, r.metrics.f_score};
    double* dst[3] = {&it->chamfer_l1, &it->normal_consistency, &it->f_score};
    for (int k = 0; k < 3; ++k) {
      if (!std::isnan(m[k])) {
        *dst[k] += m[k];
        ++v[k];
      }
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].iou /= static_cast<double>(out[i].count);
    double* dst[3] = {&out[i].chamfer_l1, &out[i].normal_consistency, &out[i].f_score};
    for (int k = 0; k < 3; ++k) {
      *dst[k] = valid[i][k] ? *dst[k] / static_cast<double>(valid[i][k]) : std::nan("");
    }
  }
  return out;
}

EvalSummary EvalTable::overall() const {
  EvalTable all = *this;
  for (auto& r : all.rows) r.family = "all";
  const auto m = all.family_means();
  if (m.empty()) return {"all", 0, std::nan(""), std::nan(""), std::nan(""), std::nan("")};
  return m.front();
}

std::string EvalTable::to_csv() const {
  std::ostringstream os;
  os << kCsvHeader << "\n";
  for (const auto& r : rows) {
    os << r.shape_id << "," << r.family << "," << r.n_views << "," << fmt(r.metrics.iou) << ","
       << fmt(r.metrics.chamfer_l1) << "," << fmt(r.metrics.normal_consistency) << "," << fmt(r.metrics.f_score)
       << "\n";
  }
  return os.str();
}

EvalTable EvalTable::from_csv(const std::string& text) {
  EvalTable t;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line != kCsvHeader) throw std::runtime_error("metric CSV header mismatch: " + line);
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw std::runtime_error("metric CSV line " + std::to_string(lineno) + " has " +
                                                std::to_string(f.size()) + " fields");
    EvalRow r;
    r.shape_id = f[0];
    r.family = f[1];
    r.n_views = std::stoi(f[2]);
    r.metrics.iou = std::stod(f[3]);
    r.metrics.chamfer_l1 = std::stod(f[4]);
    r.metrics.normal_consistency = std::stod(f[5]);
    r.metrics.f_score = std::stod(f[6]);
    t.rows.push_back(r);
  }
  return t;
}

Predictor model_predictor(Model& model) {
  return [&model](const Sample&, const ViewSet& views, std::span<const Vec3> pts) {
    return model.occupancy(views, pts);
  };
}

std::vector<std::size_t> eval_view_indices(const Sample& s, std::size_t sample_index, int n_views,
                                           std::uint64_t seed) {
  if (n_views < 1 || static_cast<std::size_t>(n_views) > s.rigs.size()) {
    throw InsufficientViews("sample " + s.id + " has " + std::to_string(s.rigs.size()) + " views, " +
                            std::to_string(n_views) + " requested");
  }
  Rng rng(mix_seed(mix_seed(seed, sample_index), static_cast<std::uint64_t>(n_views)));
  return draw_without_replacement(s.rigs.size(), static_cast<std::size_t>(n_views), rng);
}

const TriangleMesh& GroundTruthCache::get(const Sample& s) {
  auto it = meshes_.find(s.id);
  if (it == meshes_.end()) it = meshes_.emplace(s.id, oracle_mesh(s.shape, resolution_)).first;
  return it->second;
}

EvalTable evaluate_split(const Dataset& ds, const Predictor& predict, Split split, int n_views,
                         const EvalOptions& opts, GroundTruthCache* cache) {
  opts.metrics.validate();
  GroundTruthCache local;
  GroundTruthCache& gt = cache ? *cache : local;
  const auto& indices = split == Split::Train ? ds.train_indices : ds.test_indices;
  std::map<std::string, std::size_t> taken, written;
  EvalTable table;
  for (std::size_t idx : indices) {
    const Sample& s = ds.samples[idx];
    const std::string& fam = s.shape.family;
    if (!opts.families.empty() && std::find(opts.families.begin(), opts.families.end(), fam) == opts.families.end()) {
      continue;
    }
    if (opts.max_per_family > 0 && taken[fam] >= opts.max_per_family) continue;
    ++taken[fam];

    ViewSet views;
    for (std::size_t v : eval_view_indices(s, idx, n_views, opts.view_seed)) {
      views.images.push_back(&s.views[v]);
      views.rigs.push_back(s.rigs[v]);
    }
    const std::uint64_t shape_seed = mix_seed(opts.metrics.seed, idx);
    const auto pts = uniform_cube_points(opts.metrics.iou_samples, shape_seed);
    const auto probs = predict(s, views, pts);
    std::vector<std::uint8_t> labels(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) labels[i] = probs[i] >= opts.iso ? 1 : 0;

    EvalRow row{s.id, fam, n_views, {}};
    row.metrics.iou = iou_from_labels(oracle_occupancy(s.shape)(pts), labels);
    if (opts.mesh_metrics) {
      const FieldFn field = [&](std::span<const Vec3> q) { return predict(s, views, q); };
      const TriangleMesh mesh = marching_cubes(evaluate_grid(field, opts.resolution), opts.iso);
      if (mesh.empty()) {
        row.metrics.flag = "empty_mesh";
        row.metrics.chamfer_l1 = row.metrics.normal_consistency = row.metrics.f_score = std::nan("");
      } else {
        const SurfaceScores sc =
            surface_scores(sample_surface_points(mesh, opts.metrics.surface_samples, shape_seed),
                           sample_surface_points(gt.get(s), opts.metrics.surface_samples, shape_seed),
                           opts.metrics.f_threshold);
        row.metrics.chamfer_l1 = sc.chamfer_l1;
        row.metrics.normal_consistency = sc.normal_consistency;
        row.metrics.f_score = sc.f_score;
        if (opts.mesh_dir && written[fam] < opts.meshes_per_family) {
          std::filesystem::create_directories(*opts.mesh_dir);
          write_obj(mesh, *opts.mesh_dir / (s.id + "_" + fam + "_v" + std::to_string(n_views) + ".obj"));
          ++written[fam];
        }
      }
    } else {
      row.metrics.chamfer_l1 = row.metrics.normal_consistency = row.metrics.f_score = std::nan("");
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

EvalTable evaluate_split(const Dataset& ds, Model& model, Split split, int n_views, const EvalOptions& opts,
                         GroundTruthCache* cache) {
  return evaluate_split(ds, model_predictor(model), split, n_views, opts, cache);
}

}  // namespace occ3d
