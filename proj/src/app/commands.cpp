#include "occ3d/cli.hpp"

#include "occ3d/dataset_io.hpp"

#include <CLI11.hpp>
#include <omp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace occ3d::cli {

namespace {

std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

struct Means {
  std::size_t count = 0;
  double iou = 0;
  std::array<double, 3> sum{0, 0, 0};
  std::array<std::size_t, 3> valid{0, 0, 0};

  void add(const MetricRow& m) {
    ++count;
    iou += m.iou;
    const double v[3] = {m.chamfer_l1, m.normal_consistency, m.f_score};
    for (int k = 0; k < 3; ++k) {
      if (!std::isnan(v[k])) {
        sum[k] += v[k];
        ++valid[k];
      }
    }
  }
  std::string row() const {
    std::string s = std::to_string(count) + "," + fmt(iou / static_cast<double>(count));
    for (int k = 0; k < 3; ++k) s += "," + fmt(valid[k] ? sum[k] / static_cast<double>(valid[k]) : std::nan(""));
    return s;
  }
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw nn::IoError("cannot write " + path.string());
  f << text;
  if (!f) throw nn::IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw nn::IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

std::string summary_csv(const EvalTable& table) {
  std::vector<int> views;
  for (const auto& r : table.rows) {
    if (std::find(views.begin(), views.end(), r.n_views) == views.end()) views.push_back(r.n_views);
  }
  std::sort(views.begin(), views.end());
  std::ostringstream os;
  os << kSummaryHeader << "\n";
  for (int n : views) {
    std::vector<std::pair<std::string, Means>> fams;
    Means all;
    for (const auto& r : table.rows) {
      if (r.n_views != n) continue;
      auto it = std::find_if(fams.begin(), fams.end(), [&](const auto& f) { return f.first == r.family; });
      if (it == fams.end()) {
        fams.push_back({r.family, {}});
        it = fams.end() - 1;
      }
      it->second.add(r.metrics);
      all.add(r.metrics);
    }
    for (const auto& [fam, m] : fams) os << fam << "," << n << "," << m.row() << "\n";
    os << "all," << n << "," << all.row() << "\n";
  }
  return os.str();
}

double AblationResult::mean_iou(Variant v, int repeat) const {
  for (const auto& r : runs) {
    if (r.variant == v && r.repeat == repeat) return r.table.overall().iou;
  }
  return std::nan("");
}

double AblationResult::mean_iou(Variant v) const {
  double s = 0.0;
  int n = 0;
  for (const auto& r : runs) {
    if (r.variant != v) continue;
    s += r.table.overall().iou;
    ++n;
  }
  return n ? s / n : std::nan("");
}

std::string AblationResult::to_csv() const {
  std::ostringstream os;
  os << kAblationHeader << "\n";
  for (Variant v : {Variant::P, Variant::PC, Variant::PCV}) {
    for (const auto& fam : families) {
      // Per-repeat family means, then their mean over repeats.
      int reps = 0;
      double iou = 0;
      std::array<double, 3> sum{0, 0, 0};
      std::array<int, 3> valid{0, 0, 0};
      for (const auto& r : runs) {
        if (r.variant != v) continue;
        for (const auto& s : r.table.family_means()) {
          if (s.family != fam) continue;
          ++reps;
          iou += s.iou;
          const double m[3] = {s.chamfer_l1, s.normal_consistency, s.f_score};
          for (int k = 0; k < 3; ++k) {
            if (!std::isnan(m[k])) {
              sum[k] += m[k];
              ++valid[k];
            }
          }
        }
      }
      os << to_string(v) << "," << fam << "," << reps << "," << fmt(reps ? iou / reps : std::nan(""));
      for (int k = 0; k < 3; ++k) os << "," << fmt(valid[k] ? sum[k] / valid[k] : std::nan(""));
      os << "\n";
    }
  }
  return os.str();
}

AblationResult run_ablation(const ExperimentConfig& cfg_in, const Dataset& ds,
                            const std::optional<std::filesystem::path>& out_dir, std::ostream& log) {
  ExperimentConfig cfg = cfg_in;
  cfg.resolve_seeds();
  AblationResult result;
  result.families = ds.config.unseen_families;
  EvalOptions eo;
  eo.metrics = cfg.eval.metrics;
  eo.mesh_metrics = cfg.eval.mesh_metrics;
  eo.resolution = cfg.eval.resolution;
  eo.iso = cfg.eval.iso;
  eo.view_seed = cfg.eval.metrics.seed;
  eo.families = result.families;
  eo.max_per_family = cfg.eval.max_per_family;
  GroundTruthCache gt;
  for (int rep = 0; rep < cfg.eval.ablation_seeds; ++rep) {
    for (Variant v : {Variant::P, Variant::PC, Variant::PCV}) {
      ModelConfig mc = cfg.model;
      mc.variant = v;
      mc.init_seed = repeat_seed(cfg.model.init_seed, rep);
      TrainConfig tc = cfg.train;
      tc.seed = repeat_seed(cfg.train.seed, rep);
      Model model(mc);
      TrainOptions to;
      const std::string tag = to_string(v) + "_r" + std::to_string(rep);
      if (out_dir) to.out_dir = *out_dir / tag;
      ExperimentConfig snap = cfg;
      snap.model = mc;
      snap.init_seed = mc.init_seed;
      snap.train_seed = tc.seed;
      to.config_snapshot = snap.to_text();
      to.restore_best = true;
      const RunManifest man = train(ds, model, tc, to);
      // Weights selected on seen-family validation; unseen families stay untouched.
      AblationRun run{v, rep, evaluate_split(ds, model, Split::Test, cfg.eval.ablation_views, eo, &gt)};
      log << "ablate " << tag << " steps=" << man.steps << " unseen_iou=" << fmt(run.table.overall().iou) << "\n";
      if (out_dir) write_text(*out_dir / tag / "metrics.csv", run.table.to_csv());
      result.runs.push_back(std::move(run));
    }
  }
  if (out_dir) write_text(*out_dir / "ablation.csv", result.to_csv());
  return result;
}

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> iso;
  std::optional<int> resolution;
  std::vector<int> views;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string shape;
  std::string split = "test";
  std::vector<std::string> inputs;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (f.seed) {
    // A new root seed re-derives every stream.
    c.seed = *f.seed;
    c.dataset_seed = c.init_seed = c.train_seed = c.eval_seed = std::nullopt;
  }
  if (f.threads) c.threads = *f.threads;
  if (f.iso) c.eval.iso = *f.iso;
  if (f.resolution) c.eval.resolution = *f.resolution;
  if (!f.views.empty()) c.eval.views = f.views;
  c.resolve_seeds();
  const auto v = c.violations();
  if (!v.empty()) {
    std::string msg;
    for (const auto& s : v) msg += (msg.empty() ? "" : "; ") + s;
    throw ConfigError(msg);
  }
  if (c.threads > 0) omp_set_num_threads(c.threads);
  return c;
}

std::filesystem::path out_path(const Flags& f, const ExperimentConfig& c, const char* sub) {
  return f.out.empty() ? c.out / sub : std::filesystem::path(f.out);
}

Dataset obtain_dataset(const Flags& f, const ExperimentConfig& c, std::ostream& out) {
  if (!f.data.empty()) return load_dataset(f.data);
  out << "generating dataset in memory\n";
  return generate_dataset(c.dataset);
}

std::filesystem::path checkpoint_path(const Flags& f, const ExperimentConfig& c) {
  return f.checkpoint.empty() ? c.out / "train" / "best.ckpt" : std::filesystem::path(f.checkpoint);
}

EvalOptions eval_options(const ExperimentConfig& c) {
  EvalOptions o;
  o.metrics = c.eval.metrics;
  o.mesh_metrics = c.eval.mesh_metrics;
  o.resolution = c.eval.resolution;
  o.iso = c.eval.iso;
  o.view_seed = c.eval.metrics.seed;
  o.max_per_family = c.eval.max_per_family;
  o.meshes_per_family = c.eval.meshes_per_family;
  return o;
}

void check_views(const Dataset& ds, const std::vector<int>& views) {
  for (int n : views) {
    if (n < 1 || n > ds.config.views_per_shape) {
      throw ConfigError("view count " + std::to_string(n) + " outside [1, " +
                        std::to_string(ds.config.views_per_shape) + "] for this dataset");
    }
  }
}

int cmd_gen_data(const Flags& f, std::ostream& out) {
  const ExperimentConfig c = resolve(f);
  const auto dir = out_path(f, c, "data");
  if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir)) {
    throw nn::IoError("output directory " + dir.string() + " is not empty");
  }
  const Dataset ds = generate_dataset(c.dataset);
  save_dataset(ds, dir);
  out << "dataset " << hex_hash(dataset_hash(ds)) << " samples=" << ds.samples.size() << " dir=" << dir.string()
      << "\n";
  return kExitOk;
}

int cmd_train(const Flags& f, std::ostream& out) {
  const ExperimentConfig c = resolve(f);
  const Dataset ds = obtain_dataset(f, c, out);
  const auto dir = out_path(f, c, "train");
  std::filesystem::create_directories(dir);
  write_text(dir / "config.conf", c.to_text());
  Model model(c.model);
  TrainOptions opts;
  opts.out_dir = dir;
  opts.config_snapshot = c.to_text();
  opts.on_epoch = [&out](int epoch, double loss) { out << "epoch " << epoch << " loss " << fmt(loss) << "\n"; };
  const RunManifest man = train(ds, model, c.train, opts);
  out << "trained steps=" << man.steps << " dir=" << dir.string() << "\n";
  return kExitOk;
}

EvalTable evaluate_views(const Dataset& ds, Model& model, const ExperimentConfig& c, Split split,
                         const std::vector<std::string>& families, const std::optional<std::filesystem::path>& mesh_dir) {
  EvalOptions o = eval_options(c);
  o.families = families;
  o.mesh_dir = mesh_dir;
  GroundTruthCache gt;
  EvalTable all;
  for (int n : c.eval.views) {
    EvalTable t = evaluate_split(ds, model, split, n, o, &gt);
    all.rows.insert(all.rows.end(), t.rows.begin(), t.rows.end());
  }
  return all;
}

Split parse_split(const std::string& s) {
  if (s == "test") return Split::Test;
  if (s == "train") return Split::Train;
  throw UsageError("--split must be 'train' or 'test'");
}

int cmd_eval(const Flags& f, std::ostream& out) {
  const ExperimentConfig c = resolve(f);
  const Dataset ds = obtain_dataset(f, c, out);
  check_views(ds, c.eval.views);
  auto model = Model::from_checkpoint(checkpoint_path(f, c));
  const auto dir = out_path(f, c, "eval");
  std::optional<std::filesystem::path> mesh_dir;
  if (c.eval.mesh_metrics && c.eval.meshes_per_family > 0) mesh_dir = dir / "meshes";
  const EvalTable t = evaluate_views(ds, *model, c, parse_split(f.split), {}, mesh_dir);
  write_text(dir / "metrics.csv", t.to_csv());
  write_text(dir / "summary.csv", summary_csv(t));
  out << summary_csv(t);
  return kExitOk;
}

int cmd_mesh(const Flags& f, std::ostream& out) {
  const ExperimentConfig c = resolve(f);
  const Dataset ds = obtain_dataset(f, c, out);
  const int n = c.eval.views.front();
  check_views(ds, {n});
  auto model = Model::from_checkpoint(checkpoint_path(f, c));
  std::size_t idx = ds.samples.size();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (f.shape.empty() ? ds.samples[i].split == Split::Test : ds.samples[i].id == f.shape) {
      idx = i;
      break;
    }
  }
  if (idx == ds.samples.size()) throw UsageError("no shape '" + f.shape + "' in the dataset");
  const Sample& s = ds.samples[idx];
  ViewSet views;
  for (std::size_t v : eval_view_indices(s, idx, n, c.eval.metrics.seed)) {
    views.images.push_back(&s.views[v]);
    views.rigs.push_back(s.rigs[v]);
  }
  const FieldFn field = [&](std::span<const Vec3> q) { return model->occupancy(views, q); };
  const TriangleMesh mesh = marching_cubes(evaluate_grid(field, c.eval.resolution), c.eval.iso);
  const auto path = f.out.empty() ? c.out / "mesh" / (s.id + ".obj") : std::filesystem::path(f.out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_mesh(mesh, path);
  out << "mesh " << s.id << " vertices=" << mesh.vertices.size() << " triangles=" << mesh.triangles.size()
      << " path=" << path.string() << "\n";
  return kExitOk;
}

int cmd_ablate(const Flags& f, std::ostream& out) {
  const ExperimentConfig c = resolve(f);
  const Dataset ds = obtain_dataset(f, c, out);
  const auto dir = out_path(f, c, "ablate");
  const AblationResult r = run_ablation(c, ds, dir, out);
  out << r.to_csv();
  return kExitOk;
}

int cmd_sweep_views(const Flags& f, std::ostream& out) {
  ExperimentConfig c = resolve(f);
  if (f.views.empty()) c.eval.views = {1, 5};
  const Dataset ds = obtain_dataset(f, c, out);
  check_views(ds, c.eval.views);
  auto model = Model::from_checkpoint(checkpoint_path(f, c));
  const auto dir = out_path(f, c, "sweep");
  const EvalTable t = evaluate_views(ds, *model, c, Split::Test, ds.config.unseen_families, std::nullopt);
  write_text(dir / "metrics.csv", t.to_csv());
  write_text(dir / "sweep.csv", summary_csv(t));
  out << summary_csv(t);
  return kExitOk;
}

int cmd_report(const Flags& f, std::ostream& out) {
  if (f.inputs.empty()) throw UsageError("report needs at least one metric CSV");
  EvalTable merged;
  for (const auto& p : f.inputs) {
    EvalTable t = EvalTable::from_csv(read_text(p));
    merged.rows.insert(merged.rows.end(), t.rows.begin(), t.rows.end());
  }
  const std::string text = summary_csv(merged);
  if (!f.out.empty()) write_text(f.out, text);
  out << text;
  return kExitOk;
}

std::string one_line(std::string s) {
  for (char& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-view occupancy reconstruction experiments", "occ3d"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Experiment config file")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "Root seed; re-derives the dataset, training and evaluation seeds");
  app.add_option("--threads", f.threads, "Worker thread cap (1 gives bitwise determinism)");
  app.add_option("--iso", f.iso, "Occupancy threshold for IoU and meshing");
  app.add_option("--resolution", f.resolution, "Marching-cubes grid resolution");
  app.add_option("--views", f.views, "View counts to evaluate")->delimiter(',');
  app.add_option("--out", f.out, "Output directory (or file for mesh and report)");

  auto* gen = app.add_subcommand("gen-data", "Generate and write a dataset directory");
  auto* tr = app.add_subcommand("train", "Train a model; writes checkpoints and a run manifest");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint; writes the metric CSV and meshes");
  auto* me = app.add_subcommand("mesh", "Extract one shape's mesh from a checkpoint");
  auto* ab = app.add_subcommand("ablate", "Train P, PC and PCV on identical seeds and compare");
  auto* sw = app.add_subcommand("sweep-views", "Evaluate a checkpoint at several view counts");
  auto* rp = app.add_subcommand("report", "Merge metric CSVs into one summary table");
  for (auto* sub : {tr, ev, me, ab, sw}) {
    sub->add_option("--data", f.data, "Dataset directory (generated in memory when omitted)")->check(CLI::ExistingDirectory);
  }
  for (auto* sub : {ev, me, sw}) sub->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  ev->add_option("--split", f.split, "Split to evaluate (train or test)");
  me->add_option("--shape", f.shape, "Sample id (default: first test shape)");
  rp->add_option("inputs", f.inputs, "Metric CSV files")->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(f, out);
    if (tr->parsed()) return cmd_train(f, out);
    if (ev->parsed()) return cmd_eval(f, out);
    if (me->parsed()) return cmd_mesh(f, out);
    if (ab->parsed()) return cmd_ablate(f, out);
    if (sw->parsed()) return cmd_sweep_views(f, out);
    if (rp->parsed()) return cmd_report(f, out);
  } catch (const ParseError& e) {
    err << "error: parse: " << one_line(e.what()) << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "error: config: " << one_line(e.what()) << "\n";
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: runtime: " << one_line(e.what()) << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace occ3d::cli
