#include "occ3d/cli.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace occ3d::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_integer(const std::string& s) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("expected an integer, got '" + s + "'");
  return v;
}

double parse_real(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw std::invalid_argument("expected a real number, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::string real_text(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
  return s;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (int x : v) s += (s.empty() ? "" : ", ") + std::to_string(x);
  return s;
}

nn::NormKind norm_from_text(const std::string& s) {
  if (s == "batch") return nn::NormKind::Batch;
  if (s == "layer") return nn::NormKind::Layer;
  throw std::invalid_argument("unknown norm '" + s + "'");
}

struct Key {
  std::string section;
  std::string name;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
Key int_key(std::string sec, std::string name, T& ref) {
  return {std::move(sec), std::move(name), [&ref](const std::string& s) { ref = parse_integer<T>(s); },
          [&ref] { return std::to_string(ref); }};
}

Key real_key(std::string sec, std::string name, double& ref) {
  return {std::move(sec), std::move(name), [&ref](const std::string& s) { ref = parse_real(s); },
          [&ref] { return real_text(ref); }};
}

Key seed_key(std::string sec, std::optional<std::uint64_t>& ref) {
  return {std::move(sec), "seed", [&ref](const std::string& s) { ref = parse_integer<std::uint64_t>(s); },
          [&ref] { return std::to_string(ref.value_or(0)); }};
}

std::vector<Key> keys(ExperimentConfig& c) {
  auto& d = c.dataset;
  auto& m = c.model;
  auto& t = c.train;
  auto& e = c.eval;
  return {
      int_key("experiment", "seed", c.seed),
      int_key("experiment", "threads", c.threads),
      {"experiment", "out", [&c](const std::string& s) { c.out = s; }, [&c] { return c.out.string(); }},

      {"dataset", "seen_families", [&d](const std::string& s) { d.seen_families = split_list(s); },
       [&d] { return join(d.seen_families); }},
      {"dataset", "unseen_families", [&d](const std::string& s) { d.unseen_families = split_list(s); },
       [&d] { return join(d.unseen_families); }},
      int_key("dataset", "train_per_family", d.train_per_family),
      int_key("dataset", "test_per_family", d.test_per_family),
      int_key("dataset", "image_size", d.image_size),
      real_key("dataset", "focal_ratio", d.focal_ratio),
      int_key("dataset", "views_per_shape", d.views_per_shape),
      int_key("dataset", "pool_size", d.pool_size),
      real_key("dataset", "radius_min", d.radius_min),
      real_key("dataset", "radius_max", d.radius_max),
      seed_key("dataset", c.dataset_seed),

      int_key("model", "image_size", m.image_size),
      int_key("model", "feature_channels", m.feature_channels),
      int_key("model", "hidden", m.hidden),
      int_key("model", "g_blocks", m.g_blocks),
      int_key("model", "f_blocks", m.f_blocks),
      int_key("model", "encoder_depth", m.encoder_depth),
      int_key("model", "encoder_channels", m.encoder_channels),
      {"model", "variant", [&m](const std::string& s) { m.variant = variant_from_string(s); },
       [&m] { return to_string(m.variant); }},
      {"model", "coordinate_mode", [&m](const std::string& s) { m.coordinate_mode = coordinate_mode_from_string(s); },
       [&m] { return to_string(m.coordinate_mode); }},
      {"model", "variance_form", [&m](const std::string& s) { m.variance_form = variance_form_from_string(s); },
       [&m] { return to_string(m.variance_form); }},
      {"model", "norm", [&m](const std::string& s) { m.norm = norm_from_text(s); },
       [&m] { return std::string(m.norm == nn::NormKind::Batch ? "batch" : "layer"); }},
      {"model", "init_seed", [&c](const std::string& s) { c.init_seed = parse_integer<std::uint64_t>(s); },
       [&c] { return std::to_string(c.init_seed.value_or(0)); }},

      int_key("train", "points_per_sample", t.points_per_sample),
      int_key("train", "views_per_sample", t.views_per_sample),
      int_key("train", "batch_size", t.batch_size),
      real_key("train", "lr", t.lr),
      int_key("train", "epochs", t.epochs),
      int_key("train", "max_steps", t.max_steps),
      int_key("train", "eval_every", t.eval_every),
      int_key("train", "val_iou_samples", t.val_iou_samples),
      int_key("train", "val_shapes", t.val_shapes),
      seed_key("train", c.train_seed),

      {"eval", "views",
       [&e](const std::string& s) {
         e.views.clear();
         for (const auto& x : split_list(s)) e.views.push_back(parse_integer<int>(x));
       },
       [&e] { return join(e.views); }},
      int_key("eval", "iou_samples", e.metrics.iou_samples),
      int_key("eval", "surface_samples", e.metrics.surface_samples),
      real_key("eval", "f_threshold", e.metrics.f_threshold),
      int_key("eval", "resolution", e.resolution),
      real_key("eval", "iso", e.iso),
      {"eval", "mesh_metrics", [&e](const std::string& s) { e.mesh_metrics = parse_bool(s); },
       [&e] { return std::string(e.mesh_metrics ? "true" : "false"); }},
      int_key("eval", "meshes_per_family", e.meshes_per_family),
      int_key("eval", "max_per_family", e.max_per_family),
      int_key("eval", "ablation_views", e.ablation_views),
      int_key("eval", "ablation_seeds", e.ablation_seeds),
      seed_key("eval", c.eval_seed),
  };
}

const char* kSections[] = {"experiment", "dataset", "model", "train", "eval"};

}  // namespace

std::uint64_t training_seed(std::uint64_t root) { return mix_seed(root, 2); }

std::uint64_t repeat_seed(std::uint64_t training_root, int run) {
  return run == 0 ? training_root : mix_seed(training_root, 1000 + static_cast<std::uint64_t>(run));
}

void ExperimentConfig::resolve_seeds() {
  const std::uint64_t training = training_seed(seed);
  if (!dataset_seed) dataset_seed = mix_seed(seed, 1);
  if (!init_seed) init_seed = mix_seed(training, 1);
  if (!train_seed) train_seed = mix_seed(training, 2);
  if (!eval_seed) eval_seed = mix_seed(seed, 3);
  dataset.seed = *dataset_seed;
  model.init_seed = *init_seed;
  train.seed = *train_seed;
  eval.metrics.seed = *eval_seed;
  train.eval_views = eval.views;
}

std::vector<std::string> ExperimentConfig::violations() const {
  std::vector<std::string> v;
  auto add = [&v](const std::vector<std::string>& more) { v.insert(v.end(), more.begin(), more.end()); };
  if (threads < 0) v.push_back("experiment.threads must be non-negative");
  add(dataset.violations());
  for (auto s : model.violations()) v.push_back(s.rfind("model.", 0) == 0 ? s : "model: " + s);
  if (model.image_size > 0 && dataset.image_size > 0 && dataset.image_size % model.image_size != 0) {
    v.push_back("model.image_size (" + std::to_string(model.image_size) + ") must divide dataset.image_size (" +
                std::to_string(dataset.image_size) + ")");
  }
  TrainConfig t = train;
  t.eval_views = eval.views;
  add(t.violations(dataset));
  add(eval.metrics.violations());
  if (eval.views.empty()) v.push_back("eval.views must list at least one view count");
  if (eval.resolution < 2) v.push_back("eval.resolution must be at least 2");
  if (!(eval.iso > 0.0 && eval.iso < 1.0)) v.push_back("eval.iso must lie in (0, 1)");
  if (eval.ablation_views < 1 || eval.ablation_views > dataset.views_per_shape) {
    v.push_back("eval.ablation_views must lie in [1, dataset.views_per_shape]");
  }
  if (eval.ablation_seeds < 1) v.push_back("eval.ablation_seeds must be at least 1");
  return v;
}

std::string ExperimentConfig::to_text() const {
  ExperimentConfig c = *this;
  c.resolve_seeds();
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys(c)) {
    if (k.section != section) {
      os << (section.empty() ? "" : "\n") << "[" << k.section << "]\n";
      section = k.section;
    }
    os << k.name << " = " << k.get() << "\n";
  }
  return os.str();
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  ExperimentConfig c;
  auto table = keys(c);
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  std::vector<std::string> seen;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(source, lineno, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections)) {
        throw ParseError(source, lineno, "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, lineno, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (section.empty()) throw ParseError(source, lineno, "key '" + key + "' outside any section");
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const Key& k) { return k.section == section && k.name == key; });
    if (it == table.end()) throw ParseError(source, lineno, "unknown key " + section + "." + key);
    const std::string full = section + "." + key;
    if (std::find(seen.begin(), seen.end(), full) != seen.end()) {
      throw ParseError(source, lineno, "duplicate key " + full);
    }
    seen.push_back(full);
    try {
      it->set(value);
    } catch (const std::exception& e) {
      throw ParseError(source, lineno, full + ": " + e.what());
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError(path.string(), 0, "cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

ConfigReport validate_config(const std::filesystem::path& path) {
  ConfigReport r;
  try {
    ExperimentConfig c = load_config(path);
    c.resolve_seeds();
    r.errors = c.violations();
    r.config = std::move(c);
  } catch (const ParseError& e) {
    r.errors.push_back(e.what());
  }
  return r;
}

}  // namespace occ3d::cli
