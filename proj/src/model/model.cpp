#include "occ3d/model.hpp"

#include <sstream>
#include <map>

namespace occ3d {

using nn::Real;
using nn::Tensor;

std::string to_string(Variant v) {
  switch (v) {
    case Variant::P: return "P";
    case Variant::PC: return "PC";
    case Variant::PCV: return "PCV";
  }
  return "?";
}

Variant variant_from_string(const std::string& text) {
  if (text == "P") return Variant::P;
  if (text == "PC" || text == "P+C") return Variant::PC;
  if (text == "PCV" || text == "P+C+V") return Variant::PCV;
  throw ConfigError("unknown variant '" + text + "' (expected P, PC or PCV)");
}

std::string to_string(VarianceForm v) { return v == VarianceForm::Elementwise ? "elementwise" : "scalar_norm"; }

VarianceForm variance_form_from_string(const std::string& text) {
  if (text == "elementwise") return VarianceForm::Elementwise;
  if (text == "scalar_norm") return VarianceForm::ScalarNorm;
  throw ConfigError("unknown variance form '" + text + "' (expected elementwise or scalar_norm)");
}

namespace {

std::string norm_name(nn::NormKind k) { return k == nn::NormKind::Batch ? "batch" : "layer"; }

nn::NormKind norm_from_string(const std::string& text) {
  if (text == "batch") return nn::NormKind::Batch;
  if (text == "layer") return nn::NormKind::Layer;
  throw ConfigError("unknown norm '" + text + "' (expected batch or layer)");
}

}  // namespace

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  if (image_size < 8) v.push_back("model.image_size must be at least 8");
  if (feature_channels < 1) v.push_back("model.feature_channels must be positive");
  if (hidden != feature_channels) v.push_back("model.hidden must equal model.feature_channels");
  if (g_blocks < 0 || f_blocks < 0) v.push_back("model.g_blocks and model.f_blocks must be non-negative");
  if (encoder_depth < 1 || encoder_depth > 6) v.push_back("model.encoder_depth must be in [1, 6]");
  if (encoder_channels < 1) v.push_back("model.encoder_channels must be positive");
  if (encoder_depth >= 1 && encoder_depth <= 6 && image_size % (1 << encoder_depth) != 0) {
    v.push_back("model.image_size must be divisible by 2^encoder_depth");
  }
  return v;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg;
  for (const auto& s : v) msg += (msg.empty() ? "" : "; ") + s;
  throw ConfigError(msg);
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "image_size = " << image_size << "\n"
     << "feature_channels = " << feature_channels << "\n"
     << "hidden = " << hidden << "\n"
     << "g_blocks = " << g_blocks << "\n"
     << "f_blocks = " << f_blocks << "\n"
     << "encoder_depth = " << encoder_depth << "\n"
     << "encoder_channels = " << encoder_channels << "\n"
     << "variant = " << to_string(variant) << "\n"
     << "coordinate_mode = " << to_string(coordinate_mode) << "\n"
     << "variance_form = " << to_string(variance_form) << "\n"
     << "norm = " << norm_name(norm) << "\n"
     << "init_seed = " << init_seed << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get = [&](const char* key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError(std::string("model description lacks '") + key + "'");
    return it->second;
  };
  ModelConfig c;
  c.image_size = std::stoi(get("image_size"));
  c.feature_channels = std::stoi(get("feature_channels"));
  c.hidden = std::stoi(get("hidden"));
  c.g_blocks = std::stoi(get("g_blocks"));
  c.f_blocks = std::stoi(get("f_blocks"));
  c.encoder_depth = std::stoi(get("encoder_depth"));
  c.encoder_channels = std::stoi(get("encoder_channels"));
  c.variant = variant_from_string(get("variant"));
  c.coordinate_mode = coordinate_mode_from_string(get("coordinate_mode"));
  c.variance_form = variance_form_from_string(get("variance_form"));
  c.norm = norm_from_string(get("norm"));
  c.init_seed = std::stoull(get("init_seed"));
  return c;
}

PreparedViews prepare_views(const ViewSet& views, CoordinateMode mode) {
  if (views.size() == 0) throw EmptyViewSet("a view set needs at least one view");
  if (views.rigs.size() != views.images.size()) throw nn::ShapeMismatch("one rig is needed per view");
  PreparedViews out;
  out.frame = canonicalize(views.rigs, {}, mode, views.reference);
  out.rigs = out.frame.rigs;
  return out;
}

Tensor images_to_tensor(std::span<const Image* const> images, int size) {
  if (images.empty()) throw EmptyViewSet("no images to encode");
  const std::size_t s = static_cast<std::size_t>(size), plane = s * s;
  std::vector<Real> data(images.size() * 3 * plane);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = *images[i];
    if (img.width != img.height || img.width < size || img.width % size != 0) {
      throw nn::ShapeMismatch("view of " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                              " pixels cannot feed a " + std::to_string(size) + " pixel encoder");
    }
    // Box filter for integer downscaling; the identity when sizes agree.
    const int k = img.width / size;
    const double inv = 1.0 / (k * k);
    for (int c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) acc += img.at(static_cast<int>(x) * k + dx, static_cast<int>(y) * k + dy, c);
          data[(i * 3 + c) * plane + y * s + x] = static_cast<Real>(2.0 * acc * inv - 1.0);
        }
      }
    }
  }
  return Tensor::from({images.size(), 3, s, s}, std::move(data));
}

PointSamples sample_point_features(const Tensor& maps, std::span<const PreparedViews> groups,
                                   std::span<const std::vector<Vec3>> points, Variant variant, double feature_scale) {
  if (groups.empty() || groups.size() != points.size()) throw nn::ShapeMismatch("one point list is needed per view set");
  const std::size_t views = groups[0].rigs.size(), n = points[0].size();
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].rigs.size() != views || points[gi].size() != n) {
      throw nn::ShapeMismatch("view sets in one batch need equal view and point counts");
    }
  }
  if (maps.rank() != 4 || maps.dim(0) != groups.size() * views) {
    throw nn::ShapeMismatch("feature maps do not match the number of views");
  }
  const std::size_t rows = groups.size() * views * n;
  const std::size_t geo_width = variant == Variant::P ? 3 : 6;
  std::vector<int> image(rows);
  std::vector<Real> uv(rows * 2), geo(rows * geo_width);
  PointSamples out;
  out.weights.assign(rows, Real(1));

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    for (std::size_t v = 0; v < views; ++v) {
      const CameraRig& rig = groups[gi].rigs[v];
      const Vec3 center = camera_center(rig.extrinsics);
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t r = (gi * views + v) * n + j;
        const Vec3& p = points[gi][j];
        image[r] = static_cast<int>(gi * views + v);
        const Vec3 pc = world_to_camera(p, rig.extrinsics);
        if (pc.z() > kDepthEpsilon) {
          const Projection pr = project(p, rig);
          uv[2 * r] = static_cast<Real>((pr.u + 0.5) * feature_scale - 0.5);
          uv[2 * r + 1] = static_cast<Real>((pr.v + 0.5) * feature_scale - 0.5);
        } else {
          out.weights[r] = Real(0);
        }
        Real* gr = geo.data() + r * geo_width;
        if (variant == Variant::P) {
          for (int k = 0; k < 3; ++k) gr[k] = static_cast<Real>(p[k]);
        } else {
          for (int k = 0; k < 3; ++k) {
            gr[k] = static_cast<Real>(pc[k]);
            gr[3 + k] = static_cast<Real>(center[k]);
          }
        }
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      bool seen = false;
      for (std::size_t v = 0; v < views && !seen; ++v) seen = out.weights[(gi * views + v) * n + j] > 0;
      if (!seen) throw PointBehindCamera("query point lies behind every input camera");
    }
  }
  out.features = nn::bilinear_sample(maps, image, Tensor::from({rows, 2}, std::move(uv)));
  out.geometry = Tensor::from({rows, geo_width}, std::move(geo));
  return out;
}

Aggregate aggregate_views(const Tensor& g, const nn::ViewLayout& layout, std::span<const Real> weights,
                          bool with_variance, VarianceForm form) {
  if (layout.views == 0) throw EmptyViewSet("aggregation over zero views");
  Aggregate a;
  a.mean = nn::view_mean(g, layout, weights);
  if (!with_variance) return a;
  const Tensor dev = nn::sub(g, nn::expand_views(a.mean, layout));
  if (form == VarianceForm::Elementwise) {
    a.variance = nn::view_mean(nn::square(dev), layout, weights);
  } else {
    a.variance = nn::view_mean(nn::sqrt_eps(nn::row_sum(nn::square(dev)), Real(0)), layout, weights);
  }
  return a;
}

Tensor global_feature(const Tensor& maps, std::size_t views_per_group) {
  if (views_per_group == 0) throw EmptyViewSet("global feature over zero views");
  return nn::group_spatial_mean(maps, views_per_group);
}

Encoder::Encoder(const ModelConfig& cfg, nn::InitRng& rng) {
  const std::size_t base = static_cast<std::size_t>(cfg.encoder_channels);
  std::vector<std::size_t> ch;
  for (int i = 0; i <= cfg.encoder_depth; ++i) ch.push_back(base << i);
  stem = nn::Conv2d(3, ch[0], 3, 1, rng);
  for (int i = 0; i < cfg.encoder_depth; ++i) {
    down.push_back({nn::Conv2d(ch[i], ch[i + 1], 3, 2, rng), nn::Conv2d(ch[i + 1], ch[i + 1], 3, 1, rng)});
  }
  for (int i = cfg.encoder_depth - 1; i >= 0; --i) up.emplace_back(ch[i + 1] + ch[i], ch[i], 3, 1, rng);
  head = nn::Conv2d(ch[0], static_cast<std::size_t>(cfg.feature_channels), 1, 1, rng);
}

Tensor Encoder::operator()(const Tensor& images) const {
  std::vector<Tensor> skips;
  Tensor x = nn::relu(stem(images));
  skips.push_back(x);
  for (const Down& d : down) {
    x = nn::relu(d.refine(nn::relu(d.reduce(x))));
    skips.push_back(x);
  }
  for (std::size_t k = 0; k < up.size(); ++k) {
    const Tensor& skip = skips[skips.size() - 2 - k];
    x = nn::relu(up[k](nn::concat_channels(nn::upsample_nearest2x(x), skip)));
  }
  return head(x);
}

void Encoder::collect(nn::ParameterSet& set) const {
  stem.collect(set, "encoder.stem");
  for (std::size_t i = 0; i < down.size(); ++i) {
    down[i].reduce.collect(set, "encoder.down" + std::to_string(i) + ".reduce");
    down[i].refine.collect(set, "encoder.down" + std::to_string(i) + ".refine");
  }
  for (std::size_t i = 0; i < up.size(); ++i) up[i].collect(set, "encoder.up" + std::to_string(i));
  head.collect(set, "encoder.head");
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  nn::InitRng rng(cfg_.init_seed);
  const std::size_t h = static_cast<std::size_t>(cfg_.hidden);
  const bool conditional = cfg_.variant == Variant::PCV;
  const std::size_t cond = static_cast<std::size_t>(cfg_.condition_width());
  encoder_ = Encoder(cfg_, rng);
  g_lift_ = nn::Linear(static_cast<std::size_t>(cfg_.geo_input_width()), h, rng);
  for (int i = 0; i < cfg_.g_blocks; ++i) g_blocks_.emplace_back(h, rng);
  for (int i = 0; i < cfg_.f_blocks; ++i) f_blocks_.emplace_back(h, cond, conditional, cfg_.norm, rng);
  f_out_norm_ = nn::CondNorm(h, cond, conditional, cfg_.norm, rng);
  f_out_ = nn::Linear(h, 1, rng);
}

nn::ParameterSet Model::parameters() {
  nn::ParameterSet set;
  encoder_.collect(set);
  g_lift_.collect(set, "g.lift");
  for (std::size_t i = 0; i < g_blocks_.size(); ++i) g_blocks_[i].collect(set, "g.block" + std::to_string(i));
  for (std::size_t i = 0; i < f_blocks_.size(); ++i) f_blocks_[i].collect(set, "f.block" + std::to_string(i));
  f_out_norm_.collect(set, "f.out_norm");
  f_out_.collect(set, "f.out");
  return set;
}

Tensor Model::encode(std::span<const Image* const> images) const {
  return encoder_(images_to_tensor(images, cfg_.image_size));
}

Tensor Model::geo_feature(const Tensor& features, const Tensor& geometry) const {
  const Tensor parts[] = {features, geometry};
  Tensor in = nn::concat_cols(parts);
  if (in.dim(1) != static_cast<std::size_t>(cfg_.geo_input_width())) {
    throw nn::ShapeMismatch("g input has width " + std::to_string(in.dim(1)) + ", expected " +
                            std::to_string(cfg_.geo_input_width()));
  }
  Tensor g = g_lift_(in);
  for (const auto& b : g_blocks_) g = b(g);
  return g;
}

Tensor Model::predict(const Tensor& g_mean, const Tensor& g_var, const Tensor& global, bool training) {
  const Tensor cond = cfg_.variant == Variant::PCV ? g_var : Tensor();
  Tensor x = nn::add_row_groups(g_mean, global);
  for (auto& b : f_blocks_) x = b(x, cond, training);
  x = nn::relu(f_out_norm_(x, cond, training));
  return nn::sigmoid(f_out_(x));
}

ModelOutput Model::decode(const Tensor& maps, std::span<const PreparedViews> groups,
                          std::span<const std::vector<Vec3>> points, bool training) {
  const double scale = static_cast<double>(cfg_.image_size) / groups[0].rigs[0].intrinsics.width;
  const PointSamples s = sample_point_features(maps, groups, points, cfg_.variant, scale);
  const Tensor g = geo_feature(s.features, s.geometry);
  const nn::ViewLayout layout{groups.size(), groups[0].rigs.size(), points[0].size()};
  ModelOutput out;
  out.aggregate = aggregate_views(g, layout, s.weights, cfg_.variant == Variant::PCV, cfg_.variance_form);
  out.global = global_feature(maps, layout.views);
  out.probabilities = predict(out.aggregate.mean, out.aggregate.variance, out.global, training);
  return out;
}

namespace {

std::vector<Vec3> to_frame(const CanonicalFrame& f, std::span<const Vec3> pts) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const Vec3& p : pts) out.push_back(f.rotation * p + f.translation);
  return out;
}

}  // namespace

ModelOutput Model::forward(std::span<const ViewSet> sets, std::span<const std::vector<Vec3>> points, bool training) {
  if (sets.empty()) throw EmptyViewSet("forward needs at least one view set");
  if (sets.size() != points.size()) throw nn::ShapeMismatch("one point list is needed per view set");
  std::vector<PreparedViews> groups;
  std::vector<std::vector<Vec3>> local;
  std::vector<const Image*> images;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    groups.push_back(prepare_views(sets[i], cfg_.coordinate_mode));
    local.push_back(to_frame(groups.back().frame, points[i]));
    images.insert(images.end(), sets[i].images.begin(), sets[i].images.end());
  }
  const Tensor maps = encode(images);
  return decode(maps, groups, local, training);
}

std::vector<double> Model::occupancy(const ViewSet& views, std::span<const Vec3> points, std::size_t chunk) {
  nn::NoGradGuard guard;
  const PreparedViews prepared = prepare_views(views, cfg_.coordinate_mode);
  const Tensor maps = encode(views.images);
  std::vector<double> out;
  out.reserve(points.size());
  for (std::size_t start = 0; start < points.size(); start += chunk) {
    const std::size_t end = std::min(points.size(), start + chunk);
    const std::vector<Vec3> local = to_frame(prepared.frame, points.subspan(start, end - start));
    const ModelOutput o = decode(maps, std::span(&prepared, 1), std::span(&local, 1), false);
    for (Real p : o.probabilities.values()) out.push_back(p);
  }
  return out;
}

void Model::save(const std::filesystem::path& path, const nn::OptimizerState* opt) {
  nn::save_checkpoint(path, parameters(), cfg_.to_text(), opt);
}

void Model::load(const std::filesystem::path& path, nn::OptimizerState* opt) {
  const nn::Checkpoint ck = nn::read_checkpoint(path);
  nn::ParameterSet set = parameters();
  nn::apply_checkpoint(ck, set, opt);
}

std::unique_ptr<Model> Model::from_checkpoint(const std::filesystem::path& path, nn::OptimizerState* opt) {
  const nn::Checkpoint ck = nn::read_checkpoint(path);
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_text(ck.meta);
  } catch (const std::exception& e) {
    throw nn::IoError(std::string("checkpoint model description is unreadable: ") + e.what());
  }
  auto model = std::make_unique<Model>(cfg);
  nn::ParameterSet set = model->parameters();
  nn::apply_checkpoint(ck, set, opt);
  return model;
}

Tensor occupancy_loss(const Tensor& probabilities, std::span<const Real> labels) {
  return nn::binary_cross_entropy(probabilities, labels);
}

}  // namespace occ3d
