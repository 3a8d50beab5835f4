#pragma once

#include "occ3d/diffcore/optim.hpp"
#include "occ3d/geometry.hpp"
#include "occ3d/scenegen.hpp"

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace occ3d {

namespace nn = occ3d::diff;

struct EmptyViewSet : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class Variant { P, PC, PCV };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& text);

// Element-wise variance across views, or the literal scalar mean of
// per-view deviation norms broadcast as a one-wide condition.
enum class VarianceForm { Elementwise, ScalarNorm };
std::string to_string(VarianceForm v);
VarianceForm variance_form_from_string(const std::string& text);

struct ModelConfig {
  int image_size = 64;
  int feature_channels = 128;
  int hidden = 128;
  int g_blocks = 3;
  int f_blocks = 5;
  int encoder_depth = 3;
  // Channels of the first encoder stage; doubled at every downsampling.
  int encoder_channels = 32;
  Variant variant = Variant::PCV;
  CoordinateMode coordinate_mode = CoordinateMode::ViewCentric;
  VarianceForm variance_form = VarianceForm::Elementwise;
  nn::NormKind norm = nn::NormKind::Batch;
  std::uint64_t init_seed = 1;

  // Returns every violated constraint; empty when valid.
  std::vector<std::string> violations() const;
  void validate() const;  // throws ConfigError listing all violations

  // Width of the g input: F + 3 for P, F + 6 otherwise.
  int geo_input_width() const { return feature_channels + (variant == Variant::P ? 3 : 6); }
  int condition_width() const { return variance_form == VarianceForm::ScalarNorm ? 1 : hidden; }

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

// One sample's posed input views. `reference` names the view whose camera
// frame becomes the world frame in ViewCentric mode; it follows the view
// (not its list position) when the list is permuted.
struct ViewSet {
  std::vector<const Image*> images;
  std::vector<CameraRig> rigs;
  std::size_t reference = 0;

  std::size_t size() const { return images.size(); }
};

// Points and rigs expressed in the model's input frame.
struct PreparedViews {
  std::vector<CameraRig> rigs;
  CanonicalFrame frame;  // maps world points into the input frame
};

PreparedViews prepare_views(const ViewSet& views, CoordinateMode mode);

// Images as a [V x 3 x S x S] tensor with values mapped to [-1, 1].
nn::Tensor images_to_tensor(std::span<const Image* const> images, int size);

// Bilinear feature lookup of points already in the input frame. `weights`
// receives 1 for usable views and 0 for views seeing the point from behind;
// a point seen by no view raises PointBehindCamera.
struct PointSamples {
  nn::Tensor features;          // [G*V*n x F]
  nn::Tensor geometry;          // [G*V*n x 3] (P) or 6 (PC, PCV)
  std::vector<nn::Real> weights;  // [G*V*n]
};
PointSamples sample_point_features(const nn::Tensor& maps, std::span<const PreparedViews> groups,
                                   std::span<const std::vector<Vec3>> points, Variant variant,
                                   double feature_scale = 1.0);

struct Aggregate {
  nn::Tensor mean;      // g-bar [G*n x H]
  nn::Tensor variance;  // g-hat [G*n x H] or [G*n x 1]; undefined for P, PC
};
Aggregate aggregate_views(const nn::Tensor& g, const nn::ViewLayout& layout, std::span<const nn::Real> weights,
                          bool with_variance, VarianceForm form = VarianceForm::Elementwise);

// c-bar: [G x F] from [G*V x F x H x W].
nn::Tensor global_feature(const nn::Tensor& maps, std::size_t views_per_group);

struct Encoder {
  struct Down {
    nn::Conv2d reduce, refine;
  };
  nn::Conv2d stem;
  std::vector<Down> down;
  std::vector<nn::Conv2d> up;
  nn::Conv2d head;

  Encoder() = default;
  Encoder(const ModelConfig& cfg, nn::InitRng& rng);
  nn::Tensor operator()(const nn::Tensor& images) const;
  void collect(nn::ParameterSet& set) const;
};

struct ModelOutput {
  nn::Tensor probabilities;  // [G*n x 1]
  Aggregate aggregate;
  nn::Tensor global;
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterSet parameters();

  nn::Tensor encode(std::span<const Image* const> images) const;
  nn::Tensor geo_feature(const nn::Tensor& features, const nn::Tensor& geometry) const;
  nn::Tensor predict(const nn::Tensor& g_mean, const nn::Tensor& g_var, const nn::Tensor& global, bool training);

  // Full pipeline over G view sets with n world-frame points each.
  ModelOutput forward(std::span<const ViewSet> sets, std::span<const std::vector<Vec3>> points, bool training);

  // Evaluation helper: encodes once, then decodes points in chunks.
  std::vector<double> occupancy(const ViewSet& views, std::span<const Vec3> points,
                                std::size_t chunk = 16384);

  void save(const std::filesystem::path& path, const nn::OptimizerState* opt = nullptr);
  // Loads values into this model; NameMismatch if the variant differs.
  void load(const std::filesystem::path& path, nn::OptimizerState* opt = nullptr);
  static std::unique_ptr<Model> from_checkpoint(const std::filesystem::path& path, nn::OptimizerState* opt = nullptr);

 private:
  ModelOutput decode(const nn::Tensor& maps, std::span<const PreparedViews> groups,
                     std::span<const std::vector<Vec3>> points, bool training);

  ModelConfig cfg_;
  Encoder encoder_;
  nn::Linear g_lift_;
  std::vector<nn::ResidualBlock> g_blocks_;
  std::vector<nn::CondResidualBlock> f_blocks_;
  nn::CondNorm f_out_norm_;
  nn::Linear f_out_;
};

// Loss of predicted probabilities against {0, 1} labels.
nn::Tensor occupancy_loss(const nn::Tensor& probabilities, std::span<const nn::Real> labels);

}  // namespace occ3d
