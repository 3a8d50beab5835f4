#pragma once

#include "occ3d/diffcore/ops.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

using InitRng = std::mt19937_64;

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Non-trainable state saved with a model (running normalization statistics).
struct NamedBuffer {
  std::string name;
  std::vector<Real>* values;
};

// Flat, ordered view over a model's parameters and buffers. Holds handles,
// so it stays valid only while the owning layers are alive and unmoved.
class ParameterSet {
 public:
  void add_parameter(std::string name, const Tensor& tensor);
  void add_buffer(std::string name, std::vector<Real>* values);

  const std::vector<NamedParameter>& parameters() const { return params_; }
  const std::vector<NamedBuffer>& buffers() const { return buffers_; }
  std::size_t scalar_count() const;
  void zero_grads();

 private:
  void check_unique(const std::string& name) const;
  std::vector<NamedParameter> params_;
  std::vector<NamedBuffer> buffers_;
};

enum class Init { Uniform, Zero };

// Leaf tensor with entries uniform in +-sqrt(1/fan_in), or zeros.
Tensor make_parameter(Shape shape, std::size_t fan_in, InitRng& rng, Init init = Init::Uniform);

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, InitRng& rng, Init init = Init::Uniform);
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

struct Conv2d {
  Tensor kernel;  // [out x in x k x k]
  Tensor bias;    // [out]
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t ksize, std::size_t stride, InitRng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

// x + fc1(relu(fc0(relu(x)))), fc1 zero-initialized.
struct ResidualBlock {
  Linear fc0, fc1;

  ResidualBlock() = default;
  ResidualBlock(std::size_t width, InitRng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& set, const std::string& prefix) const;
};

enum class NormKind { Batch, Layer };

// Feature normalization followed by gamma(cond) * xhat + beta(cond). Without
// conditioning the affine part is the identity.
struct CondNorm {
  NormKind kind = NormKind::Batch;
  bool conditional = false;
  BatchNormState state;
  Linear gamma, beta;

  CondNorm() = default;
  CondNorm(std::size_t features, std::size_t cond_features, bool conditional, NormKind kind, InitRng& rng);
  std::size_t features() const { return state.running_mean.size(); }
  Tensor operator()(const Tensor& x, const Tensor& cond, bool training);
  void collect(ParameterSet& set, const std::string& prefix);
};

// Pre-activation block with conditional normalization before each linear.
struct CondResidualBlock {
  CondNorm norm0, norm1;
  Linear fc0, fc1;

  CondResidualBlock() = default;
  CondResidualBlock(std::size_t width, std::size_t cond_features, bool conditional, NormKind kind, InitRng& rng);
  Tensor operator()(const Tensor& x, const Tensor& cond, bool training);
  void collect(ParameterSet& set, const std::string& prefix);
};

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff
