#include "occ3d/diffcore/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

namespace {

double unit_uniform(InitRng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

void ParameterSet::check_unique(const std::string& name) const {
  const auto same = [&](const auto& e) { return e.name == name; };
  if (std::any_of(params_.begin(), params_.end(), same) || std::any_of(buffers_.begin(), buffers_.end(), same)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
}

void ParameterSet::add_parameter(std::string name, const Tensor& tensor) {
  check_unique(name);
  params_.push_back({std::move(name), tensor});
}

void ParameterSet::add_buffer(std::string name, std::vector<Real>* values) {
  check_unique(name);
  buffers_.push_back({std::move(name), values});
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

void ParameterSet::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Tensor make_parameter(Shape shape, std::size_t fan_in, InitRng& rng, Init init) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  if (init == Init::Uniform) {
    const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (Real& v : t.values()) v = static_cast<Real>((2.0 * unit_uniform(rng) - 1.0) * bound);
  }
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, InitRng& rng, Init init)
    : weight(make_parameter({in, out}, in, rng, init)), bias(make_parameter({out}, in, rng, init)) {}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

void Linear::collect(ParameterSet& set, const std::string& prefix) const {
  set.add_parameter(prefix + ".weight", weight);
  set.add_parameter(prefix + ".bias", bias);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t ksize, std::size_t stride_, InitRng& rng)
    : kernel(make_parameter({out, in, ksize, ksize}, in * ksize * ksize, rng)),
      bias(make_parameter({out}, in * ksize * ksize, rng)),
      stride(stride_) {}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, kernel, bias, stride); }

void Conv2d::collect(ParameterSet& set, const std::string& prefix) const {
  set.add_parameter(prefix + ".kernel", kernel);
  set.add_parameter(prefix + ".bias", bias);
}

ResidualBlock::ResidualBlock(std::size_t width, InitRng& rng)
    : fc0(width, width, rng), fc1(width, width, rng, Init::Zero) {}

Tensor ResidualBlock::operator()(const Tensor& x) const { return add(x, fc1(relu(fc0(relu(x))))); }

void ResidualBlock::collect(ParameterSet& set, const std::string& prefix) const {
  fc0.collect(set, prefix + ".fc0");
  fc1.collect(set, prefix + ".fc1");
}

CondNorm::CondNorm(std::size_t features, std::size_t cond_features, bool conditional_, NormKind kind_, InitRng& rng)
    : kind(kind_), conditional(conditional_) {
  state.running_mean.assign(features, Real(0));
  state.running_var.assign(features, Real(1));
  if (conditional) {
    // Starts as the identity affine: gamma = 1, beta = 0.
    gamma = Linear(cond_features, features, rng, Init::Zero);
    beta = Linear(cond_features, features, rng, Init::Zero);
    std::fill(gamma.bias.values().begin(), gamma.bias.values().end(), Real(1));
  }
}

Tensor CondNorm::operator()(const Tensor& x, const Tensor& cond, bool training) {
  if (x.rank() != 2 || x.dim(1) != features()) {
    throw ShapeMismatch("cond_norm: input " + shape_string(x.shape()) + " vs width " + std::to_string(features()));
  }
  Tensor xhat = kind == NormKind::Batch ? batch_norm(x, state, training) : layer_norm(x);
  if (!conditional) return xhat;
  if (!cond.defined() || cond.rank() != 2 || cond.dim(0) != x.dim(0) || cond.dim(1) != gamma.in_features()) {
    throw ShapeMismatch("cond_norm: condition does not match layer configuration");
  }
  return add(mul(gamma(cond), xhat), beta(cond));
}

void CondNorm::collect(ParameterSet& set, const std::string& prefix) {
  if (kind == NormKind::Batch) {
    set.add_buffer(prefix + ".running_mean", &state.running_mean);
    set.add_buffer(prefix + ".running_var", &state.running_var);
  }
  if (conditional) {
    gamma.collect(set, prefix + ".gamma");
    beta.collect(set, prefix + ".beta");
  }
}

CondResidualBlock::CondResidualBlock(std::size_t width, std::size_t cond_features, bool conditional, NormKind kind,
                                     InitRng& rng)
    : norm0(width, cond_features, conditional, kind, rng),
      norm1(width, cond_features, conditional, kind, rng),
      fc0(width, width, rng),
      fc1(width, width, rng, Init::Zero) {}

Tensor CondResidualBlock::operator()(const Tensor& x, const Tensor& cond, bool training) {
  Tensor h = fc0(relu(norm0(x, cond, training)));
  return add(x, fc1(relu(norm1(h, cond, training))));
}

void CondResidualBlock::collect(ParameterSet& set, const std::string& prefix) {
  norm0.collect(set, prefix + ".norm0");
  fc0.collect(set, prefix + ".fc0");
  norm1.collect(set, prefix + ".norm1");
  fc1.collect(set, prefix + ".fc1");
}

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff
