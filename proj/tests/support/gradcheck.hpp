#pragma once

// Central finite-difference oracle for the float64 diffcore build, plus a
// suite of randomized per-layer configurations shared by the unit and
// acceptance tests.

#include "occ3d/diffcore/layers.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace occ3d::testing {

namespace d = occ3d::diff;
static_assert(std::is_same_v<d::Real, double>, "gradient checks need the float64 diffcore build");

inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradTolerance = 1e-4;
// Denominator floor for the relative error of near-zero gradients.
inline constexpr double kRelFloor = 1e-6;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

// `fn` builds a scalar from the inputs; every input must require grad.
inline GradCheckResult gradient_check(const std::function<d::Tensor()>& fn, std::vector<d::Tensor> inputs,
                                      double h = kFdStep) {
  for (auto& t : inputs) t.zero_grad();
  d::Tensor out = fn();
  out.backward();
  GradCheckResult r;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t.values()[i];
      double fp, fm;
      {
        d::NoGradGuard guard;
        t.values()[i] = saved + h;
        fp = fn().item();
        t.values()[i] = saved - h;
        fm = fn().item();
        t.values()[i] = saved;
      }
      const double numeric = (fp - fm) / (2 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), kRelFloor});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / denom);
      ++r.entries;
    }
  }
  return r;
}

struct LayerSuiteResult {
  std::string layer;
  int configurations = 0;
  double max_rel_error = 0.0;
};

class GradSuite {
 public:
  explicit GradSuite(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t pick(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  d::InitRng& init_rng() { return init_; }

  d::Tensor random(d::Shape s, double scale = 1.0) {
    std::vector<double> v(d::numel(s));
    for (double& x : v) x = uniform(-scale, scale);
    return d::Tensor::from(std::move(s), std::move(v), true);
  }
  // Values kept at least `gap` away from zero so ReLU kinks are not straddled.
  d::Tensor random_off_kink(d::Shape s, double gap = 1e-3) {
    d::Tensor t = random(std::move(s));
    for (double& x : t.values()) {
      if (std::abs(x) < gap) x = x < 0 ? -gap - std::abs(x) : gap + x;
    }
    return t;
  }
  // Fixed pseudo-random per-entry weights turn any tensor into a scalar with
  // generic grads. They depend only on the entry index so repeated calls agree.
  static d::Tensor project(const d::Tensor& x) {
    std::vector<double> w(x.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      std::uint64_t z = (i + 1) * 0x9E3779B97F4A7C15ull;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      z ^= z >> 31;
      w[i] = 2.0 * static_cast<double>(z >> 11) * 0x1.0p-53 - 1.0;
    }
    return d::sum(d::mul(x, d::Tensor::from(x.shape(), std::move(w))));
  }

  // Runs `configs` random configurations of every layer type.
  std::vector<LayerSuiteResult> run(int configs);

 private:
  template <typename Build>
  LayerSuiteResult layer(const std::string& name, int configs, Build build) {
    LayerSuiteResult r{name, 0, 0.0};
    for (int c = 0; c < configs; ++c) {
      auto [fn, inputs] = build();
      const GradCheckResult g = gradient_check(fn, inputs);
      r.max_rel_error = std::max(r.max_rel_error, g.max_rel_error);
      ++r.configurations;
    }
    return r;
  }

  std::mt19937_64 rng_;
  d::InitRng init_{17};
};

using Case = std::pair<std::function<d::Tensor()>, std::vector<d::Tensor>>;

inline std::vector<LayerSuiteResult> GradSuite::run(int configs) {
  std::vector<LayerSuiteResult> out;

  out.push_back(layer("linear", configs, [&]() -> Case {
    const std::size_t n = pick(1, 6), i = pick(1, 7), o = pick(1, 5);
    auto x = random({n, i}), w = random({i, o}), b = random({o});
    return {[=, this] { return project(d::linear(x, w, b)); }, {x, w, b}};
  }));

  out.push_back(layer("conv2d", configs, [&]() -> Case {
    const std::size_t n = pick(1, 2), ci = pick(1, 3), co = pick(1, 3), s = pick(1, 2);
    const std::size_t k = pick(0, 3) == 0 ? 1 : 3;
    const std::size_t hgt = 2 * pick(2, 3), wid = 2 * pick(2, 3);
    auto x = random({n, ci, hgt, wid}), kern = random({co, ci, k, k}), b = random({co});
    return {[=, this] { return project(d::conv2d(x, kern, b, s)); }, {x, kern, b}};
  }));

  out.push_back(layer("relu", configs, [&]() -> Case {
    auto x = random_off_kink({pick(1, 5), pick(1, 6)});
    return {[=, this] { return project(d::relu(x)); }, {x}};
  }));

  out.push_back(layer("sigmoid", configs, [&]() -> Case {
    auto x = random({pick(1, 5), pick(1, 6)}, 4.0);
    return {[=, this] { return project(d::sigmoid(x)); }, {x}};
  }));

  out.push_back(layer("elementwise", configs, [&]() -> Case {
    const d::Shape s = {pick(1, 4), pick(1, 5)};
    auto a = random(s), b = random(s), c = random(s);
    for (double& v : c.values()) v = 0.1 + std::abs(v);
    const double k = uniform(-2, 2);
    return {[=, this] {
              return project(d::add(d::sub(d::mul(a, b), d::scale(d::square(a), k)), d::sqrt_eps(c, 1e-6)));
            },
            {a, b, c}};
  }));

  out.push_back(layer("reductions", configs, [&]() -> Case {
    const std::size_t n = pick(1, 5), f = pick(1, 4);
    auto x = random({n, f}), y = random({n, 1});
    return {[=, this] {
              return d::add(d::add(d::mean(d::square(x)), project(d::row_sum(x))), project(d::broadcast_cols(y, f)));
            },
            {x, y}};
  }));

  out.push_back(layer("concat", configs, [&]() -> Case {
    const std::size_t n = pick(1, 4);
    auto a = random({n, pick(1, 3)}), b = random({n, pick(1, 3)});
    const std::size_t m = pick(1, 2), hgt = pick(1, 3), wid = pick(1, 3);
    auto p = random({m, pick(1, 2), hgt, wid}), q = random({m, pick(1, 2), hgt, wid});
    return {[=, this] {
              const d::Tensor parts[] = {a, b, a};
              return d::add(project(d::concat_cols(parts)), project(d::concat_channels(p, q)));
            },
            {a, b, p, q}};
  }));

  out.push_back(layer("add_row_groups", configs, [&]() -> Case {
    const std::size_t groups = pick(1, 3), per = pick(1, 4), f = pick(1, 4);
    auto x = random({groups * per, f}), y = random({groups, f});
    return {[=, this] { return project(d::add_row_groups(x, y)); }, {x, y}};
  }));

  out.push_back(layer("upsample_and_pool", configs, [&]() -> Case {
    const std::size_t group = pick(1, 3), groups = pick(1, 2);
    auto x = random({group * groups, pick(1, 3), pick(1, 3), pick(1, 3)});
    return {[=, this] { return d::add(project(d::upsample_nearest2x(x)), project(d::group_spatial_mean(x, group))); },
            {x}};
  }));

  out.push_back(layer("bilinear_sample", configs, [&]() -> Case {
    const std::size_t m = pick(1, 3), c = pick(1, 3), hgt = pick(2, 5), wid = pick(2, 5), q = pick(1, 8);
    auto maps = random({m, c, hgt, wid});
    std::vector<int> idx(q);
    std::vector<double> uv(2 * q);
    for (std::size_t i = 0; i < q; ++i) {
      idx[i] = static_cast<int>(pick(0, m - 1));
      // Interior, away from texel boundaries where the map is not smooth.
      for (int k = 0; k < 2; ++k) {
        const double lim = static_cast<double>(k == 0 ? wid : hgt) - 1.0;
        double v = uniform(0.0, lim);
        const double frac = v - std::floor(v);
        if (frac < 1e-3) v += 2e-3;
        if (frac > 1 - 1e-3) v -= 2e-3;
        uv[2 * i + k] = std::clamp(v, 2e-3, lim - 2e-3);
      }
    }
    auto coords = d::Tensor::from({q, 2}, uv, true);
    return {[=, this] { return project(d::bilinear_sample(maps, idx, coords)); }, {maps, coords}};
  }));

  out.push_back(layer("view_pooling", configs, [&]() -> Case {
    d::ViewLayout layout{pick(1, 2), pick(1, 4), pick(1, 3)};
    const std::size_t f = pick(1, 3);
    auto g = random({layout.rows(), f});
    std::vector<double> w(layout.rows(), 1.0);
    // Drop some views but keep view 0 for every point.
    for (std::size_t r = 0; r < layout.rows(); ++r) {
      if ((r / layout.points) % layout.views != 0 && pick(0, 3) == 0) w[r] = 0.0;
    }
    return {[=, this] {
              d::Tensor mean = d::view_mean(g, layout, w);
              d::Tensor var = d::view_mean(d::square(d::sub(g, d::expand_views(mean, layout))), layout, w);
              return d::add(project(mean), project(var));
            },
            {g}};
  }));

  out.push_back(layer("batch_norm", configs, [&]() -> Case {
    const std::size_t n = pick(2, 8), f = pick(1, 4);
    auto x = random({n, f});
    auto state = std::make_shared<d::BatchNormState>();
    state->running_mean.assign(f, 0.0);
    state->running_var.assign(f, 1.0);
    return {[=, this] { return project(d::batch_norm(x, *state, true)); }, {x}};
  }));

  out.push_back(layer("layer_norm", configs, [&]() -> Case {
    auto x = random({pick(1, 5), pick(2, 6)});
    return {[=, this] { return project(d::layer_norm(x)); }, {x}};
  }));

  out.push_back(layer("cond_norm", configs, [&]() -> Case {
    const std::size_t n = pick(2, 6), f = pick(1, 4), k = pick(1, 3);
    auto norm = std::make_shared<d::CondNorm>(f, k, true, pick(0, 1) ? d::NormKind::Batch : d::NormKind::Layer,
                                              init_rng());
    // Random affine maps so the conditioning path carries gradient.
    for (d::Tensor t : {norm->gamma.weight, norm->gamma.bias, norm->beta.weight, norm->beta.bias}) {
      for (double& v : t.values()) v = uniform(-1, 1);
    }
    auto x = random({n, f}), c = random({n, k});
    return {[=, this] { return project((*norm)(x, c, true)); },
            {x, c, norm->gamma.weight, norm->gamma.bias, norm->beta.weight, norm->beta.bias}};
  }));

  out.push_back(layer("residual_block", configs, [&]() -> Case {
    const std::size_t w = pick(1, 5);
    auto block = std::make_shared<d::ResidualBlock>(w, init_rng());
    for (double& v : block->fc1.weight.values()) v = uniform(-1, 1);
    for (double& v : block->fc1.bias.values()) v = uniform(-1, 1);
    auto x = random_off_kink({pick(1, 4), w});
    return {[=, this] { return project((*block)(x)); },
            {x, block->fc0.weight, block->fc0.bias, block->fc1.weight, block->fc1.bias}};
  }));

  out.push_back(layer("cond_residual_block", configs, [&]() -> Case {
    const std::size_t w = pick(1, 4), k = pick(1, 3), n = pick(3, 6);
    auto block = std::make_shared<d::CondResidualBlock>(w, k, true, d::NormKind::Batch, init_rng());
    for (d::Tensor t : {block->fc1.weight, block->fc1.bias, block->norm0.gamma.weight, block->norm1.beta.weight}) {
      for (double& v : t.values()) v = uniform(-1, 1);
    }
    auto x = random({n, w}), c = random({n, k});
    return {[=, this] { return project((*block)(x, c, true)); },
            {x, c, block->fc0.weight, block->fc1.weight, block->norm0.gamma.weight, block->norm1.beta.weight}};
  }));

  out.push_back(layer("binary_cross_entropy", configs, [&]() -> Case {
    const std::size_t n = pick(1, 8);
    auto p = random({n});
    for (double& v : p.values()) v = 0.05 + 0.9 * (0.5 + 0.5 * v);
    std::vector<double> labels(n);
    for (double& l : labels) l = static_cast<double>(pick(0, 1));
    return {[=] { return d::binary_cross_entropy(p, labels); }, {p}};
  }));

  return out;
}

}  // namespace occ3d::testing
