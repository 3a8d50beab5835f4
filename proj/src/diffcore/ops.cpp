#include "occ3d/diffcore/ops.hpp"

#include "occ3d/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using ArrMap = Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>;
using CArrMap = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;

constexpr std::ptrdiff_t kParallelGrain = 1 << 15;

CArrMap arr(const Node& n) { return CArrMap(n.value.data(), static_cast<long>(n.value.size())); }
CArrMap grad_arr(const Node& n) { return CArrMap(n.grad.data(), static_cast<long>(n.grad.size())); }
ArrMap acc(Real* g, std::size_t n) { return ArrMap(g, static_cast<long>(n)); }

// Sequential reduction. Eigen's vectorized sum peels to the buffer alignment,
// which would make results depend on where a tensor happens to live.
double seq_sum(const Real* p, std::size_t n) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += p[i];
  return total;
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank));
}

Buffer copy_values(const Tensor& a) { return {a.values().begin(), a.values().end()}; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Buffer out(a.size());
  acc(out.data(), out.size()) = arr(a.node()) + arr(b.node());
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a, b}, [n](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (Real* g = self.parent_grad(i)) acc(g, n) += grad_arr(self);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Buffer out(a.size());
  acc(out.data(), out.size()) = arr(a.node()) - arr(b.node());
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a, b}, [n](Node& self) {
    if (Real* g = self.parent_grad(0)) acc(g, n) += grad_arr(self);
    if (Real* g = self.parent_grad(1)) acc(g, n) -= grad_arr(self);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Buffer out(a.size());
  acc(out.data(), out.size()) = arr(a.node()) * arr(b.node());
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a, b}, [n](Node& self) {
    if (Real* g = self.parent_grad(0)) acc(g, n) += grad_arr(self) * arr(*self.parents[1]);
    if (Real* g = self.parent_grad(1)) acc(g, n) += grad_arr(self) * arr(*self.parents[0]);
  });
}

Tensor scale(const Tensor& a, Real s) {
  Buffer out(a.size());
  acc(out.data(), out.size()) = arr(a.node()) * s;
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a}, [n, s](Node& self) {
    if (Real* g = self.parent_grad(0)) acc(g, n) += grad_arr(self) * s;
  });
}

Tensor relu(const Tensor& a) {
  Buffer out(a.size());
  acc(out.data(), out.size()) = arr(a.node()).max(Real(0));
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a}, [n](Node& self) {
    if (Real* g = self.parent_grad(0)) {
      acc(g, n) += (arr(*self.parents[0]) > Real(0)).select(grad_arr(self), Real(0));
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  Buffer out(a.size());
  const Real* x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Branch on the sign so exp never overflows.
    out[i] = x[i] >= 0 ? Real(1) / (Real(1) + std::exp(-x[i])) : std::exp(x[i]) / (Real(1) + std::exp(x[i]));
  }
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a}, [n](Node& self) {
    if (Real* g = self.parent_grad(0)) {
      const auto y = arr(self);
      acc(g, n) += grad_arr(self) * y * (Real(1) - y);
    }
  });
}

Tensor square(const Tensor& a) {
  Buffer out(a.size());
  acc(out.data(), out.size()) = arr(a.node()).square();
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a}, [n](Node& self) {
    if (Real* g = self.parent_grad(0)) acc(g, n) += grad_arr(self) * Real(2) * arr(*self.parents[0]);
  });
}

Tensor sqrt_eps(const Tensor& a, Real eps) {
  Buffer out(a.size());
  acc(out.data(), out.size()) = (arr(a.node()).max(Real(0)) + eps).sqrt();
  const std::size_t n = out.size();
  return make_result(a.shape(), std::move(out), {a}, [n](Node& self) {
    if (Real* g = self.parent_grad(0)) {
      acc(g, n) += (arr(*self.parents[0]) > Real(0)).select(grad_arr(self) * Real(0.5) / arr(self), Real(0));
    }
  });
}

Tensor sum(const Tensor& a) {
  const Real total = static_cast<Real>(seq_sum(a.data(), a.size()));
  const std::size_t n = a.size();
  return make_result({1}, {total}, {a}, [n](Node& self) {
    if (Real* g = self.parent_grad(0)) acc(g, n) += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.size();
  const Real inv = Real(1) / static_cast<Real>(n);
  const Real value = static_cast<Real>(seq_sum(a.data(), n) / static_cast<double>(n));
  return make_result({1}, {value}, {a}, [n, inv](Node& self) {
    if (Real* g = self.parent_grad(0)) acc(g, n) += self.grad[0] * inv;
  });
}

Tensor matmul(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor()); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const long rows = static_cast<long>(x.dim(0)), in = static_cast<long>(x.dim(1)), out_w = static_cast<long>(w.dim(1));
  if (static_cast<long>(w.dim(0)) != in) {
    throw ShapeMismatch("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || static_cast<long>(b.dim(0)) != out_w)) {
    throw ShapeMismatch("linear: bias " + shape_string(b.shape()) + " vs width " + std::to_string(out_w));
  }
  Buffer out(static_cast<std::size_t>(rows * out_w));
  MapMat y(out.data(), rows, out_w);
  y.noalias() = CMapMat(x.data(), rows, in) * CMapMat(w.data(), in, out_w);
  if (has_bias) y.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b.data(), out_w);

  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(b);
  return make_result({x.dim(0), w.dim(1)}, std::move(out), std::move(parents),
                     [rows, in, out_w, has_bias](Node& self) {
                       const CMapMat dy(self.grad.data(), rows, out_w);
                       if (Real* g = self.parent_grad(0)) {
                         MapMat(g, rows, in).noalias() += dy * CMapMat(self.parents[1]->value.data(), in, out_w).transpose();
                       }
                       if (Real* g = self.parent_grad(1)) {
                         MapMat(g, in, out_w).noalias() += CMapMat(self.parents[0]->value.data(), rows, in).transpose() * dy;
                       }
                       if (has_bias) {
                         if (Real* g = self.parent_grad(2)) {
                           Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(g, out_w) += dy.colwise().sum();
                         }
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw ShapeMismatch("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Buffer out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Real* src = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  return make_result({rows, total}, std::move(out), {parts.begin(), parts.end()},
                     [rows, total, widths](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (Real* g = self.parent_grad(k)) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             const Real* src = self.grad.data() + r * total + off;
                             Real* dst = g + r * widths[k];
                             for (std::size_t c = 0; c < widths[k]; ++c) dst[c] += src[c];
                           }
                         }
                         off += widths[k];
                       }
                     });
}

Tensor row_sum(const Tensor& x) {
  require_rank(x, 2, "row_sum");
  const long rows = static_cast<long>(x.dim(0)), cols = static_cast<long>(x.dim(1));
  Buffer out(static_cast<std::size_t>(rows));
  for (long r = 0; r < rows; ++r) {
    out[static_cast<std::size_t>(r)] = static_cast<Real>(seq_sum(x.data() + r * cols, static_cast<std::size_t>(cols)));
  }
  return make_result({x.dim(0), 1}, std::move(out), {x}, [rows, cols](Node& self) {
    if (Real* g = self.parent_grad(0)) {
      MapMat(g, rows, cols).colwise() += Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>(self.grad.data(), rows);
    }
  });
}

Tensor broadcast_cols(const Tensor& x, std::size_t width) {
  if (x.rank() != 2 || x.dim(1) != 1) throw ShapeMismatch("broadcast_cols: expected [N x 1]");
  const long rows = static_cast<long>(x.dim(0)), cols = static_cast<long>(width);
  Buffer out(static_cast<std::size_t>(rows * cols));
  MapMat(out.data(), rows, cols).colwise() = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>(x.data(), rows);
  return make_result({x.dim(0), width}, std::move(out), {x}, [rows, cols](Node& self) {
    if (Real* g = self.parent_grad(0)) {
      for (long r = 0; r < rows; ++r) {
        g[r] += static_cast<Real>(seq_sum(self.grad.data() + r * cols, static_cast<std::size_t>(cols)));
      }
    }
  });
}

Tensor add_row_groups(const Tensor& x, const Tensor& y) {
  require_rank(x, 2, "add_row_groups");
  require_rank(y, 2, "add_row_groups");
  if (x.dim(1) != y.dim(1) || y.dim(0) == 0 || x.dim(0) % y.dim(0) != 0) {
    throw ShapeMismatch("add_row_groups: " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  }
  const long groups = static_cast<long>(y.dim(0)), cols = static_cast<long>(x.dim(1));
  const long per = static_cast<long>(x.dim(0)) / groups;
  Buffer out = copy_values(x);
  for (long gi = 0; gi < groups; ++gi) {
    MapMat(out.data() + gi * per * cols, per, cols).rowwise() +=
        Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(y.data() + gi * cols, cols);
  }
  const std::size_t n = out.size();
  return make_result(x.shape(), std::move(out), {x, y}, [n, groups, cols, per](Node& self) {
    if (Real* g = self.parent_grad(0)) acc(g, n) += grad_arr(self);
    if (Real* g = self.parent_grad(1)) {
      for (long gi = 0; gi < groups; ++gi) {
        Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(g + gi * cols, cols) +=
            CMapMat(self.grad.data() + gi * per * cols, per, cols).colwise().sum();
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.c_in = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.c_out = kernel.dim(0);
  g.ksize = kernel.dim(2);
  g.stride = stride;
  if (kernel.dim(1) != g.c_in || kernel.dim(3) != g.ksize || g.ksize % 2 == 0) {
    throw ShapeMismatch("conv2d: kernel " + shape_string(kernel.shape()) + " vs input " + shape_string(x.shape()));
  }
  if ((stride != 1 && stride != 2) || g.height % stride != 0 || g.width % stride != 0) {
    throw ShapeMismatch("conv2d: spatial size not divisible by stride");
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.c_out)) throw ShapeMismatch("conv2d: bias width");
  Buffer out(g.batch * g.c_out * g.out_plane());
  kernels::parallel::conv2d_forward<Real>(g, x.data(), kernel.data(), has_bias ? bias.data() : nullptr, out.data());
  std::vector<Tensor> parents = {x, kernel};
  if (has_bias) parents.push_back(bias);
  return make_result({g.batch, g.c_out, g.out_height(), g.out_width()}, std::move(out), std::move(parents),
                     [g, has_bias](Node& self) {
                       Real* dx = self.parent_grad(0);
                       Real* dk = self.parent_grad(1);
                       Real* db = has_bias ? self.parent_grad(2) : nullptr;
                       kernels::parallel::conv2d_backward<Real>(g, self.parents[0]->value.data(),
                                                                self.parents[1]->value.data(), self.grad.data(), dx,
                                                                dk, db);
                     });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Buffer out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = x.data() + p * h * w;
    Real* dst = out.data() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  return make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x}, [planes, h, w](Node& self) {
    if (Real* g = self.parent_grad(0)) {
      for (std::size_t p = 0; p < planes; ++p) {
        const Real* src = self.grad.data() + p * 4 * h * w;
        Real* dst = g + p * h * w;
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
        }
      }
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeMismatch("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t n = a.dim(0), plane = a.dim(2) * a.dim(3);
  const std::size_t sa = a.dim(1) * plane, sb = b.dim(1) * plane;
  Buffer out(n * (sa + sb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * sa, sa, out.data() + i * (sa + sb));
    std::copy_n(b.data() + i * sb, sb, out.data() + i * (sa + sb) + sa);
  }
  return make_result({n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)}, std::move(out), {a, b}, [n, sa, sb](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Real* g = self.parent_grad(k);
      if (!g) continue;
      const std::size_t len = k == 0 ? sa : sb;
      for (std::size_t i = 0; i < n; ++i) {
        const Real* src = self.grad.data() + i * (sa + sb) + (k == 0 ? 0 : sa);
        acc(g + i * len, len) += CArrMap(src, static_cast<long>(len));
      }
    }
  });
}

Tensor group_spatial_mean(const Tensor& maps, std::size_t group) {
  require_rank(maps, 4, "group_spatial_mean");
  if (group == 0 || maps.dim(0) % group != 0) throw ShapeMismatch("group_spatial_mean: bad group size");
  const std::size_t groups = maps.dim(0) / group, c = maps.dim(1), plane = maps.dim(2) * maps.dim(3);
  const Real inv = Real(1) / static_cast<Real>(group * plane);
  Buffer out(groups * c, Real(0));
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double total = 0;
      for (std::size_t v = 0; v < group; ++v) {
        total += seq_sum(maps.data() + ((gi * group + v) * c + ch) * plane, plane);
      }
      out[gi * c + ch] = static_cast<Real>(total / static_cast<double>(group * plane));
    }
  }
  return make_result({groups, c}, std::move(out), {maps}, [groups, group, c, plane, inv](Node& self) {
    if (Real* g = self.parent_grad(0)) {
      for (std::size_t gi = 0; gi < groups; ++gi) {
        for (std::size_t v = 0; v < group; ++v) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            acc(g + ((gi * group + v) * c + ch) * plane, plane) += self.grad[gi * c + ch] * inv;
          }
        }
      }
    }
  });
}

Tensor bilinear_sample(const Tensor& maps, std::span<const int> image, const Tensor& uv) {
  require_rank(maps, 4, "bilinear_sample");
  if (uv.rank() != 2 || uv.dim(1) != 2 || uv.dim(0) != image.size()) {
    throw ShapeMismatch("bilinear_sample: uv must be [n x 2] with one image index per row");
  }
  kernels::SampleGeometry g{maps.dim(0), maps.dim(1), maps.dim(2), maps.dim(3)};
  for (int idx : image) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= g.images) throw ShapeMismatch("bilinear_sample: bad image index");
  }
  Buffer out(image.size() * g.channels);
  kernels::parallel::bilinear_gather<Real>(g, maps.data(), image, uv.data(), out.data());
  std::vector<int> idx(image.begin(), image.end());
  return make_result({image.size(), g.channels}, std::move(out), {maps, uv}, [g, idx](Node& self) {
    Real* dmaps = self.parent_grad(0);
    Real* duv = self.parent_grad(1);
    kernels::parallel::bilinear_scatter<Real>(g, self.parents[0]->value.data(), idx, self.parents[1]->value.data(),
                                              self.grad.data(), dmaps, duv);
  });
}

Tensor view_mean(const Tensor& g, const ViewLayout& layout, std::span<const Real> weights) {
  require_rank(g, 2, "view_mean");
  if (g.dim(0) != layout.rows() || weights.size() != layout.rows()) {
    throw ShapeMismatch("view_mean: rows do not match the view layout");
  }
  const std::size_t f = g.dim(1), n = layout.points, views = layout.views;
  // Per pooled row, the reciprocal of its weight sum.
  std::vector<Real> inv(layout.pooled_rows());
  std::vector<double> wsums(layout.pooled_rows());
  for (std::size_t gi = 0; gi < layout.groups; ++gi) {
    for (std::size_t j = 0; j < n; ++j) {
      Real wsum = 0;
      for (std::size_t v = 0; v < views; ++v) wsum += weights[(gi * views + v) * n + j];
      if (!(wsum > 0)) throw std::domain_error("view_mean: a point has no contributing view");
      inv[gi * n + j] = Real(1) / wsum;
      wsums[gi * n + j] = wsum;
    }
  }
  // Double accumulation keeps the result independent of view order in practice.
  std::vector<double> total(layout.pooled_rows() * f, 0.0);
  for (std::size_t gi = 0; gi < layout.groups; ++gi) {
    for (std::size_t v = 0; v < views; ++v) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t row = (gi * views + v) * n + j;
        const double w = weights[row];
        if (w == 0) continue;
        double* dst = total.data() + (gi * n + j) * f;
        const Real* src = g.data() + row * f;
        for (std::size_t c = 0; c < f; ++c) dst[c] += w * src[c];
      }
    }
  }
  Buffer out(total.size());
  for (std::size_t r = 0; r < layout.pooled_rows(); ++r) {
    const double s = inv[r] == Real(1) ? 1.0 : 1.0 / wsums[r];
    for (std::size_t c = 0; c < f; ++c) out[r * f + c] = static_cast<Real>(total[r * f + c] * s);
  }
  std::vector<Real> w(weights.begin(), weights.end());
  return make_result({layout.pooled_rows(), f}, std::move(out), {g}, [layout, f, w, inv](Node& self) {
    Real* dg = self.parent_grad(0);
    if (!dg) return;
    const std::size_t n = layout.points;
    for (std::size_t gi = 0; gi < layout.groups; ++gi) {
      for (std::size_t v = 0; v < layout.views; ++v) {
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t row = (gi * layout.views + v) * n + j;
          const Real s = w[row] * inv[gi * n + j];
          if (s == 0) continue;
          acc(dg + row * f, f) += CArrMap(self.grad.data() + (gi * n + j) * f, static_cast<long>(f)) * s;
        }
      }
    }
  });
}

Tensor expand_views(const Tensor& pooled, const ViewLayout& layout) {
  require_rank(pooled, 2, "expand_views");
  if (pooled.dim(0) != layout.pooled_rows()) throw ShapeMismatch("expand_views: rows do not match the view layout");
  const std::size_t f = pooled.dim(1), n = layout.points;
  Buffer out(layout.rows() * f);
  for (std::size_t gi = 0; gi < layout.groups; ++gi) {
    for (std::size_t v = 0; v < layout.views; ++v) {
      std::copy_n(pooled.data() + gi * n * f, n * f, out.data() + (gi * layout.views + v) * n * f);
    }
  }
  return make_result({layout.rows(), f}, std::move(out), {pooled}, [layout, f](Node& self) {
    Real* g = self.parent_grad(0);
    if (!g) return;
    const std::size_t block = layout.points * f;
    for (std::size_t gi = 0; gi < layout.groups; ++gi) {
      for (std::size_t v = 0; v < layout.views; ++v) {
        acc(g + gi * block, block) += CArrMap(self.grad.data() + (gi * layout.views + v) * block, static_cast<long>(block));
      }
    }
  });
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, bool training, Real momentum, Real eps) {
  require_rank(x, 2, "batch_norm");
  const std::size_t rows = x.dim(0), f = x.dim(1);
  if (state.running_mean.size() != f || state.running_var.size() != f) {
    throw ShapeMismatch("batch_norm: feature width " + std::to_string(f) + " does not match layer");
  }
  if (training && rows == 0) throw ShapeMismatch("batch_norm: empty batch");
  std::vector<Real> mu(f), inv_std(f);
  if (training) {
    // Shifted by the first row so constant features give an exact zero.
    std::vector<double> s1(f, 0.0), s2(f, 0.0);
    const Real* x0 = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* xr = x.data() + r * f;
      for (std::size_t c = 0; c < f; ++c) {
        const double d = static_cast<double>(xr[c]) - static_cast<double>(x0[c]);
        s1[c] += d;
        s2[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < f; ++c) {
      const double m = s1[c] / static_cast<double>(rows);
      const double var = std::max(0.0, s2[c] / static_cast<double>(rows) - m * m);
      mu[c] = static_cast<Real>(static_cast<double>(x0[c]) + m);
      inv_std[c] = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      state.running_mean[c] = momentum * state.running_mean[c] + (Real(1) - momentum) * mu[c];
      state.running_var[c] = momentum * state.running_var[c] + (Real(1) - momentum) * static_cast<Real>(var);
    }
  } else {
    for (std::size_t c = 0; c < f; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = Real(1) / std::sqrt(state.running_var[c] + eps);
    }
  }
  Buffer out(rows * f);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * f;
    Real* yr = out.data() + r * f;
    for (std::size_t c = 0; c < f; ++c) yr[c] = (xr[c] - mu[c]) * inv_std[c];
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, f, inv_std, training](Node& self) {
    Real* g = self.parent_grad(0);
    if (!g) return;
    const Real* dy = self.grad.data();
    if (!training) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < f; ++c) g[r * f + c] += dy[r * f + c] * inv_std[c];
      }
      return;
    }
    const Real* xhat = self.value.data();
    std::vector<double> sum_dy(f, 0.0), sum_dy_xhat(f, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < f; ++c) {
        sum_dy[c] += dy[r * f + c];
        sum_dy_xhat[c] += static_cast<double>(dy[r * f + c]) * xhat[r * f + c];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < f; ++c) {
        const double d = dy[r * f + c] - inv_n * sum_dy[c] - inv_n * xhat[r * f + c] * sum_dy_xhat[c];
        g[r * f + c] += static_cast<Real>(inv_std[c] * d);
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, Real eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t rows = x.dim(0), f = x.dim(1);
  if (f == 0) throw ShapeMismatch("layer_norm: empty feature width");
  Buffer out(rows * f), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * f;
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t c = 0; c < f; ++c) {
      const double d = static_cast<double>(xr[c]) - static_cast<double>(xr[0]);
      s1 += d;
      s2 += d * d;
    }
    const double m = s1 / static_cast<double>(f);
    const double var = std::max(0.0, s2 / static_cast<double>(f) - m * m);
    const Real mu = static_cast<Real>(static_cast<double>(xr[0]) + m);
    inv_std[r] = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    for (std::size_t c = 0; c < f; ++c) out[r * f + c] = (xr[c] - mu) * inv_std[r];
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, f, inv_std](Node& self) {
    Real* g = self.parent_grad(0);
    if (!g) return;
    const double inv_n = 1.0 / static_cast<double>(f);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* dy = self.grad.data() + r * f;
      const Real* xhat = self.value.data() + r * f;
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t c = 0; c < f; ++c) {
        sum_dy += dy[c];
        sum_dy_xhat += static_cast<double>(dy[c]) * xhat[c];
      }
      for (std::size_t c = 0; c < f; ++c) {
        g[r * f + c] += static_cast<Real>(inv_std[r] * (dy[c] - inv_n * sum_dy - inv_n * xhat[c] * sum_dy_xhat));
      }
    }
  });
}

Tensor binary_cross_entropy(const Tensor& probs, std::span<const Real> labels, Real clamp) {
  if (probs.size() != labels.size()) throw ShapeMismatch("binary_cross_entropy: length mismatch");
  if (labels.empty()) throw ShapeMismatch("binary_cross_entropy: empty input");
  const std::size_t n = labels.size();
  const Real lo = clamp, hi = Real(1) - clamp;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(probs.data()[i], lo, hi);
    total -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  std::vector<Real> lab(labels.begin(), labels.end());
  return make_result({1}, {static_cast<Real>(total / static_cast<double>(n))}, {probs}, [n, lab, lo, hi](Node& self) {
    Real* g = self.parent_grad(0);
    if (!g) return;
    const Real* p = self.parents[0]->value.data();
    const double scale_n = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] < lo || p[i] > hi) continue;
      const double pi = p[i];
      g[i] += static_cast<Real>(scale_n * (-lab[i] / pi + (1.0 - lab[i]) / (1.0 - pi)));
    }
  });
}

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff
