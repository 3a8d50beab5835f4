#pragma once

// Hot loops of the network, each in two forms: `parallel` (OpenMP, im2col +
// GEMM, bucketed scatter) used by the library, and `serial`, a direct
// transcription of the definition kept as the test oracle and benchmark
// baseline. Both accumulate into gradient outputs rather than overwrite.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace occ3d::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t c_in = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t c_out = 1;
  std::size_t ksize = 3;
  std::size_t stride = 1;

  std::size_t pad() const { return ksize / 2; }
  std::size_t out_height() const { return (height + 2 * pad() - ksize) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad() - ksize) / stride + 1; }
  std::size_t in_plane() const { return height * width; }
  std::size_t out_plane() const { return out_height() * out_width(); }
  std::size_t patch() const { return c_in * ksize * ksize; }
};

// Feature maps are [images x channels x height x width]; queries carry an
// image index and a pixel coordinate (u, v) that is clamped to the map.
struct SampleGeometry {
  std::size_t images = 1;
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
};

namespace detail {

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void im2col(const ConvGeometry& g, const T* img, T* col) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize;
  const long pad = static_cast<long>(g.pad());
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) && ix < static_cast<long>(g.width);
            row[oy * wo + ox] = inside ? img[(c * g.height + iy) * g.width + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* img) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize;
  const long pad = static_cast<long>(g.pad());
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            img[(c * g.height + iy) * g.width + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

struct Tap {
  std::size_t x0, x1, y0, y1;
  double fx, fy;
  bool clamped_u, clamped_v;
};

inline Tap bilinear_tap(double u, double v, std::size_t width, std::size_t height) {
  const double umax = static_cast<double>(width - 1);
  const double vmax = static_cast<double>(height - 1);
  Tap t{};
  t.clamped_u = !(u >= 0.0 && u <= umax);
  t.clamped_v = !(v >= 0.0 && v <= vmax);
  const double uc = std::clamp(std::isfinite(u) ? u : 0.0, 0.0, umax);
  const double vc = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, vmax);
  t.x0 = static_cast<std::size_t>(std::floor(uc));
  t.y0 = static_cast<std::size_t>(std::floor(vc));
  t.x1 = std::min(t.x0 + 1, width - 1);
  t.y1 = std::min(t.y0 + 1, height - 1);
  t.fx = uc - static_cast<double>(t.x0);
  t.fy = vc - static_cast<double>(t.y0);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
namespace serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* kernel, const T* bias, T* y) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize;
  const long pad = static_cast<long>(g.pad());
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias ? static_cast<double>(bias[co]) : 0.0;
          for (std::size_t ci = 0; ci < g.c_in; ++ci) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                acc += static_cast<double>(x[((n * g.c_in + ci) * g.height + iy) * g.width + ix]) *
                       static_cast<double>(kernel[((co * g.c_in + ci) * k + ky) * k + kx]);
              }
            }
          }
          y[((n * g.c_out + co) * ho + oy) * wo + ox] = static_cast<T>(acc);
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* kernel, const T* dy, T* dx, T* dkernel, T* dbias) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.ksize;
  const long pad = static_cast<long>(g.pad());
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T d = dy[((n * g.c_out + co) * ho + oy) * wo + ox];
          if (dbias) dbias[co] += d;
          for (std::size_t ci = 0; ci < g.c_in; ++ci) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(oy * g.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(ox * g.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                const std::size_t xi = ((n * g.c_in + ci) * g.height + iy) * g.width + ix;
                const std::size_t ki = ((co * g.c_in + ci) * k + ky) * k + kx;
                if (dx) dx[xi] += d * kernel[ki];
                if (dkernel) dkernel[ki] += d * x[xi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void bilinear_gather(const SampleGeometry& g, const T* maps, std::span<const int> image, const T* uv, T* out) {
  const std::size_t plane = g.height * g.width;
  for (std::size_t q = 0; q < image.size(); ++q) {
    const detail::Tap t = detail::bilinear_tap(uv[2 * q], uv[2 * q + 1], g.width, g.height);
    const T* base = maps + static_cast<std::size_t>(image[q]) * g.channels * plane;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const T* m = base + c * plane;
      const double top = (1.0 - t.fx) * m[t.y0 * g.width + t.x0] + t.fx * m[t.y0 * g.width + t.x1];
      const double bot = (1.0 - t.fx) * m[t.y1 * g.width + t.x0] + t.fx * m[t.y1 * g.width + t.x1];
      out[q * g.channels + c] = static_cast<T>((1.0 - t.fy) * top + t.fy * bot);
    }
  }
}

template <typename T>
void bilinear_scatter(const SampleGeometry& g, const T* maps, std::span<const int> image, const T* uv, const T* dout,
                      T* dmaps, T* duv) {
  const std::size_t plane = g.height * g.width;
  for (std::size_t q = 0; q < image.size(); ++q) {
    const detail::Tap t = detail::bilinear_tap(uv[2 * q], uv[2 * q + 1], g.width, g.height);
    const std::size_t off = static_cast<std::size_t>(image[q]) * g.channels * plane;
    double du = 0.0, dv = 0.0;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double d = dout[q * g.channels + c];
      const std::size_t p = off + c * plane;
      const std::size_t i00 = p + t.y0 * g.width + t.x0, i01 = p + t.y0 * g.width + t.x1;
      const std::size_t i10 = p + t.y1 * g.width + t.x0, i11 = p + t.y1 * g.width + t.x1;
      if (dmaps) {
        dmaps[i00] += static_cast<T>(d * (1.0 - t.fx) * (1.0 - t.fy));
        dmaps[i01] += static_cast<T>(d * t.fx * (1.0 - t.fy));
        dmaps[i10] += static_cast<T>(d * (1.0 - t.fx) * t.fy);
        dmaps[i11] += static_cast<T>(d * t.fx * t.fy);
      }
      du += d * ((1.0 - t.fy) * (maps[i01] - maps[i00]) + t.fy * (maps[i11] - maps[i10]));
      dv += d * ((1.0 - t.fx) * (maps[i10] - maps[i00]) + t.fx * (maps[i11] - maps[i01]));
    }
    if (duv) {
      if (!t.clamped_u && t.x1 != t.x0) duv[2 * q] += static_cast<T>(du);
      if (!t.clamped_v && t.y1 != t.y0) duv[2 * q + 1] += static_cast<T>(dv);
    }
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
namespace parallel {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* kernel, const T* bias, T* y) {
  using Mat = detail::RowMat<T>;
  const std::size_t po = g.out_plane(), pk = g.patch();
  const Eigen::Map<const Mat> kmat(kernel, static_cast<long>(g.c_out), static_cast<long>(pk));
  const bool direct = g.ksize == 1 && g.stride == 1;

#pragma omp parallel
  {
    std::vector<T> col(direct ? 0 : pk * po);
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
      const T* img = x + static_cast<std::size_t>(n) * g.c_in * g.in_plane();
      const T* src = img;
      if (!direct) {
        detail::im2col(g, img, col.data());
        src = col.data();
      }
      Eigen::Map<Mat> out(y + static_cast<std::size_t>(n) * g.c_out * po, static_cast<long>(g.c_out),
                          static_cast<long>(po));
      out.noalias() = kmat * Eigen::Map<const Mat>(src, static_cast<long>(pk), static_cast<long>(po));
      if (bias) {
        for (std::size_t co = 0; co < g.c_out; ++co) out.row(static_cast<long>(co)).array() += bias[co];
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* kernel, const T* dy, T* dx, T* dkernel, T* dbias) {
  using Mat = detail::RowMat<T>;
  const std::size_t po = g.out_plane(), pk = g.patch();
  const Eigen::Map<const Mat> kmat(kernel, static_cast<long>(g.c_out), static_cast<long>(pk));
  const bool direct = g.ksize == 1 && g.stride == 1;
  const int nthreads = detail::max_threads();
  // Per-thread weight-gradient partials, reduced in thread order.
  std::vector<Mat> dk_part(static_cast<std::size_t>(nthreads));
  std::vector<std::vector<T>> db_part(static_cast<std::size_t>(nthreads));

#pragma omp parallel
  {
    const auto tid = static_cast<std::size_t>(detail::thread_id());
    if (dkernel) dk_part[tid] = Mat::Zero(static_cast<long>(g.c_out), static_cast<long>(pk));
    if (dbias) db_part[tid].assign(g.c_out, T(0));
    std::vector<T> col(direct ? 0 : pk * po);
    Mat dcol;
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
      const T* img = x + static_cast<std::size_t>(n) * g.c_in * g.in_plane();
      const Eigen::Map<const Mat> grad(dy + static_cast<std::size_t>(n) * g.c_out * po, static_cast<long>(g.c_out),
                                       static_cast<long>(po));
      if (dkernel) {
        const T* src = img;
        if (!direct) {
          detail::im2col(g, img, col.data());
          src = col.data();
        }
        dk_part[tid].noalias() += grad * Eigen::Map<const Mat>(src, static_cast<long>(pk), static_cast<long>(po)).transpose();
      }
      if (dbias) {
        for (std::size_t co = 0; co < g.c_out; ++co) db_part[tid][co] += grad.row(static_cast<long>(co)).sum();
      }
      if (dx) {
        T* dimg = dx + static_cast<std::size_t>(n) * g.c_in * g.in_plane();
        if (direct) {
          Eigen::Map<Mat>(dimg, static_cast<long>(pk), static_cast<long>(po)).noalias() += kmat.transpose() * grad;
        } else {
          dcol.noalias() = kmat.transpose() * grad;
          detail::col2im_add(g, dcol.data(), dimg);
        }
      }
    }
  }
  for (int t = 0; t < nthreads; ++t) {
    const auto tid = static_cast<std::size_t>(t);
    if (dkernel && dk_part[tid].size() > 0) {
      Eigen::Map<Mat>(dkernel, static_cast<long>(g.c_out), static_cast<long>(pk)) += dk_part[tid];
    }
    if (dbias && !db_part[tid].empty()) {
      for (std::size_t co = 0; co < g.c_out; ++co) dbias[co] += db_part[tid][co];
    }
  }
}

template <typename T>
void bilinear_gather(const SampleGeometry& g, const T* maps, std::span<const int> image, const T* uv, T* out) {
  const std::size_t plane = g.height * g.width;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t qi = 0; qi < static_cast<std::ptrdiff_t>(image.size()); ++qi) {
    const auto q = static_cast<std::size_t>(qi);
    const detail::Tap t = detail::bilinear_tap(uv[2 * q], uv[2 * q + 1], g.width, g.height);
    const T* base = maps + static_cast<std::size_t>(image[q]) * g.channels * plane;
    const T w00 = static_cast<T>((1.0 - t.fx) * (1.0 - t.fy)), w01 = static_cast<T>(t.fx * (1.0 - t.fy));
    const T w10 = static_cast<T>((1.0 - t.fx) * t.fy), w11 = static_cast<T>(t.fx * t.fy);
    const std::size_t o00 = t.y0 * g.width + t.x0, o01 = t.y0 * g.width + t.x1;
    const std::size_t o10 = t.y1 * g.width + t.x0, o11 = t.y1 * g.width + t.x1;
    T* dst = out + q * g.channels;
    for (std::size_t c = 0; c < g.channels; ++c) {
      const T* m = base + c * plane;
      dst[c] = w00 * m[o00] + w01 * m[o01] + w10 * m[o10] + w11 * m[o11];
    }
  }
}

template <typename T>
void bilinear_scatter(const SampleGeometry& g, const T* maps, std::span<const int> image, const T* uv, const T* dout,
                      T* dmaps, T* duv) {
  const std::size_t plane = g.height * g.width;
  // Bucket queries by image so each map is written by one thread only.
  std::vector<std::vector<std::size_t>> buckets(g.images);
  for (std::size_t q = 0; q < image.size(); ++q) buckets[static_cast<std::size_t>(image[q])].push_back(q);

#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t mi = 0; mi < static_cast<std::ptrdiff_t>(g.images); ++mi) {
    const std::size_t off = static_cast<std::size_t>(mi) * g.channels * plane;
    for (std::size_t q : buckets[static_cast<std::size_t>(mi)]) {
      const detail::Tap t = detail::bilinear_tap(uv[2 * q], uv[2 * q + 1], g.width, g.height);
      const T w00 = static_cast<T>((1.0 - t.fx) * (1.0 - t.fy)), w01 = static_cast<T>(t.fx * (1.0 - t.fy));
      const T w10 = static_cast<T>((1.0 - t.fx) * t.fy), w11 = static_cast<T>(t.fx * t.fy);
      const std::size_t o00 = t.y0 * g.width + t.x0, o01 = t.y0 * g.width + t.x1;
      const std::size_t o10 = t.y1 * g.width + t.x0, o11 = t.y1 * g.width + t.x1;
      const T* src = dout + q * g.channels;
      T du = 0, dv = 0;
      const T fx = static_cast<T>(t.fx), fy = static_cast<T>(t.fy);
      for (std::size_t c = 0; c < g.channels; ++c) {
        const T d = src[c];
        const std::size_t p = off + c * plane;
        if (dmaps) {
          dmaps[p + o00] += d * w00;
          dmaps[p + o01] += d * w01;
          dmaps[p + o10] += d * w10;
          dmaps[p + o11] += d * w11;
        }
        if (duv) {
          const T* m = maps + p;
          du += d * ((1 - fy) * (m[o01] - m[o00]) + fy * (m[o11] - m[o10]));
          dv += d * ((1 - fx) * (m[o10] - m[o00]) + fx * (m[o11] - m[o01]));
        }
      }
      if (duv) {
        if (!t.clamped_u && t.x1 != t.x0) duv[2 * q] += du;
        if (!t.clamped_v && t.y1 != t.y0) duv[2 * q + 1] += dv;
      }
    }
  }
}

}  // namespace parallel

}  // namespace occ3d::kernels
