// Serial reference kernels against the OpenMP/GEMM versions used by the
// library, at encoder and sampler shapes of the desk configuration.

#include "occ3d/kernels.hpp"

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

using namespace occ3d::kernels;

namespace {

std::vector<float> random_values(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

ConvGeometry conv_shape(const benchmark::State& state) {
  ConvGeometry g;
  g.batch = 16;
  g.c_in = static_cast<std::size_t>(state.range(0));
  g.c_out = static_cast<std::size_t>(state.range(0));
  g.height = g.width = static_cast<std::size_t>(state.range(1));
  g.ksize = 3;
  return g;
}

struct ConvData {
  explicit ConvData(const ConvGeometry& g)
      : x(random_values(g.batch * g.c_in * g.in_plane(), 1)),
        k(random_values(g.c_out * g.patch(), 2)),
        b(random_values(g.c_out, 3)),
        y(g.batch * g.c_out * g.out_plane()),
        dy(random_values(y.size(), 4)),
        dx(x.size()),
        dk(k.size()),
        db(b.size()) {}
  std::vector<float> x, k, b, y, dy, dx, dk, db;
};

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const ConvGeometry g = conv_shape(state);
  ConvData d(g);
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::conv2d_forward(g, d.x.data(), d.k.data(), d.b.data(), d.y.data());
    } else {
      serial::conv2d_forward(g, d.x.data(), d.k.data(), d.b.data(), d.y.data());
    }
    benchmark::DoNotOptimize(d.y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(g.batch));
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
  const ConvGeometry g = conv_shape(state);
  ConvData d(g);
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::conv2d_backward(g, d.x.data(), d.k.data(), d.dy.data(), d.dx.data(), d.dk.data(), d.db.data());
    } else {
      serial::conv2d_backward(g, d.x.data(), d.k.data(), d.dy.data(), d.dx.data(), d.dk.data(), d.db.data());
    }
    benchmark::DoNotOptimize(d.dx.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(g.batch));
}

struct SampleData {
  explicit SampleData(std::size_t queries) : g{16, 32, 32, 32} {
    maps = random_values(g.images * g.channels * g.height * g.width, 5);
    std::mt19937 rng(6);
    std::uniform_real_distribution<float> u(-1.f, 32.f);
    std::uniform_int_distribution<int> img(0, static_cast<int>(g.images) - 1);
    for (std::size_t q = 0; q < queries; ++q) {
      image.push_back(img(rng));
      uv.push_back(u(rng));
      uv.push_back(u(rng));
    }
    out.resize(queries * g.channels);
    dout = random_values(out.size(), 7);
    dmaps.resize(maps.size());
    duv.resize(uv.size());
  }
  SampleGeometry g;
  std::vector<float> maps, uv, out, dout, dmaps, duv;
  std::vector<int> image;
};

template <bool Parallel>
void sample_gather(benchmark::State& state) {
  SampleData d(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::bilinear_gather(d.g, d.maps.data(), std::span<const int>(d.image), d.uv.data(), d.out.data());
    } else {
      serial::bilinear_gather(d.g, d.maps.data(), std::span<const int>(d.image), d.uv.data(), d.out.data());
    }
    benchmark::DoNotOptimize(d.out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void sample_scatter(benchmark::State& state) {
  SampleData d(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::bilinear_scatter(d.g, d.maps.data(), std::span<const int>(d.image), d.uv.data(), d.dout.data(),
                                 d.dmaps.data(), d.duv.data());
    } else {
      serial::bilinear_scatter(d.g, d.maps.data(), std::span<const int>(d.image), d.uv.data(), d.dout.data(),
                               d.dmaps.data(), d.duv.data());
    }
    benchmark::DoNotOptimize(d.dmaps.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv_forward/serial")->Args({8, 32})->Args({32, 8});
BENCHMARK(conv_forward<true>)->Name("conv_forward/parallel")->Args({8, 32})->Args({32, 8});
BENCHMARK(conv_backward<false>)->Name("conv_backward/serial")->Args({8, 32})->Args({32, 8});
BENCHMARK(conv_backward<true>)->Name("conv_backward/parallel")->Args({8, 32})->Args({32, 8});
BENCHMARK(sample_gather<false>)->Name("bilinear_gather/serial")->Arg(16384);
BENCHMARK(sample_gather<true>)->Name("bilinear_gather/parallel")->Arg(16384);
BENCHMARK(sample_scatter<false>)->Name("bilinear_scatter/serial")->Arg(16384);
BENCHMARK(sample_scatter<true>)->Name("bilinear_scatter/parallel")->Arg(16384);

BENCHMARK_MAIN();
