#include "occ3d/kernels.hpp"

#include <doctest.h>

#include <random>

using namespace occ3d::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct ThreadScope {
  explicit ThreadScope(int n) {
#ifdef _OPENMP
    saved = omp_get_max_threads();
    omp_set_num_threads(n);
#else
    (void)n;
#endif
  }
  ~ThreadScope() {
#ifdef _OPENMP
    omp_set_num_threads(saved);
#endif
  }
  int saved = 1;
};

}  // namespace

TEST_CASE("conv2d parallel matches serial reference") {
  std::mt19937_64 rng(1);
  for (int threads : {1, 3}) {
    ThreadScope scope(threads);
    for (int trial = 0; trial < 24; ++trial) {
      ConvGeometry g;
      g.batch = 1 + trial % 4;
      g.c_in = 1 + trial % 3;
      g.c_out = 1 + (trial / 3) % 4;
      g.ksize = trial % 5 == 0 ? 1 : 3;
      g.stride = trial % 2 == 0 ? 1 : 2;
      g.height = 4 + 2 * (trial % 3);
      g.width = 6 + 2 * (trial % 2);
      const auto x = random_vec(g.batch * g.c_in * g.in_plane(), rng);
      const auto k = random_vec(g.c_out * g.patch(), rng);
      const auto b = random_vec(g.c_out, rng);
      const auto dy = random_vec(g.batch * g.c_out * g.out_plane(), rng);

      std::vector<double> ys(dy.size()), yp(dy.size());
      serial::conv2d_forward(g, x.data(), k.data(), b.data(), ys.data());
      parallel::conv2d_forward(g, x.data(), k.data(), b.data(), yp.data());
      CHECK(max_abs_diff(ys, yp) < 1e-12);

      std::vector<double> dxs(x.size(), 0.5), dks(k.size(), 0.25), dbs(b.size(), -1.0);
      std::vector<double> dxp = dxs, dkp = dks, dbp = dbs;
      serial::conv2d_backward(g, x.data(), k.data(), dy.data(), dxs.data(), dks.data(), dbs.data());
      parallel::conv2d_backward(g, x.data(), k.data(), dy.data(), dxp.data(), dkp.data(), dbp.data());
      CHECK(max_abs_diff(dxs, dxp) < 1e-12);
      CHECK(max_abs_diff(dks, dkp) < 1e-12);
      CHECK(max_abs_diff(dbs, dbp) < 1e-12);
    }
  }
}

TEST_CASE("conv2d fixed values") {
  ConvGeometry g;
  g.height = g.width = 5;
  std::vector<double> x(25, 1.0), k(9, 1.0), y(25);
  parallel::conv2d_forward<double>(g, x.data(), k.data(), nullptr, y.data());
  CHECK(y[2 * 5 + 2] == 9.0);
  CHECK(y[0] == 4.0);
  CHECK(y[2] == 6.0);

  std::vector<double> ident(9, 0.0);
  ident[4] = 1.0;
  std::mt19937_64 rng(2);
  const auto xr = random_vec(25, rng);
  parallel::conv2d_forward<double>(g, xr.data(), ident.data(), nullptr, y.data());
  CHECK(y == xr);

  g.stride = 2;
  g.height = g.width = 6;
  CHECK(g.out_height() == 3);
  CHECK(g.out_width() == 3);
}

TEST_CASE("bilinear gather and scatter match serial reference") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> coord(-2.0, 10.0);
  std::uniform_int_distribution<int> pick(0, 2);
  for (int threads : {1, 4}) {
    ThreadScope scope(threads);
    SampleGeometry g{3, 5, 7, 9};
    const auto maps = random_vec(g.images * g.channels * g.height * g.width, rng);
    std::vector<int> idx(200);
    std::vector<double> uv(400);
    for (int q = 0; q < 200; ++q) {
      idx[q] = pick(rng);
      uv[2 * q] = coord(rng);
      uv[2 * q + 1] = q % 10 == 0 ? std::floor(coord(rng)) : coord(rng);
    }
    std::vector<double> os(200 * g.channels), op(os.size());
    serial::bilinear_gather<double>(g, maps.data(), idx, uv.data(), os.data());
    parallel::bilinear_gather<double>(g, maps.data(), idx, uv.data(), op.data());
    CHECK(max_abs_diff(os, op) < 1e-12);

    const auto dout = random_vec(os.size(), rng);
    std::vector<double> dms(maps.size(), 0.0), duvs(uv.size(), 0.0);
    std::vector<double> dmp = dms, duvp = duvs;
    serial::bilinear_scatter<double>(g, maps.data(), idx, uv.data(), dout.data(), dms.data(), duvs.data());
    parallel::bilinear_scatter<double>(g, maps.data(), idx, uv.data(), dout.data(), dmp.data(), duvp.data());
    CHECK(max_abs_diff(dms, dmp) < 1e-12);
    CHECK(max_abs_diff(duvs, duvp) < 1e-12);
  }
}

TEST_CASE("bilinear fixed values") {
  SampleGeometry g{1, 1, 2, 2};
  const std::vector<double> m = {0, 1, 2, 3};
  const std::vector<int> idx = {0, 0, 0, 0};
  const std::vector<double> uv = {0.5, 0.5, 1, 1, 0, 1, -4, 7};
  std::vector<double> out(4);
  parallel::bilinear_gather<double>(g, m.data(), idx, uv.data(), out.data());
  CHECK(out[0] == 1.5);
  CHECK(out[1] == 3.0);
  CHECK(out[2] == 2.0);
  CHECK(out[3] == 2.0);  // clamped to (0, 1)
}
