#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "psumml/kernels.hpp"
#include "psumml/rng.hpp"

#include "test_util.hpp"

using namespace psumml;
using namespace psumml::kernels;
using test_util::bit_equal;
using test_util::fd_max_rel_err;
using test_util::fill_uniform;
using test_util::max_abs_diff;

namespace {

template <class T>
Tensor<T> random_tensor(int n, int c, int h, int w, std::uint64_t seed, double lo = -1.0,
                        double hi = 1.0) {
  Tensor<T> t(n, c, h, w);
  rng::Stream rs(seed);
  fill_uniform(t, rs, lo, hi);
  return t;
}

}  // namespace

TEST_CASE("gemm: OpenMP path is bit-identical to serial, blas is close") {
  rng::Stream rs(11);
  for (int trial = 0; trial < 4; ++trial) {
    const int m = static_cast<int>(rs.uniform_int(1, 37));
    const int n = static_cast<int>(rs.uniform_int(1, 300));
    const int k = static_cast<int>(rs.uniform_int(1, 123));
    std::vector<float> a(static_cast<std::size_t>(m) * k), b(static_cast<std::size_t>(k) * n);
    for (auto& x : a) x = static_cast<float>(rs.uniform(-1, 1));
    for (auto& x : b) x = static_cast<float>(rs.uniform(-1, 1));
    std::vector<float> c0(static_cast<std::size_t>(m) * n, 0.5f), c1 = c0, c2 = c0;
    gemm_nn(a.data(), b.data(), c0.data(), m, n, k, true, Backend::Serial);
    gemm_nn(a.data(), b.data(), c1.data(), m, n, k, true, Backend::OpenMP);
    CHECK(c0 == c1);
    if (blas_available()) {
      gemm_nn(a.data(), b.data(), c2.data(), m, n, k, true, Backend::Blas);
      double worst = 0;
      for (std::size_t i = 0; i < c0.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(c0[i]) - c2[i]));
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("conv2d forward: naive serial vs im2col paths agree bit for bit") {
  for (int stride : {1, 2}) {
    const auto x = random_tensor<float>(3, 5, 12, 16, 21 + stride);
    const auto w = random_tensor<float>(7, 5, 3, 3, 22 + stride);
    std::vector<float> bias(7);
    rng::Stream rs(23);
    for (auto& b : bias) b = static_cast<float>(rs.uniform(-1, 1));

    Workspace<float> ws;
    Tensor<float> y_serial, y_omp, y_blas;
    conv2d_forward(x, w, bias, stride, 1, y_serial, ws, Backend::Serial);
    conv2d_forward(x, w, bias, stride, 1, y_omp, ws, Backend::OpenMP);
    CHECK(bit_equal(y_serial, y_omp));
    if (blas_available()) {
      conv2d_forward(x, w, bias, stride, 1, y_blas, ws, Backend::Blas);
      CHECK(max_abs_diff(y_serial, y_blas) < 1e-4);
    }
  }
}

TEST_CASE("conv2d 1x1 matches a per-pixel linear map") {
  const auto x = random_tensor<float>(2, 6, 8, 8, 31);
  const auto w = random_tensor<float>(4, 6, 1, 1, 32);
  std::vector<float> bias(4, 0.25f);
  Workspace<float> ws;
  Tensor<float> y;
  conv2d_forward(x, w, bias, 1, 0, y, ws, Backend::OpenMP);
  for (int co = 0; co < 4; ++co) {
    float acc = 0;
    for (int ci = 0; ci < 6; ++ci) acc += x.at(1, ci, 3, 5) * w.at(co, ci, 0, 0);
    CHECK(y.at(1, co, 3, 5) == doctest::Approx(acc + 0.25f).epsilon(1e-5));
  }
}

TEST_CASE("conv2d backward: serial/OpenMP bit equality and finite differences") {
  for (int stride : {1, 2}) {
    Tensor<double> x = random_tensor<double>(2, 3, 8, 8, 41 + stride);
    Tensor<double> w = random_tensor<double>(4, 3, 3, 3, 42 + stride);
    std::vector<double> bias(4, 0.1);
    const int ho = conv_out_size(8, 3, 1, stride);
    Tensor<double> cot = random_tensor<double>(2, 4, ho, ho, 43 + stride);
    Workspace<double> ws;

    auto run = [&](Backend be) {
      Tensor<double> dx, dw(4, 3, 3, 3);
      std::vector<double> db(4, 0.0);
      conv2d_backward(x, w, cot, stride, 1, &dx, &dw, &db, ws, be);
      return std::tuple{dx, dw, db};
    };
    auto [dx_s, dw_s, db_s] = run(Backend::Serial);
    auto [dx_o, dw_o, db_o] = run(Backend::OpenMP);
    CHECK(bit_equal(dx_s, dx_o));
    CHECK(bit_equal(dw_s, dw_o));
    CHECK(db_s == db_o);

    // Scalar objective L = <conv(x, w) + b, cot>.
    auto loss = [&]() {
      Tensor<double> y;
      conv2d_forward(x, w, bias, stride, 1, y, ws, Backend::Serial);
      double acc = 0;
      for (std::size_t q = 0; q < y.size(); ++q) acc += y.v[q] * cot.v[q];
      return acc;
    };
    // The objective is linear in each argument, so a larger step has no
    // truncation error and less cancellation noise.
    CHECK(fd_max_rel_err(x.v, dx_s.v, loss, 1e-4, 7) < 1e-6);
    CHECK(fd_max_rel_err(w.v, dw_s.v, loss, 1e-4, 3) < 1e-6);
    CHECK(fd_max_rel_err(bias, db_s, loss, 1e-4) < 1e-6);
  }
}

TEST_CASE("batch norm: forward stats, running update, backward vs finite differences") {
  Tensor<double> x = random_tensor<double>(3, 4, 6, 6, 51);
  std::vector<double> gamma{1.1, 0.9, 1.3, 0.7}, beta{0.1, -0.2, 0.0, 0.3};
  std::vector<double> rm(4, 0.0), rv(4, 1.0);
  Tensor<double> y;
  BnCache<double> cache;

  SUBCASE("serial == omp") {
    std::vector<double> rm2 = rm, rv2 = rv;
    Tensor<double> y2;
    BnCache<double> c2;
    bn_forward(x, gamma, beta, rm, rv, 0.1, 1e-5, true, y, cache, Backend::Serial);
    bn_forward(x, gamma, beta, rm2, rv2, 0.1, 1e-5, true, y2, c2, Backend::OpenMP);
    CHECK(bit_equal(y, y2));
    CHECK(rm == rm2);
    CHECK(rv == rv2);
  }

  SUBCASE("train-mode output is standardized") {
    bn_forward(x, gamma, beta, rm, rv, 0.1, 1e-5, true, y, cache, Backend::OpenMP);
    for (int c = 0; c < 4; ++c) {
      double mean = 0;
      for (int i = 0; i < 3; ++i) {
        const double* p = y.plane(i, c);
        for (int q = 0; q < 36; ++q) mean += p[q];
      }
      mean /= 3 * 36;
      CHECK(mean == doctest::Approx(beta[c]).epsilon(1e-9));
    }
    CHECK(rm[0] != 0.0);
    CHECK(rv[0] != 1.0);
  }

  SUBCASE("eval mode uses running statistics and is deterministic") {
    std::vector<double> rm1{0.2, 0.1, 0.0, -0.1}, rv1{1.5, 0.9, 1.1, 0.8};
    Tensor<double> y1, y2b;
    BnCache<double> c1, c2;
    bn_forward(x, gamma, beta, rm1, rv1, 0.1, 1e-5, false, y1, c1, Backend::OpenMP);
    bn_forward(x, gamma, beta, rm1, rv1, 0.1, 1e-5, false, y2b, c2, Backend::OpenMP);
    CHECK(bit_equal(y1, y2b));
    CHECK(y1.at(0, 0, 0, 0) ==
          doctest::Approx(gamma[0] * (x.at(0, 0, 0, 0) - 0.2) / std::sqrt(1.5 + 1e-5) + beta[0]));
  }

  SUBCASE("backward vs finite differences") {
    const Tensor<double> cot = random_tensor<double>(3, 4, 6, 6, 52);
    auto loss = [&]() {
      std::vector<double> rm_t(4, 0.0), rv_t(4, 1.0);
      Tensor<double> yt;
      BnCache<double> ct;
      bn_forward(x, gamma, beta, rm_t, rv_t, 0.1, 1e-5, true, yt, ct, Backend::Serial);
      double acc = 0;
      for (std::size_t q = 0; q < yt.size(); ++q) acc += yt.v[q] * cot.v[q];
      return acc;
    };
    std::vector<double> rm_t(4, 0.0), rv_t(4, 1.0);
    bn_forward(x, gamma, beta, rm_t, rv_t, 0.1, 1e-5, true, y, cache, Backend::Serial);
    Tensor<double> dx;
    std::vector<double> dgamma(4, 0.0), dbeta(4, 0.0);
    bn_backward(x, cot, gamma, cache, dx, dgamma, dbeta, Backend::Serial);

    Tensor<double> dx_o;
    std::vector<double> dg_o(4, 0.0), db_o(4, 0.0);
    bn_backward(x, cot, gamma, cache, dx_o, dg_o, db_o, Backend::OpenMP);
    CHECK(bit_equal(dx, dx_o));
    CHECK(dgamma == dg_o);

    CHECK(fd_max_rel_err(x.v, dx.v, loss, 1e-6, 11) < 1e-5);
    CHECK(fd_max_rel_err(gamma, dgamma, loss, 1e-6) < 1e-6);
    CHECK(fd_max_rel_err(beta, dbeta, loss, 1e-6) < 1e-6);
  }
}

TEST_CASE("maxpool2: argmax routing round-trips gradients") {
  Tensor<float> x = random_tensor<float>(2, 3, 8, 10, 61);
  Tensor<float> y, y2;
  std::vector<std::int32_t> am, am2;
  maxpool2_forward(x, y, am, Backend::Serial);
  maxpool2_forward(x, y2, am2, Backend::OpenMP);
  CHECK(bit_equal(y, y2));
  CHECK(am == am2);
  CHECK(y.h == 4);
  CHECK(y.w == 5);

  Tensor<float> dy = random_tensor<float>(2, 3, 4, 5, 62);
  Tensor<float> dx, dx2;
  maxpool2_backward(dy, am, 8, 10, dx, Backend::Serial);
  maxpool2_backward(dy, am2, 8, 10, dx2, Backend::OpenMP);
  CHECK(bit_equal(dx, dx2));
  double s1 = 0, s2 = 0;
  for (auto v : dy.v) s1 += v;
  for (auto v : dx.v) s2 += v;
  CHECK(s1 == doctest::Approx(s2).epsilon(1e-6));
}

TEST_CASE("upsample: forward/backward adjoint pair") {
  Tensor<double> x = random_tensor<double>(1, 2, 4, 4, 71);
  Tensor<double> y;
  upsample2_forward(x, y, Backend::OpenMP);
  CHECK(y.h == 8);
  CHECK(y.at(0, 0, 5, 3) == x.at(0, 0, 2, 1));

  // <up(x), cot> == <x, up^T(cot)>
  Tensor<double> cot = random_tensor<double>(1, 2, 8, 8, 72);
  Tensor<double> dx;
  upsample2_backward(cot, dx, Backend::Serial);
  double lhs = 0, rhs = 0;
  for (std::size_t q = 0; q < y.size(); ++q) lhs += y.v[q] * cot.v[q];
  for (std::size_t q = 0; q < x.size(); ++q) rhs += x.v[q] * dx.v[q];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  Tensor<double> y4, dx4;
  upsample_n_forward(x, 2, y4, Backend::OpenMP);
  CHECK(bit_equal(y, y4));
  upsample_n_backward(cot, 2, dx4, Backend::OpenMP);
  CHECK(bit_equal(dx, dx4));
}

TEST_CASE("softmax: normalization and jacobian") {
  Tensor<double> x = random_tensor<double>(2, 5, 3, 3, 81, -3.0, 3.0);
  Tensor<double> p, p2;
  softmax_channels(x, p, Backend::Serial);
  softmax_channels(x, p2, Backend::OpenMP);
  CHECK(bit_equal(p, p2));
  for (int i = 0; i < 2; ++i)
    for (int yy = 0; yy < 3; ++yy)
      for (int xx = 0; xx < 3; ++xx) {
        double s = 0;
        for (int c = 0; c < 5; ++c) s += p.at(i, c, yy, xx);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }

  const Tensor<double> cot = random_tensor<double>(2, 5, 3, 3, 82);
  Tensor<double> dl;
  softmax_backward(p, cot, dl, Backend::OpenMP);
  auto loss = [&]() {
    Tensor<double> pt;
    softmax_channels(x, pt, Backend::Serial);
    double acc = 0;
    for (std::size_t q = 0; q < pt.size(); ++q) acc += pt.v[q] * cot.v[q];
    return acc;
  };
  CHECK(fd_max_rel_err(x.v, dl.v, loss, 1e-6) < 1e-7);
}

TEST_CASE("leaky relu and concat/split") {
  Tensor<float> x = random_tensor<float>(1, 2, 4, 4, 91);
  Tensor<float> y;
  leaky_relu_forward(x, 0.2f, y, Backend::OpenMP);
  for (std::size_t q = 0; q < x.size(); ++q)
    CHECK(y.v[q] == (x.v[q] > 0 ? x.v[q] : 0.2f * x.v[q]));

  Tensor<float> a = random_tensor<float>(2, 3, 4, 4, 92);
  Tensor<float> b = random_tensor<float>(2, 2, 4, 4, 93);
  Tensor<float> cat, da, db;
  concat_channels(a, b, cat);
  CHECK(cat.c == 5);
  CHECK(cat.at(1, 4, 2, 2) == b.at(1, 1, 2, 2));
  split_channels(cat, 3, da, db);
  CHECK(bit_equal(a, da));
  CHECK(bit_equal(b, db));
}
