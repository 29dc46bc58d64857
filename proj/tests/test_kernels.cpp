#include <random>
#include <vector>

#include "doctest.h"
#include "hybridnet/kernels.hpp"
#include "testutil.hpp"

// Backend equivalence: every SIMD kernel must agree with the scalar
// reference elementwise on random shapes, including awkward tails and
// padded/strided geometry.

namespace hk = hybridnet::kernels;

namespace {

bool simd_present() {
  return hk::backend_available(hk::Backend::kAvx2) ||
         hk::backend_available(hk::Backend::kNeon);
}

const hk::KernelTable& simd_table() {
  if (hk::backend_available(hk::Backend::kAvx2)) {
    hk::set_backend(hk::Backend::kAvx2);
  } else {
    hk::set_backend(hk::Backend::kNeon);
  }
  return hk::active();
}

std::vector<double> rand_vec(std::mt19937_64& rng, int64_t n, double lo = -2.0,
                             double hi = 2.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = testutil::urand(rng, lo, hi);
  return v;
}

void expect_equal(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CAPTURE(i);
    REQUIRE(a[i] == b[i]);
  }
}

}  // namespace

TEST_CASE("scalar conv2d matches the naive 6-loop reference") {
  std::mt19937_64 rng(7);
  for (int iter = 0; iter < 40; ++iter) {
    const int64_t n = 1 + rng() % 2, ci = 1 + rng() % 3, co = 1 + rng() % 3;
    const int64_t k = 1 + rng() % 3;
    const int64_t h = k + rng() % 5, w = k + rng() % 5;
    const int64_t stride = 1 + rng() % 2, pad = rng() % 2;
    const auto in = rand_vec(rng, n * ci * h * w);
    const auto wt = rand_vec(rng, co * ci * k * k);
    const auto s = hk::make_conv2d_shape(n, ci, h, w, co, k, stride, pad);
    std::vector<double> out(s.out_size());
    hk::scalar_table().conv2d_fwd(in.data(), wt.data(), out.data(), s);
    const auto ref =
        testutil::naive_conv2d(in, wt, n, ci, h, w, co, k, stride, pad);
    expect_equal(out, ref);
  }
}

TEST_CASE("simd conv2d kernels match scalar exactly") {
  if (!simd_present()) return;
  const auto& simd = simd_table();
  std::mt19937_64 rng(11);
  for (int iter = 0; iter < 60; ++iter) {
    const int64_t n = 1 + rng() % 2, ci = 1 + rng() % 4, co = 1 + rng() % 4;
    const int64_t k = 1 + rng() % 5;
    const int64_t h = k + rng() % 12, w = k + rng() % 12;
    const int64_t stride = 1 + rng() % 2, pad = rng() % 3;
    const auto s = hk::make_conv2d_shape(n, ci, h, w, co, k, stride, pad);
    const auto in = rand_vec(rng, s.in_size());
    const auto wt = rand_vec(rng, s.weight_size());
    const auto gout = rand_vec(rng, s.out_size());

    std::vector<double> a(s.out_size()), b(s.out_size());
    hk::scalar_table().conv2d_fwd(in.data(), wt.data(), a.data(), s);
    simd.conv2d_fwd(in.data(), wt.data(), b.data(), s);
    expect_equal(a, b);

    std::vector<double> ga(s.in_size()), gb(s.in_size());
    hk::scalar_table().conv2d_bwd_input(gout.data(), wt.data(), ga.data(), s);
    simd.conv2d_bwd_input(gout.data(), wt.data(), gb.data(), s);
    expect_equal(ga, gb);

    std::vector<double> wa(s.weight_size()), wb(s.weight_size());
    hk::scalar_table().conv2d_bwd_weight(gout.data(), in.data(), wa.data(), s);
    simd.conv2d_bwd_weight(gout.data(), in.data(), wb.data(), s);
    expect_equal(wa, wb);
  }
}

TEST_CASE("simd linear kernels match scalar exactly") {
  if (!simd_present()) return;
  const auto& simd = simd_table();
  std::mt19937_64 rng(13);
  for (int iter = 0; iter < 60; ++iter) {
    const int64_t n = 1 + rng() % 9, fi = 1 + rng() % 23, fo = 1 + rng() % 23;
    const auto in = rand_vec(rng, n * fi);
    const auto wt = rand_vec(rng, fo * fi);
    const auto gout = rand_vec(rng, n * fo);

    std::vector<double> a(n * fo), b(n * fo);
    hk::scalar_table().linear_fwd(in.data(), wt.data(), a.data(), n, fi, fo);
    simd.linear_fwd(in.data(), wt.data(), b.data(), n, fi, fo);
    expect_equal(a, b);

    std::vector<double> ga(n * fi), gb(n * fi);
    hk::scalar_table().linear_bwd_input(gout.data(), wt.data(), ga.data(), n, fi, fo);
    simd.linear_bwd_input(gout.data(), wt.data(), gb.data(), n, fi, fo);
    expect_equal(ga, gb);

    std::vector<double> wa(fo * fi), wb(fo * fi);
    hk::scalar_table().linear_bwd_weight(gout.data(), in.data(), wa.data(), n, fi, fo);
    simd.linear_bwd_weight(gout.data(), in.data(), wb.data(), n, fi, fo);
    expect_equal(wa, wb);
  }
}

TEST_CASE("simd elementwise and transform kernels match scalar exactly") {
  if (!simd_present()) return;
  const auto& simd = simd_table();
  std::mt19937_64 rng(17);
  for (int64_t size : {1, 2, 3, 4, 5, 7, 8, 9, 31, 64, 257}) {
    const auto x = rand_vec(rng, size);
    const auto y = rand_vec(rng, size);
    std::vector<double> a(size), b(size);

    hk::scalar_table().ew_add(x.data(), y.data(), a.data(), size);
    simd.ew_add(x.data(), y.data(), b.data(), size);
    expect_equal(a, b);

    hk::scalar_table().ew_mul(x.data(), y.data(), a.data(), size);
    simd.ew_mul(x.data(), y.data(), b.data(), size);
    expect_equal(a, b);

    hk::scalar_table().relu_fwd(x.data(), a.data(), size);
    simd.relu_fwd(x.data(), b.data(), size);
    expect_equal(a, b);

    hk::scalar_table().relu_bwd(x.data(), y.data(), a.data(), size);
    simd.relu_bwd(x.data(), y.data(), b.data(), size);
    expect_equal(a, b);

    const double c = testutil::urand(rng, -0.5, 0.5);
    const double d = testutil::urand(rng, 0.05, 0.8);
    const double alpha = 0.5 / d, beta = -0.5 * c / d + 0.5;
    hk::scalar_table().weight_transform(x.data(), alpha, beta, c - d, c + d,
                                        a.data(), size);
    simd.weight_transform(x.data(), alpha, beta, c - d, c + d, b.data(), size);
    expect_equal(a, b);

    hk::scalar_table().act_transform(x.data(), alpha, beta, c - d, c + d,
                                     a.data(), size);
    simd.act_transform(x.data(), alpha, beta, c - d, c + d, b.data(), size);
    expect_equal(a, b);
  }
}

TEST_CASE("simd round_scale matches std::round semantics exactly") {
  if (!simd_present()) return;
  const auto& simd = simd_table();
  // Exact ties, near-ties, and the largest double below 0.5.
  std::vector<double> x = {0.5,  -0.5, 1.5,  -1.5, 2.5,   -2.5,  3.5,
                           -3.5, 0.0,  -0.0, 0.25, -0.25, 7.4999999999999996,
                           0.49999999999999994, -0.49999999999999994};
  std::mt19937_64 rng(23);
  for (int i = 0; i < 200; ++i) x.push_back(testutil::urand(rng, -1.5, 1.5));
  for (double levels : {1.0, 7.0, 15.0, 31.0}) {
    std::vector<double> a(x.size()), b(x.size());
    const double inv = 1.0 / levels;
    hk::scalar_table().round_scale(x.data(), levels, inv, a.data(),
                                   static_cast<int64_t>(x.size()));
    simd.round_scale(x.data(), levels, inv, b.data(),
                     static_cast<int64_t>(x.size()));
    for (size_t i = 0; i < x.size(); ++i) {
      CAPTURE(x[i]);
      CAPTURE(levels);
      REQUIRE(a[i] == b[i]);
    }
  }
}

TEST_CASE("simd fixedpoint conv matches scalar exactly") {
  if (!simd_present()) return;
  const auto& simd = simd_table();
  std::mt19937_64 rng(29);
  for (int iter = 0; iter < 40; ++iter) {
    const int64_t n = 1 + rng() % 2, ci = 1 + rng() % 3, co = 1 + rng() % 3;
    const int64_t k = 1 + rng() % 5;
    const int64_t h = k + rng() % 8, w = k + rng() % 8;
    const int64_t stride = 1 + rng() % 2, pad = rng() % 2;
    const auto s = hk::make_conv2d_shape(n, ci, h, w, co, k, stride, pad);
    std::vector<int32_t> in(s.in_size()), wt(s.weight_size());
    for (auto& v : in) v = static_cast<int32_t>(rng() % 31);
    for (auto& v : wt) v = static_cast<int32_t>(rng() % 31) - 15;
    std::vector<int64_t> a(s.out_size()), b(s.out_size());
    hk::scalar_table().fixedpoint_conv2d(in.data(), wt.data(), a.data(), s);
    simd.fixedpoint_conv2d(in.data(), wt.data(), b.data(), s);
    for (size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
  }
}
