#include <random>
#include <set>

#include "doctest.h"
#include "hybridnet/ops.hpp"
#include "hybridnet/quant.hpp"
#include "testutil.hpp"

using namespace hybridnet;
using testutil::gradcheck;
using testutil::rand_tensor;

namespace {

QuantParams qp_fixed(int bits, double cw, double dw, double ca, double da) {
  return QuantParams::make(bits, cw, dw, ca, da);
}

}  // namespace

TEST_CASE("transform_weight branch values") {
  QuantParams qp = qp_fixed(4, 0.5, 0.25, 1.0, 1.0);
  Tensor w = Tensor::from_data({3}, {0.2, 0.9, -0.5});
  Tensor t = transform_weight(w, qp);
  CHECK(t.data()[0] == 0.0);   // |w| < c-d, pruned
  CHECK(t.data()[1] == 1.0);   // |w| > c+d, clamped
  CHECK(t.data()[2] == doctest::Approx(-0.5).epsilon(1e-12));  // alpha=2, beta=-0.5
}

TEST_CASE("transform_weight is odd and monotone on w >= 0") {
  std::mt19937_64 rng(3);
  QuantParams qp = qp_fixed(4, 0.4, 0.3, 1.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const double v = testutil::urand(rng, -2, 2);
    Tensor plus = transform_weight(Tensor::scalar(v), qp);
    Tensor minus = transform_weight(Tensor::scalar(-v), qp);
    CHECK(plus.item() == -minus.item());
  }
  double prev = -1.0;
  for (double v = 0.0; v <= 2.0; v += 0.01) {
    const double t = transform_weight(Tensor::scalar(v), qp).item();
    CHECK(t >= prev);
    prev = t;
  }
}

TEST_CASE("transform_activation branch values and monotonicity") {
  QuantParams qp = qp_fixed(4, 0.0, 1.0, 0.6, 0.2);
  CHECK(transform_activation(Tensor::scalar(0.9), qp).item() == 1.0);
  CHECK(transform_activation(Tensor::scalar(0.3), qp).item() == 0.0);
  CHECK(transform_activation(Tensor::scalar(0.6), qp).item() ==
        doctest::Approx(0.5).epsilon(1e-12));
  double prev = -1.0;
  for (double v = -0.5; v <= 1.5; v += 0.01) {
    const double t = transform_activation(Tensor::scalar(v), qp).item();
    CHECK(t >= prev);
    prev = t;
  }
}

TEST_CASE("transform gradients match finite differences away from edges") {
  std::mt19937_64 rng(17);
  for (int iter = 0; iter < 10; ++iter) {
    QuantParams qp = qp_fixed(4, 0.45, 0.3, 0.5, 0.35);
    qp.c_w.set_name("c_w");
    // keep sample points at least 1e-3 from the branch edges and from 0
    std::vector<double> vals;
    while (vals.size() < 24) {
      const double v = testutil::urand(rng, -1.2, 1.2);
      const double av = std::fabs(v);
      if (std::fabs(av - 0.15) < 2e-3 || std::fabs(av - 0.75) < 2e-3) continue;
      if (av < 2e-3) continue;
      vals.push_back(v);
    }
    Tensor w = Tensor::from_data({24}, vals, true);
    Tensor proj = rand_tensor({24}, rng, -1, 1);
    auto loss_w = [&]() { return sum_all(mul(transform_weight(w, qp), proj)); };
    CHECK(gradcheck(loss_w, {w, qp.c_w, qp.d_w}) < 1e-4);

    std::vector<double> avals;
    while (avals.size() < 24) {
      const double v = testutil::urand(rng, -0.5, 1.4);
      if (std::fabs(v - 0.15) < 2e-3 || std::fabs(v - 0.85) < 2e-3) continue;
      avals.push_back(v);
    }
    Tensor a = Tensor::from_data({24}, avals, true);
    auto loss_a = [&]() {
      return sum_all(mul(transform_activation(a, qp), proj));
    };
    CHECK(gradcheck(loss_a, {a, qp.c_a, qp.d_a}) < 1e-4);
  }
}

TEST_CASE("quantize_weight codes, ties away from zero") {
  CHECK(quantize_weight(Tensor::scalar(0.0), 4).codes[0] == 0);
  CHECK(quantize_weight(Tensor::scalar(1.0), 4).codes[0] == 7);
  CHECK(quantize_weight(Tensor::scalar(-0.5), 4).codes[0] == -4);  // round(-3.5)
  CHECK(quantize_weight(Tensor::scalar(1.0), 5).codes[0] == 15);
  CHECK_THROWS(quantize_weight(Tensor::scalar(1.1), 4));
}

TEST_CASE("quantize_activation codes") {
  CHECK(quantize_activation(Tensor::scalar(1.0), 4).codes[0] == 15);
  CHECK(quantize_activation(Tensor::scalar(0.0), 4).codes[0] == 0);
  CHECK(quantize_activation(Tensor::scalar(0.5), 4).codes[0] == 8);  // round(7.5)
  CHECK_THROWS(quantize_activation(Tensor::scalar(-0.2), 4));
}

TEST_CASE("code range and distinct-level bound over random inputs") {
  std::mt19937_64 rng(23);
  for (int bits : {2, 3, 4, 5}) {
    Tensor w = rand_tensor({2000}, rng, -3, 3);
    QuantParams qp = QuantParams::from_weights(bits, w.data());
    IntCodeTensor wc = quantize_weight(transform_weight(w, qp), bits);
    const int32_t wmax = (1 << (bits - 1)) - 1;
    std::set<int32_t> distinct;
    for (int32_t c : wc.codes) {
      CHECK(c >= -wmax);
      CHECK(c <= wmax);
      distinct.insert(c);
    }
    CHECK(static_cast<int>(distinct.size()) <= (1 << bits) - 1);

    Tensor a = rand_tensor({2000}, rng, -0.5, 2.5);
    IntCodeTensor ac = quantize_activation(transform_activation(a, qp), bits);
    for (int32_t c : ac.codes) {
      CHECK(c >= 0);
      CHECK(c <= (1 << bits) - 1);
    }
  }
}

TEST_CASE("fake_quant spec values and grid closure") {
  QuantParams qp = qp_fixed(4, 0.5, 0.25, 0.6, 0.2);
  CHECK(fake_quant(Tensor::scalar(0.2), qp, QuantKind::kWeight).item() == 0.0);
  CHECK(fake_quant(Tensor::scalar(0.9), qp, QuantKind::kActivation).item() == 1.0);

  // outputs always land on the representable grid, and stay there when the
  // map is applied twice with unchanged intervals
  std::mt19937_64 rng(29);
  auto on_grid = [](double v, double levels) {
    const double scaled = v * levels;
    return std::fabs(scaled - std::round(scaled)) < 1e-9;
  };
  for (int i = 0; i < 300; ++i) {
    Tensor x = rand_tensor({16}, rng, -2, 2);
    Tensor q1 = fake_quant(x, qp, QuantKind::kWeight);
    Tensor q2 = fake_quant(q1, qp, QuantKind::kWeight);
    for (int64_t j = 0; j < 16; ++j) {
      CHECK(on_grid(q1.data()[j], 7.0));
      CHECK(on_grid(q2.data()[j], 7.0));
      CHECK(std::fabs(q1.data()[j]) <= 1.0);
    }
  }
}

TEST_CASE("straight-through contract: fake-quant backward equals transform backward") {
  std::mt19937_64 rng(31);
  QuantParams qp = qp_fixed(4, 0.45, 0.3, 0.5, 0.35);
  Tensor x = rand_tensor({40}, rng, -1.2, 1.2, true);
  Tensor proj = rand_tensor({40}, rng, -1, 1);

  x.zero_grad();
  qp.c_w.zero_grad();
  qp.d_w.zero_grad();
  backward(sum_all(mul(fake_quant(x, qp, QuantKind::kWeight), proj)));
  std::vector<double> g_fake(x.grad().begin(), x.grad().end());
  const double gc_fake = qp.c_w.grad()[0];

  x.zero_grad();
  qp.c_w.zero_grad();
  qp.d_w.zero_grad();
  backward(sum_all(mul(transform_weight(x, qp), proj)));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == g_fake[i]);
  CHECK(qp.c_w.grad()[0] == gc_fake);
}

TEST_CASE("fixedpoint conv equals the scale-factored float conv exactly") {
  std::mt19937_64 rng(37);
  QuantParams qp = qp_fixed(4, 0.4, 0.35, 0.6, 0.45);
  for (int iter = 0; iter < 50; ++iter) {
    const int64_t n = 1 + rng() % 2, ci = 1 + rng() % 3, co = 1 + rng() % 3;
    const int64_t k = 1 + rng() % 3;
    const int64_t h = k + rng() % 4, w = k + rng() % 4;
    Tensor a = rand_tensor({n, ci, h, w}, rng, 0.0, 1.2);
    Tensor wt = rand_tensor({co, ci, k, k}, rng, -1.0, 1.0);
    IntCodeTensor ac = quantize_activation(transform_activation(a, qp), 4);
    IntCodeTensor wc = quantize_weight(transform_weight(wt, qp), 4);

    Tensor fx = fixedpoint_conv2d(ac, wc, 1, 0);

    // oracle: float conv over the raw code tensors, then the same combined
    // scale; the code-valued conv is integer-exact in f64
    Tensor acodes = Tensor::from_data(ac.shape, std::vector<double>(
                                                    ac.codes.begin(), ac.codes.end()));
    Tensor wcodes = Tensor::from_data(wc.shape, std::vector<double>(
                                                    wc.codes.begin(), wc.codes.end()));
    Tensor ref = mul_const(conv2d(acodes, wcodes, 1, 0), ac.scale * wc.scale);
    REQUIRE(fx.numel() == ref.numel());
    for (int64_t i = 0; i < fx.numel(); ++i) CHECK(fx.data()[i] == ref.data()[i]);
  }

  // 1x1 hand arithmetic: codes 15 and 7 with scales 1/15 and 1/7
  IntCodeTensor a1{{1, 1, 1, 1}, {15}, 1.0 / 15.0, false};
  IntCodeTensor w1{{1, 1, 1, 1}, {7}, 1.0 / 7.0, true};
  CHECK(fixedpoint_conv2d(a1, w1, 1, 0).item() == doctest::Approx(1.0).epsilon(1e-12));

  // all-zero activations
  IntCodeTensor a0{{1, 1, 2, 2}, {0, 0, 0, 0}, 1.0 / 15.0, false};
  IntCodeTensor w0{{1, 1, 1, 1}, {5}, 1.0 / 7.0, true};
  Tensor zero_out = fixedpoint_conv2d(a0, w0, 1, 0);
  for (double v : zero_out.data()) CHECK(v == 0.0);
}

TEST_CASE("loss_qw fixture values") {
  // dyadic data: u = alpha|W|+beta with c=0.5, d=0.5 -> alpha=1, beta=0
  QuantParams qp = qp_fixed(4, 0.5, 0.5, 1.0, 1.0);
  NormTargets tg{0.5, 0.25};
  // |W| = {0.25, 0.75} -> mean 0.5, population std 0.25 -> loss 0
  Tensor w = Tensor::from_data({2}, {0.25, -0.75});
  std::vector<Tensor> ws{w};
  std::vector<QuantParams> qps{qp};
  CHECK(loss_qw(ws, qps, tg).item() == 0.0);

  // shift mean by +0.1 -> loss 0.01
  Tensor w2 = Tensor::from_data({2}, {0.35, -0.85});
  ws[0] = w2;
  CHECK(loss_qw(ws, qps, tg).item() == doctest::Approx(0.01).epsilon(1e-12));

  CHECK_THROWS(loss_qw(std::vector<Tensor>{Tensor::scalar(1.0)}, qps, tg));
}

TEST_CASE("loss_qw gradient matches finite differences") {
  std::mt19937_64 rng(41);
  QuantParams qp = qp_fixed(4, 0.5, 0.4, 1.0, 1.0);
  qp.c_w.set_name("c_w");
  Tensor w = rand_tensor({30}, rng, -1, 1, true);
  NormTargets tg;
  auto loss_fn = [&]() {
    std::vector<Tensor> ws{w};
    std::vector<QuantParams> qps{qp};
    return loss_qw(ws, qps, tg);
  };
  CHECK(gradcheck(loss_fn, {w, qp.c_w, qp.d_w}) < 1e-4);
}

TEST_CASE("loss_qa hinge values and gradient") {
  // exact fixture: mean 0.5, std 0.25 -> mean+2std = 1.0
  Tensor act = Tensor::from_data({1, 1, 1, 2}, {0.25, 0.75});
  QuantParams qp = qp_fixed(4, 0.0, 0.0, 0.6, 0.4);  // c_a+d_a = 1.0
  // hinges: [1.0 - 1.0]+ = 0; sigma_i=0.4 > std=0.25 -> active? keep all off:
  // use d_a = 0.2, c_a = 0.8: top edge 1.0, sigma_i 0.2 <= 0.25, mu_i 0.6 > 0.5?
  qp = qp_fixed(4, 0.0, 0.0, 0.8, 0.2);
  std::vector<Tensor> acts{act};
  std::vector<QuantParams> qps{qp};
  // mu_i = 0.6 > mean 0.5 -> level hinge contributes 0.1
  CHECK(loss_qa(acts, qps).item() == doctest::Approx(0.1).epsilon(1e-12));

  // all hinges inactive: mu_i = 0.4 <= 0.5, sigma_i = 0.2 <= 0.25, top edge 1.0
  qps[0] = qp_fixed(4, 0.0, 0.0, 0.7, 0.3);
  // mean+2std = 1.0 == c_a+d_a -> 0; sigma_i=0.3 > std -> 0.05. adjust:
  qps[0] = qp_fixed(4, 0.0, 0.0, 0.75, 0.25);
  CHECK(loss_qa(acts, qps).item() == 0.0);

  // single active top hinge of exactly 0.2
  qps[0] = qp_fixed(4, 0.0, 0.0, 0.55, 0.25);
  CHECK(loss_qa(acts, qps).item() == doctest::Approx(0.2).epsilon(1e-12));

  CHECK_THROWS(loss_qa(std::vector<Tensor>{}, std::vector<QuantParams>{}));

  // gradient vs finite differences away from hinge kinks
  std::mt19937_64 rng(43);
  Tensor a = rand_tensor({1, 2, 3, 3}, rng, 0.0, 1.5, true);
  QuantParams q2 = qp_fixed(4, 0.0, 0.0, 0.9, 0.35);
  auto loss_fn = [&]() {
    std::vector<Tensor> as{a};
    std::vector<QuantParams> qs{q2};
    return loss_qa(as, qs);
  };
  CHECK(gradcheck(loss_fn, {a, q2.c_a, q2.d_a}) < 1e-4);
}

TEST_CASE("minimizing loss_qw drives the moments to the targets") {
  std::mt19937_64 rng(47);
  Tensor w = rand_tensor({200}, rng, -1.5, 1.5);
  QuantParams qp = QuantParams::from_weights(4, w.data());
  NormTargets tg;
  // gradient descent on (c_w, d_w) with the weights frozen
  for (int step = 0; step < 5000; ++step) {
    qp.c_w.zero_grad();
    qp.d_w.zero_grad();
    std::vector<Tensor> ws{w};
    std::vector<QuantParams> qps{qp};
    Tensor l = loss_qw(ws, qps, tg);
    backward(l);
    qp.c_w.mutable_data()[0] -= 0.05 * qp.c_w.grad()[0];
    qp.d_w.mutable_data()[0] -= 0.05 * qp.d_w.grad()[0];
    qp.reproject();
  }
  const double alpha = 0.5 / qp.d_w.item();
  const double beta = -0.5 * qp.c_w.item() / qp.d_w.item() + 0.5;
  double mean = 0.0;
  for (double v : w.data()) mean += alpha * std::fabs(v) + beta;
  mean /= w.numel();
  double var = 0.0;
  for (double v : w.data()) {
    const double d = alpha * std::fabs(v) + beta - mean;
    var += d * d;
  }
  const double stdv = std::sqrt(var / w.numel());
  CHECK(std::fabs(mean - tg.mu0) < 1e-3);
  CHECK(std::fabs(stdv - tg.sigma0) < 1e-3);
}
