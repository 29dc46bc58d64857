#include "hybridnet/quant.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "hybridnet/kernels.hpp"
#include "hybridnet/ops.hpp"

namespace hybridnet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

struct Interval {
  double c, d, alpha, beta, lo, hi;
};

Interval weight_interval(const QuantParams& qp) {
  const double c = qp.c_w.item(), d = qp.d_w.item();
  if (d <= 0.0) fail("transform_weight: d_w must be positive");
  return {c, d, 0.5 / d, -0.5 * c / d + 0.5, c - d, c + d};
}

Interval act_interval(const QuantParams& qp) {
  const double c = qp.c_a.item(), d = qp.d_a.item();
  if (d <= 0.0) fail("transform_activation: d_a must be positive");
  return {c, d, 0.5 / d, -0.5 * c / d + 0.5, c - d, c + d};
}

}  // namespace

QuantParams QuantParams::make(int n_bits, double c_w, double d_w, double c_a,
                              double d_a, bool learnable) {
  if (n_bits < 2) fail("QuantParams: n_bits must be >= 2");
  QuantParams qp;
  qp.n_bits = n_bits;
  qp.c_w = Tensor::scalar(c_w, learnable);
  qp.d_w = Tensor::scalar(d_w, learnable);
  qp.c_a = Tensor::scalar(c_a, learnable);
  qp.d_a = Tensor::scalar(d_a, learnable);
  return qp;
}

QuantParams QuantParams::from_weights(int n_bits, std::span<const double> w,
                                      double c_a, double d_a) {
  double s = 0.0;
  for (double v : w) s += std::fabs(v);
  const double mean = s / static_cast<double>(w.size());
  double var = 0.0;
  for (double v : w) {
    const double d = std::fabs(v) - mean;
    var += d * d;
  }
  const double stddev = std::sqrt(var / static_cast<double>(w.size()));
  QuantParams qp = make(n_bits, mean, std::max(2.0 * stddev, 1e-4), c_a, d_a);
  return qp;
}

void QuantParams::reproject(double floor) {
  for (Tensor* t : {&d_w, &d_a})
    if (t->defined() && t->mutable_data()[0] < floor)
      t->mutable_data()[0] = floor;
}

Tensor transform_weight(const Tensor& w, const QuantParams& qp) {
  const Interval iv = weight_interval(qp);
  std::vector<double> out(w.numel());
  kernels::active().weight_transform(w.data().data(), iv.alpha, iv.beta, iv.lo,
                                     iv.hi, out.data(), w.numel());
  return make_node(
      "transform_weight", w.shape(), std::move(out), {w, qp.c_w, qp.d_w},
      [iv](TensorImpl& o) {
        const auto& wi = o.node->inputs[0];
        const auto& ci = o.node->inputs[1];
        const auto& di = o.node->inputs[2];
        std::vector<double> gw(wi->data.size(), 0.0);
        double gc = 0.0, gd = 0.0;
        for (size_t i = 0; i < wi->data.size(); ++i) {
          const double v = wi->data[i];
          const double av = std::fabs(v);
          if (av > iv.hi || av < iv.lo) continue;  // clamp/prune: no gradient
          const double sg = v < 0.0 ? -1.0 : 1.0;
          const double g = o.grad[i];
          gw[i] = g * iv.alpha;
          gc += g * sg * (-0.5 / iv.d);
          gd += g * sg * 0.5 * (iv.c - av) / (iv.d * iv.d);
        }
        accumulate_grad(wi, gw);
        accumulate_grad(ci, std::span<const double>(&gc, 1));
        accumulate_grad(di, std::span<const double>(&gd, 1));
      });
}

Tensor transform_activation(const Tensor& a, const QuantParams& qp) {
  const Interval iv = act_interval(qp);
  std::vector<double> out(a.numel());
  kernels::active().act_transform(a.data().data(), iv.alpha, iv.beta, iv.lo,
                                  iv.hi, out.data(), a.numel());
  return make_node(
      "transform_activation", a.shape(), std::move(out), {a, qp.c_a, qp.d_a},
      [iv](TensorImpl& o) {
        const auto& ai = o.node->inputs[0];
        const auto& ci = o.node->inputs[1];
        const auto& di = o.node->inputs[2];
        std::vector<double> ga(ai->data.size(), 0.0);
        double gc = 0.0, gd = 0.0;
        for (size_t i = 0; i < ai->data.size(); ++i) {
          const double v = ai->data[i];
          if (v > iv.hi || v < iv.lo) continue;
          const double g = o.grad[i];
          ga[i] = g * iv.alpha;
          gc += g * (-0.5 / iv.d);
          gd += g * 0.5 * (iv.c - v) / (iv.d * iv.d);
        }
        accumulate_grad(ai, ga);
        accumulate_grad(ci, std::span<const double>(&gc, 1));
        accumulate_grad(di, std::span<const double>(&gd, 1));
      });
}

IntCodeTensor quantize_weight(const Tensor& w_hat, int n_bits) {
  if (n_bits < 2) fail("quantize_weight: n_bits must be >= 2");
  const double levels = weight_levels(n_bits);
  IntCodeTensor t;
  t.shape = w_hat.shape();
  t.codes.resize(w_hat.numel());
  t.scale = 1.0 / levels;
  t.zero_symmetric = true;
  for (int64_t i = 0; i < w_hat.numel(); ++i) {
    const double v = w_hat.data()[i];
    if (std::fabs(v) > 1.0 + 1e-9)
      fail("quantize_weight: input " + std::to_string(v) +
           " outside [-1,1]; transform contract violated");
    t.codes[i] = static_cast<int32_t>(std::round(v * levels));
  }
  return t;
}

IntCodeTensor quantize_activation(const Tensor& a_hat, int n_bits) {
  if (n_bits < 2) fail("quantize_activation: n_bits must be >= 2");
  const double levels = act_levels(n_bits);
  IntCodeTensor t;
  t.shape = a_hat.shape();
  t.codes.resize(a_hat.numel());
  t.scale = 1.0 / levels;
  t.zero_symmetric = false;
  for (int64_t i = 0; i < a_hat.numel(); ++i) {
    const double v = a_hat.data()[i];
    if (v < -1e-9 || v > 1.0 + 1e-9)
      fail("quantize_activation: input " + std::to_string(v) +
           " outside [0,1]; transform contract violated");
    t.codes[i] = static_cast<int32_t>(std::round(v * levels));
  }
  return t;
}

Tensor dequantize(const IntCodeTensor& t) {
  std::vector<double> data(t.codes.size());
  for (size_t i = 0; i < t.codes.size(); ++i)
    data[i] = static_cast<double>(t.codes[i]) * t.scale;
  return Tensor::from_data(t.shape, std::move(data));
}

Tensor ste_round_levels(const Tensor& x, double levels) {
  std::vector<double> out(x.numel());
  kernels::active().round_scale(x.data().data(), levels, 1.0 / levels,
                                out.data(), x.numel());
  return make_node("ste_round", x.shape(), std::move(out), {x},
                   [](TensorImpl& o) {
                     // straight-through: round is identity in the backward pass
                     accumulate_grad(o.node->inputs[0], o.grad);
                   });
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp, QuantKind kind) {
  if (kind == QuantKind::kWeight) {
    Tensor t = transform_weight(x, qp);
    return ste_round_levels(t, weight_levels(qp.n_bits));
  }
  Tensor t = transform_activation(x, qp);
  return ste_round_levels(t, act_levels(qp.n_bits));
}

Tensor fixedpoint_conv2d(const IntCodeTensor& act, const IntCodeTensor& weight,
                         int64_t stride, int64_t padding) {
  if (act.shape.size() != 4 || weight.shape.size() != 4)
    fail("fixedpoint_conv2d: tensors must be 4-d");
  if (act.shape[1] != weight.shape[1])
    fail("fixedpoint_conv2d: channel mismatch");
  const auto s = kernels::make_conv2d_shape(
      act.shape[0], act.shape[1], act.shape[2], act.shape[3], weight.shape[0],
      weight.shape[2], stride, padding);

  int64_t max_a = 1, max_w = 1;
  for (int32_t v : act.codes)
    max_a = std::max(max_a, std::abs(static_cast<int64_t>(v)));
  for (int32_t v : weight.codes)
    max_w = std::max(max_w, std::abs(static_cast<int64_t>(v)));
  const int64_t taps = s.c_in * s.k * s.k;
  if (taps > std::numeric_limits<int64_t>::max() / (max_a * max_w))
    fail("fixedpoint_conv2d: accumulator bound exceeds int64");

  std::vector<int64_t> acc(s.out_size());
  kernels::active().fixedpoint_conv2d(act.codes.data(), weight.codes.data(),
                                      acc.data(), s);
  const double combined = act.scale * weight.scale;
  std::vector<double> out(acc.size());
  for (size_t i = 0; i < acc.size(); ++i)
    out[i] = static_cast<double>(acc[i]) * combined;
  return Tensor::from_data({s.n, s.c_out, s.h_out, s.w_out}, std::move(out));
}

Tensor loss_qw(std::span<const Tensor> weights,
               std::span<const QuantParams> qps, const NormTargets& targets) {
  if (weights.empty() || weights.size() != qps.size())
    fail("loss_qw: one QuantParams per weight tensor required");
  if (!(targets.mu0 > 0.0 && targets.mu0 < 1.0) || !(targets.sigma0 > 0.0))
    fail("loss_qw: targets out of range");
  Tensor total = Tensor::scalar(0.0);
  const Tensor half = Tensor::scalar(0.5);
  for (size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].numel() < 2)
      fail("loss_qw: weight tensor " + std::to_string(l) +
           " has fewer than 2 elements; std undefined");
    const QuantParams& qp = qps[l];
    Tensor alpha = div(half, qp.d_w);
    Tensor beta = add_const(mul_const(div(qp.c_w, qp.d_w), -0.5), 0.5);
    Tensor u = add_scalar(mul_scalar(abs_op(weights[l]), alpha), beta);
    Tensor m = mean_all(u);
    Tensor sd = std_all(u);
    Tensor term = add(square(add_const(m, -targets.mu0)),
                      square(add_const(sd, -targets.sigma0)));
    total = add(total, term);
  }
  return total;
}

Tensor loss_qa(std::span<const Tensor> bn_acts,
               std::span<const QuantParams> qps) {
  if (bn_acts.empty()) fail("loss_qa: no activations captured");
  if (bn_acts.size() != qps.size())
    fail("loss_qa: one QuantParams per activation set required");
  Tensor total = Tensor::scalar(0.0);
  for (size_t l = 0; l < bn_acts.size(); ++l) {
    const QuantParams& qp = qps[l];
    Tensor m = mean_all(bn_acts[l]);
    Tensor sd = std_all(bn_acts[l]);
    Tensor top_edge = add(qp.c_a, qp.d_a);
    Tensor over = relu(sub(add(m, mul_const(sd, 2.0)), top_edge));
    // mu_i = c_a - d_a, sigma_i = d_a
    Tensor mu_i = sub(qp.c_a, qp.d_a);
    Tensor spread = relu(sub(qp.d_a, sd));
    Tensor level = relu(sub(mu_i, m));
    total = add(total, add(over, add(spread, level)));
  }
  return total;
}

}  // namespace hybridnet
