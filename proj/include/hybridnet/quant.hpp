#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hybridnet/tensor.hpp"

// Learnable-interval quantizers with straight-through gradients, integer code
// emission, the exact fixed-point layer path, and the two normalization
// regularizers.

namespace hybridnet {

// Per-layer quantization intervals. alpha/beta are always derived from the
// current (c, d), never cached.
struct QuantParams {
  Tensor c_w, d_w;  // weight interval center / half-width, 1-element
  Tensor c_a, d_a;  // activation interval
  int n_bits = 4;

  static QuantParams make(int n_bits, double c_w, double d_w, double c_a,
                          double d_a, bool learnable = true);
  // Data-driven weight-interval init: c = mean|W|, d = 2*std|W|.
  static QuantParams from_weights(int n_bits, std::span<const double> w,
                                  double c_a = 1.0, double d_a = 1.0);
  // Clamps both half-widths to at least `floor` (call after optimizer steps).
  void reproject(double floor = 1e-4);
};

struct NormTargets {
  double mu0 = 0.5;
  double sigma0 = 0.25;
};

struct IntCodeTensor {
  std::vector<int64_t> shape;
  std::vector<int32_t> codes;
  double scale = 1.0;          // dequantization factor
  bool zero_symmetric = true;  // weights true, activations false

  int64_t numel() const { return static_cast<int64_t>(codes.size()); }
};

// Piecewise interval transforms (differentiable w.r.t. input and interval).
// Weights map to [-1,1], activations to [0,1]; values outside the interval
// carry no gradient, to the input or to (c, d).
Tensor transform_weight(const Tensor& w, const QuantParams& qp);
Tensor transform_activation(const Tensor& a, const QuantParams& qp);

// Rounding to integer codes (no autodiff). Ties round away from zero.
IntCodeTensor quantize_weight(const Tensor& w_hat, int n_bits);
IntCodeTensor quantize_activation(const Tensor& a_hat, int n_bits);
Tensor dequantize(const IntCodeTensor& t);

// round(x*levels)*inv_levels with a straight-through (identity) backward.
Tensor ste_round_levels(const Tensor& x, double levels);

enum class QuantKind { kWeight, kActivation };

// transform + round + dequantize; the value used inside the training graph.
Tensor fake_quant(const Tensor& x, const QuantParams& qp, QuantKind kind);

// Exact integer convolution over codes, scaled by the product of the two
// dequantization factors. Matches conv2d of the dequantized tensors with the
// scale factored out of the sum. Throws if the accumulator bound could
// overflow int64.
Tensor fixedpoint_conv2d(const IntCodeTensor& act, const IntCodeTensor& weight,
                         int64_t stride, int64_t padding);

// Weight normalization loss: per layer, squared deviation of mean/std of
// alpha*|W|+beta (unclamped) from the targets.
Tensor loss_qw(std::span<const Tensor> weights,
               std::span<const QuantParams> qps, const NormTargets& targets);

// Activation normalization loss over captured post-batchnorm activations.
// The internal (mu_i, sigma_i) are derived from the interval as
// mu_i = c_a - d_a and sigma_i = d_a.
Tensor loss_qa(std::span<const Tensor> bn_acts,
               std::span<const QuantParams> qps);

inline double weight_levels(int n_bits) {
  return static_cast<double>((1 << (n_bits - 1)) - 1);
}
inline double act_levels(int n_bits) {
  return static_cast<double>((1 << n_bits) - 1);
}

}  // namespace hybridnet
