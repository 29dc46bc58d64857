#pragma once

#include <span>
#include <vector>

#include "hybridnet/tensor.hpp"

namespace hybridnet {

// Layers ------------------------------------------------------------------

// input [N,C_in,H,W], weight [C_out,C_in,K,K] -> [N,C_out,H',W'].
Tensor conv2d(const Tensor& input, const Tensor& weight, int64_t stride,
              int64_t padding);
// input [N,F_in], weight [F_out,F_in] -> [N,F_out].
Tensor linear(const Tensor& input, const Tensor& weight);
Tensor relu(const Tensor& x);
// Non-overlapping or strided max pooling over [N,C,H,W].
Tensor maxpool2d(const Tensor& x, int64_t kernel, int64_t stride);

struct BatchNormState {
  Tensor gamma, beta;  // [C]
  std::vector<double> running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormState make(int64_t channels);
};
// Train mode normalizes with batch statistics and updates running stats;
// eval mode uses the running stats. Input is [N,C,H,W].
Tensor batchnorm(const Tensor& x, BatchNormState& bn, bool train);

// Elementwise / reductions -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& x);
Tensor sqrt_op(const Tensor& x);
Tensor abs_op(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor add_const(const Tensor& x, double c);
Tensor mul_const(const Tensor& x, double c);
// Broadcast a 1-element tensor over x (the only broadcasts supported besides
// the per-channel ones).
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor add_scalar(const Tensor& x, const Tensor& s);
Tensor sub_scalar(const Tensor& x, const Tensor& s);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Population standard deviation of all entries; numel must be >= 2.
Tensor std_all(const Tensor& x);
// x [N,C,H,W] or [N,C] scaled per channel by m [C].
Tensor channel_mul(const Tensor& x, const Tensor& m);
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);

// Losses -------------------------------------------------------------------

// Mean cross-entropy of logits [N,K] against integer labels in [0,K).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Fraction of argmax(logits) == label.
double accuracy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace hybridnet
