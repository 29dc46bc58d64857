#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hybridnet/hybrid_net.hpp"
#include "hybridnet/tensor.hpp"

// Shared helpers: random tensors, layer-spec factories, the
// finite-difference oracle, and a naive 6-loop convolution reference that
// stays independent of the kernel library.

namespace testutil {

inline hybridnet::LayerSpec conv_spec(int64_t c_in, int64_t c_out, int64_t k,
                                      int act_bits, int weight_bits,
                                      bool prunable) {
  hybridnet::LayerSpec s;
  s.kind = hybridnet::LayerKind::kConv;
  s.c_in = c_in;
  s.c_out = c_out;
  s.kernel = k;
  s.act_bits = act_bits;
  s.weight_bits = weight_bits;
  s.prunable = prunable;
  return s;
}

inline hybridnet::LayerSpec bn_spec() {
  hybridnet::LayerSpec s;
  s.kind = hybridnet::LayerKind::kBatchNorm;
  return s;
}

inline hybridnet::LayerSpec relu_spec() {
  hybridnet::LayerSpec s;
  s.kind = hybridnet::LayerKind::kRelu;
  return s;
}

inline hybridnet::LayerSpec pool_spec(int64_t k, int64_t stride) {
  hybridnet::LayerSpec s;
  s.kind = hybridnet::LayerKind::kPool;
  s.kernel = k;
  s.stride = stride;
  return s;
}

inline hybridnet::LayerSpec linear_spec(int64_t c_in, int64_t c_out,
                                        bool prunable = false) {
  hybridnet::LayerSpec s;
  s.kind = hybridnet::LayerKind::kLinear;
  s.c_in = c_in;
  s.c_out = c_out;
  s.prunable = prunable;
  return s;
}

inline double urand(std::mt19937_64& rng, double lo, double hi) {
  const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  return lo + u * (hi - lo);
}

inline hybridnet::Tensor rand_tensor(std::vector<int64_t> shape,
                                     std::mt19937_64& rng, double lo = -1.0,
                                     double hi = 1.0,
                                     bool requires_grad = false) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> data(n);
  for (auto& v : data) v = urand(rng, lo, hi);
  return hybridnet::Tensor::from_data(std::move(shape), std::move(data),
                                      requires_grad);
}

inline double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

// Central finite differences of a scalar-valued function against the
// analytic gradients of `leaves`. Returns the worst relative error.
inline double gradcheck(
    const std::function<hybridnet::Tensor(void)>& loss_fn,
    std::vector<hybridnet::Tensor> leaves, double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  hybridnet::Tensor loss = loss_fn();
  hybridnet::backward(loss);
  double worst = 0.0;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      const double saved = leaf.mutable_data()[i];
      leaf.mutable_data()[i] = saved + h;
      const double up = loss_fn().item();
      leaf.mutable_data()[i] = saved - h;
      const double down = loss_fn().item();
      leaf.mutable_data()[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[i], fd));
    }
  }
  return worst;
}

// Naive sliding-window convolution, written with plain index math.
inline std::vector<double> naive_conv2d(const std::vector<double>& in,
                                        const std::vector<double>& wt,
                                        int64_t n, int64_t c_in, int64_t h,
                                        int64_t w, int64_t c_out, int64_t k,
                                        int64_t stride, int64_t padding) {
  const int64_t ho = (h + 2 * padding - k) / stride + 1;
  const int64_t wo = (w + 2 * padding - k) / stride + 1;
  std::vector<double> out(n * c_out * ho * wo, 0.0);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t co = 0; co < c_out; ++co)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int64_t ci = 0; ci < c_in; ++ci)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t iy = oy * stride - padding + ky;
                const int64_t ix = ox * stride - padding + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += in[((b * c_in + ci) * h + iy) * w + ix] *
                       wt[((co * c_in + ci) * k + ky) * k + kx];
              }
          out[((b * c_out + co) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

}  // namespace testutil
