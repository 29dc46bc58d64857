#include <cmath>
#include <stdexcept>

#include "hybridnet/kernels.hpp"
#include "kernels_detail.hpp"

namespace hybridnet::kernels {

Conv2dShape make_conv2d_shape(int64_t n, int64_t c_in, int64_t h, int64_t w,
                              int64_t c_out, int64_t k, int64_t stride,
                              int64_t padding) {
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  if (k > h + 2 * padding || k > w + 2 * padding)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  Conv2dShape s;
  s.n = n;
  s.c_in = c_in;
  s.h = h;
  s.w = w;
  s.c_out = c_out;
  s.k = k;
  s.stride = stride;
  s.padding = padding;
  s.h_out = (h + 2 * padding - k) / stride + 1;
  s.w_out = (w + 2 * padding - k) / stride + 1;
  return s;
}

namespace {

using detail::conv_bwd_input_cell;
using detail::conv_fwd_cell;
using detail::fixedpoint_cell;
using detail::sign_pm1;

void conv2d_fwd_scalar(const double* in, const double* wt, double* out,
                       const Conv2dShape& s) {
  double* o = out;
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t co = 0; co < s.c_out; ++co)
      for (int64_t oy = 0; oy < s.h_out; ++oy)
        for (int64_t ox = 0; ox < s.w_out; ++ox)
          *o++ = conv_fwd_cell(in, wt, s, n, co, oy, ox);
}

void conv2d_bwd_input_scalar(const double* gout, const double* wt, double* gin,
                             const Conv2dShape& s) {
  double* g = gin;
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t ci = 0; ci < s.c_in; ++ci)
      for (int64_t iy = 0; iy < s.h; ++iy)
        for (int64_t ix = 0; ix < s.w; ++ix)
          *g++ = conv_bwd_input_cell(gout, wt, s, n, ci, iy, ix);
}

void conv2d_bwd_weight_scalar(const double* gout, const double* in, double* gw,
                              const Conv2dShape& s) {
  for (int64_t co = 0; co < s.c_out; ++co)
    for (int64_t ci = 0; ci < s.c_in; ++ci)
      for (int64_t kh = 0; kh < s.k; ++kh)
        for (int64_t kw = 0; kw < s.k; ++kw) {
          double acc = 0.0;
          for (int64_t n = 0; n < s.n; ++n) {
            const double* gc = gout + (n * s.c_out + co) * s.h_out * s.w_out;
            const double* ic = in + (n * s.c_in + ci) * s.h * s.w;
            for (int64_t oy = 0; oy < s.h_out; ++oy) {
              const int64_t iy = oy * s.stride - s.padding + kh;
              if (iy < 0 || iy >= s.h) continue;
              const double* grow = gc + oy * s.w_out;
              const double* irow = ic + iy * s.w;
              for (int64_t ox = 0; ox < s.w_out; ++ox) {
                const int64_t ix = ox * s.stride - s.padding + kw;
                if (ix < 0 || ix >= s.w) continue;
                acc += grow[ox] * irow[ix];
              }
            }
          }
          gw[((co * s.c_in + ci) * s.k + kh) * s.k + kw] = acc;
        }
}

void linear_fwd_scalar(const double* in, const double* wt, double* out,
                       int64_t n, int64_t f_in, int64_t f_out) {
  for (int64_t i = 0; i < n; ++i) {
    const double* irow = in + i * f_in;
    for (int64_t o = 0; o < f_out; ++o) {
      const double* wrow = wt + o * f_in;
      double acc = 0.0;
      for (int64_t f = 0; f < f_in; ++f) acc += irow[f] * wrow[f];
      out[i * f_out + o] = acc;
    }
  }
}

void linear_bwd_input_scalar(const double* gout, const double* wt, double* gin,
                             int64_t n, int64_t f_in, int64_t f_out) {
  for (int64_t i = 0; i < n; ++i) {
    const double* grow = gout + i * f_out;
    for (int64_t f = 0; f < f_in; ++f) {
      double acc = 0.0;
      for (int64_t o = 0; o < f_out; ++o) acc += grow[o] * wt[o * f_in + f];
      gin[i * f_in + f] = acc;
    }
  }
}

void linear_bwd_weight_scalar(const double* gout, const double* in, double* gw,
                              int64_t n, int64_t f_in, int64_t f_out) {
  for (int64_t o = 0; o < f_out; ++o)
    for (int64_t f = 0; f < f_in; ++f) {
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) acc += gout[i * f_out + o] * in[i * f_in + f];
      gw[o * f_in + f] = acc;
    }
}

void fixedpoint_conv2d_scalar(const int32_t* in, const int32_t* wt,
                              int64_t* out, const Conv2dShape& s) {
  int64_t* o = out;
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t co = 0; co < s.c_out; ++co)
      for (int64_t oy = 0; oy < s.h_out; ++oy)
        for (int64_t ox = 0; ox < s.w_out; ++ox)
          *o++ = fixedpoint_cell(in, wt, s, n, co, oy, ox);
}

void ew_add_scalar(const double* a, const double* b, double* out, int64_t size) {
  for (int64_t i = 0; i < size; ++i) out[i] = a[i] + b[i];
}

void ew_mul_scalar(const double* a, const double* b, double* out, int64_t size) {
  for (int64_t i = 0; i < size; ++i) out[i] = a[i] * b[i];
}

void relu_fwd_scalar(const double* x, double* out, int64_t size) {
  for (int64_t i = 0; i < size; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_scalar(const double* x, const double* g, double* out,
                     int64_t size) {
  for (int64_t i = 0; i < size; ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
}

void weight_transform_scalar(const double* x, double alpha, double beta,
                             double lo, double hi, double* out, int64_t size) {
  for (int64_t i = 0; i < size; ++i) {
    const double v = x[i];
    const double av = std::fabs(v);
    const double sg = sign_pm1(v);
    double t = alpha * av;
    t = t + beta;
    const double mid = sg * t;
    out[i] = av > hi ? sg : (av < lo ? 0.0 : mid);
  }
}

void act_transform_scalar(const double* x, double alpha, double beta, double lo,
                          double hi, double* out, int64_t size) {
  for (int64_t i = 0; i < size; ++i) {
    const double v = x[i];
    double t = alpha * v;
    t = t + beta;
    out[i] = v > hi ? 1.0 : (v < lo ? 0.0 : t);
  }
}

void round_scale_scalar(const double* x, double levels, double inv_levels,
                        double* out, int64_t size) {
  for (int64_t i = 0; i < size; ++i)
    out[i] = std::round(x[i] * levels) * inv_levels;
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table = {
      "scalar",
      conv2d_fwd_scalar,
      conv2d_bwd_input_scalar,
      conv2d_bwd_weight_scalar,
      linear_fwd_scalar,
      linear_bwd_input_scalar,
      linear_bwd_weight_scalar,
      fixedpoint_conv2d_scalar,
      ew_add_scalar,
      ew_mul_scalar,
      relu_fwd_scalar,
      relu_bwd_scalar,
      weight_transform_scalar,
      act_transform_scalar,
      round_scale_scalar,
  };
  return table;
}

}  // namespace hybridnet::kernels
