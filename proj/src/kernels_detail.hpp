#pragma once

#include <cmath>

#include "hybridnet/kernels.hpp"

// Per-element helpers shared between the scalar reference kernels and the
// SIMD variants (which fall back to these at region borders so the
// accumulation chains stay identical).

namespace hybridnet::kernels::detail {

inline double conv_fwd_cell(const double* in, const double* wt,
                            const Conv2dShape& s, int64_t n, int64_t co,
                            int64_t oy, int64_t ox) {
  double acc = 0.0;
  const double* wco = wt + co * s.c_in * s.k * s.k;
  for (int64_t ci = 0; ci < s.c_in; ++ci) {
    const double* ic = in + (n * s.c_in + ci) * s.h * s.w;
    const double* wc = wco + ci * s.k * s.k;
    for (int64_t kh = 0; kh < s.k; ++kh) {
      const int64_t iy = oy * s.stride - s.padding + kh;
      if (iy < 0 || iy >= s.h) continue;
      const double* irow = ic + iy * s.w;
      const double* wrow = wc + kh * s.k;
      for (int64_t kw = 0; kw < s.k; ++kw) {
        const int64_t ix = ox * s.stride - s.padding + kw;
        if (ix < 0 || ix >= s.w) continue;
        acc += irow[ix] * wrow[kw];
      }
    }
  }
  return acc;
}

inline double conv_bwd_input_cell(const double* gout, const double* wt,
                                  const Conv2dShape& s, int64_t n, int64_t ci,
                                  int64_t iy, int64_t ix) {
  double acc = 0.0;
  for (int64_t co = 0; co < s.c_out; ++co) {
    const double* gc = gout + (n * s.c_out + co) * s.h_out * s.w_out;
    const double* wc = wt + (co * s.c_in + ci) * s.k * s.k;
    for (int64_t kh = 0; kh < s.k; ++kh) {
      const int64_t ty = iy + s.padding - kh;
      if (ty < 0 || ty % s.stride != 0) continue;
      const int64_t oy = ty / s.stride;
      if (oy >= s.h_out) continue;
      const double* grow = gc + oy * s.w_out;
      const double* wrow = wc + kh * s.k;
      for (int64_t kw = 0; kw < s.k; ++kw) {
        const int64_t tx = ix + s.padding - kw;
        if (tx < 0 || tx % s.stride != 0) continue;
        const int64_t ox = tx / s.stride;
        if (ox >= s.w_out) continue;
        acc += grow[ox] * wrow[kw];
      }
    }
  }
  return acc;
}

inline int64_t fixedpoint_cell(const int32_t* in, const int32_t* wt,
                               const Conv2dShape& s, int64_t n, int64_t co,
                               int64_t oy, int64_t ox) {
  int64_t acc = 0;
  const int32_t* wco = wt + co * s.c_in * s.k * s.k;
  for (int64_t ci = 0; ci < s.c_in; ++ci) {
    const int32_t* ic = in + (n * s.c_in + ci) * s.h * s.w;
    const int32_t* wc = wco + ci * s.k * s.k;
    for (int64_t kh = 0; kh < s.k; ++kh) {
      const int64_t iy = oy * s.stride - s.padding + kh;
      if (iy < 0 || iy >= s.h) continue;
      const int32_t* irow = ic + iy * s.w;
      const int32_t* wrow = wc + kh * s.k;
      for (int64_t kw = 0; kw < s.k; ++kw) {
        const int64_t ix = ox * s.stride - s.padding + kw;
        if (ix < 0 || ix >= s.w) continue;
        acc += static_cast<int64_t>(irow[ix]) * static_cast<int64_t>(wrow[kw]);
      }
    }
  }
  return acc;
}

inline double round_away(double t) { return std::round(t); }

inline double sign_pm1(double x) { return x < 0.0 ? -1.0 : 1.0; }

}  // namespace hybridnet::kernels::detail
