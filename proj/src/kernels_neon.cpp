// NEON variants (aarch64). Two f64 lanes; the conv/linear backward pair and
// the fixed-point conv stay on the scalar reference here.

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>
#include <vector>

#include "hybridnet/kernels.hpp"
#include "kernels_detail.hpp"

namespace hybridnet::kernels {

namespace {

using detail::conv_fwd_cell;

void conv2d_fwd_neon(const double* in, const double* wt, double* out,
                     const Conv2dShape& s) {
  if (s.stride != 1) {
    scalar_table().conv2d_fwd(in, wt, out, s);
    return;
  }
  const int64_t lo = s.padding;
  const int64_t hi = s.w - s.k + s.padding;  // inclusive
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t co = 0; co < s.c_out; ++co) {
      const double* wco = wt + co * s.c_in * s.k * s.k;
      for (int64_t oy = 0; oy < s.h_out; ++oy) {
        double* orow = out + ((n * s.c_out + co) * s.h_out + oy) * s.w_out;
        int64_t ox = 0;
        for (; ox < lo && ox < s.w_out; ++ox)
          orow[ox] = conv_fwd_cell(in, wt, s, n, co, oy, ox);
        for (; ox + 1 <= hi && ox + 1 < s.w_out; ox += 2) {
          float64x2_t acc = vdupq_n_f64(0.0);
          for (int64_t ci = 0; ci < s.c_in; ++ci) {
            const double* ic = in + (n * s.c_in + ci) * s.h * s.w;
            const double* wc = wco + ci * s.k * s.k;
            for (int64_t kh = 0; kh < s.k; ++kh) {
              const int64_t iy = oy - s.padding + kh;
              if (iy < 0 || iy >= s.h) continue;
              const double* irow = ic + iy * s.w + ox - s.padding;
              const double* wrow = wc + kh * s.k;
              for (int64_t kw = 0; kw < s.k; ++kw) {
                const float64x2_t xv = vld1q_f64(irow + kw);
                const float64x2_t wv = vdupq_n_f64(wrow[kw]);
                acc = vaddq_f64(acc, vmulq_f64(xv, wv));
              }
            }
          }
          vst1q_f64(orow + ox, acc);
        }
        for (; ox < s.w_out; ++ox)
          orow[ox] = conv_fwd_cell(in, wt, s, n, co, oy, ox);
      }
    }
}

void linear_fwd_neon(const double* in, const double* wt, double* out,
                     int64_t n, int64_t f_in, int64_t f_out) {
  thread_local std::vector<double> wr;
  wr.resize(static_cast<size_t>(f_in) * f_out);
  for (int64_t o = 0; o < f_out; ++o)
    for (int64_t f = 0; f < f_in; ++f) wr[f * f_out + o] = wt[o * f_in + f];
  for (int64_t i = 0; i < n; ++i) {
    const double* irow = in + i * f_in;
    double* orow = out + i * f_out;
    int64_t o = 0;
    for (; o + 2 <= f_out; o += 2) {
      float64x2_t acc = vdupq_n_f64(0.0);
      for (int64_t f = 0; f < f_in; ++f) {
        const float64x2_t av = vdupq_n_f64(irow[f]);
        acc = vaddq_f64(acc, vmulq_f64(av, vld1q_f64(wr.data() + f * f_out + o)));
      }
      vst1q_f64(orow + o, acc);
    }
    for (; o < f_out; ++o) {
      const double* wrow = wt + o * f_in;
      double acc = 0.0;
      for (int64_t f = 0; f < f_in; ++f) acc += irow[f] * wrow[f];
      orow[o] = acc;
    }
  }
}

void linear_bwd_input_neon(const double* gout, const double* wt, double* gin,
                           int64_t n, int64_t f_in, int64_t f_out) {
  for (int64_t i = 0; i < n; ++i) {
    const double* grow = gout + i * f_out;
    double* irow = gin + i * f_in;
    int64_t f = 0;
    for (; f + 2 <= f_in; f += 2) {
      float64x2_t acc = vdupq_n_f64(0.0);
      for (int64_t o = 0; o < f_out; ++o) {
        const float64x2_t gv = vdupq_n_f64(grow[o]);
        acc = vaddq_f64(acc, vmulq_f64(gv, vld1q_f64(wt + o * f_in + f)));
      }
      vst1q_f64(irow + f, acc);
    }
    for (; f < f_in; ++f) {
      double acc = 0.0;
      for (int64_t o = 0; o < f_out; ++o) acc += grow[o] * wt[o * f_in + f];
      irow[f] = acc;
    }
  }
}

void linear_bwd_weight_neon(const double* gout, const double* in, double* gw,
                            int64_t n, int64_t f_in, int64_t f_out) {
  for (int64_t o = 0; o < f_out; ++o) {
    double* wrow = gw + o * f_in;
    int64_t f = 0;
    for (; f + 2 <= f_in; f += 2) {
      float64x2_t acc = vdupq_n_f64(0.0);
      for (int64_t i = 0; i < n; ++i) {
        const float64x2_t gv = vdupq_n_f64(gout[i * f_out + o]);
        acc = vaddq_f64(acc, vmulq_f64(gv, vld1q_f64(in + i * f_in + f)));
      }
      vst1q_f64(wrow + f, acc);
    }
    for (; f < f_in; ++f) {
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) acc += gout[i * f_out + o] * in[i * f_in + f];
      wrow[f] = acc;
    }
  }
}

void ew_add_neon(const double* a, const double* b, double* out, int64_t size) {
  int64_t i = 0;
  for (; i + 2 <= size; i += 2)
    vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < size; ++i) out[i] = a[i] + b[i];
}

void ew_mul_neon(const double* a, const double* b, double* out, int64_t size) {
  int64_t i = 0;
  for (; i + 2 <= size; i += 2)
    vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < size; ++i) out[i] = a[i] * b[i];
}

void relu_fwd_neon(const double* x, double* out, int64_t size) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  int64_t i = 0;
  for (; i + 2 <= size; i += 2)
    vst1q_f64(out + i, vmaxq_f64(vld1q_f64(x + i), zero));
  for (; i < size; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_neon(const double* x, const double* g, double* out, int64_t size) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  int64_t i = 0;
  for (; i + 2 <= size; i += 2) {
    const uint64x2_t mask = vcgtq_f64(vld1q_f64(x + i), zero);
    const uint64x2_t gv = vreinterpretq_u64_f64(vld1q_f64(g + i));
    vst1q_f64(out + i, vreinterpretq_f64_u64(vandq_u64(mask, gv)));
  }
  for (; i < size; ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
}

void weight_transform_neon(const double* x, double alpha, double beta,
                           double lo, double hi, double* out, int64_t size) {
  const float64x2_t valpha = vdupq_n_f64(alpha);
  const float64x2_t vbeta = vdupq_n_f64(beta);
  const float64x2_t vlo = vdupq_n_f64(lo);
  const float64x2_t vhi = vdupq_n_f64(hi);
  const float64x2_t vzero = vdupq_n_f64(0.0);
  const float64x2_t vone = vdupq_n_f64(1.0);
  const float64x2_t vmone = vdupq_n_f64(-1.0);
  int64_t i = 0;
  for (; i + 2 <= size; i += 2) {
    const float64x2_t v = vld1q_f64(x + i);
    const float64x2_t av = vabsq_f64(v);
    const uint64x2_t neg = vcltq_f64(v, vzero);
    const float64x2_t sg = vbslq_f64(neg, vmone, vone);
    float64x2_t t = vmulq_f64(valpha, av);
    t = vaddq_f64(t, vbeta);
    const float64x2_t mid = vmulq_f64(sg, t);
    const uint64x2_t upper = vcgtq_f64(av, vhi);
    const uint64x2_t lower = vcltq_f64(av, vlo);
    float64x2_t r = vbslq_f64(lower, vzero, mid);
    r = vbslq_f64(upper, sg, r);
    vst1q_f64(out + i, r);
  }
  if (i < size)
    scalar_table().weight_transform(x + i, alpha, beta, lo, hi, out + i, size - i);
}

void act_transform_neon(const double* x, double alpha, double beta, double lo,
                        double hi, double* out, int64_t size) {
  const float64x2_t valpha = vdupq_n_f64(alpha);
  const float64x2_t vbeta = vdupq_n_f64(beta);
  const float64x2_t vlo = vdupq_n_f64(lo);
  const float64x2_t vhi = vdupq_n_f64(hi);
  const float64x2_t vzero = vdupq_n_f64(0.0);
  const float64x2_t vone = vdupq_n_f64(1.0);
  int64_t i = 0;
  for (; i + 2 <= size; i += 2) {
    const float64x2_t v = vld1q_f64(x + i);
    float64x2_t t = vmulq_f64(valpha, v);
    t = vaddq_f64(t, vbeta);
    const uint64x2_t upper = vcgtq_f64(v, vhi);
    const uint64x2_t lower = vcltq_f64(v, vlo);
    float64x2_t r = vbslq_f64(lower, vzero, t);
    r = vbslq_f64(upper, vone, r);
    vst1q_f64(out + i, r);
  }
  if (i < size)
    scalar_table().act_transform(x + i, alpha, beta, lo, hi, out + i, size - i);
}

void round_scale_neon(const double* x, double levels, double inv_levels,
                      double* out, int64_t size) {
  const float64x2_t vlev = vdupq_n_f64(levels);
  const float64x2_t vinv = vdupq_n_f64(inv_levels);
  const float64x2_t vhalf = vdupq_n_f64(0.5);
  const uint64x2_t sign = vdupq_n_u64(0x8000000000000000ULL);
  const uint64x2_t onebits = vreinterpretq_u64_f64(vdupq_n_f64(1.0));
  int64_t i = 0;
  for (; i + 2 <= size; i += 2) {
    const float64x2_t t = vmulq_f64(vld1q_f64(x + i), vlev);
    float64x2_t r = vrndnq_f64(t);  // nearest even
    const float64x2_t diff = vsubq_f64(t, r);
    const uint64x2_t tie = vceqq_f64(vabsq_f64(diff), vhalf);
    const uint64x2_t inward = vcltq_f64(vabsq_f64(r), vabsq_f64(t));
    const float64x2_t sgn1 = vreinterpretq_f64_u64(
        vorrq_u64(vandq_u64(vreinterpretq_u64_f64(t), sign), onebits));
    r = vbslq_f64(vandq_u64(tie, inward), vaddq_f64(r, sgn1), r);
    vst1q_f64(out + i, vmulq_f64(r, vinv));
  }
  for (; i < size; ++i) out[i] = std::round(x[i] * levels) * inv_levels;
}

}  // namespace

const KernelTable& neon_table() {
  static const KernelTable table = [] {
    KernelTable t = scalar_table();
    t.name = "neon";
    t.conv2d_fwd = conv2d_fwd_neon;
    t.linear_fwd = linear_fwd_neon;
    t.linear_bwd_input = linear_bwd_input_neon;
    t.linear_bwd_weight = linear_bwd_weight_neon;
    t.ew_add = ew_add_neon;
    t.ew_mul = ew_mul_neon;
    t.relu_fwd = relu_fwd_neon;
    t.relu_bwd = relu_bwd_neon;
    t.weight_transform = weight_transform_neon;
    t.act_transform = act_transform_neon;
    t.round_scale = round_scale_neon;
    return t;
  }();
  return table;
}

}  // namespace hybridnet::kernels

#endif  // aarch64
