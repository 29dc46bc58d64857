// AVX2 variants. Per-output-element accumulation chains match the scalar
// reference kernels exactly (see kernels.hpp); region borders fall back to
// the shared scalar cell helpers.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>
#include <vector>

#include "hybridnet/kernels.hpp"
#include "kernels_detail.hpp"

namespace hybridnet::kernels {

namespace {

using detail::conv_bwd_input_cell;
using detail::conv_fwd_cell;
using detail::fixedpoint_cell;

inline __m256i tail_mask(int64_t active) {
  alignas(32) int64_t m[4];
  for (int64_t j = 0; j < 4; ++j) m[j] = j < active ? -1 : 0;
  return _mm256_load_si256(reinterpret_cast<const __m256i*>(m));
}

void conv2d_fwd_avx2(const double* in, const double* wt, double* out,
                     const Conv2dShape& s) {
  if (s.stride != 1) {
    scalar_table().conv2d_fwd(in, wt, out, s);
    return;
  }
  // ox range where the full kw window is in bounds.
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
        for (; ox + 3 <= hi && ox + 3 < s.w_out; ox += 4) {
          __m256d acc = _mm256_setzero_pd();
          for (int64_t ci = 0; ci < s.c_in; ++ci) {
            const double* ic = in + (n * s.c_in + ci) * s.h * s.w;
            const double* wc = wco + ci * s.k * s.k;
            for (int64_t kh = 0; kh < s.k; ++kh) {
              const int64_t iy = oy - s.padding + kh;
              if (iy < 0 || iy >= s.h) continue;
              const double* irow = ic + iy * s.w + ox - s.padding;
              const double* wrow = wc + kh * s.k;
              for (int64_t kw = 0; kw < s.k; ++kw) {
                const __m256d xv = _mm256_loadu_pd(irow + kw);
                const __m256d wv = _mm256_set1_pd(wrow[kw]);
                acc = _mm256_add_pd(acc, _mm256_mul_pd(xv, wv));
              }
            }
          }
          _mm256_storeu_pd(orow + ox, acc);
        }
        for (; ox < s.w_out; ++ox)
          orow[ox] = conv_fwd_cell(in, wt, s, n, co, oy, ox);
      }
    }
}

void conv2d_bwd_input_avx2(const double* gout, const double* wt, double* gin,
                           const Conv2dShape& s) {
  if (s.stride != 1) {
    scalar_table().conv2d_bwd_input(gout, wt, gin, s);
    return;
  }
  const int64_t lo = s.k - 1 - s.padding;
  const int64_t hi = s.w_out - 1 - s.padding;  // inclusive
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t ci = 0; ci < s.c_in; ++ci)
      for (int64_t iy = 0; iy < s.h; ++iy) {
        double* grow = gin + ((n * s.c_in + ci) * s.h + iy) * s.w;
        int64_t ix = 0;
        for (; ix < lo && ix < s.w; ++ix)
          grow[ix] = conv_bwd_input_cell(gout, wt, s, n, ci, iy, ix);
        for (; ix + 3 <= hi && ix + 3 < s.w; ix += 4) {
          __m256d acc = _mm256_setzero_pd();
          for (int64_t co = 0; co < s.c_out; ++co) {
            const double* gc = gout + (n * s.c_out + co) * s.h_out * s.w_out;
            const double* wc = wt + (co * s.c_in + ci) * s.k * s.k;
            for (int64_t kh = 0; kh < s.k; ++kh) {
              const int64_t ty = iy + s.padding - kh;
              if (ty < 0 || ty >= s.h_out) continue;
              const double* gr = gc + ty * s.w_out + ix + s.padding;
              const double* wrow = wc + kh * s.k;
              for (int64_t kw = 0; kw < s.k; ++kw) {
                const __m256d gv = _mm256_loadu_pd(gr - kw);
                const __m256d wv = _mm256_set1_pd(wrow[kw]);
                acc = _mm256_add_pd(acc, _mm256_mul_pd(gv, wv));
              }
            }
          }
          _mm256_storeu_pd(grow + ix, acc);
        }
        for (; ix < s.w; ++ix)
          grow[ix] = conv_bwd_input_cell(gout, wt, s, n, ci, iy, ix);
      }
}

void conv2d_bwd_weight_avx2(const double* gout, const double* in, double* gw,
                            const Conv2dShape& s) {
  // Lanes are 4 consecutive kw taps; per-ox lane masks keep out-of-row taps
  // at exact zero, which matches the scalar chain up to the sign of zero.
  const __m256i lane_iota = _mm256_setr_epi64x(0, 1, 2, 3);
  for (int64_t co = 0; co < s.c_out; ++co)
    for (int64_t ci = 0; ci < s.c_in; ++ci)
      for (int64_t kh = 0; kh < s.k; ++kh)
        for (int64_t kw0 = 0; kw0 < s.k; kw0 += 4) {
          const int64_t active = s.k - kw0 < 4 ? s.k - kw0 : 4;
          const __m256i amask = tail_mask(active);
          __m256d acc = _mm256_setzero_pd();
          for (int64_t n = 0; n < s.n; ++n) {
            const double* gc = gout + (n * s.c_out + co) * s.h_out * s.w_out;
            const double* ic = in + (n * s.c_in + ci) * s.h * s.w;
            for (int64_t oy = 0; oy < s.h_out; ++oy) {
              const int64_t iy = oy * s.stride - s.padding + kh;
              if (iy < 0 || iy >= s.h) continue;
              const double* grow = gc + oy * s.w_out;
              const double* irow = ic + iy * s.w;
              for (int64_t ox = 0; ox < s.w_out; ++ox) {
                const int64_t ixb = ox * s.stride - s.padding + kw0;
                __m256i mask = amask;
                if (ixb < 0 || ixb + active > s.w) {
                  const __m256i ixv =
                      _mm256_add_epi64(_mm256_set1_epi64x(ixb), lane_iota);
                  const __m256i ge0 = _mm256_cmpgt_epi64(
                      ixv, _mm256_set1_epi64x(-1));
                  const __m256i ltw = _mm256_cmpgt_epi64(
                      _mm256_set1_epi64x(s.w), ixv);
                  mask = _mm256_and_si256(mask, _mm256_and_si256(ge0, ltw));
                  if (_mm256_testz_si256(mask, mask)) continue;
                }
                const __m256d xv = _mm256_maskload_pd(irow + ixb, mask);
                const __m256d gv = _mm256_set1_pd(grow[ox]);
                acc = _mm256_add_pd(acc, _mm256_mul_pd(xv, gv));
              }
            }
          }
          _mm256_maskstore_pd(gw + ((co * s.c_in + ci) * s.k + kh) * s.k + kw0,
                              amask, acc);
        }
}

// Cached transpose scratch for linear_fwd; the framework is single-threaded
// per model so thread_local is enough.
thread_local std::vector<double> g_wt_scratch;

void linear_fwd_avx2(const double* in, const double* wt, double* out,
                     int64_t n, int64_t f_in, int64_t f_out) {
  std::vector<double>& wr = g_wt_scratch;
  wr.resize(static_cast<size_t>(f_in) * f_out);
  for (int64_t o = 0; o < f_out; ++o)
    for (int64_t f = 0; f < f_in; ++f) wr[f * f_out + o] = wt[o * f_in + f];
  for (int64_t i = 0; i < n; ++i) {
    const double* irow = in + i * f_in;
    double* orow = out + i * f_out;
    int64_t o = 0;
    for (; o + 8 <= f_out; o += 8) {
      __m256d acc0 = _mm256_setzero_pd();
      __m256d acc1 = _mm256_setzero_pd();
      for (int64_t f = 0; f < f_in; ++f) {
        const __m256d av = _mm256_set1_pd(irow[f]);
        const double* wrow = wr.data() + f * f_out + o;
        acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(av, _mm256_loadu_pd(wrow)));
        acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(av, _mm256_loadu_pd(wrow + 4)));
      }
      _mm256_storeu_pd(orow + o, acc0);
      _mm256_storeu_pd(orow + o + 4, acc1);
    }
    for (; o < f_out; o += 4) {
      const int64_t active = f_out - o < 4 ? f_out - o : 4;
      const __m256i mask = tail_mask(active);
      __m256d acc = _mm256_setzero_pd();
      for (int64_t f = 0; f < f_in; ++f) {
        const __m256d av = _mm256_set1_pd(irow[f]);
        const __m256d wv = _mm256_maskload_pd(wr.data() + f * f_out + o, mask);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(av, wv));
      }
      _mm256_maskstore_pd(orow + o, mask, acc);
    }
  }
}

void linear_bwd_input_avx2(const double* gout, const double* wt, double* gin,
                           int64_t n, int64_t f_in, int64_t f_out) {
  for (int64_t i = 0; i < n; ++i) {
    const double* grow = gout + i * f_out;
    double* irow = gin + i * f_in;
    for (int64_t f = 0; f < f_in; f += 4) {
      const int64_t active = f_in - f < 4 ? f_in - f : 4;
      const __m256i mask = tail_mask(active);
      __m256d acc = _mm256_setzero_pd();
      for (int64_t o = 0; o < f_out; ++o) {
        const __m256d gv = _mm256_set1_pd(grow[o]);
        const __m256d wv = _mm256_maskload_pd(wt + o * f_in + f, mask);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(gv, wv));
      }
      _mm256_maskstore_pd(irow + f, mask, acc);
    }
  }
}

void linear_bwd_weight_avx2(const double* gout, const double* in, double* gw,
                            int64_t n, int64_t f_in, int64_t f_out) {
  for (int64_t o = 0; o < f_out; ++o) {
    double* wrow = gw + o * f_in;
    for (int64_t f = 0; f < f_in; f += 4) {
      const int64_t active = f_in - f < 4 ? f_in - f : 4;
      const __m256i mask = tail_mask(active);
      __m256d acc = _mm256_setzero_pd();
      for (int64_t i = 0; i < n; ++i) {
        const __m256d gv = _mm256_set1_pd(gout[i * f_out + o]);
        const __m256d xv = _mm256_maskload_pd(in + i * f_in + f, mask);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(gv, xv));
      }
      _mm256_maskstore_pd(wrow + f, mask, acc);
    }
  }
}

void fixedpoint_conv2d_avx2(const int32_t* in, const int32_t* wt, int64_t* out,
                            const Conv2dShape& s) {
  int64_t* o = out;
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t co = 0; co < s.c_out; ++co) {
      const int32_t* wco = wt + co * s.c_in * s.k * s.k;
      for (int64_t oy = 0; oy < s.h_out; ++oy)
        for (int64_t ox = 0; ox < s.w_out; ++ox) {
          __m256i vacc = _mm256_setzero_si256();
          int64_t sacc = 0;
          const int64_t ixb = ox * s.stride - s.padding;
          const int64_t kw_lo = ixb < 0 ? -ixb : 0;
          const int64_t kw_hi = s.w - ixb < s.k ? s.w - ixb : s.k;
          for (int64_t ci = 0; ci < s.c_in; ++ci) {
            const int32_t* ic = in + (n * s.c_in + ci) * s.h * s.w;
            const int32_t* wc = wco + ci * s.k * s.k;
            for (int64_t kh = 0; kh < s.k; ++kh) {
              const int64_t iy = oy * s.stride - s.padding + kh;
              if (iy < 0 || iy >= s.h) continue;
              const int32_t* irow = ic + iy * s.w + ixb;
              const int32_t* wrow = wc + kh * s.k;
              int64_t kw = kw_lo;
              for (; kw + 4 <= kw_hi; kw += 4) {
                const __m256i av = _mm256_cvtepi32_epi64(_mm_loadu_si128(
                    reinterpret_cast<const __m128i*>(irow + kw)));
                const __m256i wv = _mm256_cvtepi32_epi64(_mm_loadu_si128(
                    reinterpret_cast<const __m128i*>(wrow + kw)));
                vacc = _mm256_add_epi64(vacc, _mm256_mul_epi32(av, wv));
              }
              for (; kw < kw_hi; ++kw)
                sacc += static_cast<int64_t>(irow[kw]) *
                        static_cast<int64_t>(wrow[kw]);
            }
          }
          alignas(32) int64_t lanes[4];
          _mm256_store_si256(reinterpret_cast<__m256i*>(lanes), vacc);
          *o++ = sacc + lanes[0] + lanes[1] + lanes[2] + lanes[3];
        }
    }
}

void ew_add_avx2(const double* a, const double* b, double* out, int64_t size) {
  int64_t i = 0;
  for (; i + 4 <= size; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < size; ++i) out[i] = a[i] + b[i];
}

void ew_mul_avx2(const double* a, const double* b, double* out, int64_t size) {
  int64_t i = 0;
  for (; i + 4 <= size; i += 4)
    _mm256_storeu_pd(out + i,
                     _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < size; ++i) out[i] = a[i] * b[i];
}

void relu_fwd_avx2(const double* x, double* out, int64_t size) {
  const __m256d zero = _mm256_setzero_pd();
  int64_t i = 0;
  for (; i + 4 <= size; i += 4)
    _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  for (; i < size; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_avx2(const double* x, const double* g, double* out, int64_t size) {
  const __m256d zero = _mm256_setzero_pd();
  int64_t i = 0;
  for (; i + 4 <= size; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(mask, _mm256_loadu_pd(g + i)));
  }
  for (; i < size; ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
}

void weight_transform_avx2(const double* x, double alpha, double beta,
                           double lo, double hi, double* out, int64_t size) {
  const __m256d valpha = _mm256_set1_pd(alpha);
  const __m256d vbeta = _mm256_set1_pd(beta);
  const __m256d vlo = _mm256_set1_pd(lo);
  const __m256d vhi = _mm256_set1_pd(hi);
  const __m256d vzero = _mm256_setzero_pd();
  const __m256d vone = _mm256_set1_pd(1.0);
  const __m256d vmone = _mm256_set1_pd(-1.0);
  const __m256d absmask = _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffLL));
  int64_t i = 0;
  for (; i + 4 <= size; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    const __m256d av = _mm256_and_pd(v, absmask);
    // sign(x): -1 for x < 0, +1 otherwise (so sign(-0.0) = +1, as in scalar)
    const __m256d neg = _mm256_cmp_pd(v, vzero, _CMP_LT_OQ);
    const __m256d sg = _mm256_blendv_pd(vone, vmone, neg);
    __m256d t = _mm256_mul_pd(valpha, av);
    t = _mm256_add_pd(t, vbeta);
    const __m256d mid = _mm256_mul_pd(sg, t);
    const __m256d upper = _mm256_cmp_pd(av, vhi, _CMP_GT_OQ);
    const __m256d lower = _mm256_cmp_pd(av, vlo, _CMP_LT_OQ);
    __m256d r = _mm256_blendv_pd(mid, vzero, lower);
    r = _mm256_blendv_pd(r, sg, upper);
    _mm256_storeu_pd(out + i, r);
  }
  if (i < size)
    scalar_table().weight_transform(x + i, alpha, beta, lo, hi, out + i, size - i);
}

void act_transform_avx2(const double* x, double alpha, double beta, double lo,
                        double hi, double* out, int64_t size) {
  const __m256d valpha = _mm256_set1_pd(alpha);
  const __m256d vbeta = _mm256_set1_pd(beta);
  const __m256d vlo = _mm256_set1_pd(lo);
  const __m256d vhi = _mm256_set1_pd(hi);
  const __m256d vzero = _mm256_setzero_pd();
  const __m256d vone = _mm256_set1_pd(1.0);
  int64_t i = 0;
  for (; i + 4 <= size; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    __m256d t = _mm256_mul_pd(valpha, v);
    t = _mm256_add_pd(t, vbeta);
    const __m256d upper = _mm256_cmp_pd(v, vhi, _CMP_GT_OQ);
    const __m256d lower = _mm256_cmp_pd(v, vlo, _CMP_LT_OQ);
    __m256d r = _mm256_blendv_pd(t, vzero, lower);
    r = _mm256_blendv_pd(r, vone, upper);
    _mm256_storeu_pd(out + i, r);
  }
  if (i < size)
    scalar_table().act_transform(x + i, alpha, beta, lo, hi, out + i, size - i);
}

void round_scale_avx2(const double* x, double levels, double inv_levels,
                      double* out, int64_t size) {
  // Nearest-even rounding plus a tie fix reproduces std::round (ties away
  // from zero) for every input the quantizers can produce.
  const __m256d vlev = _mm256_set1_pd(levels);
  const __m256d vinv = _mm256_set1_pd(inv_levels);
  const __m256d vhalf = _mm256_set1_pd(0.5);
  const __m256d vone = _mm256_set1_pd(1.0);
  const __m256d absmask = _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffLL));
  const __m256d signmask = _mm256_castsi256_pd(_mm256_set1_epi64x(
      static_cast<long long>(0x8000000000000000ULL)));
  int64_t i = 0;
  for (; i + 4 <= size; i += 4) {
    const __m256d t = _mm256_mul_pd(_mm256_loadu_pd(x + i), vlev);
    __m256d r = _mm256_round_pd(t, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    const __m256d diff = _mm256_sub_pd(t, r);
    const __m256d tie =
        _mm256_cmp_pd(_mm256_and_pd(diff, absmask), vhalf, _CMP_EQ_OQ);
    // A tie that nearest-even resolved toward zero must be pushed outward.
    const __m256d inward = _mm256_cmp_pd(_mm256_and_pd(r, absmask),
                                         _mm256_and_pd(t, absmask), _CMP_LT_OQ);
    const __m256d sgn1 = _mm256_or_pd(_mm256_and_pd(t, signmask), vone);
    r = _mm256_blendv_pd(r, _mm256_add_pd(r, sgn1), _mm256_and_pd(tie, inward));
    _mm256_storeu_pd(out + i, _mm256_mul_pd(r, vinv));
  }
  for (; i < size; ++i) out[i] = std::round(x[i] * levels) * inv_levels;
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table = {
      "avx2",
      conv2d_fwd_avx2,
      conv2d_bwd_input_avx2,
      conv2d_bwd_weight_avx2,
      linear_fwd_avx2,
      linear_bwd_input_avx2,
      linear_bwd_weight_avx2,
      fixedpoint_conv2d_avx2,
      ew_add_avx2,
      ew_mul_avx2,
      relu_fwd_avx2,
      relu_bwd_avx2,
      weight_transform_avx2,
      act_transform_avx2,
      round_scale_avx2,
  };
  return table;
}

}  // namespace hybridnet::kernels

#endif  // x86-64
