#pragma once

#include <cstdint>
#include <string>

// Numeric inner-loop kernels. Every entry point has a scalar reference
// implementation; AVX2 (x86-64) and NEON (aarch64) variants are selected at
// runtime behind the same table.
//
// Equivalence contract for the floating-point kernels: a SIMD variant must
// visit each output element's operand pairs in the same order as the scalar
// reference and use plain mul/add (no FMA), so results compare equal
// elementwise against the scalar kernel. Integer kernels are exact and may
// reassociate freely. tests/test_kernels.cpp asserts this for every backend
// available on the host.

namespace hybridnet::kernels {

struct Conv2dShape {
  int64_t n = 0, c_in = 0, h = 0, w = 0;
  int64_t c_out = 0, k = 0;
  int64_t stride = 1, padding = 0;
  int64_t h_out = 0, w_out = 0;

  int64_t in_size() const { return n * c_in * h * w; }
  int64_t weight_size() const { return c_out * c_in * k * k; }
  int64_t out_size() const { return n * c_out * h_out * w_out; }
};

// Computes output spatial dims; throws std::invalid_argument on impossible
// geometry (kernel larger than padded input, stride < 1).
Conv2dShape make_conv2d_shape(int64_t n, int64_t c_in, int64_t h, int64_t w,
                              int64_t c_out, int64_t k, int64_t stride,
                              int64_t padding);

struct KernelTable {
  const char* name;

  // out[n,co,oy,ox] = sum over (ci,kh,kw) of in[n,ci,iy,ix] * wt[co,ci,kh,kw],
  // taps outside the input skipped. Accumulation order: ci, kh, kw ascending.
  void (*conv2d_fwd)(const double* in, const double* wt, double* out,
                     const Conv2dShape& s);
  // gin[n,ci,iy,ix] = sum over (co,kh,kw); gather form, order co, kh, kw.
  void (*conv2d_bwd_input)(const double* gout, const double* wt, double* gin,
                           const Conv2dShape& s);
  // gw[co,ci,kh,kw] = sum over (n,oy,ox) ascending.
  void (*conv2d_bwd_weight)(const double* gout, const double* in, double* gw,
                            const Conv2dShape& s);

  // out[i,o] = sum_f in[i,f] * wt[o,f]; order f ascending.
  void (*linear_fwd)(const double* in, const double* wt, double* out,
                     int64_t n, int64_t f_in, int64_t f_out);
  // gin[i,f] = sum_o gout[i,o] * wt[o,f]; order o ascending.
  void (*linear_bwd_input)(const double* gout, const double* wt, double* gin,
                           int64_t n, int64_t f_in, int64_t f_out);
  // gw[o,f] = sum_i gout[i,o] * in[i,f]; order i ascending.
  void (*linear_bwd_weight)(const double* gout, const double* in, double* gw,
                            int64_t n, int64_t f_in, int64_t f_out);

  // Exact integer convolution over quantization codes. Caller guards the
  // accumulator range.
  void (*fixedpoint_conv2d)(const int32_t* in, const int32_t* wt, int64_t* out,
                            const Conv2dShape& s);

  void (*ew_add)(const double* a, const double* b, double* out, int64_t size);
  void (*ew_mul)(const double* a, const double* b, double* out, int64_t size);
  void (*relu_fwd)(const double* x, double* out, int64_t size);
  // out[i] = x[i] > 0 ? g[i] : 0
  void (*relu_bwd)(const double* x, const double* g, double* out, int64_t size);

  // Clipped affine maps used by the quantizer transforms. The caller derives
  // alpha/beta/lo/hi once so that all backends share identical constants.
  //   weight: |x| > hi -> sign(x); |x| < lo -> 0; else sign(x)*(alpha*|x|+beta)
  //   act:     x > hi -> 1;         x < lo -> 0; else alpha*x+beta
  // sign(x) is -1 for x < 0 and +1 otherwise.
  void (*weight_transform)(const double* x, double alpha, double beta,
                           double lo, double hi, double* out, int64_t size);
  void (*act_transform)(const double* x, double alpha, double beta, double lo,
                        double hi, double* out, int64_t size);

  // out[i] = round(x[i] * levels) * inv_levels, ties away from zero.
  void (*round_scale)(const double* x, double levels, double inv_levels,
                      double* out, int64_t size);
};

enum class Backend { kScalar, kAvx2, kNeon };

const KernelTable& scalar_table();
const KernelTable& active();
Backend active_backend();
bool backend_available(Backend b);
// Switches the active table; returns false (and leaves it unchanged) if the
// backend is not available on this host.
bool set_backend(Backend b);
std::string backend_name(Backend b);
// Best available backend, honoring HYBRIDNET_KERNEL=scalar|avx2|neon|auto.
Backend detect_backend();

}  // namespace hybridnet::kernels
