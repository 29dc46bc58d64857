#include "hybridnet/ops.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hybridnet/kernels.hpp"

namespace hybridnet {

namespace {

using kernels::Conv2dShape;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, int64_t stride,
              int64_t padding) {
  if (input.shape().size() != 4) fail("conv2d: input must be 4-d (N,C,H,W)");
  if (weight.shape().size() != 4)
    fail("conv2d: weight must be 4-d (C_out,C_in,K,K)");
  if (weight.dim(2) != weight.dim(3)) fail("conv2d: kernel must be square");
  if (input.dim(1) != weight.dim(1))
    fail("conv2d: input channels " + shape_str(input.shape()) +
         " incompatible with weight " + shape_str(weight.shape()));
  const Conv2dShape s = kernels::make_conv2d_shape(
      input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
      weight.dim(2), stride, padding);
  std::vector<double> out(s.out_size());
  kernels::active().conv2d_fwd(input.data().data(), weight.data().data(),
                               out.data(), s);
  return make_node(
      "conv2d", {s.n, s.c_out, s.h_out, s.w_out}, std::move(out),
      {input, weight}, [s](TensorImpl& o) {
        const auto& in = o.node->inputs[0];
        const auto& wt = o.node->inputs[1];
        if (in->needs_grad) {
          std::vector<double> gin(s.in_size());
          kernels::active().conv2d_bwd_input(o.grad.data(), wt->data.data(),
                                             gin.data(), s);
          accumulate_grad(in, gin);
        }
        if (wt->needs_grad) {
          std::vector<double> gw(s.weight_size());
          kernels::active().conv2d_bwd_weight(o.grad.data(), in->data.data(),
                                              gw.data(), s);
          accumulate_grad(wt, gw);
        }
      });
}

Tensor linear(const Tensor& input, const Tensor& weight) {
  if (input.shape().size() != 2) fail("linear: input must be 2-d (N,F_in)");
  if (weight.shape().size() != 2)
    fail("linear: weight must be 2-d (F_out,F_in)");
  if (input.dim(1) != weight.dim(1))
    fail("linear: inner dims mismatch, input " + shape_str(input.shape()) +
         " vs weight " + shape_str(weight.shape()));
  const int64_t n = input.dim(0), f_in = input.dim(1), f_out = weight.dim(0);
  std::vector<double> out(n * f_out);
  kernels::active().linear_fwd(input.data().data(), weight.data().data(),
                               out.data(), n, f_in, f_out);
  return make_node(
      "linear", {n, f_out}, std::move(out), {input, weight},
      [n, f_in, f_out](TensorImpl& o) {
        const auto& in = o.node->inputs[0];
        const auto& wt = o.node->inputs[1];
        if (in->needs_grad) {
          std::vector<double> gin(n * f_in);
          kernels::active().linear_bwd_input(o.grad.data(), wt->data.data(),
                                             gin.data(), n, f_in, f_out);
          accumulate_grad(in, gin);
        }
        if (wt->needs_grad) {
          std::vector<double> gw(f_out * f_in);
          kernels::active().linear_bwd_weight(o.grad.data(), in->data.data(),
                                              gw.data(), n, f_in, f_out);
          accumulate_grad(wt, gw);
        }
      });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  kernels::active().relu_fwd(x.data().data(), out.data(), x.numel());
  return make_node("relu", x.shape(), std::move(out), {x}, [](TensorImpl& o) {
    const auto& in = o.node->inputs[0];
    std::vector<double> gin(in->data.size());
    kernels::active().relu_bwd(in->data.data(), o.grad.data(), gin.data(),
                               static_cast<int64_t>(gin.size()));
    accumulate_grad(in, gin);
  });
}

Tensor maxpool2d(const Tensor& x, int64_t kernel, int64_t stride) {
  if (x.shape().size() != 4) fail("maxpool2d: input must be 4-d");
  if (kernel < 1 || stride < 1) fail("maxpool2d: kernel and stride must be >= 1");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel > h || kernel > w) fail("maxpool2d: kernel larger than input");
  const int64_t ho = (h - kernel) / stride + 1;
  const int64_t wo = (w - kernel) / stride + 1;
  std::vector<double> out(n * c * ho * wo);
  std::vector<int64_t> argmax(out.size());
  const double* xd = x.data().data();
  int64_t idx = 0;
  for (int64_t i = 0; i < n * c; ++i) {
    const double* plane = xd + i * h * w;
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox, ++idx) {
        int64_t best = (oy * stride) * w + ox * stride;
        double bv = plane[best];
        for (int64_t ky = 0; ky < kernel; ++ky)
          for (int64_t kx = 0; kx < kernel; ++kx) {
            const int64_t p = (oy * stride + ky) * w + ox * stride + kx;
            if (plane[p] > bv) {
              bv = plane[p];
              best = p;
            }
          }
        out[idx] = bv;
        argmax[idx] = i * h * w + best;
      }
  }
  return make_node("maxpool2d", {n, c, ho, wo}, std::move(out), {x},
                   [argmax = std::move(argmax)](TensorImpl& o) {
                     const auto& in = o.node->inputs[0];
                     if (!in->needs_grad) return;
                     std::vector<double> gin(in->data.size(), 0.0);
                     for (size_t i = 0; i < argmax.size(); ++i)
                       gin[argmax[i]] += o.grad[i];
                     accumulate_grad(in, gin);
                   });
}

BatchNormState BatchNormState::make(int64_t channels) {
  BatchNormState bn;
  bn.gamma = Tensor::full({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.running_mean.assign(channels, 0.0);
  bn.running_var.assign(channels, 1.0);
  return bn;
}

Tensor batchnorm(const Tensor& x, BatchNormState& bn, bool train) {
  if (x.shape().size() != 4) fail("batchnorm: input must be 4-d");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (bn.gamma.numel() != c) fail("batchnorm: channel count mismatch");
  const int64_t m = n * h * w;  // samples per channel
  const int64_t plane = h * w;
  const double* xd = x.data().data();

  std::vector<double> mean(c), inv_std(c);
  if (train) {
    if (m < 2) fail("batchnorm: train mode needs at least 2 samples per channel");
    for (int64_t ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* p = xd + (i * c + ci) * plane;
        for (int64_t j = 0; j < plane; ++j) s += p[j];
      }
      const double mu = s / m;
      double v = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* p = xd + (i * c + ci) * plane;
        for (int64_t j = 0; j < plane; ++j) {
          const double d = p[j] - mu;
          v += d * d;
        }
      }
      const double var = v / m;
      mean[ci] = mu;
      inv_std[ci] = 1.0 / std::sqrt(var + bn.eps);
      bn.running_mean[ci] =
          (1.0 - bn.momentum) * bn.running_mean[ci] + bn.momentum * mu;
      bn.running_var[ci] = (1.0 - bn.momentum) * bn.running_var[ci] +
                           bn.momentum * var * m / (m - 1);
    }
  } else {
    for (int64_t ci = 0; ci < c; ++ci) {
      mean[ci] = bn.running_mean[ci];
      inv_std[ci] = 1.0 / std::sqrt(bn.running_var[ci] + bn.eps);
    }
  }

  std::vector<double> xhat(x.numel());
  std::vector<double> out(x.numel());
  const double* gd = bn.gamma.data().data();
  const double* bd = bn.beta.data().data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = xd + (i * c + ci) * plane;
      double* xh = xhat.data() + (i * c + ci) * plane;
      double* op = out.data() + (i * c + ci) * plane;
      for (int64_t j = 0; j < plane; ++j) {
        xh[j] = (p[j] - mean[ci]) * inv_std[ci];
        op[j] = gd[ci] * xh[j] + bd[ci];
      }
    }

  return make_node(
      "batchnorm", x.shape(), std::move(out), {x, bn.gamma, bn.beta},
      [n, c, plane, m, train, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](TensorImpl& o) {
        const auto& in = o.node->inputs[0];
        const auto& gamma = o.node->inputs[1];
        const auto& beta = o.node->inputs[2];
        std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ci = 0; ci < c; ++ci) {
            const double* g = o.grad.data() + (i * c + ci) * plane;
            const double* xh = xhat.data() + (i * c + ci) * plane;
            for (int64_t j = 0; j < plane; ++j) {
              dgamma[ci] += g[j] * xh[j];
              dbeta[ci] += g[j];
            }
          }
        accumulate_grad(gamma, dgamma);
        accumulate_grad(beta, dbeta);
        if (!in->needs_grad) return;
        std::vector<double> gin(in->data.size());
        const double* gv = gamma->data.data();
        if (train) {
          // dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat)) per channel
          for (int64_t ci = 0; ci < c; ++ci) {
            const double mg = dbeta[ci] / m;
            const double mgx = dgamma[ci] / m;
            for (int64_t i = 0; i < n; ++i) {
              const double* g = o.grad.data() + (i * c + ci) * plane;
              const double* xh = xhat.data() + (i * c + ci) * plane;
              double* gi = gin.data() + (i * c + ci) * plane;
              for (int64_t j = 0; j < plane; ++j)
                gi[j] = gv[ci] * inv_std[ci] * (g[j] - mg - xh[j] * mgx);
            }
          }
        } else {
          for (int64_t i = 0; i < n; ++i)
            for (int64_t ci = 0; ci < c; ++ci) {
              const double* g = o.grad.data() + (i * c + ci) * plane;
              double* gi = gin.data() + (i * c + ci) * plane;
              for (int64_t j = 0; j < plane; ++j)
                gi[j] = gv[ci] * inv_std[ci] * g[j];
            }
        }
        accumulate_grad(in, gin);
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  kernels::active().ew_add(a.data().data(), b.data().data(), out.data(),
                           a.numel());
  return make_node("add", a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
    accumulate_grad(o.node->inputs[0], o.grad);
    accumulate_grad(o.node->inputs[1], o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_node("sub", a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
    accumulate_grad(o.node->inputs[0], o.grad);
    const auto& b_in = o.node->inputs[1];
    if (!b_in->needs_grad) return;
    std::vector<double> gb(o.grad.size());
    for (size_t i = 0; i < gb.size(); ++i) gb[i] = -o.grad[i];
    accumulate_grad(b_in, gb);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  kernels::active().ew_mul(a.data().data(), b.data().data(), out.data(),
                           a.numel());
  return make_node("mul", a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
    const auto& a_in = o.node->inputs[0];
    const auto& b_in = o.node->inputs[1];
    std::vector<double> tmp(o.grad.size());
    if (a_in->needs_grad) {
      for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = o.grad[i] * b_in->data[i];
      accumulate_grad(a_in, tmp);
    }
    if (b_in->needs_grad) {
      for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = o.grad[i] * a_in->data[i];
      accumulate_grad(b_in, tmp);
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] / b.data()[i];
  return make_node("div", a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
    const auto& a_in = o.node->inputs[0];
    const auto& b_in = o.node->inputs[1];
    std::vector<double> tmp(o.grad.size());
    if (a_in->needs_grad) {
      for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = o.grad[i] / b_in->data[i];
      accumulate_grad(a_in, tmp);
    }
    if (b_in->needs_grad) {
      for (size_t i = 0; i < tmp.size(); ++i)
        tmp[i] = -o.grad[i] * a_in->data[i] / (b_in->data[i] * b_in->data[i]);
      accumulate_grad(b_in, tmp);
    }
  });
}

Tensor square(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x.data()[i] * x.data()[i];
  return make_node("square", x.shape(), std::move(out), {x}, [](TensorImpl& o) {
    const auto& in = o.node->inputs[0];
    std::vector<double> g(o.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * in->data[i] * o.grad[i];
    accumulate_grad(in, g);
  });
}

Tensor sqrt_op(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::sqrt(x.data()[i]);
  return make_node("sqrt", x.shape(), std::move(out), {x}, [](TensorImpl& o) {
    const auto& in = o.node->inputs[0];
    std::vector<double> g(o.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = 0.5 * o.grad[i] / o.data[i];
    accumulate_grad(in, g);
  });
}

Tensor abs_op(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::fabs(x.data()[i]);
  return make_node("abs", x.shape(), std::move(out), {x}, [](TensorImpl& o) {
    const auto& in = o.node->inputs[0];
    std::vector<double> g(o.grad.size());
    for (size_t i = 0; i < g.size(); ++i) {
      const double v = in->data[i];
      g[i] = v > 0.0 ? o.grad[i] : (v < 0.0 ? -o.grad[i] : 0.0);
    }
    accumulate_grad(in, g);
  });
}

Tensor neg(const Tensor& x) { return mul_const(x, -1.0); }

Tensor add_const(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x.data()[i] + c;
  return make_node("add_const", x.shape(), std::move(out), {x},
                   [](TensorImpl& o) { accumulate_grad(o.node->inputs[0], o.grad); });
}

Tensor mul_const(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x.data()[i] * c;
  return make_node("mul_const", x.shape(), std::move(out), {x},
                   [c](TensorImpl& o) {
                     const auto& in = o.node->inputs[0];
                     std::vector<double> g(o.grad.size());
                     for (size_t i = 0; i < g.size(); ++i) g[i] = c * o.grad[i];
                     accumulate_grad(in, g);
                   });
}

namespace {

Tensor broadcast_scalar_op(const char* name, const Tensor& x, const Tensor& s,
                           bool is_mul) {
  if (s.numel() != 1) fail(std::string(name) + ": broadcast operand must be scalar");
  const double sv = s.data()[0];
  std::vector<double> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i)
    out[i] = is_mul ? x.data()[i] * sv : x.data()[i] + sv;
  return make_node(name, x.shape(), std::move(out), {x, s},
                   [is_mul, sv](TensorImpl& o) {
                     const auto& xi = o.node->inputs[0];
                     const auto& si = o.node->inputs[1];
                     if (xi->needs_grad) {
                       std::vector<double> g(o.grad.size());
                       for (size_t i = 0; i < g.size(); ++i)
                         g[i] = is_mul ? o.grad[i] * sv : o.grad[i];
                       accumulate_grad(xi, g);
                     }
                     if (si->needs_grad) {
                       double gs = 0.0;
                       for (size_t i = 0; i < o.grad.size(); ++i)
                         gs += is_mul ? o.grad[i] * xi->data[i] : o.grad[i];
                       accumulate_grad(si, std::span<const double>(&gs, 1));
                     }
                   });
}

}  // namespace

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  return broadcast_scalar_op("mul_scalar", x, s, true);
}

Tensor add_scalar(const Tensor& x, const Tensor& s) {
  return broadcast_scalar_op("add_scalar", x, s, false);
}

Tensor sub_scalar(const Tensor& x, const Tensor& s) {
  return add_scalar(x, neg(s));
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_node("sum", {1}, {s}, {x}, [](TensorImpl& o) {
    const auto& in = o.node->inputs[0];
    std::vector<double> g(in->data.size(), o.grad[0]);
    accumulate_grad(in, g);
  });
}

Tensor mean_all(const Tensor& x) {
  return mul_const(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor std_all(const Tensor& x) {
  if (x.numel() < 2) fail("std_all: need at least 2 elements");
  Tensor centered = sub_scalar(x, mean_all(x));
  return sqrt_op(mean_all(square(centered)));
}

Tensor channel_mul(const Tensor& x, const Tensor& m) {
  const size_t nd = x.shape().size();
  if (nd != 2 && nd != 4) fail("channel_mul: input must be 2-d or 4-d");
  if (m.shape().size() != 1 || m.dim(0) != x.dim(1))
    fail("channel_mul: mask length " + shape_str(m.shape()) +
         " does not match channels of " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1);
  const int64_t plane = x.numel() / (n * c);
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  const double* md = m.data().data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = xd + (i * c + ci) * plane;
      double* op = out.data() + (i * c + ci) * plane;
      for (int64_t j = 0; j < plane; ++j) op[j] = p[j] * md[ci];
    }
  return make_node(
      "channel_mul", x.shape(), std::move(out), {x, m},
      [n, c, plane](TensorImpl& o) {
        const auto& xi = o.node->inputs[0];
        const auto& mi = o.node->inputs[1];
        if (xi->needs_grad) {
          std::vector<double> g(o.grad.size());
          for (int64_t i = 0; i < n; ++i)
            for (int64_t ci = 0; ci < c; ++ci) {
              const double* gp = o.grad.data() + (i * c + ci) * plane;
              double* gx = g.data() + (i * c + ci) * plane;
              for (int64_t j = 0; j < plane; ++j) gx[j] = gp[j] * mi->data[ci];
            }
          accumulate_grad(xi, g);
        }
        if (mi->needs_grad) {
          std::vector<double> gm(c, 0.0);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t ci = 0; ci < c; ++ci) {
              const double* gp = o.grad.data() + (i * c + ci) * plane;
              const double* xp = xi->data.data() + (i * c + ci) * plane;
              for (int64_t j = 0; j < plane; ++j) gm[ci] += gp[j] * xp[j];
            }
          accumulate_grad(mi, gm);
        }
      });
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != x.numel()) fail("reshape: element count mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_node("reshape", std::move(shape), std::move(out), {x},
                   [](TensorImpl& o) { accumulate_grad(o.node->inputs[0], o.grad); });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2) fail("cross_entropy: logits must be 2-d");
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    fail("cross_entropy: batch size mismatch");
  for (int lab : labels)
    if (lab < 0 || lab >= k)
      fail("cross_entropy: label " + std::to_string(lab) + " out of range [0," +
           std::to_string(k) + ")");
  std::vector<double> softmax(n * k);
  double loss = 0.0;
  const double* ld = logits.data().data();
  for (int64_t i = 0; i < n; ++i) {
    const double* row = ld + i * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double logz = std::log(z) + mx;
    for (int64_t j = 0; j < k; ++j) softmax[i * k + j] = std::exp(row[j] - logz);
    loss += logz - row[labels[i]];
  }
  loss /= n;
  return make_node("cross_entropy", {1}, {loss}, {logits},
                   [labels, softmax = std::move(softmax), n, k](TensorImpl& o) {
                     const auto& in = o.node->inputs[0];
                     if (!in->needs_grad) return;
                     std::vector<double> g(n * k);
                     const double scale = o.grad[0] / n;
                     for (int64_t i = 0; i < n; ++i)
                       for (int64_t j = 0; j < k; ++j)
                         g[i * k + j] =
                             scale * (softmax[i * k + j] -
                                      (labels[i] == j ? 1.0 : 0.0));
                     accumulate_grad(in, g);
                   });
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const int64_t n = logits.dim(0), k = logits.dim(1);
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    if (best == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace hybridnet
