#include "hybridnet/selftest.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "hybridnet/cost_model.hpp"
#include "hybridnet/kernels.hpp"
#include "hybridnet/ops.hpp"
#include "hybridnet/prune.hpp"
#include "hybridnet/quant.hpp"

namespace hybridnet {

namespace {

namespace hk = hybridnet::kernels;

double urand(std::mt19937_64& rng, double lo, double hi) {
  return lo + (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53 * (hi - lo);
}

std::vector<double> rand_vec(std::mt19937_64& rng, int64_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = urand(rng, -2.0, 2.0);
  return v;
}

bool kernels_equivalent() {
  const hk::KernelTable& simd = hk::active();
  std::mt19937_64 rng(101);
  for (int iter = 0; iter < 10; ++iter) {
    const auto s = hk::make_conv2d_shape(2, 3, 9, 9, 4, 3, 1, 1);
    const auto in = rand_vec(rng, s.in_size());
    const auto wt = rand_vec(rng, s.weight_size());
    const auto gout = rand_vec(rng, s.out_size());
    std::vector<double> a(s.out_size()), b(s.out_size());
    hk::scalar_table().conv2d_fwd(in.data(), wt.data(), a.data(), s);
    simd.conv2d_fwd(in.data(), wt.data(), b.data(), s);
    for (size_t i = 0; i < a.size(); ++i)
      if (a[i] != b[i]) return false;
    std::vector<double> ga(s.in_size()), gb(s.in_size());
    hk::scalar_table().conv2d_bwd_input(gout.data(), wt.data(), ga.data(), s);
    simd.conv2d_bwd_input(gout.data(), wt.data(), gb.data(), s);
    for (size_t i = 0; i < ga.size(); ++i)
      if (ga[i] != gb[i]) return false;
    std::vector<double> wa(s.weight_size()), wb(s.weight_size());
    hk::scalar_table().conv2d_bwd_weight(gout.data(), in.data(), wa.data(), s);
    simd.conv2d_bwd_weight(gout.data(), in.data(), wb.data(), s);
    for (size_t i = 0; i < wa.size(); ++i)
      if (wa[i] != wb[i]) return false;

    const auto x = rand_vec(rng, 37);
    std::vector<double> ra(37), rb(37);
    hk::scalar_table().round_scale(x.data(), 15.0, 1.0 / 15.0, ra.data(), 37);
    simd.round_scale(x.data(), 15.0, 1.0 / 15.0, rb.data(), 37);
    for (size_t i = 0; i < ra.size(); ++i)
      if (ra[i] != rb[i]) return false;
  }
  return true;
}

bool gradients_match_fd() {
  std::mt19937_64 rng(103);
  Tensor x = Tensor::from_data({1, 2, 5, 5}, rand_vec(rng, 50), true);
  Tensor w = Tensor::from_data({3, 2, 3, 3}, rand_vec(rng, 54), true);
  Tensor proj = Tensor::from_data({1, 3, 3, 3}, rand_vec(rng, 27));
  auto loss = [&]() { return sum_all(mul(relu(conv2d(x, w, 1, 0)), proj)); };
  for (Tensor* t : {&x, &w}) t->zero_grad();
  backward(loss());
  for (Tensor* t : {&x, &w}) {
    for (int64_t i = 0; i < t->numel(); ++i) {
      const double saved = t->mutable_data()[i];
      const double g = t->grad()[i];
      t->mutable_data()[i] = saved + 1e-5;
      const double up = loss().item();
      t->mutable_data()[i] = saved - 1e-5;
      const double dn = loss().item();
      t->mutable_data()[i] = saved;
      const double fd = (up - dn) / 2e-5;
      const double denom = std::max({std::fabs(g), std::fabs(fd), 1e-8});
      if (std::fabs(g - fd) / denom > 1e-4 && std::fabs(g - fd) > 1e-7)
        return false;
    }
  }
  return true;
}

bool quantizer_contracts() {
  std::mt19937_64 rng(107);
  for (int bits : {2, 4}) {
    Tensor w = Tensor::from_data({512}, rand_vec(rng, 512));
    QuantParams qp = QuantParams::from_weights(bits, w.data());
    IntCodeTensor codes = quantize_weight(transform_weight(w, qp), bits);
    const int32_t cmax = (1 << (bits - 1)) - 1;
    std::set<int32_t> distinct;
    for (int32_t c : codes.codes) {
      if (c < -cmax || c > cmax) return false;
      distinct.insert(c);
    }
    if (static_cast<int>(distinct.size()) > (1 << bits) - 1) return false;
  }
  return true;
}

bool fixedpoint_exact() {
  std::mt19937_64 rng(109);
  QuantParams qp = QuantParams::make(4, 0.4, 0.35, 0.6, 0.45);
  for (int iter = 0; iter < 20; ++iter) {
    Tensor a = Tensor::from_data({1, 2, 5, 5}, rand_vec(rng, 50));
    for (auto& v : a.mutable_data()) v = std::fabs(v);
    Tensor w = Tensor::from_data({2, 2, 3, 3}, rand_vec(rng, 36));
    IntCodeTensor ac = quantize_activation(transform_activation(a, qp), 4);
    IntCodeTensor wc = quantize_weight(transform_weight(w, qp), 4);
    Tensor fx = fixedpoint_conv2d(ac, wc, 1, 0);
    Tensor af = Tensor::from_data(ac.shape,
                                  std::vector<double>(ac.codes.begin(), ac.codes.end()));
    Tensor wf = Tensor::from_data(wc.shape,
                                  std::vector<double>(wc.codes.begin(), wc.codes.end()));
    NoGradGuard ng;
    Tensor ref = mul_const(conv2d(af, wf, 1, 0), ac.scale * wc.scale);
    for (int64_t i = 0; i < fx.numel(); ++i)
      if (fx.data()[i] != ref.data()[i]) return false;
  }
  return true;
}

bool gumbel_statistics() {
  const int samples = 20000;
  for (double b : {0.1, 0.5, 0.9}) {
    ChannelGate gate = ChannelGate::make(1, b, 1.0, 4321);
    int64_t ones = 0;
    for (int i = 0; i < samples; ++i)
      ones += sample_mask(gate).hard.data()[0] == 1.0;
    const double phat = static_cast<double>(ones) / samples;
    if (std::fabs(phat - b) > 4.0 * std::sqrt(b * (1.0 - b) / samples))
      return false;
  }
  return true;
}

bool compaction_exact() {
  std::mt19937_64 rng(113);
  std::vector<Tensor> ws{
      Tensor::from_data({4, 1, 3, 3}, rand_vec(rng, 36)),
      Tensor::from_data({5, 4, 3, 3}, rand_vec(rng, 180)),
      Tensor::from_data({2, 5, 1, 1}, rand_vec(rng, 10))};
  ChannelGate g1 = ChannelGate::make(4, 0.5, 1.0, 7);
  ChannelGate g2 = ChannelGate::make(5, 0.5, 1.0, 9);
  for (auto* g : {&g1, &g2})
    for (int64_t i = 0; i < g->channels(); ++i)
      g->logits.mutable_data()[i] = urand(rng, -2, 2);
  g1.logits.mutable_data()[0] = 3.0;
  g2.logits.mutable_data()[0] = 3.0;
  std::vector<const ChannelGate*> gates{&g1, &g2, nullptr};
  Tensor x = Tensor::from_data({1, 1, 8, 8}, rand_vec(rng, 64));
  Tensor masked = chain_forward_masked(ws, gates, 0.5, x);
  Tensor direct = chain_forward(compact_channels(ws, gates, 0.5), x);
  for (int64_t i = 0; i < masked.numel(); ++i)
    if (masked.data()[i] != direct.data()[i]) return false;
  return true;
}

bool cost_arithmetic() {
  std::vector<LayerBops> rows{{"conv1", 1e9, 0.19e9, 0.13e9}};
  CostReport rep = assemble_report(rows);
  if (std::fabs(rep.rows[0].rc_hybrid - 0.32) > 0.005) return false;
  LayerCostInput base{64, 64, 3, 8, 8, 32, 32, 1.0, 1.0};
  LayerCostInput q = base;
  q.b_a = q.b_w = 4;
  const double lg = std::log2(64.0 * 9.0);
  const double expect = (16.0 + 8.0 + lg) / (1024.0 + 64.0 + lg);
  return std::fabs(layer_bops(q) / layer_bops(base) - expect) < 1e-12;
}

}  // namespace

int selftest(std::ostream& out) {
  struct Check {
    const char* name;
    std::function<bool()> fn;
  };
  const Check checks[] = {
      {"kernel-backend-equivalence", kernels_equivalent},
      {"gradients-vs-finite-differences", gradients_match_fd},
      {"quantizer-code-contracts", quantizer_contracts},
      {"fixedpoint-conv-exactness", fixedpoint_exact},
      {"gumbel-gate-statistics", gumbel_statistics},
      {"compaction-equivalence", compaction_exact},
      {"cost-model-arithmetic", cost_arithmetic},
  };
  int failures = 0;
  out << "kernel backend: " << hk::backend_name(hk::active_backend()) << "\n";
  for (const auto& c : checks) {
    bool ok = false;
    try {
      ok = c.fn();
    } catch (const std::exception& e) {
      out << "FAIL  " << c.name << " (" << e.what() << ")\n";
      ++failures;
      continue;
    }
    out << (ok ? "ok    " : "FAIL  ") << c.name << "\n";
    if (!ok) ++failures;
  }
  return failures;
}

}  // namespace hybridnet
