#include "hybridnet/prune.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "hybridnet/ops.hpp"

namespace hybridnet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kSoftEps = 1e-12;

}  // namespace

double gumbel_sample(std::mt19937_64& rng) {
  // uniform strictly inside (0,1) so both logs stay finite
  const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  return -std::log(-std::log(u));
}

ChannelGate ChannelGate::make(int64_t channels, double init_prob, double tau,
                              uint64_t seed) {
  if (channels < 1) fail("ChannelGate: need at least one channel");
  if (!(init_prob > 0.0 && init_prob < 1.0))
    fail("ChannelGate: init_prob must be inside (0,1)");
  if (!(tau > 0.0)) fail("ChannelGate: tau must be positive");
  ChannelGate g;
  const double logit = std::log(init_prob / (1.0 - init_prob));
  g.logits = Tensor::full({channels}, logit, true);
  g.tau = tau;
  g.rng_seed = seed;
  g.rng.seed(seed);
  return g;
}

std::vector<double> ChannelGate::probs() const {
  std::vector<double> p(logits.numel());
  for (int64_t i = 0; i < logits.numel(); ++i) p[i] = sigmoid(logits.data()[i]);
  return p;
}

void ChannelGate::reseed(uint64_t seed) {
  rng_seed = seed;
  rng.seed(seed);
}

Mask sample_mask(ChannelGate& gate) {
  if (!(gate.tau > 0.0)) fail("sample_mask: tau must be positive");
  const int64_t c = gate.channels();
  Mask m;
  m.soft.resize(c);
  std::vector<double> hard(c);
  for (int64_t i = 0; i < c; ++i) {
    const double g1 = gumbel_sample(gate.rng);
    const double g2 = gumbel_sample(gate.rng);
    double soft = sigmoid((gate.logits.data()[i] + g1 - g2) / gate.tau);
    soft = std::min(std::max(soft, kSoftEps), 1.0 - kSoftEps);
    m.soft[i] = soft;
    hard[i] = std::round(soft);
  }
  const double tau = gate.tau;
  m.hard = make_node("sample_mask", {c}, std::move(hard), {gate.logits},
                     [soft = m.soft, tau](TensorImpl& o) {
                       const auto& logits = o.node->inputs[0];
                       std::vector<double> g(soft.size());
                       for (size_t i = 0; i < soft.size(); ++i)
                         g[i] = o.grad[i] * soft[i] * (1.0 - soft[i]) / tau;
                       accumulate_grad(logits, g);
                     });
  return m;
}

Tensor apply_mask(const Tensor& acts, const Mask& mask) {
  return channel_mul(acts, mask.hard);
}

Tensor eval_mask_tensor(const ChannelGate& gate, double threshold) {
  std::vector<double> keep(gate.channels());
  const auto p = gate.probs();
  for (size_t i = 0; i < p.size(); ++i) keep[i] = p[i] >= threshold ? 1.0 : 0.0;
  return Tensor::from_data({gate.channels()}, std::move(keep));
}

Tensor apply_mask_eval(const Tensor& acts, const ChannelGate& gate,
                       double threshold) {
  return channel_mul(acts, eval_mask_tensor(gate, threshold));
}

Tensor loss_prune(std::span<const Mask> masks) {
  if (masks.empty()) fail("loss_prune: at least one mask required");
  Tensor total = sum_all(masks[0].hard);
  for (size_t i = 1; i < masks.size(); ++i)
    total = add(total, sum_all(masks[i].hard));
  return total;
}

namespace {

std::vector<int64_t> kept_channels(const ChannelGate& gate, double threshold,
                                   size_t layer) {
  std::vector<int64_t> keep;
  const auto p = gate.probs();
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] >= threshold) keep.push_back(static_cast<int64_t>(i));
  if (keep.empty())
    fail("compact_channels: layer " + std::to_string(layer) +
         " pruned to zero channels");
  return keep;
}

}  // namespace

std::vector<Tensor> compact_channels(std::span<const Tensor> weights,
                                     std::span<const ChannelGate* const> gates,
                                     double threshold) {
  if (weights.size() != gates.size())
    fail("compact_channels: weights/gates length mismatch");
  if (!weights.empty() && gates.back() != nullptr)
    fail("compact_channels: the final layer must not be gated");
  for (size_t l = 0; l + 1 < weights.size(); ++l)
    if (weights[l + 1].dim(1) != weights[l].dim(0))
      fail("compact_channels: layer " + std::to_string(l + 1) +
           " input channels do not match layer " + std::to_string(l) +
           " output channels");

  std::vector<Tensor> out;
  std::vector<int64_t> in_keep;  // empty = keep all
  for (size_t l = 0; l < weights.size(); ++l) {
    const Tensor& w = weights[l];
    const int64_t co = w.dim(0), ci = w.dim(1), k = w.dim(2);
    std::vector<int64_t> prev = in_keep;
    if (prev.empty())
      for (int64_t i = 0; i < ci; ++i) prev.push_back(i);
    std::vector<int64_t> rows;
    if (gates[l]) {
      rows = kept_channels(*gates[l], threshold, l);
    } else {
      for (int64_t i = 0; i < co; ++i) rows.push_back(i);
    }
    Tensor nw = Tensor::zeros(
        {static_cast<int64_t>(rows.size()), static_cast<int64_t>(prev.size()),
         k, k});
    auto dst = nw.mutable_data();
    const auto src = w.data();
    for (size_t r = 0; r < rows.size(); ++r)
      for (size_t c = 0; c < prev.size(); ++c)
        for (int64_t kk = 0; kk < k * k; ++kk)
          dst[(r * prev.size() + c) * k * k + kk] =
              src[(rows[r] * ci + prev[c]) * k * k + kk];
    out.push_back(nw);
    in_keep = rows;
  }
  return out;
}

Tensor chain_forward_masked(std::span<const Tensor> weights,
                            std::span<const ChannelGate* const> gates,
                            double threshold, const Tensor& x) {
  NoGradGuard ng;
  Tensor h = x;
  for (size_t l = 0; l < weights.size(); ++l) {
    h = conv2d(h, weights[l], 1, 0);
    if (l + 1 < weights.size()) h = relu(h);
    if (gates[l]) h = apply_mask_eval(h, *gates[l], threshold);
  }
  return h;
}

Tensor chain_forward(std::span<const Tensor> weights, const Tensor& x) {
  NoGradGuard ng;
  Tensor h = x;
  for (size_t l = 0; l < weights.size(); ++l) {
    h = conv2d(h, weights[l], 1, 0);
    if (l + 1 < weights.size()) h = relu(h);
  }
  return h;
}

}  // namespace hybridnet
