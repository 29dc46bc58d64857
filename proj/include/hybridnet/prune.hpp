#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "hybridnet/tensor.hpp"

// Stochastic channel pruning: two-way Gumbel-softmax gates, straight-through
// hard masks, the sparsity loss, and deterministic test-time channel removal.

namespace hybridnet {

struct ChannelGate {
  Tensor logits;  // [C]; selection probability is sigmoid(logit)
  double tau = 1.0;
  uint64_t rng_seed = 0;
  std::mt19937_64 rng;

  static ChannelGate make(int64_t channels, double init_prob, double tau,
                          uint64_t seed);
  int64_t channels() const { return logits.numel(); }
  std::vector<double> probs() const;
  void reseed(uint64_t seed);
};

struct Mask {
  Tensor hard;               // [C] values in {0,1}; straight-through node
  std::vector<double> soft;  // strictly inside (0,1)
};

// Draws one independent Gumbel(0,1) noise per branch and channel;
// soft = sigmoid((logit + g1 - g2)/tau), hard = round(soft). The backward of
// `hard` is the derivative of `soft` (straight-through).
Mask sample_mask(ChannelGate& gate);

// Train-time channel scaling by the sampled hard mask.
Tensor apply_mask(const Tensor& acts, const Mask& mask);
// Deterministic eval-time mask: keep channel i iff prob[i] >= threshold.
Tensor eval_mask_tensor(const ChannelGate& gate, double threshold);
Tensor apply_mask_eval(const Tensor& acts, const ChannelGate& gate,
                       double threshold);

// L1 norm of the hard masks summed over layers (equals the active-channel
// count); gradients flow through the straight-through soft path.
Tensor loss_prune(std::span<const Mask> masks);

// Physical channel removal for a plain convolution chain. gates[l] may be
// null for layers that are never pruned; the last layer must not be gated.
// Removes output channels of layer l with prob < threshold together with the
// matching input channels of layer l+1.
std::vector<Tensor> compact_channels(std::span<const Tensor> weights,
                                     std::span<const ChannelGate* const> gates,
                                     double threshold);

// Eval forward of the chain with masks applied (conv stride 1, pad 0, relu
// between layers); reference for compaction equivalence.
Tensor chain_forward_masked(std::span<const Tensor> weights,
                            std::span<const ChannelGate* const> gates,
                            double threshold, const Tensor& x);
// Same chain without masks (run after compact_channels).
Tensor chain_forward(std::span<const Tensor> weights, const Tensor& x);

double gumbel_sample(std::mt19937_64& rng);

}  // namespace hybridnet
