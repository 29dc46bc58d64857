#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hybridnet/ops.hpp"
#include "hybridnet/prune.hpp"
#include "hybridnet/quant.hpp"
#include "hybridnet/tensor.hpp"

// The hybrid model: a low-bit quantized branch and a channel-pruned
// full-precision branch over a shared layer skeleton, fused by feature
// summation, with a pruned-style prediction head on top.

namespace hybridnet {

enum class LayerKind { kConv, kBatchNorm, kRelu, kPool, kLinear };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  int64_t c_in = 0, c_out = 0;
  int64_t kernel = 0, stride = 1, padding = 0;
  int act_bits = 0;     // input-activation bits; 0 = full precision
  int weight_bits = 0;  // 0 = full precision
  bool prunable = false;
  std::string name;           // assigned during validation (conv1…, fc4…)
  int64_t out_h = 1, out_w = 1;  // filled during validation
};

struct ModelConfig {
  int64_t in_channels = 1, in_h = 32, in_w = 32;
  int64_t n_classes = 8;
  std::vector<LayerSpec> backbone;
  std::vector<LayerSpec> head;  // linear / relu only
  double lambda1 = 1.0, lambda2 = 0.01;
  NormTargets targets;
  double prune_threshold = 0.5;
  double prune_init_prob = 0.8;
  double tau = 1.0;
  int head_act_bits = 0;  // optional quantization of the head input
  bool quant_branch = true;
  bool prune_branch = true;
};

// Checks shape chaining, bit ranges, head structure (last linear never
// prunable) and assigns layer names. Throws on violations.
void validate_model_config(ModelConfig& cfg);

struct HybridModel {
  ModelConfig cfg;
  uint64_t seed = 0;
  bool quant_frozen = false;

  // indexed by backbone spec position (empty/default when not applicable)
  std::vector<Tensor> q_weights, p_weights;
  std::vector<BatchNormState> q_bns, p_bns;
  std::vector<QuantParams> qps;
  std::vector<bool> has_qp;
  std::vector<ChannelGate> gates;
  std::vector<bool> has_gate;

  // indexed by head spec position
  std::vector<Tensor> head_weights;
  std::vector<ChannelGate> head_gates;
  std::vector<bool> head_has_gate;
  QuantParams head_qp;

  std::vector<Tensor> sgd_params();     // weights and batchnorm affine
  std::vector<Tensor> aux_params();     // quant intervals and gate logits
  std::vector<Tensor> online_params();  // pruned branch + head only
  void reproject_quant_params(double floor = 1e-4);
  // Active channels per prunable layer at the model threshold.
  std::vector<std::pair<std::string, int64_t>> active_channels() const;
};

HybridModel build_model(const ModelConfig& cfg, uint64_t seed);
HybridModel clone_model(const HybridModel& m);

enum class Mode { kTrain, kEval, kOnline };

struct ForwardAux {
  Tensor a_q, a_p, a_h, logits;
  std::vector<Tensor> bn_acts;  // quant-branch post-batchnorm activations
  std::vector<const QuantParams*> act_qps;  // paired interval params
  std::vector<Mask> masks;                  // sampled in train mode
};

Tensor forward_quant_features(HybridModel& m, const Tensor& x, Mode mode,
                              ForwardAux* aux = nullptr);
Tensor forward_prune_features(HybridModel& m, const Tensor& x, Mode mode,
                              ForwardAux* aux = nullptr);
Tensor forward_head(HybridModel& m, const Tensor& features, Mode mode,
                    ForwardAux* aux = nullptr);
ForwardAux forward_hybrid(HybridModel& m, const Tensor& x, Mode mode);

struct LossParts {
  Tensor total, ce, qw, qa, prune;
  bool has_qw = false, has_qa = false, has_prune = false;
};
LossParts total_loss(HybridModel& m, const Tensor& x,
                     const std::vector<int>& labels, Mode mode = Mode::kTrain);

struct Sample {
  Tensor x;  // [C,H,W]
  int label = 0;
};
Tensor stack_batch(std::span<const Sample> samples);
std::vector<int> batch_labels(std::span<const Sample> samples);

struct TrainConfig {
  int steps = 1000;
  int batch_size = 16;
  double lr_weights = 0.05;
  double lr_aux = 0.005;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  uint64_t seed = 1;
};

struct TrainReport {
  std::vector<double> loss_curve;
  double final_train_accuracy = 0.0;
  std::vector<std::pair<std::string, int64_t>> active_channels;
};

// Trains both branches and the auxiliary parameters. Aborts with a
// diagnostic naming the offending loss term if anything goes non-finite.
TrainReport pretrain(HybridModel& m, std::span<const Sample> dataset,
                     const TrainConfig& cfg);

void freeze_quant(HybridModel& m);

// Runs `iters` SGD iterations of the online objective (cross-entropy) on the
// pruned branch and head. Requires freeze_quant first. `cached_quant` may
// hold precomputed quant-branch features for the batch.
void online_update_step(HybridModel& m, const Tensor& x,
                        const std::vector<int>& labels, int iters, double lr,
                        const Tensor* cached_quant = nullptr);

// Serialized image of everything the freeze contract covers (quant-branch
// weights, batchnorm state, and interval parameters).
std::vector<uint8_t> quant_branch_bytes(const HybridModel& m);

// Checkpoint container --------------------------------------------------

enum class CheckpointErrorCode {
  kBadMagic,
  kVersionMismatch,
  kBadManifest,
  kTruncatedPayload,
  kPayloadSizeMismatch,
  kShapeMismatch,
};

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  CheckpointErrorCode code() const { return code_; }

 private:
  CheckpointErrorCode code_;
};

// Manifest (JSON) + flat little-endian payload; f64 tensors and i32 code
// tensors. Writes are atomic (temp file + rename).
void save_checkpoint(const HybridModel& m, const std::string& path);
HybridModel load_checkpoint(const std::string& path);

}  // namespace hybridnet
