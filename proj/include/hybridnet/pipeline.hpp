#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "hybridnet/config.hpp"
#include "hybridnet/cost_model.hpp"
#include "hybridnet/hybrid_net.hpp"
#include "hybridnet/stream.hpp"

// End-to-end harness: pretraining, the streaming protocol with periodic
// online updates, and cost reporting wired to the same cost-model functions
// the CLI uses.

namespace hybridnet {

// Ring of the most recent labeled frames plus cached quant-branch features.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity);
  void push(Sample s, Tensor quant_features);  // features may be undefined
  size_t size() const { return samples_.size(); }
  size_t capacity() const { return capacity_; }
  const std::deque<Sample>& samples() const { return samples_; }
  Tensor batch_x() const;
  std::vector<int> labels() const;
  // Concatenated cached features; undefined if any entry lacks them.
  Tensor cached_quant() const;

 private:
  size_t capacity_;
  std::deque<Sample> samples_;
  std::deque<Tensor> features_;
};

// Per-layer cost rows for a model configuration. Keep ratios come from the
// trained gates when `trained` is given, else from `keep_out_hints` by layer
// name, else 1.0.
std::vector<HybridLayerCost> cost_rows_for_model(
    const ModelConfig& cfg, const std::map<std::string, double>& keep_out_hints,
    const HybridModel* trained);

struct SegmentRow {
  int segment = 0;
  int frames = 0;
  double acc_online = 0.0;   // hybrid with online updates
  double acc_frozen = 0.0;   // hybrid, no updates
  double acc_quant = 0.0;    // quantized branch + head, no updates
};

struct StreamPhaseResult {
  std::vector<SegmentRow> segments;
  CostReport cost;
  int updates_run = 0;
  double first_segment_frozen = 0.0, final_segment_frozen = 0.0;
  double final_segment_online = 0.0, final_segment_quant = 0.0;
};

// Freezes the quant branch of a copy of `pretrained` and runs the stream
// protocol, scoring all three model variants prequentially per segment.
StreamPhaseResult run_stream_phase(const HybridModel& pretrained,
                                   const StreamSpec& spec,
                                   HybridModel* adapted_out = nullptr);

struct PipelineResult {
  TrainReport train;
  double heldout_accuracy = 0.0;
  StreamPhaseResult stream;
};

PipelineResult run_pipeline(const RunConfig& cfg, uint64_t seed);

// Deterministic text summaries (no timing, safe to diff across runs).
std::string render_segments(const StreamPhaseResult& r);
std::string render_train_summary(const TrainReport& r, double heldout);

}  // namespace hybridnet
