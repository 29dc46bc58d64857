#include "hybridnet/pipeline.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hybridnet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  return z ^ (z >> 27);
}

}  // namespace

ReplayBuffer::ReplayBuffer(size_t capacity) : capacity_(capacity) {
  if (capacity_ < 1) fail("ReplayBuffer: capacity must be >= 1");
}

void ReplayBuffer::push(Sample s, Tensor quant_features) {
  samples_.push_back(std::move(s));
  features_.push_back(std::move(quant_features));
  while (samples_.size() > capacity_) {
    samples_.pop_front();
    features_.pop_front();
  }
}

Tensor ReplayBuffer::batch_x() const {
  std::vector<Sample> v(samples_.begin(), samples_.end());
  return stack_batch(v);
}

std::vector<int> ReplayBuffer::labels() const {
  std::vector<int> out;
  for (const auto& s : samples_) out.push_back(s.label);
  return out;
}

Tensor ReplayBuffer::cached_quant() const {
  for (const auto& f : features_)
    if (!f.defined()) return Tensor();
  if (features_.empty()) return Tensor();
  const auto& shape0 = features_.front().shape();  // [1,C,H,W]
  std::vector<double> data;
  for (const auto& f : features_) {
    if (f.shape() != shape0) return Tensor();
    data.insert(data.end(), f.data().begin(), f.data().end());
  }
  std::vector<int64_t> shape = shape0;
  shape[0] = static_cast<int64_t>(features_.size());
  return Tensor::from_data(std::move(shape), std::move(data));
}

std::vector<HybridLayerCost> cost_rows_for_model(
    const ModelConfig& cfg_in, const std::map<std::string, double>& hints,
    const HybridModel* trained) {
  ModelConfig cfg = cfg_in;
  validate_model_config(cfg);

  std::map<std::string, double> keep;
  if (trained) {
    for (const auto& [name, active] : trained->active_channels()) {
      double total = 0.0;
      for (const auto& spec : cfg.backbone)
        if (spec.name == name) total = static_cast<double>(spec.c_out);
      for (const auto& spec : cfg.head)
        if (spec.name == name) total = static_cast<double>(spec.c_out);
      if (total > 0.0)
        keep[name] = std::max(static_cast<double>(active) / total, 1.0 / total);
    }
  } else {
    keep = hints;
  }

  std::vector<HybridLayerCost> rows;
  double keep_in = 1.0;  // chained through the prune branch
  auto add_row = [&](const LayerSpec& spec, bool in_head) {
    HybridLayerCost row;
    row.name = spec.name;
    LayerCostInput base;
    base.c_in = spec.c_in;
    base.c_out = spec.c_out;
    base.kernel = spec.kind == LayerKind::kConv ? spec.kernel : 1;
    base.h_out = spec.kind == LayerKind::kConv ? spec.out_h : 1;
    base.w_out = spec.kind == LayerKind::kConv ? spec.out_w : 1;
    row.baseline = base;
    if (cfg.quant_branch) {
      const int b_a = in_head ? cfg.head_act_bits : spec.act_bits;
      const int b_w = in_head ? 0 : spec.weight_bits;
      if (b_a > 0 || b_w > 0) {
        LayerCostInput q = base;
        q.b_a = b_a > 0 ? b_a : 32;
        q.b_w = b_w > 0 ? b_w : 32;
        row.quant = q;
      }
    }
    if (cfg.prune_branch || in_head) {
      LayerCostInput p = base;
      p.keep_in = keep_in;
      double keep_out = 1.0;
      if (spec.prunable) {
        auto it = keep.find(spec.name);
        if (it != keep.end()) keep_out = it->second;
      }
      p.keep_out = keep_out;
      row.prune = p;
      keep_in = keep_out;
    }
    rows.push_back(std::move(row));
  };

  bool first_head_layer = true;
  for (const auto& spec : cfg.backbone)
    if (spec.kind == LayerKind::kConv) add_row(spec, false);
  for (const auto& spec : cfg.head)
    if (spec.kind == LayerKind::kLinear) {
      // the fusion sum restores dense channels at the head input
      if (first_head_layer && cfg.quant_branch) keep_in = 1.0;
      first_head_layer = false;
      add_row(spec, true);
    }
  return rows;
}

StreamPhaseResult run_stream_phase(const HybridModel& pretrained,
                                   const StreamSpec& spec,
                                   HybridModel* adapted_out) {
  validate_stream_spec(spec);
  HybridModel online = clone_model(pretrained);
  HybridModel frozen = clone_model(pretrained);
  freeze_quant(online);

  StreamGenerator gen(spec, mix_seed(spec.seed, 17));
  ReplayBuffer replay(spec.replay_len);

  StreamPhaseResult result;
  int seg_hits_online = 0, seg_hits_frozen = 0, seg_hits_quant = 0;
  int seg_frames = 0, seg_index = 0;

  auto flush_segment = [&]() {
    if (seg_frames == 0) return;
    SegmentRow row;
    row.segment = seg_index++;
    row.frames = seg_frames;
    row.acc_online = 100.0 * seg_hits_online / seg_frames;
    row.acc_frozen = 100.0 * seg_hits_frozen / seg_frames;
    row.acc_quant = 100.0 * seg_hits_quant / seg_frames;
    result.segments.push_back(row);
    seg_hits_online = seg_hits_frozen = seg_hits_quant = 0;
    seg_frames = 0;
  };

  for (int64_t t = 0; t < spec.frames; ++t) {
    Sample s = gen.next();
    Tensor x = reshape(s.x, {1, s.x.dim(0), s.x.dim(1), s.x.dim(2)});
    Tensor a_q_online;
    {
      NoGradGuard ng;
      // (a) hybrid with online updates
      ForwardAux ao = forward_hybrid(online, x, Mode::kEval);
      a_q_online = ao.a_q;
      seg_hits_online += accuracy(ao.logits, {s.label}) > 0.5;
      // (b) hybrid frozen
      ForwardAux af = forward_hybrid(frozen, x, Mode::kEval);
      seg_hits_frozen += accuracy(af.logits, {s.label}) > 0.5;
      // (c) quantized branch only, frozen
      Tensor q = forward_quant_features(frozen, x, Mode::kEval);
      Tensor ql = forward_head(frozen, q, Mode::kEval);
      seg_hits_quant += accuracy(ql, {s.label}) > 0.5;
    }
    ++seg_frames;
    replay.push(std::move(s), a_q_online);

    if ((t + 1) % spec.frames_per_update == 0 && spec.online_lr > 0.0) {
      Tensor bx = replay.batch_x();
      std::vector<int> by = replay.labels();
      Tensor cached = replay.cached_quant();
      online_update_step(online, bx, by, spec.update_iters, spec.online_lr,
                         cached.defined() ? &cached : nullptr);
      ++result.updates_run;
    }
    if (seg_frames == spec.segment) flush_segment();
  }
  flush_segment();

  if (!result.segments.empty()) {
    result.first_segment_frozen = result.segments.front().acc_frozen;
    result.final_segment_frozen = result.segments.back().acc_frozen;
    result.final_segment_online = result.segments.back().acc_online;
    result.final_segment_quant = result.segments.back().acc_quant;
  }
  result.cost = relative_cost(cost_rows_for_model(pretrained.cfg, {}, &online));
  if (adapted_out) *adapted_out = std::move(online);
  return result;
}

PipelineResult run_pipeline(const RunConfig& cfg, uint64_t seed) {
  if (!cfg.has_model) fail("run_pipeline: config has no model section");
  StreamSpec spec = cfg.stream;
  spec.seed = spec.seed != 0 ? spec.seed : seed;

  PipelineResult result;
  HybridModel model = build_model(cfg.model, seed);
  auto dataset = make_dataset(spec, cfg.train.dataset_size, mix_seed(seed, 1));
  TrainConfig tc = cfg.train.tc;
  tc.seed = mix_seed(seed, 2);
  result.train = pretrain(model, dataset, tc);

  auto heldout = make_dataset(spec, cfg.train.heldout_size, mix_seed(seed, 3));
  {
    NoGradGuard ng;
    ForwardAux fa = forward_hybrid(model, stack_batch(heldout), Mode::kEval);
    result.heldout_accuracy = accuracy(fa.logits, batch_labels(heldout));
  }
  if (cfg.has_stream) result.stream = run_stream_phase(model, spec);
  return result;
}

std::string render_segments(const StreamPhaseResult& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << "segment\tframes\tacc_hybrid_online\tacc_hybrid_frozen\tacc_quant_frozen\n";
  for (const auto& s : r.segments)
    os << s.segment << "\t" << s.frames << "\t" << s.acc_online << "\t"
       << s.acc_frozen << "\t" << s.acc_quant << "\n";
  os << "updates_run\t" << r.updates_run << "\n";
  return os.str();
}

std::string render_train_summary(const TrainReport& r, double heldout) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "final_loss\t"
     << (r.loss_curve.empty() ? 0.0 : r.loss_curve.back()) << "\n";
  os << "train_accuracy\t" << r.final_train_accuracy << "\n";
  os << "heldout_accuracy\t" << heldout << "\n";
  for (const auto& [name, n] : r.active_channels)
    os << "active_channels." << name << "\t" << n << "\n";
  return os.str();
}

}  // namespace hybridnet
