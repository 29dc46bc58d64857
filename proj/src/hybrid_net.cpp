#include "hybridnet/hybrid_net.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "hybridnet/optim.hpp"

namespace hybridnet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

uint64_t derive_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void validate_model_config(ModelConfig& cfg) {
  if (cfg.in_channels < 1 || cfg.in_h < 1 || cfg.in_w < 1)
    fail("model: input dimensions must be positive");
  if (cfg.n_classes < 2) fail("model: need at least two classes");
  if (!cfg.quant_branch && !cfg.prune_branch)
    fail("model: at least one branch must be enabled");
  if (!(cfg.tau > 0.0)) fail("model: tau must be positive");
  if (!(cfg.prune_threshold > 0.0 && cfg.prune_threshold < 1.0))
    fail("model: prune threshold must be inside (0,1)");
  if (!(cfg.prune_init_prob > 0.0 && cfg.prune_init_prob < 1.0))
    fail("model: prune init probability must be inside (0,1)");
  if (cfg.head_act_bits != 0 && cfg.head_act_bits < 2)
    fail("model: head_act_bits must be 0 (full) or >= 2");

  int64_t c = cfg.in_channels, h = cfg.in_h, w = cfg.in_w;
  int conv_idx = 0;
  for (auto& spec : cfg.backbone) {
    switch (spec.kind) {
      case LayerKind::kConv: {
        ++conv_idx;
        if (spec.name.empty()) spec.name = "conv" + std::to_string(conv_idx);
        if (spec.c_in != c)
          fail("model: " + spec.name + " expects c_in=" + std::to_string(c) +
               " but config says " + std::to_string(spec.c_in));
        if (spec.c_out < 1) fail("model: " + spec.name + " needs c_out >= 1");
        if (spec.kernel < 1 || spec.stride < 1 || spec.padding < 0)
          fail("model: " + spec.name + " has invalid geometry");
        if (spec.kernel > h + 2 * spec.padding || spec.kernel > w + 2 * spec.padding)
          fail("model: " + spec.name + " kernel larger than its input");
        if ((spec.act_bits != 0 && spec.act_bits < 2) ||
            (spec.weight_bits != 0 && spec.weight_bits < 2))
          fail("model: " + spec.name + " bit-widths must be 0 (full) or >= 2");
        h = (h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
        w = (w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
        c = spec.c_out;
        spec.out_h = h;
        spec.out_w = w;
        break;
      }
      case LayerKind::kBatchNorm:
      case LayerKind::kRelu:
        spec.c_in = spec.c_out = c;
        spec.out_h = h;
        spec.out_w = w;
        break;
      case LayerKind::kPool: {
        if (spec.kernel < 1 || spec.stride < 1)
          fail("model: pool needs kernel and stride >= 1");
        if (spec.kernel > h || spec.kernel > w)
          fail("model: pool kernel larger than its input");
        h = (h - spec.kernel) / spec.stride + 1;
        w = (w - spec.kernel) / spec.stride + 1;
        spec.c_in = spec.c_out = c;
        spec.out_h = h;
        spec.out_w = w;
        break;
      }
      case LayerKind::kLinear:
        fail("model: linear layers belong to the head");
    }
  }

  if (cfg.head.empty()) fail("model: head must contain at least one linear layer");
  int64_t feat = c * h * w;
  int fc_idx = conv_idx;
  const LayerSpec* last_linear = nullptr;
  for (auto& spec : cfg.head) {
    switch (spec.kind) {
      case LayerKind::kLinear: {
        ++fc_idx;
        if (spec.name.empty()) spec.name = "fc" + std::to_string(fc_idx);
        if (spec.c_in != feat)
          fail("model: " + spec.name + " expects c_in=" + std::to_string(feat) +
               " but config says " + std::to_string(spec.c_in));
        if (spec.c_out < 1) fail("model: " + spec.name + " needs c_out >= 1");
        feat = spec.c_out;
        last_linear = &spec;
        break;
      }
      case LayerKind::kRelu:
        spec.c_in = spec.c_out = feat;
        break;
      default:
        fail("model: head layers must be linear or relu");
    }
  }
  if (!last_linear) fail("model: head must end in a linear layer");
  if (last_linear->prunable)
    fail("model: the final prediction layer must not be prunable");
  if (feat != cfg.n_classes)
    fail("model: head output " + std::to_string(feat) +
         " does not match n_classes " + std::to_string(cfg.n_classes));
}

HybridModel build_model(const ModelConfig& cfg_in, uint64_t seed) {
  ModelConfig cfg = cfg_in;
  validate_model_config(cfg);
  HybridModel m;
  m.cfg = cfg;
  m.seed = seed;
  std::mt19937_64 rng(derive_seed(seed, 0));

  const size_t nb = cfg.backbone.size();
  m.q_weights.resize(nb);
  m.p_weights.resize(nb);
  m.q_bns.resize(nb);
  m.p_bns.resize(nb);
  m.qps.resize(nb);
  m.has_qp.assign(nb, false);
  m.gates.resize(nb);
  m.has_gate.assign(nb, false);

  for (size_t i = 0; i < nb; ++i) {
    const LayerSpec& spec = cfg.backbone[i];
    if (spec.kind == LayerKind::kConv) {
      const double stddev =
          std::sqrt(2.0 / static_cast<double>(spec.c_in * spec.kernel * spec.kernel));
      if (cfg.quant_branch) {
        m.q_weights[i] = Tensor::randn({spec.c_out, spec.c_in, spec.kernel, spec.kernel},
                                       rng, stddev, true);
        m.q_weights[i].set_name("q." + spec.name + ".weight");
        if (spec.weight_bits > 0 || spec.act_bits > 0) {
          const int bits = spec.weight_bits > 0 ? spec.weight_bits : spec.act_bits;
          m.qps[i] = QuantParams::from_weights(bits, m.q_weights[i].data());
          m.qps[i].c_w.set_name("q." + spec.name + ".c_w");
          m.qps[i].d_w.set_name("q." + spec.name + ".d_w");
          m.qps[i].c_a.set_name("q." + spec.name + ".c_a");
          m.qps[i].d_a.set_name("q." + spec.name + ".d_a");
          m.has_qp[i] = true;
        }
      }
      if (cfg.prune_branch) {
        m.p_weights[i] = Tensor::randn({spec.c_out, spec.c_in, spec.kernel, spec.kernel},
                                       rng, stddev, true);
        m.p_weights[i].set_name("p." + spec.name + ".weight");
        if (spec.prunable) {
          m.gates[i] = ChannelGate::make(spec.c_out, cfg.prune_init_prob, cfg.tau,
                                         derive_seed(seed, 1000 + i));
          m.gates[i].logits.set_name("p." + spec.name + ".gate_logits");
          m.has_gate[i] = true;
        }
      }
    } else if (spec.kind == LayerKind::kBatchNorm) {
      if (cfg.quant_branch) {
        m.q_bns[i] = BatchNormState::make(spec.c_out);
        m.q_bns[i].gamma.set_name("q.bn" + std::to_string(i) + ".gamma");
        m.q_bns[i].beta.set_name("q.bn" + std::to_string(i) + ".beta");
      }
      if (cfg.prune_branch) {
        m.p_bns[i] = BatchNormState::make(spec.c_out);
        m.p_bns[i].gamma.set_name("p.bn" + std::to_string(i) + ".gamma");
        m.p_bns[i].beta.set_name("p.bn" + std::to_string(i) + ".beta");
      }
    }
  }

  const size_t nh = cfg.head.size();
  m.head_weights.resize(nh);
  m.head_gates.resize(nh);
  m.head_has_gate.assign(nh, false);
  for (size_t j = 0; j < nh; ++j) {
    const LayerSpec& spec = cfg.head[j];
    if (spec.kind != LayerKind::kLinear) continue;
    const double stddev = std::sqrt(2.0 / static_cast<double>(spec.c_in));
    m.head_weights[j] = Tensor::randn({spec.c_out, spec.c_in}, rng, stddev, true);
    m.head_weights[j].set_name("h." + spec.name + ".weight");
    if (spec.prunable) {
      m.head_gates[j] = ChannelGate::make(spec.c_out, cfg.prune_init_prob, cfg.tau,
                                          derive_seed(seed, 2000 + j));
      m.head_gates[j].logits.set_name("h." + spec.name + ".gate_logits");
      m.head_has_gate[j] = true;
    }
  }
  if (cfg.head_act_bits > 0) {
    m.head_qp = QuantParams::make(cfg.head_act_bits, 0.0, 1.0, 1.0, 1.0);
    m.head_qp.c_a.set_name("h.input.c_a");
    m.head_qp.d_a.set_name("h.input.d_a");
  }
  return m;
}

HybridModel clone_model(const HybridModel& src) {
  HybridModel m;
  m.cfg = src.cfg;
  m.seed = src.seed;
  m.quant_frozen = src.quant_frozen;
  auto clone_param = [](const Tensor& t) {
    if (!t.defined()) return Tensor();
    Tensor c = t.clone();
    c.set_requires_grad(t.requires_grad());
    c.set_name(t.name());
    return c;
  };
  auto clone_bn = [&](const BatchNormState& bn) {
    BatchNormState out;
    out.gamma = clone_param(bn.gamma);
    out.beta = clone_param(bn.beta);
    out.running_mean = bn.running_mean;
    out.running_var = bn.running_var;
    out.eps = bn.eps;
    out.momentum = bn.momentum;
    return out;
  };
  auto clone_qp = [&](const QuantParams& qp) {
    QuantParams out;
    out.n_bits = qp.n_bits;
    out.c_w = clone_param(qp.c_w);
    out.d_w = clone_param(qp.d_w);
    out.c_a = clone_param(qp.c_a);
    out.d_a = clone_param(qp.d_a);
    return out;
  };
  auto clone_gate = [&](const ChannelGate& g) {
    ChannelGate out;
    out.logits = clone_param(g.logits);
    out.tau = g.tau;
    out.rng_seed = g.rng_seed;
    out.rng = g.rng;
    return out;
  };
  const size_t nb = src.cfg.backbone.size();
  m.q_weights.resize(nb);
  m.p_weights.resize(nb);
  m.q_bns.resize(nb);
  m.p_bns.resize(nb);
  m.qps.resize(nb);
  m.gates.resize(nb);
  m.has_qp = src.has_qp;
  m.has_gate = src.has_gate;
  for (size_t i = 0; i < nb; ++i) {
    m.q_weights[i] = clone_param(src.q_weights[i]);
    m.p_weights[i] = clone_param(src.p_weights[i]);
    if (src.q_bns[i].gamma.defined()) m.q_bns[i] = clone_bn(src.q_bns[i]);
    if (src.p_bns[i].gamma.defined()) m.p_bns[i] = clone_bn(src.p_bns[i]);
    if (src.has_qp[i]) m.qps[i] = clone_qp(src.qps[i]);
    if (src.has_gate[i]) m.gates[i] = clone_gate(src.gates[i]);
  }
  const size_t nh = src.cfg.head.size();
  m.head_weights.resize(nh);
  m.head_gates.resize(nh);
  m.head_has_gate = src.head_has_gate;
  for (size_t j = 0; j < nh; ++j) {
    m.head_weights[j] = clone_param(src.head_weights[j]);
    if (src.head_has_gate[j]) m.head_gates[j] = clone_gate(src.head_gates[j]);
  }
  if (src.cfg.head_act_bits > 0) m.head_qp = clone_qp(src.head_qp);
  return m;
}

std::vector<Tensor> HybridModel::sgd_params() {
  std::vector<Tensor> out;
  for (size_t i = 0; i < cfg.backbone.size(); ++i) {
    if (q_weights[i].defined()) out.push_back(q_weights[i]);
    if (p_weights[i].defined()) out.push_back(p_weights[i]);
    if (q_bns[i].gamma.defined()) {
      out.push_back(q_bns[i].gamma);
      out.push_back(q_bns[i].beta);
    }
    if (p_bns[i].gamma.defined()) {
      out.push_back(p_bns[i].gamma);
      out.push_back(p_bns[i].beta);
    }
  }
  for (auto& w : head_weights)
    if (w.defined()) out.push_back(w);
  return out;
}

std::vector<Tensor> HybridModel::aux_params() {
  std::vector<Tensor> out;
  for (size_t i = 0; i < cfg.backbone.size(); ++i) {
    if (has_qp[i]) {
      out.push_back(qps[i].c_w);
      out.push_back(qps[i].d_w);
      out.push_back(qps[i].c_a);
      out.push_back(qps[i].d_a);
    }
    if (has_gate[i]) out.push_back(gates[i].logits);
  }
  for (size_t j = 0; j < cfg.head.size(); ++j)
    if (head_has_gate[j]) out.push_back(head_gates[j].logits);
  if (cfg.head_act_bits > 0) {
    out.push_back(head_qp.c_a);
    out.push_back(head_qp.d_a);
  }
  return out;
}

std::vector<Tensor> HybridModel::online_params() {
  std::vector<Tensor> out;
  for (size_t i = 0; i < cfg.backbone.size(); ++i) {
    if (p_weights[i].defined()) out.push_back(p_weights[i]);
    if (p_bns[i].gamma.defined()) {
      out.push_back(p_bns[i].gamma);
      out.push_back(p_bns[i].beta);
    }
  }
  for (auto& w : head_weights)
    if (w.defined()) out.push_back(w);
  return out;
}

void HybridModel::reproject_quant_params(double floor) {
  for (size_t i = 0; i < cfg.backbone.size(); ++i)
    if (has_qp[i]) qps[i].reproject(floor);
  if (cfg.head_act_bits > 0) head_qp.reproject(floor);
}

std::vector<std::pair<std::string, int64_t>> HybridModel::active_channels() const {
  std::vector<std::pair<std::string, int64_t>> out;
  auto count = [&](const ChannelGate& g) {
    int64_t n = 0;
    for (double p : g.probs()) n += p >= cfg.prune_threshold;
    return n;
  };
  for (size_t i = 0; i < cfg.backbone.size(); ++i)
    if (has_gate[i]) out.emplace_back(cfg.backbone[i].name, count(gates[i]));
  for (size_t j = 0; j < cfg.head.size(); ++j)
    if (head_has_gate[j]) out.emplace_back(cfg.head[j].name, count(head_gates[j]));
  return out;
}

namespace {

Tensor forward_branch(HybridModel& m, const Tensor& x, Mode mode,
                      bool quant_branch, ForwardAux* aux) {
  const bool bn_train =
      mode == Mode::kTrain || (mode == Mode::kOnline && !quant_branch);
  const bool sampled_masks = mode == Mode::kTrain;
  Tensor h = x;
  int64_t pending_gate = -1;
  std::vector<std::pair<size_t, Tensor>> bn_capture;

  auto apply_pending = [&]() {
    if (pending_gate < 0) return;
    ChannelGate& gate = m.gates[pending_gate];
    if (sampled_masks) {
      Mask mask = sample_mask(gate);
      h = apply_mask(h, mask);
      if (aux) aux->masks.push_back(std::move(mask));
    } else {
      h = apply_mask_eval(h, gate, m.cfg.prune_threshold);
    }
    pending_gate = -1;
  };

  for (size_t i = 0; i < m.cfg.backbone.size(); ++i) {
    const LayerSpec& spec = m.cfg.backbone[i];
    switch (spec.kind) {
      case LayerKind::kConv: {
        if (!quant_branch) apply_pending();
        Tensor w = quant_branch ? m.q_weights[i] : m.p_weights[i];
        if (quant_branch && m.has_qp[i]) {
          if (spec.act_bits > 0)
            h = ste_round_levels(transform_activation(h, m.qps[i]),
                                 act_levels(spec.act_bits));
          if (spec.weight_bits > 0)
            w = ste_round_levels(transform_weight(w, m.qps[i]),
                                 weight_levels(spec.weight_bits));
        }
        h = conv2d(h, w, spec.stride, spec.padding);
        if (!quant_branch && m.has_gate[i]) pending_gate = static_cast<int64_t>(i);
        break;
      }
      case LayerKind::kBatchNorm: {
        BatchNormState& bn = quant_branch ? m.q_bns[i] : m.p_bns[i];
        h = batchnorm(h, bn, bn_train);
        if (quant_branch) bn_capture.emplace_back(i, h);
        break;
      }
      case LayerKind::kRelu:
        h = relu(h);
        break;
      case LayerKind::kPool:
        h = maxpool2d(h, spec.kernel, spec.stride);
        break;
      case LayerKind::kLinear:
        fail("forward: linear layer in backbone");
    }
  }
  if (!quant_branch) apply_pending();

  // Pair each quantized conv input with the batchnorm activations that feed
  // it (the set the activation-normalization loss regularizes).
  if (quant_branch && aux) {
    for (size_t j = 0; j < m.cfg.backbone.size(); ++j) {
      if (m.cfg.backbone[j].kind != LayerKind::kConv || !m.has_qp[j] ||
          m.cfg.backbone[j].act_bits == 0)
        continue;
      const Tensor* last_bn = nullptr;
      for (const auto& [bi, t] : bn_capture)
        if (bi < j) last_bn = &t;
      if (last_bn) {
        aux->bn_acts.push_back(*last_bn);
        aux->act_qps.push_back(&m.qps[j]);
      }
    }
  }
  return h;
}

}  // namespace

Tensor forward_quant_features(HybridModel& m, const Tensor& x, Mode mode,
                              ForwardAux* aux) {
  if (!m.cfg.quant_branch) fail("forward: quant branch disabled");
  return forward_branch(m, x, mode, true, aux);
}

Tensor forward_prune_features(HybridModel& m, const Tensor& x, Mode mode,
                              ForwardAux* aux) {
  if (!m.cfg.prune_branch) fail("forward: prune branch disabled");
  return forward_branch(m, x, mode, false, aux);
}

Tensor forward_head(HybridModel& m, const Tensor& features, Mode mode,
                    ForwardAux* aux) {
  const bool sampled_masks = mode == Mode::kTrain;
  const int64_t n = features.dim(0);
  Tensor h = reshape(features, {n, features.numel() / n});
  if (m.cfg.head_act_bits > 0)
    h = ste_round_levels(transform_activation(h, m.head_qp),
                         act_levels(m.cfg.head_act_bits));
  int64_t pending = -1;
  auto apply_pending = [&]() {
    if (pending < 0) return;
    ChannelGate& gate = m.head_gates[pending];
    if (sampled_masks) {
      Mask mask = sample_mask(gate);
      h = apply_mask(h, mask);
      if (aux) aux->masks.push_back(std::move(mask));
    } else {
      h = apply_mask_eval(h, gate, m.cfg.prune_threshold);
    }
    pending = -1;
  };
  for (size_t j = 0; j < m.cfg.head.size(); ++j) {
    const LayerSpec& spec = m.cfg.head[j];
    if (spec.kind == LayerKind::kLinear) {
      apply_pending();
      h = linear(h, m.head_weights[j]);
      if (m.head_has_gate[j]) pending = static_cast<int64_t>(j);
    } else {
      h = relu(h);
    }
  }
  apply_pending();
  return h;
}

ForwardAux forward_hybrid(HybridModel& m, const Tensor& x, Mode mode) {
  if (x.shape().size() != 4 || x.dim(1) != m.cfg.in_channels ||
      x.dim(2) != m.cfg.in_h || x.dim(3) != m.cfg.in_w)
    fail("forward: input shape does not match the model");
  ForwardAux aux;
  if (m.cfg.quant_branch && m.cfg.prune_branch) {
    {
      // frozen quant branch stays out of the graph during online updates
      std::optional<NoGradGuard> ng;
      if (mode == Mode::kOnline) ng.emplace();
      aux.a_q = forward_quant_features(m, x, mode, &aux);
    }
    aux.a_p = forward_prune_features(m, x, mode, &aux);
    if (aux.a_q.shape() != aux.a_p.shape())
      fail("forward: branch output shape mismatch");
    aux.a_h = add(aux.a_q, aux.a_p);
  } else if (m.cfg.quant_branch) {
    aux.a_q = forward_quant_features(m, x, mode, &aux);
    aux.a_h = aux.a_q;
  } else {
    aux.a_p = forward_prune_features(m, x, mode, &aux);
    aux.a_h = aux.a_p;
  }
  aux.logits = forward_head(m, aux.a_h, mode, &aux);
  return aux;
}

LossParts total_loss(HybridModel& m, const Tensor& x,
                     const std::vector<int>& labels, Mode mode) {
  if (labels.empty()) fail("total_loss: empty batch");
  ForwardAux aux = forward_hybrid(m, x, mode);
  LossParts parts;
  parts.ce = cross_entropy(aux.logits, labels);
  Tensor total = parts.ce;
  if (m.cfg.lambda1 != 0.0 && m.cfg.quant_branch) {
    std::vector<Tensor> ws;
    std::vector<QuantParams> wqps;
    for (size_t i = 0; i < m.cfg.backbone.size(); ++i)
      if (m.has_qp[i] && m.cfg.backbone[i].weight_bits > 0) {
        ws.push_back(m.q_weights[i]);
        wqps.push_back(m.qps[i]);
      }
    Tensor reg;
    if (!ws.empty()) {
      parts.qw = loss_qw(ws, wqps, m.cfg.targets);
      parts.has_qw = true;
      reg = parts.qw;
    }
    if (!aux.bn_acts.empty()) {
      std::vector<QuantParams> aqps;
      for (const QuantParams* qp : aux.act_qps) aqps.push_back(*qp);
      parts.qa = loss_qa(aux.bn_acts, aqps);
      parts.has_qa = true;
      reg = reg.defined() ? add(reg, parts.qa) : parts.qa;
    }
    if (reg.defined()) total = add(total, mul_const(reg, m.cfg.lambda1));
  }
  if (m.cfg.lambda2 != 0.0 && !aux.masks.empty()) {
    parts.prune = loss_prune(aux.masks);
    parts.has_prune = true;
    total = add(total, mul_const(parts.prune, m.cfg.lambda2));
  }
  parts.total = total;
  return parts;
}

Tensor stack_batch(std::span<const Sample> samples) {
  if (samples.empty()) fail("stack_batch: empty batch");
  const auto& s0 = samples[0].x.shape();
  if (s0.size() != 3) fail("stack_batch: samples must be [C,H,W]");
  std::vector<double> data;
  data.reserve(samples.size() * samples[0].x.numel());
  for (const auto& s : samples) {
    if (s.x.shape() != s0) fail("stack_batch: inconsistent sample shapes");
    data.insert(data.end(), s.x.data().begin(), s.x.data().end());
  }
  return Tensor::from_data(
      {static_cast<int64_t>(samples.size()), s0[0], s0[1], s0[2]},
      std::move(data));
}

std::vector<int> batch_labels(std::span<const Sample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

namespace {

void check_part(const char* name, const Tensor& t, int step) {
  if (!t.defined()) return;
  if (!std::isfinite(t.item()))
    fail(std::string("pretrain aborted: non-finite ") + name + " at step " +
         std::to_string(step));
}

}  // namespace

TrainReport pretrain(HybridModel& m, std::span<const Sample> dataset,
                     const TrainConfig& cfg) {
  if (dataset.empty()) fail("pretrain: empty dataset");
  std::mt19937_64 rng(cfg.seed);
  std::vector<Tensor> sgd = m.sgd_params();
  std::vector<Tensor> aux = m.aux_params();
  AdamState adam;
  TrainReport report;
  report.loss_curve.reserve(cfg.steps);

  std::vector<Sample> batch(cfg.batch_size);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < cfg.batch_size; ++b)
      batch[b] = dataset[rng() % dataset.size()];
    Tensor x = stack_batch(batch);
    std::vector<int> labels = batch_labels(batch);
    for (auto& p : sgd) p.zero_grad();
    for (auto& p : aux) p.zero_grad();
    LossParts parts = total_loss(m, x, labels, Mode::kTrain);
    check_part("cross-entropy term", parts.ce, step);
    check_part("weight-normalization term", parts.qw, step);
    check_part("activation-normalization term", parts.qa, step);
    check_part("channel-sparsity term", parts.prune, step);
    backward(parts.total);
    sgd_step(sgd, cfg.lr_weights);
    if (!aux.empty())
      adam_step(aux, cfg.lr_aux, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                adam);
    m.reproject_quant_params();
    report.loss_curve.push_back(parts.total.item());
  }

  // training accuracy over a fixed-size eval slice
  const size_t n_eval = std::min<size_t>(dataset.size(), 512);
  std::vector<Sample> eval_slice(dataset.begin(), dataset.begin() + n_eval);
  NoGradGuard ng;
  ForwardAux fa = forward_hybrid(m, stack_batch(eval_slice), Mode::kEval);
  report.final_train_accuracy = accuracy(fa.logits, batch_labels(eval_slice));
  report.active_channels = m.active_channels();
  return report;
}

void freeze_quant(HybridModel& m) { m.quant_frozen = true; }

void online_update_step(HybridModel& m, const Tensor& x,
                        const std::vector<int>& labels, int iters, double lr,
                        const Tensor* cached_quant) {
  if (!m.quant_frozen)
    fail("online_update_step: freeze_quant must be called first");
  std::vector<Tensor> params = m.online_params();
  for (int it = 0; it < iters; ++it) {
    for (auto& p : params) p.zero_grad();
    Tensor a_h;
    if (m.cfg.quant_branch && m.cfg.prune_branch) {
      Tensor a_q;
      if (cached_quant) {
        a_q = *cached_quant;
      } else {
        NoGradGuard ng;
        a_q = forward_quant_features(m, x, Mode::kOnline);
      }
      Tensor a_p = forward_prune_features(m, x, Mode::kOnline);
      a_h = add(a_q, a_p);
    } else if (m.cfg.prune_branch) {
      a_h = forward_prune_features(m, x, Mode::kOnline);
    } else {
      fail("online_update_step: nothing to update without a prune branch");
    }
    Tensor logits = forward_head(m, a_h, Mode::kOnline);
    Tensor ce = cross_entropy(logits, labels);
    backward(ce);
    sgd_step(params, lr);
  }
}

std::vector<uint8_t> quant_branch_bytes(const HybridModel& m) {
  std::vector<uint8_t> out;
  auto put = [&out](const std::string& name, std::span<const double> vals) {
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(0);
    const auto* bytes = reinterpret_cast<const uint8_t*>(vals.data());
    out.insert(out.end(), bytes, bytes + vals.size() * sizeof(double));
  };
  for (size_t i = 0; i < m.cfg.backbone.size(); ++i) {
    if (m.q_weights[i].defined())
      put(m.q_weights[i].name(), m.q_weights[i].data());
    if (m.q_bns[i].gamma.defined()) {
      put(m.q_bns[i].gamma.name(), m.q_bns[i].gamma.data());
      put(m.q_bns[i].beta.name(), m.q_bns[i].beta.data());
      put("q.bn" + std::to_string(i) + ".running_mean", m.q_bns[i].running_mean);
      put("q.bn" + std::to_string(i) + ".running_var", m.q_bns[i].running_var);
    }
    if (m.has_qp[i]) {
      put(m.qps[i].c_w.name(), m.qps[i].c_w.data());
      put(m.qps[i].d_w.name(), m.qps[i].d_w.data());
      put(m.qps[i].c_a.name(), m.qps[i].c_a.data());
      put(m.qps[i].d_a.name(), m.qps[i].d_a.data());
    }
  }
  if (m.cfg.head_act_bits > 0) {
    put(m.head_qp.c_a.name(), m.head_qp.c_a.data());
    put(m.head_qp.d_a.name(), m.head_qp.d_a.data());
  }
  return out;
}

}  // namespace hybridnet
