#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "hybridnet/config.hpp"
#include "hybridnet/hybrid_net.hpp"
#include "hybridnet/stream.hpp"
#include "testutil.hpp"

using namespace hybridnet;

namespace {

// Small two-conv hybrid used across these tests.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.in_channels = 1;
  cfg.in_h = 12;
  cfg.in_w = 12;
  cfg.n_classes = 4;
  cfg.backbone = {testutil::conv_spec(1, 6, 3, 0, 4, true),
                  testutil::bn_spec(),
                  testutil::relu_spec(),
                  testutil::pool_spec(2, 2),
                  testutil::conv_spec(6, 8, 3, 4, 4, true),
                  testutil::bn_spec(),
                  testutil::relu_spec()};
  cfg.head = {testutil::linear_spec(8 * 3 * 3, 16, true), testutil::relu_spec(),
              testutil::linear_spec(16, 4)};
  return cfg;
}

Tensor random_input(std::mt19937_64& rng, const ModelConfig& cfg, int64_t n) {
  return testutil::rand_tensor({n, cfg.in_channels, cfg.in_h, cfg.in_w}, rng,
                               -0.5, 1.5);
}

StreamSpec tiny_stream_spec() {
  StreamSpec s;
  s.n_classes = 4;
  s.height = 12;
  s.width = 12;
  s.radius = 3.5;
  s.blob_sigma = 1.5;
  s.frames = 40;
  return s;
}

}  // namespace

TEST_CASE("config validation catches structural mistakes") {
  ModelConfig ok = tiny_config();
  validate_model_config(ok);
  CHECK(ok.backbone[0].name == "conv1");
  CHECK(ok.backbone[4].name == "conv2");
  CHECK(ok.head[0].name == "fc3");
  CHECK(ok.backbone[4].out_h == 3);

  ModelConfig bad = tiny_config();
  bad.backbone[4].c_in = 5;  // breaks the chain
  CHECK_THROWS(validate_model_config(bad));

  ModelConfig bad2 = tiny_config();
  bad2.head.back().prunable = true;  // final layer must stay intact
  CHECK_THROWS(validate_model_config(bad2));

  ModelConfig bad3 = tiny_config();
  bad3.backbone[0].weight_bits = 1;
  CHECK_THROWS(validate_model_config(bad3));
}

TEST_CASE("hybrid forward decomposes into the two branch forwards exactly") {
  std::mt19937_64 rng(3);
  HybridModel m = build_model(tiny_config(), 42);
  Tensor x = random_input(rng, m.cfg, 3);
  NoGradGuard ng;
  ForwardAux aux = forward_hybrid(m, x, Mode::kEval);
  Tensor a_q = forward_quant_features(m, x, Mode::kEval);
  Tensor a_p = forward_prune_features(m, x, Mode::kEval);
  REQUIRE(aux.a_h.numel() == a_q.numel());
  for (int64_t i = 0; i < aux.a_h.numel(); ++i)
    CHECK(aux.a_h.data()[i] == a_q.data()[i] + a_p.data()[i]);
}

TEST_CASE("zeroed branches reduce the fusion to the other branch") {
  std::mt19937_64 rng(5);
  HybridModel m = build_model(tiny_config(), 43);
  Tensor x = random_input(rng, m.cfg, 2);
  NoGradGuard ng;

  // zero the prune branch entirely: weights and all gate probabilities
  HybridModel zp = clone_model(m);
  for (auto& w : zp.p_weights)
    if (w.defined())
      for (auto& v : w.mutable_data()) v = 0.0;
  for (size_t i = 0; i < zp.gates.size(); ++i)
    if (zp.has_gate[i])
      for (auto& v : zp.gates[i].logits.mutable_data()) v = -50.0;
  // beta is zero by default, so the zeroed branch contributes exactly nothing
  Tensor a_q = forward_quant_features(zp, x, Mode::kEval);
  ForwardAux aux = forward_hybrid(zp, x, Mode::kEval);
  for (int64_t i = 0; i < aux.a_h.numel(); ++i)
    CHECK(aux.a_h.data()[i] == a_q.data()[i]);

  HybridModel zq = clone_model(m);
  for (auto& w : zq.q_weights)
    if (w.defined())
      for (auto& v : w.mutable_data()) v = 0.0;
  // keep zero inside the prune region of the weight transform so the zeroed
  // weights quantize to zero codes
  for (size_t i = 0; i < zq.qps.size(); ++i)
    if (zq.has_qp[i]) {
      zq.qps[i].c_w.mutable_data()[0] = 0.5;
      zq.qps[i].d_w.mutable_data()[0] = 0.25;
    }
  Tensor a_p = forward_prune_features(zq, x, Mode::kEval);
  ForwardAux aux2 = forward_hybrid(zq, x, Mode::kEval);
  for (int64_t i = 0; i < aux2.a_h.numel(); ++i)
    CHECK(aux2.a_h.data()[i] == a_p.data()[i]);
}

TEST_CASE("total_loss composition and lambda zeroing") {
  std::mt19937_64 rng(7);
  HybridModel m = build_model(tiny_config(), 44);
  Tensor x = random_input(rng, m.cfg, 4);
  std::vector<int> labels{0, 1, 2, 3};

  LossParts parts = total_loss(m, x, labels, Mode::kTrain);
  REQUIRE(parts.has_qw);
  REQUIRE(parts.has_qa);
  REQUIRE(parts.has_prune);
  // same association order as the implementation: ((ce + l1*(qw+qa)) + l2*lp)
  const double expect =
      (parts.ce.item() +
       m.cfg.lambda1 * (parts.qw.item() + parts.qa.item())) +
      m.cfg.lambda2 * parts.prune.item();
  CHECK(parts.total.item() == expect);

  HybridModel m2 = build_model(tiny_config(), 44);
  m2.cfg.lambda1 = 0.0;
  m2.cfg.lambda2 = 0.0;
  LossParts plain = total_loss(m2, x, labels, Mode::kTrain);
  CHECK(plain.total.item() == plain.ce.item());

  CHECK_THROWS(total_loss(m, x, {0, 1, 2, 9}, Mode::kTrain));
}

TEST_CASE("gradient flow separation") {
  std::mt19937_64 rng(9);
  ModelConfig cfg = tiny_config();
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 0.0;
  HybridModel m = build_model(cfg, 45);
  Tensor x = random_input(rng, m.cfg, 4);
  std::vector<int> labels{1, 0, 3, 2};

  // with both lambdas zero the gate logits still receive gradient, but only
  // through the mask path: the same gradient as a pure cross-entropy loss
  auto gate_grads = [&](HybridModel& model) {
    for (auto& p : model.aux_params()) p.zero_grad();
    for (auto& p : model.sgd_params()) p.zero_grad();
    for (size_t i = 0; i < model.gates.size(); ++i)
      if (model.has_gate[i]) model.gates[i].reseed(99);
    for (size_t j = 0; j < model.head_gates.size(); ++j)
      if (model.head_has_gate[j]) model.head_gates[j].reseed(199);
    LossParts parts = total_loss(model, x, labels, Mode::kTrain);
    backward(parts.total);
    std::vector<double> out;
    for (size_t i = 0; i < model.gates.size(); ++i)
      if (model.has_gate[i])
        out.insert(out.end(), model.gates[i].logits.grad().begin(),
                   model.gates[i].logits.grad().end());
    return out;
  };
  auto g1 = gate_grads(m);
  bool any = false;
  for (double g : g1) any = any || g != 0.0;
  CHECK(any);

  // detached prune branch: quant-weight gradients match a standalone
  // quant-only model with identical parameters
  HybridModel hybrid = build_model(cfg, 46);
  for (auto& w : hybrid.p_weights)
    if (w.defined())
      for (auto& v : w.mutable_data()) v = 0.0;
  for (size_t i = 0; i < hybrid.gates.size(); ++i)
    if (hybrid.has_gate[i])
      for (auto& v : hybrid.gates[i].logits.mutable_data()) v = -50.0;

  ModelConfig qcfg = cfg;
  qcfg.prune_branch = false;
  HybridModel solo = build_model(qcfg, 46);
  // copy the quant branch and head over so both models agree parameter-wise
  for (size_t i = 0; i < hybrid.q_weights.size(); ++i) {
    if (hybrid.q_weights[i].defined()) {
      auto src = hybrid.q_weights[i].data();
      std::copy(src.begin(), src.end(), solo.q_weights[i].mutable_data().begin());
    }
    if (hybrid.has_qp[i]) {
      solo.qps[i].c_w.mutable_data()[0] = hybrid.qps[i].c_w.item();
      solo.qps[i].d_w.mutable_data()[0] = hybrid.qps[i].d_w.item();
      solo.qps[i].c_a.mutable_data()[0] = hybrid.qps[i].c_a.item();
      solo.qps[i].d_a.mutable_data()[0] = hybrid.qps[i].d_a.item();
    }
  }
  for (size_t j = 0; j < hybrid.head_weights.size(); ++j)
    if (hybrid.head_weights[j].defined()) {
      auto src = hybrid.head_weights[j].data();
      std::copy(src.begin(), src.end(),
                solo.head_weights[j].mutable_data().begin());
    }
  // eval-style masks so the hybrid's dead gates cannot sample alive
  auto quant_grads = [&](HybridModel& model) {
    for (auto& p : model.sgd_params()) p.zero_grad();
    ForwardAux aux = forward_hybrid(model, x, Mode::kEval);
    Tensor ce = cross_entropy(aux.logits, labels);
    backward(ce);
    std::vector<double> out;
    for (auto& w : model.q_weights)
      if (w.defined()) out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  auto gh = quant_grads(hybrid);
  auto gs = quant_grads(solo);
  REQUIRE(gh.size() == gs.size());
  for (size_t i = 0; i < gh.size(); ++i)
    CHECK(gh[i] == doctest::Approx(gs[i]).epsilon(1e-12));
}

TEST_CASE("pretrain on a separable toy task reaches high accuracy") {
  StreamSpec spec = tiny_stream_spec();
  auto dataset = make_dataset(spec, 400, 7);
  HybridModel m = build_model(tiny_config(), 47);
  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 16;
  tc.lr_weights = 0.05;
  tc.lr_aux = 0.005;
  tc.seed = 11;
  TrainReport rep = pretrain(m, dataset, tc);
  CHECK(rep.final_train_accuracy >= 0.95);
  CHECK(rep.loss_curve.size() == 200);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  StreamSpec spec = tiny_stream_spec();
  auto dataset = make_dataset(spec, 64, 9);
  HybridModel m = build_model(tiny_config(), 48);
  std::vector<double> before;
  for (auto& p : m.sgd_params())
    before.insert(before.end(), p.data().begin(), p.data().end());
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 8;
  tc.lr_weights = 0.0;
  tc.lr_aux = 0.0;
  pretrain(m, dataset, tc);
  std::vector<double> after;
  for (auto& p : m.sgd_params())
    after.insert(after.end(), p.data().begin(), p.data().end());
  REQUIRE(before.size() == after.size());
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("seeded pretraining runs are bit-reproducible") {
  StreamSpec spec = tiny_stream_spec();
  auto run = [&]() {
    auto dataset = make_dataset(spec, 64, 13);
    HybridModel m = build_model(tiny_config(), 50);
    TrainConfig tc;
    tc.steps = 12;
    tc.batch_size = 8;
    tc.seed = 21;
    pretrain(m, dataset, tc);
    std::vector<double> out;
    for (auto& p : m.sgd_params())
      out.insert(out.end(), p.data().begin(), p.data().end());
    for (auto& p : m.aux_params())
      out.insert(out.end(), p.data().begin(), p.data().end());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("freeze contract: online updates leave the quant branch untouched") {
  StreamSpec spec = tiny_stream_spec();
  auto dataset = make_dataset(spec, 128, 15);
  HybridModel m = build_model(tiny_config(), 51);
  TrainConfig tc;
  tc.steps = 30;
  tc.batch_size = 8;
  pretrain(m, dataset, tc);

  // online update without freeze is an error
  auto batch = std::span<const Sample>(dataset.data(), 8);
  Tensor x = stack_batch(batch);
  auto labels = batch_labels(batch);
  CHECK_THROWS(online_update_step(m, x, labels, 1, 0.01));

  freeze_quant(m);
  const auto before = quant_branch_bytes(m);
  std::vector<double> p_before;
  for (auto& w : m.p_weights)
    if (w.defined()) p_before.insert(p_before.end(), w.data().begin(), w.data().end());

  // flip the label mapping so the prune branch has something to learn
  std::vector<int> flipped = labels;
  for (auto& l : flipped) l = (l + 1) % 4;
  for (int round = 0; round < 3; ++round)
    online_update_step(m, x, flipped, 15, 0.02);

  const auto after = quant_branch_bytes(m);
  REQUIRE(before.size() == after.size());
  CHECK(std::memcmp(before.data(), after.data(), before.size()) == 0);

  std::vector<double> p_after;
  for (auto& w : m.p_weights)
    if (w.defined()) p_after.insert(p_after.end(), w.data().begin(), w.data().end());
  double l2 = 0.0;
  for (size_t i = 0; i < p_before.size(); ++i) {
    const double d = p_before[i] - p_after[i];
    l2 += d * d;
  }
  CHECK(l2 > 0.0);
}

TEST_CASE("checkpoint round trip preserves the forward exactly") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "hybridnet_test.ckpt").string();
  StreamSpec spec = tiny_stream_spec();
  auto dataset = make_dataset(spec, 64, 17);
  HybridModel m = build_model(tiny_config(), 52);
  TrainConfig tc;
  tc.steps = 15;
  tc.batch_size = 8;
  pretrain(m, dataset, tc);
  save_checkpoint(m, path);
  HybridModel loaded = load_checkpoint(path);

  std::mt19937_64 rng(19);
  Tensor x = random_input(rng, m.cfg, 3);
  NoGradGuard ng;
  ForwardAux a = forward_hybrid(m, x, Mode::kEval);
  ForwardAux b = forward_hybrid(loaded, x, Mode::kEval);
  REQUIRE(a.logits.numel() == b.logits.numel());
  for (int64_t i = 0; i < a.logits.numel(); ++i)
    CHECK(a.logits.data()[i] == b.logits.data()[i]);

  // the emitted i32 weight codes in the payload match a fresh quantization
  {
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    uint32_t mlen = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&mlen), 4);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), mlen);
    std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    const std::string key = "\"name\":\"q.conv1.weight_codes\"";
    const size_t pos = mtext.find(key);
    REQUIRE(pos != std::string::npos);
    const size_t opos = mtext.find("\"offset\":", pos);
    const int64_t offset = std::strtoll(mtext.c_str() + opos + 9, nullptr, 10);
    IntCodeTensor expect = quantize_weight(
        transform_weight(loaded.q_weights[0], loaded.qps[0]),
        loaded.cfg.backbone[0].weight_bits);
    for (int64_t i = 0; i < expect.numel(); ++i) {
      int32_t v;
      std::memcpy(&v, payload.data() + offset + i * 4, 4);
      CHECK(v == expect.codes[i]);
    }
  }
  fs::remove(path);
}

TEST_CASE("checkpoint corruption yields distinct error codes") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "hybridnet_corrupt.ckpt").string();
  HybridModel m = build_model(tiny_config(), 53);
  save_checkpoint(m, path);

  auto read_all = [&]() {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  auto write_all = [&](const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  const std::string original = read_all();

  // truncated payload
  write_all(original.substr(0, original.size() - 1));
  try {
    load_checkpoint(path);
    FAIL("expected throw");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrorCode::kTruncatedPayload);
  }

  // trailing garbage
  write_all(original + "x");
  try {
    load_checkpoint(path);
    FAIL("expected throw");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrorCode::kPayloadSizeMismatch);
  }

  // manifest edited to a wrong shape
  {
    std::string bytes = original;
    const size_t pos = bytes.find("\"shape\":[6,1,3,3]");
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, 17, "\"shape\":[6,1,3,2]");
    write_all(bytes);
    try {
      load_checkpoint(path);
      FAIL("expected throw");
    } catch (const CheckpointError& e) {
      CHECK(e.code() == CheckpointErrorCode::kShapeMismatch);
    }
  }

  // version bump
  {
    std::string bytes = original;
    const size_t pos = bytes.find("\"format_version\":1");
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, 18, "\"format_version\":9");
    write_all(bytes);
    try {
      load_checkpoint(path);
      FAIL("expected throw");
    } catch (const CheckpointError& e) {
      CHECK(e.code() == CheckpointErrorCode::kVersionMismatch);
    }
  }

  // bad magic
  {
    std::string bytes = original;
    bytes[0] = 'X';
    write_all(bytes);
    try {
      load_checkpoint(path);
      FAIL("expected throw");
    } catch (const CheckpointError& e) {
      CHECK(e.code() == CheckpointErrorCode::kBadMagic);
    }
  }
  fs::remove(path);
}

TEST_CASE("run config parsing is strict about unknown keys") {
  const char* good = R"({
    "seed": 7,
    "model": {
      "input": {"channels": 1, "height": 12, "width": 12},
      "n_classes": 4,
      "backbone": [
        {"kind": "conv", "c_in": 1, "c_out": 4, "kernel": 3, "weight_bits": 4, "prunable": true},
        {"kind": "batchnorm"}, {"kind": "relu"}
      ],
      "head": [{"kind": "linear", "c_in": 400, "c_out": 4}]
    }
  })";
  RunConfig cfg = parse_run_config(good);
  CHECK(cfg.seed == 7);
  CHECK(cfg.has_model);
  CHECK(cfg.model.backbone.size() == 3);

  const char* bad = R"({"seed": 7, "modle": {}})";
  CHECK_THROWS_AS(parse_run_config(bad), ConfigError);

  const char* bad2 = R"({
    "model": {
      "input": {"channels": 1, "height": 12, "width": 12},
      "n_classes": 4,
      "backbone": [{"kind": "conv", "c_in": 1, "c_out": 4, "kernel": 3, "striide": 1}],
      "head": [{"kind": "linear", "c_in": 400, "c_out": 4}]
    }
  })";
  CHECK_THROWS_AS(parse_run_config(bad2), ConfigError);
}

TEST_CASE("stream generator determinism and drift geometry") {
  StreamSpec spec = tiny_stream_spec();
  spec.drift_kind = DriftKind::kRotation;
  spec.drift_rate = 0.002;

  StreamGenerator g1(spec, 5);
  StreamGenerator g2(spec, 5);
  for (int i = 0; i < 20; ++i) {
    Sample a = g1.next();
    Sample b = g2.next();
    CHECK(a.label == b.label);
    for (int64_t j = 0; j < a.x.numel(); ++j)
      CHECK(a.x.data()[j] == b.x.data()[j]);
  }

  // rotation drift moves class means by exactly rate * t radians
  for (int cls = 0; cls < spec.n_classes; ++cls) {
    const double base = StreamGenerator::class_angle(spec, cls, 0);
    const double later = StreamGenerator::class_angle(spec, cls, 500);
    CHECK(later - base == doctest::Approx(0.002 * 500).epsilon(1e-12));
  }

  // drift 0: stream frames match the pretraining distribution (mean image)
  spec.drift_rate = 0.0;
  auto data0 = make_dataset(spec, 400, 23);
  StreamGenerator gs(spec, 29);
  double m_data = 0.0, m_stream = 0.0;
  for (const auto& s : data0)
    for (double v : s.x.data()) m_data += v;
  int64_t count = 0;
  for (int i = 0; i < 400; ++i) {
    Sample s = gs.next();
    for (double v : s.x.data()) m_stream += v;
    count += s.x.numel();
  }
  m_data /= count;
  m_stream /= count;
  CHECK(std::fabs(m_data - m_stream) < 0.01);
}
