// Checkpoint container: 4-byte magic, u32 manifest length, JSON manifest,
// then one flat little-endian payload (f64 tensors, i32 code tensors) in
// manifest order. Writes go to a temp file and are renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>

#include "hybridnet/config.hpp"
#include "hybridnet/hybrid_net.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace hybridnet {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'H', 'N', 'C', 'K'};
constexpr int kFormatVersion = 1;

struct BlobRef {
  std::string name;
  std::vector<int64_t> shape;
  const double* f64 = nullptr;
  const int32_t* i32 = nullptr;
  int64_t count = 0;
};

// Deterministic traversal of everything a model owns. `vec` entries wrap the
// batchnorm running statistics, which are not tensors.
void visit_model(
    const HybridModel& m,
    const std::function<void(const std::string&, const Tensor&)>& tensor,
    const std::function<void(const std::string&, const std::vector<double>&)>&
        vec) {
  for (size_t i = 0; i < m.cfg.backbone.size(); ++i) {
    const std::string bn_prefix = "bn" + std::to_string(i);
    if (m.q_weights[i].defined()) tensor(m.q_weights[i].name(), m.q_weights[i]);
    if (m.q_bns[i].gamma.defined()) {
      tensor(m.q_bns[i].gamma.name(), m.q_bns[i].gamma);
      tensor(m.q_bns[i].beta.name(), m.q_bns[i].beta);
      vec("q." + bn_prefix + ".running_mean", m.q_bns[i].running_mean);
      vec("q." + bn_prefix + ".running_var", m.q_bns[i].running_var);
    }
    if (m.has_qp[i]) {
      tensor(m.qps[i].c_w.name(), m.qps[i].c_w);
      tensor(m.qps[i].d_w.name(), m.qps[i].d_w);
      tensor(m.qps[i].c_a.name(), m.qps[i].c_a);
      tensor(m.qps[i].d_a.name(), m.qps[i].d_a);
    }
    if (m.p_weights[i].defined()) tensor(m.p_weights[i].name(), m.p_weights[i]);
    if (m.p_bns[i].gamma.defined()) {
      tensor(m.p_bns[i].gamma.name(), m.p_bns[i].gamma);
      tensor(m.p_bns[i].beta.name(), m.p_bns[i].beta);
      vec("p." + bn_prefix + ".running_mean", m.p_bns[i].running_mean);
      vec("p." + bn_prefix + ".running_var", m.p_bns[i].running_var);
    }
    if (m.has_gate[i]) tensor(m.gates[i].logits.name(), m.gates[i].logits);
  }
  for (size_t j = 0; j < m.cfg.head.size(); ++j) {
    if (m.head_weights[j].defined())
      tensor(m.head_weights[j].name(), m.head_weights[j]);
    if (m.head_has_gate[j])
      tensor(m.head_gates[j].logits.name(), m.head_gates[j].logits);
  }
  if (m.cfg.head_act_bits > 0) {
    tensor(m.head_qp.c_a.name(), m.head_qp.c_a);
    tensor(m.head_qp.d_a.name(), m.head_qp.d_a);
  }
}

}  // namespace

void save_checkpoint(const HybridModel& m, const std::string& path) {
  NoGradGuard ng;  // code emission below must not record graph nodes
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["seed"] = m.seed;
  manifest["frozen"] = m.quant_frozen;
  manifest["model"] = json::parse(model_config_to_json_text(m.cfg));
  json gate_seeds = json::object();
  for (size_t i = 0; i < m.cfg.backbone.size(); ++i)
    if (m.has_gate[i]) gate_seeds[m.cfg.backbone[i].name] = m.gates[i].rng_seed;
  for (size_t j = 0; j < m.cfg.head.size(); ++j)
    if (m.head_has_gate[j]) gate_seeds[m.cfg.head[j].name] = m.head_gates[j].rng_seed;
  manifest["rng_seeds"] = gate_seeds;

  json tensors = json::array();
  std::vector<std::pair<const void*, int64_t>> blobs;  // ptr, bytes
  int64_t offset = 0;
  auto add = [&](const std::string& name, const std::vector<int64_t>& shape,
                 const void* ptr, int64_t count, const char* dtype,
                 int64_t elem_size) {
    json t;
    t["name"] = name;
    t["shape"] = shape;
    t["dtype"] = dtype;
    t["offset"] = offset;
    t["count"] = count;
    tensors.push_back(t);
    blobs.emplace_back(ptr, count * elem_size);
    offset += count * elem_size;
  };
  visit_model(
      m,
      [&](const std::string& name, const Tensor& t) {
        add(name, t.shape(), t.data().data(), t.numel(), "f64", 8);
      },
      [&](const std::string& name, const std::vector<double>& v) {
        add(name, {static_cast<int64_t>(v.size())}, v.data(),
            static_cast<int64_t>(v.size()), "f64", 8);
      });
  // Emitted integer weight codes for the quantized convolutions. Derived
  // data for deployment; the loader rebuilds the model from the f64 tensors
  // and leaves these untouched.
  std::vector<IntCodeTensor> code_blobs;
  for (size_t i = 0; i < m.cfg.backbone.size(); ++i) {
    if (!m.has_qp[i] || m.cfg.backbone[i].weight_bits == 0) continue;
    code_blobs.push_back(quantize_weight(
        transform_weight(m.q_weights[i], m.qps[i]), m.cfg.backbone[i].weight_bits));
    const IntCodeTensor& codes = code_blobs.back();
    add("q." + m.cfg.backbone[i].name + ".weight_codes", codes.shape,
        codes.codes.data(), codes.numel(), "i32", 4);
    tensors.back()["scale"] = codes.scale;
  }
  manifest["tensors"] = tensors;
  manifest["payload_bytes"] = offset;

  const std::string mtext = manifest.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    const uint32_t mlen = static_cast<uint32_t>(mtext.size());
    out.write(reinterpret_cast<const char*>(&mlen), 4);
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [ptr, bytes] : blobs)
      out.write(static_cast<const char*>(ptr), bytes);
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
  }
  std::filesystem::rename(tmp, path);
}

HybridModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorCode::kBadManifest,
                                 "cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError(CheckpointErrorCode::kBadMagic,
                          "not a checkpoint file: " + path);
  uint32_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), 4);
  if (!in)
    throw CheckpointError(CheckpointErrorCode::kBadManifest,
                          "manifest length missing");
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), mlen);
  if (!in)
    throw CheckpointError(CheckpointErrorCode::kBadManifest,
                          "manifest truncated");
  json manifest;
  try {
    manifest = json::parse(mtext);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorCode::kBadManifest,
                          std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("format_version") ||
      manifest["format_version"].get<int>() != kFormatVersion)
    throw CheckpointError(CheckpointErrorCode::kVersionMismatch,
                          "unsupported checkpoint format version");

  const int64_t payload_bytes = manifest.value("payload_bytes", int64_t{-1});
  if (payload_bytes < 0)
    throw CheckpointError(CheckpointErrorCode::kBadManifest,
                          "manifest missing payload_bytes");
  std::vector<uint8_t> payload(payload_bytes);
  in.read(reinterpret_cast<char*>(payload.data()), payload_bytes);
  if (in.gcount() != payload_bytes)
    throw CheckpointError(CheckpointErrorCode::kTruncatedPayload,
                          "payload truncated: expected " +
                              std::to_string(payload_bytes) + " bytes, got " +
                              std::to_string(in.gcount()));
  in.peek();
  if (!in.eof())
    throw CheckpointError(CheckpointErrorCode::kPayloadSizeMismatch,
                          "trailing bytes after payload");

  ModelConfig cfg;
  try {
    cfg = model_config_from_json_text(manifest["model"].dump());
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorCode::kBadManifest,
                          std::string("bad model config in manifest: ") + e.what());
  }
  const uint64_t seed = manifest.value("seed", uint64_t{0});
  HybridModel m = build_model(cfg, seed);
  m.quant_frozen = manifest.value("frozen", false);

  struct Entry {
    std::vector<int64_t> shape;
    int64_t offset = 0, count = 0;
    std::string dtype;
  };
  std::map<std::string, Entry> entries;
  for (const auto& t : manifest["tensors"]) {
    Entry e;
    e.shape = t["shape"].get<std::vector<int64_t>>();
    e.offset = t["offset"].get<int64_t>();
    e.count = t["count"].get<int64_t>();
    e.dtype = t["dtype"].get<std::string>();
    int64_t n = 1;
    for (int64_t d : e.shape) n *= d;
    if (n != e.count)
      throw CheckpointError(
          CheckpointErrorCode::kShapeMismatch,
          "tensor " + t["name"].get<std::string>() +
              ": shape does not match element count in manifest");
    const int64_t elem = e.dtype == "i32" ? 4 : 8;
    if (e.offset < 0 || e.offset + e.count * elem > payload_bytes)
      throw CheckpointError(CheckpointErrorCode::kPayloadSizeMismatch,
                            "tensor " + t["name"].get<std::string>() +
                                " extends past the payload");
    entries[t["name"].get<std::string>()] = std::move(e);
  }

  auto fetch = [&](const std::string& name, std::span<double> dst,
                   const std::vector<int64_t>& expect_shape) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw CheckpointError(CheckpointErrorCode::kBadManifest,
                            "tensor missing from checkpoint: " + name);
    const Entry& e = it->second;
    if (e.shape != expect_shape)
      throw CheckpointError(CheckpointErrorCode::kShapeMismatch,
                            "tensor " + name + " has unexpected shape");
    std::memcpy(dst.data(), payload.data() + e.offset, e.count * 8);
  };
  visit_model(
      m,
      [&](const std::string& name, const Tensor& t) {
        fetch(name, const_cast<Tensor&>(t).mutable_data(), t.shape());
      },
      [&](const std::string& name, const std::vector<double>& v) {
        auto& vv = const_cast<std::vector<double>&>(v);
        fetch(name, vv, {static_cast<int64_t>(v.size())});
      });

  // restore gate rng streams from their recorded seeds
  if (manifest.contains("rng_seeds")) {
    for (size_t i = 0; i < m.cfg.backbone.size(); ++i)
      if (m.has_gate[i] &&
          manifest["rng_seeds"].contains(m.cfg.backbone[i].name))
        m.gates[i].reseed(
            manifest["rng_seeds"][m.cfg.backbone[i].name].get<uint64_t>());
    for (size_t j = 0; j < m.cfg.head.size(); ++j)
      if (m.head_has_gate[j] &&
          manifest["rng_seeds"].contains(m.cfg.head[j].name))
        m.head_gates[j].reseed(
            manifest["rng_seeds"][m.cfg.head[j].name].get<uint64_t>());
  }
  return m;
}

}  // namespace hybridnet
