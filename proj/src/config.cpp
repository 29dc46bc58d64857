#include "hybridnet/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace hybridnet {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& msg) { throw ConfigError(msg); }

void check_keys(const json& obj, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!obj.is_object()) bad(path + ": expected an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) bad("unknown key " + path + "." + key);
}

double get_num(const json& obj, const std::string& path, const char* key,
               double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number()) bad(path + "." + key + ": expected a number");
  return obj[key].get<double>();
}

int64_t get_int(const json& obj, const std::string& path, const char* key,
                int64_t fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number_integer())
    bad(path + "." + key + ": expected an integer");
  return obj[key].get<int64_t>();
}

bool get_bool(const json& obj, const std::string& path, const char* key,
              bool fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_boolean()) bad(path + "." + key + ": expected a boolean");
  return obj[key].get<bool>();
}

// bit widths are either an integer or the string "full"
int get_bits(const json& obj, const std::string& path, const char* key,
             int fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj[key];
  if (v.is_string()) {
    if (v.get<std::string>() != "full")
      bad(path + "." + key + ": expected an integer or \"full\"");
    return 0;
  }
  if (!v.is_number_integer()) bad(path + "." + key + ": expected an integer or \"full\"");
  return v.get<int>();
}

LayerSpec parse_layer(const json& j, const std::string& path) {
  if (!j.is_object() || !j.contains("kind"))
    bad(path + ": layer needs a \"kind\"");
  const std::string kind = j["kind"].get<std::string>();
  LayerSpec spec;
  if (kind == "conv") {
    check_keys(j, path,
               {"kind", "c_in", "c_out", "kernel", "stride", "padding",
                "act_bits", "weight_bits", "prunable", "name"});
    spec.kind = LayerKind::kConv;
    spec.c_in = get_int(j, path, "c_in", 0);
    spec.c_out = get_int(j, path, "c_out", 0);
    spec.kernel = get_int(j, path, "kernel", 0);
    spec.stride = get_int(j, path, "stride", 1);
    spec.padding = get_int(j, path, "padding", 0);
    spec.act_bits = get_bits(j, path, "act_bits", 0);
    spec.weight_bits = get_bits(j, path, "weight_bits", 0);
    spec.prunable = get_bool(j, path, "prunable", false);
  } else if (kind == "batchnorm") {
    check_keys(j, path, {"kind"});
    spec.kind = LayerKind::kBatchNorm;
  } else if (kind == "relu") {
    check_keys(j, path, {"kind"});
    spec.kind = LayerKind::kRelu;
  } else if (kind == "pool") {
    check_keys(j, path, {"kind", "kernel", "stride"});
    spec.kind = LayerKind::kPool;
    spec.kernel = get_int(j, path, "kernel", 2);
    spec.stride = get_int(j, path, "stride", spec.kernel);
  } else if (kind == "linear") {
    check_keys(j, path, {"kind", "c_in", "c_out", "prunable", "name"});
    spec.kind = LayerKind::kLinear;
    spec.c_in = get_int(j, path, "c_in", 0);
    spec.c_out = get_int(j, path, "c_out", 0);
    spec.prunable = get_bool(j, path, "prunable", false);
  } else {
    bad(path + ": unknown layer kind \"" + kind + "\"");
  }
  if (j.contains("name")) spec.name = j["name"].get<std::string>();
  return spec;
}

ModelConfig parse_model(const json& j, const std::string& path) {
  check_keys(j, path,
             {"input", "n_classes", "lambda1", "lambda2", "quant", "prune",
              "quant_branch", "prune_branch", "backbone", "head"});
  ModelConfig cfg;
  if (j.contains("input")) {
    const json& in = j["input"];
    check_keys(in, path + ".input", {"channels", "height", "width"});
    cfg.in_channels = get_int(in, path + ".input", "channels", 1);
    cfg.in_h = get_int(in, path + ".input", "height", 32);
    cfg.in_w = get_int(in, path + ".input", "width", 32);
  }
  cfg.n_classes = get_int(j, path, "n_classes", 8);
  cfg.lambda1 = get_num(j, path, "lambda1", 1.0);
  cfg.lambda2 = get_num(j, path, "lambda2", 0.01);
  if (j.contains("quant")) {
    const json& q = j["quant"];
    check_keys(q, path + ".quant", {"mu0", "sigma0", "head_act_bits"});
    cfg.targets.mu0 = get_num(q, path + ".quant", "mu0", 0.5);
    cfg.targets.sigma0 = get_num(q, path + ".quant", "sigma0", 0.25);
    cfg.head_act_bits = get_bits(q, path + ".quant", "head_act_bits", 0);
  }
  if (j.contains("prune")) {
    const json& p = j["prune"];
    check_keys(p, path + ".prune", {"tau", "threshold", "init_prob"});
    cfg.tau = get_num(p, path + ".prune", "tau", 1.0);
    cfg.prune_threshold = get_num(p, path + ".prune", "threshold", 0.5);
    cfg.prune_init_prob = get_num(p, path + ".prune", "init_prob", 0.8);
  }
  cfg.quant_branch = get_bool(j, path, "quant_branch", true);
  cfg.prune_branch = get_bool(j, path, "prune_branch", true);
  if (!j.contains("backbone") || !j["backbone"].is_array())
    bad(path + ": backbone array required");
  for (size_t i = 0; i < j["backbone"].size(); ++i)
    cfg.backbone.push_back(parse_layer(
        j["backbone"][i], path + ".backbone[" + std::to_string(i) + "]"));
  if (!j.contains("head") || !j["head"].is_array())
    bad(path + ": head array required");
  for (size_t i = 0; i < j["head"].size(); ++i)
    cfg.head.push_back(
        parse_layer(j["head"][i], path + ".head[" + std::to_string(i) + "]"));
  return cfg;
}

StreamSpec parse_stream(const json& j, const std::string& path) {
  check_keys(j, path,
             {"n_classes", "drift_kind", "drift_rate", "frames",
              "frames_per_update", "update_iters", "replay_len", "segment",
              "seed", "radius", "blob_sigma", "noise", "jitter", "online_lr"});
  StreamSpec s;
  s.n_classes = static_cast<int>(get_int(j, path, "n_classes", 8));
  if (j.contains("drift_kind")) {
    const std::string k = j["drift_kind"].get<std::string>();
    if (k == "rotation")
      s.drift_kind = DriftKind::kRotation;
    else if (k == "mean-shift")
      s.drift_kind = DriftKind::kMeanShift;
    else if (k == "label-flip")
      s.drift_kind = DriftKind::kLabelFlip;
    else
      bad(path + ".drift_kind: expected rotation|mean-shift|label-flip");
  }
  s.drift_rate = get_num(j, path, "drift_rate", 0.0);
  s.frames = get_int(j, path, "frames", 1000);
  s.frames_per_update = static_cast<int>(get_int(j, path, "frames_per_update", 10));
  s.update_iters = static_cast<int>(get_int(j, path, "update_iters", 15));
  s.replay_len = static_cast<int>(get_int(j, path, "replay_len", 20));
  s.segment = static_cast<int>(get_int(j, path, "segment", 100));
  s.seed = static_cast<uint64_t>(get_int(j, path, "seed", 0));
  s.radius = get_num(j, path, "radius", 9.0);
  s.blob_sigma = get_num(j, path, "blob_sigma", 2.5);
  s.noise = get_num(j, path, "noise", 0.15);
  s.jitter = get_num(j, path, "jitter", 0.75);
  s.online_lr = get_num(j, path, "online_lr", 0.02);
  return s;
}

json layer_to_json(const LayerSpec& spec) {
  json j;
  switch (spec.kind) {
    case LayerKind::kConv:
      j["kind"] = "conv";
      j["c_in"] = spec.c_in;
      j["c_out"] = spec.c_out;
      j["kernel"] = spec.kernel;
      j["stride"] = spec.stride;
      j["padding"] = spec.padding;
      if (spec.act_bits > 0) j["act_bits"] = spec.act_bits;
      if (spec.weight_bits > 0) j["weight_bits"] = spec.weight_bits;
      j["prunable"] = spec.prunable;
      break;
    case LayerKind::kBatchNorm:
      j["kind"] = "batchnorm";
      break;
    case LayerKind::kRelu:
      j["kind"] = "relu";
      break;
    case LayerKind::kPool:
      j["kind"] = "pool";
      j["kernel"] = spec.kernel;
      j["stride"] = spec.stride;
      break;
    case LayerKind::kLinear:
      j["kind"] = "linear";
      j["c_in"] = spec.c_in;
      j["c_out"] = spec.c_out;
      j["prunable"] = spec.prunable;
      break;
  }
  if (!spec.name.empty()) j["name"] = spec.name;
  return j;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    bad(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "config",
             {"seed", "model", "train", "stream", "cost", "outputs"});
  RunConfig cfg;
  if (j.contains("seed")) {
    cfg.seed = static_cast<uint64_t>(get_int(j, "config", "seed", 0));
    cfg.seed_set = true;
  }
  if (j.contains("model")) {
    cfg.model = parse_model(j["model"], "model");
    cfg.has_model = true;
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train",
               {"steps", "batch_size", "lr_weights", "lr_aux", "dataset_size",
                "heldout_size"});
    cfg.train.tc.steps = static_cast<int>(get_int(t, "train", "steps", 1000));
    cfg.train.tc.batch_size =
        static_cast<int>(get_int(t, "train", "batch_size", 16));
    cfg.train.tc.lr_weights = get_num(t, "train", "lr_weights", 0.05);
    cfg.train.tc.lr_aux = get_num(t, "train", "lr_aux", 0.005);
    cfg.train.dataset_size =
        static_cast<int>(get_int(t, "train", "dataset_size", 2048));
    cfg.train.heldout_size =
        static_cast<int>(get_int(t, "train", "heldout_size", 512));
    if (cfg.train.tc.steps < 0 || cfg.train.tc.batch_size < 1 ||
        cfg.train.dataset_size < 1)
      bad("train: steps/batch_size/dataset_size out of range");
    cfg.has_train = true;
  }
  if (j.contains("stream")) {
    cfg.stream = parse_stream(j["stream"], "stream");
    validate_stream_spec(cfg.stream);
    cfg.has_stream = true;
  }
  if (j.contains("cost")) {
    const json& c = j["cost"];
    check_keys(c, "cost", {"keep_out"});
    if (c.contains("keep_out")) {
      if (!c["keep_out"].is_object()) bad("cost.keep_out: expected an object");
      for (const auto& [name, v] : c["keep_out"].items()) {
        if (!v.is_number()) bad("cost.keep_out." + name + ": expected a number");
        cfg.cost_keep_out[name] = v.get<double>();
      }
    }
  }
  if (j.contains("outputs")) {
    const json& o = j["outputs"];
    check_keys(o, "outputs", {"checkpoint", "adapted_checkpoint"});
    if (o.contains("checkpoint"))
      cfg.outputs.checkpoint = o["checkpoint"].get<std::string>();
    if (o.contains("adapted_checkpoint"))
      cfg.outputs.adapted_checkpoint =
          o["adapted_checkpoint"].get<std::string>();
  }
  if (cfg.has_model) {
    ModelConfig check = cfg.model;
    try {
      validate_model_config(check);  // fail fast, names assigned on build
    } catch (const std::exception& e) {
      bad(e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) bad("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

uint64_t resolve_seed(const RunConfig& cfg, const uint64_t* cli_seed,
                      uint64_t fallback) {
  if (cli_seed) return *cli_seed;
  if (cfg.seed_set) return cfg.seed;
  if (const char* env = std::getenv("HYBRIDNET_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end && *end == '\0') return static_cast<uint64_t>(v);
  }
  return fallback;
}

std::string model_config_to_json_text(const ModelConfig& cfg) {
  json j;
  j["input"] = {{"channels", cfg.in_channels},
                {"height", cfg.in_h},
                {"width", cfg.in_w}};
  j["n_classes"] = cfg.n_classes;
  j["lambda1"] = cfg.lambda1;
  j["lambda2"] = cfg.lambda2;
  json q;
  q["mu0"] = cfg.targets.mu0;
  q["sigma0"] = cfg.targets.sigma0;
  if (cfg.head_act_bits > 0) q["head_act_bits"] = cfg.head_act_bits;
  j["quant"] = q;
  j["prune"] = {{"tau", cfg.tau},
                {"threshold", cfg.prune_threshold},
                {"init_prob", cfg.prune_init_prob}};
  j["quant_branch"] = cfg.quant_branch;
  j["prune_branch"] = cfg.prune_branch;
  j["backbone"] = json::array();
  for (const auto& spec : cfg.backbone) j["backbone"].push_back(layer_to_json(spec));
  j["head"] = json::array();
  for (const auto& spec : cfg.head) j["head"].push_back(layer_to_json(spec));
  return j.dump();
}

ModelConfig model_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    bad(std::string("model config is not valid JSON: ") + e.what());
  }
  return parse_model(j, "model");
}

}  // namespace hybridnet
