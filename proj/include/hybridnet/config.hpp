#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "hybridnet/hybrid_net.hpp"
#include "hybridnet/stream.hpp"

// JSON run configuration. Parsing is strict: unknown keys anywhere in the
// document are errors, not warnings.

namespace hybridnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainSection {
  TrainConfig tc;
  int dataset_size = 2048;
  int heldout_size = 512;
};

struct OutputsSection {
  std::string checkpoint = "hybrid_model.ckpt";
  std::string adapted_checkpoint;
};

struct RunConfig {
  uint64_t seed = 0;
  bool seed_set = false;
  ModelConfig model;
  TrainSection train;
  StreamSpec stream;
  // cost-preview keep ratios per layer name (used before gates are trained)
  std::map<std::string, double> cost_keep_out;
  OutputsSection outputs;
  bool has_model = false, has_train = false, has_stream = false;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Seed precedence: explicit CLI value, then config, then HYBRIDNET_SEED,
// then the default.
uint64_t resolve_seed(const RunConfig& cfg, const uint64_t* cli_seed,
                      uint64_t fallback = 12345);

// ModelConfig serialization (shared with the checkpoint manifest).
std::string model_config_to_json_text(const ModelConfig& cfg);
ModelConfig model_config_from_json_text(const std::string& text);

}  // namespace hybridnet
