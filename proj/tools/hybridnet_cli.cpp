// hybridnet command-line front end.
//
//   train <config>      pretrain the hybrid model, write a checkpoint
//   stream <config> --checkpoint <path>
//                       run the drifting-stream protocol with online updates
//   eval <checkpoint> <data-config>
//                       score a checkpoint on a generated stream
//   cost <config> [--format tsv|markdown]
//                       BOPs cost report for the configured architecture
//   selftest            run the built-in invariant suite
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

#include <iostream>

#include "CLI11.hpp"
#include "hybridnet/config.hpp"
#include "hybridnet/cost_model.hpp"
#include "hybridnet/hybrid_net.hpp"
#include "hybridnet/pipeline.hpp"
#include "hybridnet/selftest.hpp"
#include "hybridnet/stream.hpp"

namespace {

using namespace hybridnet;

uint64_t mix(uint64_t seed, uint64_t tag) {
  uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL + tag * 0xbf58476d1ce4e5b9ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  return z ^ (z >> 27);
}

int cmd_train(const std::string& config_path, const uint64_t* cli_seed) {
  RunConfig cfg = load_run_config(config_path);
  if (!cfg.has_model) throw ConfigError("train: config has no model section");
  const uint64_t seed = resolve_seed(cfg, cli_seed);
  StreamSpec spec = cfg.stream;
  spec.seed = spec.seed != 0 ? spec.seed : seed;

  HybridModel model = build_model(cfg.model, seed);
  auto dataset = make_dataset(spec, cfg.train.dataset_size, mix(seed, 1));
  TrainConfig tc = cfg.train.tc;
  tc.seed = mix(seed, 2);
  TrainReport report = pretrain(model, dataset, tc);

  auto heldout = make_dataset(spec, cfg.train.heldout_size, mix(seed, 3));
  double heldout_acc;
  {
    NoGradGuard ng;
    ForwardAux fa = forward_hybrid(model, stack_batch(heldout), Mode::kEval);
    heldout_acc = accuracy(fa.logits, batch_labels(heldout));
  }
  save_checkpoint(model, cfg.outputs.checkpoint);
  std::cout << render_train_summary(report, heldout_acc);
  std::cout << "checkpoint\t" << cfg.outputs.checkpoint << "\n";
  return 0;
}

int cmd_stream(const std::string& config_path, const std::string& ckpt_path,
               const uint64_t* cli_seed) {
  RunConfig cfg = load_run_config(config_path);
  if (!cfg.has_stream) throw ConfigError("stream: config has no stream section");
  const uint64_t seed = resolve_seed(cfg, cli_seed);
  StreamSpec spec = cfg.stream;
  spec.seed = spec.seed != 0 ? spec.seed : seed;

  HybridModel model = load_checkpoint(ckpt_path);
  HybridModel adapted;
  StreamPhaseResult result = run_stream_phase(model, spec, &adapted);
  std::cout << render_segments(result);
  std::cout << "\n" << render_report(result.cost, ReportFormat::kMarkdown);
  if (!cfg.outputs.adapted_checkpoint.empty()) {
    save_checkpoint(adapted, cfg.outputs.adapted_checkpoint);
    std::cout << "adapted_checkpoint\t" << cfg.outputs.adapted_checkpoint << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_config,
             const uint64_t* cli_seed) {
  RunConfig cfg = load_run_config(data_config);
  if (!cfg.has_stream) throw ConfigError("eval: config has no stream section");
  const uint64_t seed = resolve_seed(cfg, cli_seed);
  StreamSpec spec = cfg.stream;
  spec.seed = spec.seed != 0 ? spec.seed : seed;

  HybridModel model = load_checkpoint(ckpt_path);
  StreamGenerator gen(spec, mix(spec.seed, 17));
  int64_t hits = 0;
  NoGradGuard ng;
  for (int64_t t = 0; t < spec.frames; ++t) {
    Sample s = gen.next();
    Tensor x = reshape(s.x, {1, s.x.dim(0), s.x.dim(1), s.x.dim(2)});
    ForwardAux fa = forward_hybrid(model, x, Mode::kEval);
    hits += accuracy(fa.logits, {s.label}) > 0.5;
  }
  std::cout.setf(std::ios::fixed);
  std::cout.precision(2);
  std::cout << "frames\t" << spec.frames << "\n";
  std::cout << "accuracy\t" << 100.0 * hits / spec.frames << "\n";
  return 0;
}

int cmd_cost(const std::string& config_path, const std::string& format) {
  RunConfig cfg = load_run_config(config_path);
  if (!cfg.has_model) throw ConfigError("cost: config has no model section");
  auto rows = cost_rows_for_model(cfg.model, cfg.cost_keep_out, nullptr);
  CostReport rep = relative_cost(rows);
  std::cout << render_report(
      rep, format == "tsv" ? ReportFormat::kTsv : ReportFormat::kMarkdown);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid quantized+pruned representation trainer"};
  app.require_subcommand(1);

  uint64_t seed_value = 0;
  bool seed_given = false;
  app.add_option("--seed", seed_value, "master random seed")
      ->each([&](const std::string&) { seed_given = true; });

  std::string config_path, ckpt_path, data_path;
  std::string format = "markdown";

  CLI::App* train = app.add_subcommand("train", "pretrain and write a checkpoint");
  train->add_option("config", config_path, "run configuration (JSON)")->required();

  CLI::App* stream = app.add_subcommand("stream", "online adaptation over a drifting stream");
  stream->add_option("config", config_path, "run configuration (JSON)")->required();
  stream->add_option("--checkpoint", ckpt_path, "pretrained checkpoint")->required();

  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on generated data");
  eval->add_option("checkpoint", ckpt_path, "checkpoint path")->required();
  eval->add_option("data", data_path, "data configuration (JSON)")->required();

  CLI::App* cost = app.add_subcommand("cost", "BOPs cost report");
  cost->add_option("config", config_path, "run configuration (JSON)")->required();
  cost->add_option("--format", format, "tsv or markdown")
      ->check(CLI::IsMember({"tsv", "markdown"}));

  CLI::App* selftest_cmd = app.add_subcommand("selftest", "run the invariant suite");
  for (CLI::App* sub : {train, stream, eval, cost, selftest_cmd})
    sub->fallthrough();  // --seed may follow the subcommand

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 1;
  }

  const uint64_t* cli_seed = seed_given ? &seed_value : nullptr;
  try {
    if (train->parsed()) return cmd_train(config_path, cli_seed);
    if (stream->parsed()) return cmd_stream(config_path, ckpt_path, cli_seed);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_path, cli_seed);
    if (cost->parsed()) return cmd_cost(config_path, format);
    if (selftest_cmd->parsed()) return selftest(std::cout) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
