#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

// BOPs-based compute accounting. The unit cost per output position is
//   C_in * C_out * K^2 * (b_a*b_w + b_a + b_w + log2(C_in * K^2))
// scaled by the number of output positions; pruning scales the channel counts
// by the surviving fractions (and the accumulator-width log term uses the
// pruned input count).

namespace hybridnet {

struct LayerCostInput {
  int64_t c_in = 1, c_out = 1;
  int64_t kernel = 1;            // 1 for linear layers
  int64_t h_out = 1, w_out = 1;  // 1x1 for linear layers
  int b_a = 32, b_w = 32;        // 32 = full precision
  double keep_in = 1.0, keep_out = 1.0;
};

double layer_bops(const LayerCostInput& in);

struct CostRow {
  std::string name;
  double layer_ratio = 0.0;
  double rc_prune = 0.0, rc_quant = 0.0, rc_hybrid = 0.0;
  bool has_prune = false, has_quant = false;
};

struct CostReport {
  std::vector<CostRow> rows;
  double bops_model = 0.0, bops_baseline = 0.0, rc_total = 0.0;
};

// Raw per-layer BOPs; the assembly step is the single place that turns
// branch BOPs into relative-cost columns.
struct LayerBops {
  std::string name;
  double baseline = 0.0;
  std::optional<double> prune, quant;
};

CostReport assemble_report(std::span<const LayerBops> layers);

// Full hybrid accounting from per-layer shape configs.
struct HybridLayerCost {
  std::string name;
  LayerCostInput baseline;
  std::optional<LayerCostInput> quant, prune;
};

CostReport relative_cost(std::span<const HybridLayerCost> layers);

enum class ReportFormat { kTsv, kMarkdown };

// Deterministic column order {name, LayerRatio, RC_prune, RC_quant,
// RC_hybrid}; ratios printed with 2 decimals, absent branches as "-".
std::string render_report(const CostReport& report, ReportFormat format);

}  // namespace hybridnet
