#include "hybridnet/cost_model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hybridnet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string fmt2(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v;
  return os.str();
}

}  // namespace

double layer_bops(const LayerCostInput& in) {
  if (in.c_in < 1 || in.c_out < 1 || in.kernel < 1 || in.h_out < 1 ||
      in.w_out < 1 || in.b_a < 1 || in.b_w < 1)
    fail("layer_bops: all dimensions and bit-widths must be positive");
  if (!(in.keep_in > 0.0 && in.keep_in <= 1.0) ||
      !(in.keep_out > 0.0 && in.keep_out <= 1.0))
    fail("layer_bops: keep ratios must be in (0,1]");
  const double eff_in = in.keep_in * static_cast<double>(in.c_in);
  const double eff_out = in.keep_out * static_cast<double>(in.c_out);
  if (eff_in < 1.0 || eff_out < 1.0)
    fail("layer_bops: keep ratio leaves less than one channel");
  const double k2 = static_cast<double>(in.kernel * in.kernel);
  const double ba = in.b_a, bw = in.b_w;
  const double unit = ba * bw + ba + bw + std::log2(eff_in * k2);
  return eff_in * eff_out * k2 *
         static_cast<double>(in.h_out * in.w_out) * unit;
}

CostReport assemble_report(std::span<const LayerBops> layers) {
  CostReport rep;
  double base_total = 0.0;
  for (const auto& l : layers) {
    if (l.baseline <= 0.0) fail("assemble_report: baseline BOPs must be positive");
    base_total += l.baseline;
  }
  double model_total = 0.0;
  for (const auto& l : layers) {
    CostRow row;
    row.name = l.name;
    row.layer_ratio = l.baseline / base_total;
    double model_layer = 0.0;
    if (l.prune) {
      row.has_prune = true;
      row.rc_prune = *l.prune / l.baseline;
      model_layer += *l.prune;
    }
    if (l.quant) {
      row.has_quant = true;
      row.rc_quant = *l.quant / l.baseline;
      model_layer += *l.quant;
    }
    row.rc_hybrid = model_layer / l.baseline;
    model_total += model_layer;
    rep.rows.push_back(std::move(row));
  }
  rep.bops_baseline = base_total;
  rep.bops_model = model_total;
  rep.rc_total = base_total > 0.0 ? model_total / base_total : 0.0;
  return rep;
}

CostReport relative_cost(std::span<const HybridLayerCost> layers) {
  std::vector<LayerBops> rows;
  rows.reserve(layers.size());
  for (const auto& l : layers) {
    if (l.name.empty()) fail("relative_cost: layer name required");
    LayerBops r;
    r.name = l.name;
    r.baseline = layer_bops(l.baseline);
    if (l.prune) r.prune = layer_bops(*l.prune);
    if (l.quant) r.quant = layer_bops(*l.quant);
    rows.push_back(std::move(r));
  }
  return assemble_report(rows);
}

std::string render_report(const CostReport& report, ReportFormat format) {
  std::ostringstream os;
  const bool md = format == ReportFormat::kMarkdown;
  const char* sep = md ? " | " : "\t";
  if (md) os << "| ";
  os << "name" << sep << "LayerRatio" << sep << "RC_prune" << sep << "RC_quant"
     << sep << "RC_hybrid";
  if (md) os << " |";
  os << "\n";
  if (md) os << "| --- | --- | --- | --- | --- |\n";
  for (const auto& row : report.rows) {
    if (md) os << "| ";
    os << row.name << sep << fmt2(row.layer_ratio) << sep
       << (row.has_prune ? fmt2(row.rc_prune) : "-") << sep
       << (row.has_quant ? fmt2(row.rc_quant) : "-") << sep
       << fmt2(row.rc_hybrid);
    if (md) os << " |";
    os << "\n";
  }
  if (md) os << "| ";
  os << "total" << sep << fmt2(1.0) << sep << "-" << sep << "-" << sep
     << fmt2(report.rc_total);
  if (md) os << " |";
  os << "\n";
  return os.str();
}

}  // namespace hybridnet
