#pragma once

// Cost accounting and empirical studies over inference traces: MAC counts,
// weight-value accesses, partial/final-sum correlation and computation
// intensity maps. One MAC counts as one FLOP.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgnet/gating.hpp"
#include "cgnet/model.hpp"

namespace cgnet {

/// Totals over all evaluated samples for one layer.
struct LayerCost {
  std::string name;
  bool gated = false;
  std::uint64_t dense_flops = 0;           // unpartitioned convolution
  std::uint64_t base_flops = 0;            // base path (all work for ungated layers)
  std::uint64_t cond_flops_executed = 0;   // conditional path where it ran
  std::uint64_t cond_flops_total = 0;      // conditional path if run everywhere
  std::uint64_t gate_comparisons = 0;
  std::uint64_t thresholds = 0;            // per sample, not summed
  std::uint64_t weight_accesses = 0;
  std::uint64_t weight_total = 0;          // dense weight values times samples
  std::uint64_t activations = 0;
  std::uint64_t live_activations = 0;

  std::uint64_t executed_flops() const { return base_flops + cond_flops_executed; }
  double pruning_ratio() const;
};

struct CostReport {
  std::size_t samples = 0;
  std::vector<LayerCost> layers;
  std::uint64_t dense_flops = 0;
  std::uint64_t executed_flops = 0;
  std::uint64_t gate_comparisons = 0;
  std::uint64_t weight_accesses = 0;
  std::uint64_t weight_total = 0;
  double flop_reduction = 1.0;           // dense_flops / executed_flops
  double weight_access_reduction = 1.0;  // weight_total / weight_accesses
  double pruning_ratio = 0.0;            // over gated activations
};

/// Analytic counts from the decision maps in the traces.
CostReport count_flops(std::span<const SampleTrace> traces);
/// Sums reports over disjoint sample sets.
CostReport merge_costs(std::span<const CostReport> parts);

struct WeightAccessReport {
  std::uint64_t dense_weights = 0;     // weight values of the dense model
  double mean_accesses = 0.0;          // per sample
  double reduction = 1.0;              // dense_weights / mean_accesses
};
/// Per sample, conditional weights of masked-off channels are not counted.
WeightAccessReport count_weight_accesses(std::span<const SampleTrace> traces);

/// Weight values read by one traced layer for its sample.
std::uint64_t layer_weight_accesses(const LayerTrace& t);
std::uint64_t layer_weight_total(const LayerTrace& t);

struct CorrelationRow {
  std::string layer;
  std::size_t groups = 1;
  double r = 0.0;
  std::size_t channels_used = 0;
  std::size_t channels_excluded = 0;
};

struct CorrelationReport {
  std::vector<CorrelationRow> rows;
  std::map<std::size_t, double> mean_r;  // keyed by group count G = 1/eta
  std::vector<std::string> warnings;
};

/// Pearson r between partial sums (base group only, regrouped with G groups)
/// and final sums of every gated layer. r is computed per (sample, output
/// channel) over positions, averaged over channels and samples per layer,
/// then over layers. Traces must carry inputs (record_inputs). Group counts
/// that do not divide a layer's channel counts are skipped with a warning.
CorrelationReport partial_final_correlation(const Network& net,
                                            std::span<const SampleTrace> traces,
                                            std::span<const std::size_t> groups);

/// Pearson correlation of two equally long sequences; NaN when either has
/// zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

struct IntensityMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, each in [0, 1]
};

/// Mean effective decision over output channels at each position.
IntensityMap intensity_map(const DecisionMap& dm);
/// Nearest-neighbour upsampling of each map to (height, width), then averaging.
IntensityMap aggregate_intensity(std::span<const IntensityMap> maps, std::size_t height,
                                 std::size_t width);
/// Binary PGM (P5), 8-bit, value = round(255 * intensity).
void write_pgm(const std::filesystem::path& path, const IntensityMap& map);

/// Per-layer CSV with header
/// layer,gated,dense_flops,base_flops,cond_flops_executed,cond_flops_total,
/// gate_comparisons,weight_accesses,weight_total,pruning_ratio
void write_cost_csv(std::ostream& out, const CostReport& r);
nlohmann::json cost_to_json(const CostReport& r);

}  // namespace cgnet
