#pragma once

// Analytical systolic-array timing model. Outputs of one layer are grouped
// into vectors of up to `cols` consecutive positions of one output-channel
// row. `rows` vectors form a tile that streams the reduction dimension
// through the array, paying a fill/drain latency of rows + cols cycles.
// A gated layer first runs the base reduction for every tile; vectors with at
// least one live lane are then repacked into tiles that continue over the
// conditional reduction.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cgnet/gating.hpp"
#include "cgnet/model.hpp"

namespace cgnet {

struct ArrayConfig {
  std::size_t rows = 16;
  std::size_t cols = 16;
  bool fill_drain = true;  // charge rows + cols cycles per tile

  void validate() const;
  std::size_t fill_drain_cycles() const { return fill_drain ? rows + cols : 0; }
};

struct LayerDims {
  std::string name;
  std::size_t out_channels = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::size_t base_reduction = 0;  // MACs per output on the base path (full K for dense layers)
  std::size_t cond_reduction = 0;  // MACs per output on the conditional path
};

/// Dims of a traced layer.
LayerDims layer_dims(const LayerTrace& t);

struct LayerCycles {
  std::string name;
  bool gated = false;
  std::uint64_t dense_cycles = 0;
  std::uint64_t gated_cycles = 0;
  double theoretical_cycles = 0.0;  // ideal MACs / (rows * cols)
  double utilization = 0.0;         // ideal MACs / (gated_cycles * rows * cols)
  std::uint64_t vectors = 0;
  std::uint64_t live_vectors = 0;
  std::uint64_t ideal_macs = 0;
  std::uint64_t dense_macs = 0;
};

/// `dm` may be null for an ungated layer.
LayerCycles model_layer_cycles(const LayerDims& dims, const DecisionMap* dm,
                               const ArrayConfig& cfg);

struct SpeedupReport {
  ArrayConfig array;
  std::size_t samples = 0;
  std::vector<LayerCycles> layers;  // summed over samples
  std::uint64_t dense_cycles = 0;
  std::uint64_t gated_cycles = 0;
  double theoretical_cycles = 0.0;
  double speedup = 1.0;         // dense_cycles / gated_cycles
  double flop_reduction = 1.0;  // dense MACs / ideal MACs
};

SpeedupReport model_network_speedup(std::span<const SampleTrace> traces, const ArrayConfig& cfg);

/// Header: layer,dense_cycles,gated_cycles,theoretical_cycles,utilization
void write_perf_csv(std::ostream& out, const SpeedupReport& r);
void write_perf_csv(const std::filesystem::path& path, const SpeedupReport& r);

}  // namespace cgnet
