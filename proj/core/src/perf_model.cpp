#include "cgnet/perf_model.hpp"

#include <fstream>
#include <iomanip>

#include "cgnet/errors.hpp"

namespace cgnet {

namespace {

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

}  // namespace

void ArrayConfig::validate() const {
  if (rows == 0 || cols == 0) throw ConfigError("array: rows and cols must be at least 1");
}

LayerDims layer_dims(const LayerTrace& t) {
  LayerDims d;
  d.name = t.name;
  d.out_channels = t.out_channels;
  d.out_h = t.out_h;
  d.out_w = t.out_w;
  const std::size_t kk = t.kernel * t.kernel;
  if (t.gated) {
    d.base_reduction = t.cfg.base_fan_in();
    d.cond_reduction = t.cfg.cond_fan_in();
  } else {
    d.base_reduction = t.in_channels / t.conv_groups * kk;
  }
  return d;
}

LayerCycles model_layer_cycles(const LayerDims& dims, const DecisionMap* dm,
                               const ArrayConfig& cfg) {
  cfg.validate();
  if (dims.out_channels == 0 || dims.out_h == 0 || dims.out_w == 0 ||
      dims.base_reduction + dims.cond_reduction == 0) {
    throw ConfigError("model_layer_cycles: layer '" + dims.name + "' has a zero dimension");
  }
  if (dm && (dm->channels() != dims.out_channels || dm->d.dim(1) != dims.out_h ||
             dm->d.dim(2) != dims.out_w)) {
    throw ConfigError("model_layer_cycles: decision map does not match layer '" + dims.name + "'");
  }
  const std::uint64_t kb = dims.base_reduction, kc = dims.cond_reduction, k = kb + kc;
  const std::uint64_t f = cfg.fill_drain_cycles();
  const std::uint64_t per_row = ceil_div(dims.out_w, cfg.cols);
  const std::uint64_t positions =
      static_cast<std::uint64_t>(dims.out_channels) * dims.out_h * dims.out_w;

  LayerCycles r;
  r.name = dims.name;
  r.gated = dm != nullptr;
  r.vectors = static_cast<std::uint64_t>(dims.out_channels) * dims.out_h * per_row;
  const std::uint64_t tiles = ceil_div(r.vectors, cfg.rows);
  r.dense_cycles = tiles * (k + f);
  r.dense_macs = positions * k;

  std::uint64_t live_positions = positions;
  r.live_vectors = r.vectors;
  if (dm) {
    live_positions = 0;
    r.live_vectors = 0;
    for (std::size_t c = 0; c < dims.out_channels; ++c) {
      for (std::size_t y = 0; y < dims.out_h; ++y) {
        for (std::uint64_t v = 0; v < per_row; ++v) {
          bool any = false;
          const std::size_t x_end = std::min<std::size_t>(dims.out_w, (v + 1) * cfg.cols);
          for (std::size_t x = v * cfg.cols; x < x_end; ++x) {
            if (dm->effective(c, y * dims.out_w + x)) {
              any = true;
              ++live_positions;
            }
          }
          r.live_vectors += any ? 1 : 0;
        }
      }
    }
  }
  r.gated_cycles = tiles * (kb + f) + ceil_div(r.live_vectors, cfg.rows) * kc;
  r.ideal_macs = positions * kb + live_positions * kc;
  const double lanes = static_cast<double>(cfg.rows * cfg.cols);
  r.theoretical_cycles = static_cast<double>(r.ideal_macs) / lanes;
  r.utilization = static_cast<double>(r.ideal_macs) / (static_cast<double>(r.gated_cycles) * lanes);
  return r;
}

SpeedupReport model_network_speedup(std::span<const SampleTrace> traces, const ArrayConfig& cfg) {
  cfg.validate();
  SpeedupReport rep;
  rep.array = cfg;
  rep.samples = traces.size();
  std::uint64_t dense_macs = 0, ideal_macs = 0;
  for (const auto& tr : traces) {
    if (rep.layers.empty()) {
      for (const auto& l : tr.layers) {
        LayerCycles z;
        z.name = l.name;
        z.gated = l.gated;
        rep.layers.push_back(z);
      }
    }
    if (tr.layers.size() != rep.layers.size()) {
      throw ConfigError("model_network_speedup: traces have different layer counts");
    }
    for (std::size_t i = 0; i < tr.layers.size(); ++i) {
      const auto& l = tr.layers[i];
      const auto c = model_layer_cycles(layer_dims(l), l.gated ? &l.dm : nullptr, cfg);
      auto& acc = rep.layers[i];
      acc.dense_cycles += c.dense_cycles;
      acc.gated_cycles += c.gated_cycles;
      acc.theoretical_cycles += c.theoretical_cycles;
      acc.vectors += c.vectors;
      acc.live_vectors += c.live_vectors;
      acc.ideal_macs += c.ideal_macs;
      acc.dense_macs += c.dense_macs;
    }
  }
  const double lanes = static_cast<double>(cfg.rows * cfg.cols);
  for (auto& l : rep.layers) {
    l.utilization = l.gated_cycles ? static_cast<double>(l.ideal_macs) /
                                         (static_cast<double>(l.gated_cycles) * lanes)
                                   : 0.0;
    rep.dense_cycles += l.dense_cycles;
    rep.gated_cycles += l.gated_cycles;
    rep.theoretical_cycles += l.theoretical_cycles;
    dense_macs += l.dense_macs;
    ideal_macs += l.ideal_macs;
  }
  if (rep.gated_cycles) {
    rep.speedup = static_cast<double>(rep.dense_cycles) / static_cast<double>(rep.gated_cycles);
  }
  if (ideal_macs) {
    rep.flop_reduction = static_cast<double>(dense_macs) / static_cast<double>(ideal_macs);
  }
  return rep;
}

void write_perf_csv(std::ostream& out, const SpeedupReport& r) {
  out << "layer,dense_cycles,gated_cycles,theoretical_cycles,utilization\n";
  out << std::setprecision(10);
  for (const auto& l : r.layers) {
    out << l.name << ',' << l.dense_cycles << ',' << l.gated_cycles << ','
        << l.theoretical_cycles << ',' << l.utilization << '\n';
  }
}

void write_perf_csv(const std::filesystem::path& path, const SpeedupReport& r) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_perf_csv(out, r);
}

}  // namespace cgnet
