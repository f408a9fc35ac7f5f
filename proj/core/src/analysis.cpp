#include "cgnet/analysis.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "cgnet/errors.hpp"

namespace cgnet {

double LayerCost::pruning_ratio() const {
  if (activations == 0) return 0.0;
  return 1.0 - static_cast<double>(live_activations) / static_cast<double>(activations);
}

namespace {

std::uint64_t reduction_length(const LayerTrace& t) {
  return static_cast<std::uint64_t>(t.in_channels / t.conv_groups) * t.kernel * t.kernel;
}

}  // namespace

std::uint64_t layer_weight_total(const LayerTrace& t) {
  if (t.gated) {
    return static_cast<std::uint64_t>(t.out_channels) * t.in_channels * t.kernel * t.kernel;
  }
  return static_cast<std::uint64_t>(t.out_channels) * reduction_length(t);
}

std::uint64_t layer_weight_accesses(const LayerTrace& t) {
  if (!t.gated) return layer_weight_total(t);
  std::uint64_t n = static_cast<std::uint64_t>(t.out_channels) * t.cfg.base_fan_in();
  for (std::size_t c = 0; c < t.out_channels; ++c) {
    if (t.dm.channel_mask[c]) n += t.cfg.cond_fan_in();
  }
  return n;
}

namespace {

void finalize_totals(CostReport& rep) {
  rep.dense_flops = rep.executed_flops = rep.gate_comparisons = 0;
  rep.weight_accesses = rep.weight_total = 0;
  std::uint64_t gated_acts = 0, gated_live = 0;
  for (const auto& c : rep.layers) {
    rep.dense_flops += c.dense_flops;
    rep.executed_flops += c.executed_flops();
    rep.gate_comparisons += c.gate_comparisons;
    rep.weight_accesses += c.weight_accesses;
    rep.weight_total += c.weight_total;
    if (c.gated) {
      gated_acts += c.activations;
      gated_live += c.live_activations;
    }
  }
  rep.flop_reduction = 1.0;
  rep.weight_access_reduction = 1.0;
  rep.pruning_ratio = 0.0;
  if (rep.executed_flops) {
    rep.flop_reduction =
        static_cast<double>(rep.dense_flops) / static_cast<double>(rep.executed_flops);
  }
  if (rep.weight_accesses) {
    rep.weight_access_reduction =
        static_cast<double>(rep.weight_total) / static_cast<double>(rep.weight_accesses);
  }
  if (gated_acts) {
    rep.pruning_ratio = 1.0 - static_cast<double>(gated_live) / static_cast<double>(gated_acts);
  }
}

}  // namespace

CostReport count_flops(std::span<const SampleTrace> traces) {
  CostReport rep;
  rep.samples = traces.size();
  for (const auto& tr : traces) {
    if (rep.layers.empty()) {
      for (const auto& l : tr.layers) {
        LayerCost c;
        c.name = l.name;
        c.gated = l.gated;
        rep.layers.push_back(c);
      }
    }
    if (tr.layers.size() != rep.layers.size()) {
      throw ConfigError("count_flops: traces have different layer counts");
    }
    for (std::size_t i = 0; i < tr.layers.size(); ++i) {
      const auto& l = tr.layers[i];
      auto& c = rep.layers[i];
      const std::uint64_t positions = static_cast<std::uint64_t>(l.out_h) * l.out_w;
      const std::uint64_t outputs = positions * l.out_channels;
      c.activations += outputs;
      c.weight_accesses += layer_weight_accesses(l);
      c.weight_total += layer_weight_total(l);
      if (!l.gated) {
        c.dense_flops += outputs * reduction_length(l);
        c.base_flops += outputs * reduction_length(l);
        c.live_activations += outputs;
        continue;
      }
      if (l.dm.d.size() != outputs) throw ConfigError("count_flops: missing decision map");
      const std::uint64_t kb = l.cfg.base_fan_in(), kc = l.cfg.cond_fan_in();
      const std::uint64_t live = l.dm.live_count();
      c.dense_flops += outputs * (kb + kc);
      c.base_flops += outputs * kb;
      c.cond_flops_total += outputs * kc;
      c.cond_flops_executed += live * kc;
      c.live_activations += live;
      const std::uint64_t per = l.cfg.gate_kind() == GateKind::kTwoSided ? 2 : 1;
      c.gate_comparisons += per * outputs + (l.cfg.channel_gate_enabled() ? l.out_channels : 0);
      c.thresholds = per * l.out_channels + (l.cfg.channel_gate_enabled() ? 1 : 0);
    }
  }
  finalize_totals(rep);
  return rep;
}

CostReport merge_costs(std::span<const CostReport> parts) {
  CostReport rep;
  for (const auto& p : parts) {
    if (p.samples == 0) continue;
    if (rep.layers.empty()) {
      rep.layers = p.layers;
      rep.samples = p.samples;
      continue;
    }
    if (p.layers.size() != rep.layers.size()) {
      throw ConfigError("merge_costs: reports have different layer counts");
    }
    rep.samples += p.samples;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      auto& a = rep.layers[i];
      const auto& b = p.layers[i];
      a.dense_flops += b.dense_flops;
      a.base_flops += b.base_flops;
      a.cond_flops_executed += b.cond_flops_executed;
      a.cond_flops_total += b.cond_flops_total;
      a.gate_comparisons += b.gate_comparisons;
      a.weight_accesses += b.weight_accesses;
      a.weight_total += b.weight_total;
      a.activations += b.activations;
      a.live_activations += b.live_activations;
    }
  }
  finalize_totals(rep);
  return rep;
}

WeightAccessReport count_weight_accesses(std::span<const SampleTrace> traces) {
  WeightAccessReport r;
  if (traces.empty()) return r;
  for (const auto& l : traces.front().layers) r.dense_weights += layer_weight_total(l);
  std::uint64_t total = 0;
  for (const auto& tr : traces) {
    for (const auto& l : tr.layers) total += layer_weight_accesses(l);
  }
  r.mean_accesses = static_cast<double>(total) / static_cast<double>(traces.size());
  r.reduction = static_cast<double>(r.dense_weights) / r.mean_accesses;
  return r;
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ConfigError("pearson: length mismatch");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

CorrelationReport partial_final_correlation(const Network& net,
                                            std::span<const SampleTrace> traces,
                                            std::span<const std::size_t> groups) {
  CorrelationReport rep;
  const auto gated = net.gated_layers();
  std::map<std::size_t, std::vector<double>> per_group;
  for (const CgConvLayer* layer : gated) {
    const auto& cfg = layer->cfg();
    const auto& b = layer->block();
    const Tensor dense = assemble_dense_weight(b.w_base, b.w_cond, cfg.groups);
    const std::size_t c_in = cfg.conv.in_channels, c_out = cfg.conv.out_channels;
    const std::size_t kk = cfg.conv.kernel * cfg.conv.kernel;

    std::vector<const Tensor*> inputs;
    for (const auto& tr : traces) {
      for (const auto& l : tr.layers) {
        if (l.name == layer->name()) {
          if (l.input.empty()) {
            throw StateError("partial_final_correlation: traces were recorded without inputs");
          }
          inputs.push_back(&l.input);
        }
      }
    }
    if (inputs.empty()) continue;

    for (std::size_t g : groups) {
      if (g == 0 || c_in % g != 0 || c_out % g != 0) {
        rep.warnings.push_back("layer '" + layer->name() + "': G=" + std::to_string(g) +
                               " does not divide its channels; skipped");
        continue;
      }
      // Partial-sum weight: keep only the base input group of each output group.
      Tensor wp = dense;
      const std::size_t m = c_in / g, og = c_out / g;
      for (std::size_t o = 0; o < c_out; ++o) {
        const std::size_t grp = o / og;
        for (std::size_t ci = 0; ci < c_in; ++ci) {
          if (ci / m == grp) continue;
          std::fill_n(wp.data() + (o * c_in + ci) * kk, kk, 0.0);
        }
      }
      double sum_r = 0.0;
      std::size_t used = 0, excluded = 0;
      for (const Tensor* x : inputs) {
        const Tensor fin = conv2d(*x, dense, cfg.conv);
        const Tensor par = conv2d(*x, wp, cfg.conv);
        const std::size_t plane = fin.dim(1) * fin.dim(2);
        double sample_r = 0.0;
        std::size_t sample_used = 0;
        for (std::size_t c = 0; c < c_out; ++c) {
          const double r = pearson({par.data() + c * plane, plane}, {fin.data() + c * plane, plane});
          if (std::isnan(r)) {
            ++excluded;
            continue;
          }
          sample_r += r;
          ++sample_used;
        }
        if (sample_used) {
          sum_r += sample_r / static_cast<double>(sample_used);
          ++used;
        }
      }
      if (excluded) {
        rep.warnings.push_back("layer '" + layer->name() + "' G=" + std::to_string(g) + ": " +
                               std::to_string(excluded) +
                               " zero-variance channel maps excluded");
      }
      if (!used) continue;
      CorrelationRow row{layer->name(), g, sum_r / static_cast<double>(used),
                         used * c_out - excluded, excluded};
      per_group[g].push_back(row.r);
      rep.rows.push_back(row);
    }
  }
  for (const auto& [g, rs] : per_group) {
    double s = 0.0;
    for (double r : rs) s += r;
    rep.mean_r[g] = s / static_cast<double>(rs.size());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Intensity maps
// ---------------------------------------------------------------------------

IntensityMap intensity_map(const DecisionMap& dm) {
  IntensityMap m;
  m.height = dm.d.dim(1);
  m.width = dm.d.dim(2);
  m.values.assign(m.height * m.width, 0.0);
  const std::size_t positions = dm.positions();
  for (std::size_t p = 0; p < positions; ++p) {
    double s = 0.0;
    for (std::size_t c = 0; c < dm.channels(); ++c) s += dm.effective(c, p) ? 1.0 : 0.0;
    m.values[p] = s / static_cast<double>(dm.channels());
  }
  return m;
}

IntensityMap aggregate_intensity(std::span<const IntensityMap> maps, std::size_t height,
                                 std::size_t width) {
  if (maps.empty() || height == 0 || width == 0) {
    throw ConfigError("aggregate_intensity: need at least one map and a positive size");
  }
  IntensityMap out;
  out.height = height;
  out.width = width;
  out.values.assign(height * width, 0.0);
  for (const auto& m : maps) {
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = y * m.height / height;
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t sx = x * m.width / width;
        out.values[y * width + x] += m.values[sy * m.width + sx];
      }
    }
  }
  for (auto& v : out.values) v /= static_cast<double>(maps.size());
  return out;
}

void write_pgm(const std::filesystem::path& path, const IntensityMap& map) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "P5\n" << map.width << ' ' << map.height << "\n255\n";
  for (double v : map.values) {
    out.put(static_cast<char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
  }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void write_cost_csv(std::ostream& out, const CostReport& r) {
  out << "layer,gated,dense_flops,base_flops,cond_flops_executed,cond_flops_total,"
         "gate_comparisons,weight_accesses,weight_total,pruning_ratio\n";
  out << std::setprecision(10);
  for (const auto& l : r.layers) {
    out << l.name << ',' << (l.gated ? 1 : 0) << ',' << l.dense_flops << ',' << l.base_flops << ','
        << l.cond_flops_executed << ',' << l.cond_flops_total << ',' << l.gate_comparisons << ','
        << l.weight_accesses << ',' << l.weight_total << ',' << l.pruning_ratio() << '\n';
  }
}

nlohmann::json cost_to_json(const CostReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.name},
                      {"gated", l.gated},
                      {"dense_flops", l.dense_flops},
                      {"base_flops", l.base_flops},
                      {"cond_flops_executed", l.cond_flops_executed},
                      {"cond_flops_total", l.cond_flops_total},
                      {"gate_comparisons", l.gate_comparisons},
                      {"thresholds", l.thresholds},
                      {"weight_accesses", l.weight_accesses},
                      {"weight_total", l.weight_total},
                      {"pruning_ratio", l.pruning_ratio()}});
  }
  return {{"samples", r.samples},
          {"dense_flops", r.dense_flops},
          {"executed_flops", r.executed_flops},
          {"gate_comparisons", r.gate_comparisons},
          {"weight_accesses", r.weight_accesses},
          {"weight_total", r.weight_total},
          {"flop_reduction", r.flop_reduction},
          {"weight_access_reduction", r.weight_access_reduction},
          {"pruning_ratio", r.pruning_ratio},
          {"layers", layers}};
}

}  // namespace cgnet
