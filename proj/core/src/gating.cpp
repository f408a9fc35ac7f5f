#include "cgnet/gating.hpp"

#include <algorithm>
#include <cmath>

#include "cg_kernels.hpp"
#include "cgnet/errors.hpp"

namespace cgnet {

// ---------------------------------------------------------------------------
// Config and state
// ---------------------------------------------------------------------------

void CgLayerConfig::validate() const {
  conv.validate();
  if (conv.groups != 1) {
    throw ConfigError("cg layer: conv.groups must be 1; use the gating group count instead");
  }
  if (groups == 0) throw ConfigError("cg layer: groups must be positive");
  if (conv.in_channels % groups != 0 || conv.out_channels % groups != 0) {
    throw ConfigError("cg layer: in_channels (" + std::to_string(conv.in_channels) +
                      ") and out_channels (" + std::to_string(conv.out_channels) +
                      ") must be divisible by groups (" + std::to_string(groups) + ")");
  }
  if (!(tau_c >= 0.0 && tau_c <= 1.0)) throw ConfigError("cg layer: tau_c must lie in [0,1]");
  if (!(epsilon > 0.0)) throw ConfigError("cg layer: epsilon must be positive");
}

RunningStats RunningStats::make(std::size_t channels) {
  return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

double two_sided_half_width(double t) {
  // Solve 2*Phi(w) - 1 = 1 - Phi(t) by bisection; Phi via erfc.
  const auto phi = [](double v) { return 0.5 * std::erfc(-v / std::sqrt(2.0)); };
  const double pass = 1.0 - phi(t);
  double lo = 0.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (2.0 * phi(mid) - 1.0 < pass) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

GateState GateState::make(std::size_t out_channels, GateKind kind) {
  GateState g;
  g.gate_bn = BatchNormState::make(out_channels);
  if (kind == GateKind::kSingleSided) {
    g.delta.assign(out_channels, 0.0);
  } else {
    const double w = two_sided_half_width(0.0);
    g.delta_high.assign(out_channels, w);
    g.delta_low.assign(out_channels, -w);
  }
  return g;
}

void GateState::clamp_two_sided() {
  for (std::size_t c = 0; c < delta_high.size(); ++c) {
    if (delta_high[c] < delta_low[c]) {
      const double mid = 0.5 * (delta_high[c] + delta_low[c]);
      delta_high[c] = mid;
      delta_low[c] = mid;
    }
  }
}

void GateState::force_open(double magnitude) {
  std::fill(delta.begin(), delta.end(), -magnitude);
  std::fill(delta_high.begin(), delta_high.end(), magnitude);
  std::fill(delta_low.begin(), delta_low.end(), -magnitude);
}

std::size_t DecisionMap::live_count() const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < channels(); ++c) {
    for (std::size_t p = 0; p < positions(); ++p) n += effective(c, p) ? 1 : 0;
  }
  return n;
}

CgBlockParams CgBlockParams::make(const CgLayerConfig& cfg) {
  cfg.validate();
  const auto& cv = cfg.conv;
  CgBlockParams p;
  p.w_base = Tensor({cv.out_channels, cfg.base_channels(), cv.kernel, cv.kernel});
  p.w_cond = Tensor({cv.out_channels, cfg.cond_channels(), cv.kernel, cv.kernel});
  p.gamma.assign(cv.out_channels, 1.0);
  p.beta.assign(cv.out_channels, 0.0);
  p.bn1 = RunningStats::make(cv.out_channels);
  p.bn2 = RunningStats::make(cv.out_channels);
  p.gate = GateState::make(cv.out_channels, cfg.gate_kind());
  return p;
}

void CgBlockParams::validate(const CgLayerConfig& cfg) const {
  const auto& cv = cfg.conv;
  require_shape(w_base, {cv.out_channels, cfg.base_channels(), cv.kernel, cv.kernel},
                "cg w_base");
  require_shape(w_cond, {cv.out_channels, cfg.cond_channels(), cv.kernel, cv.kernel},
                "cg w_cond");
  const auto c = cv.out_channels;
  if (gamma.size() != c || beta.size() != c || bn1.mean.size() != c || bn2.mean.size() != c) {
    throw ConfigError("cg block: per-channel parameter length mismatch");
  }
  if (cfg.gate_kind() == GateKind::kSingleSided ? gate.delta.size() != c
                                                : (gate.delta_high.size() != c ||
                                                   gate.delta_low.size() != c)) {
    throw ConfigError("cg block: threshold vector length must equal out_channels");
  }
}

// ---------------------------------------------------------------------------
// Grouping
// ---------------------------------------------------------------------------

GroupSplit split_grouped(std::size_t in_channels, std::size_t groups, std::size_t group) {
  if (groups == 0 || in_channels % groups != 0) {
    throw ConfigError("split_grouped: " + std::to_string(in_channels) +
                      " channels not divisible by " + std::to_string(groups) + " groups");
  }
  if (group >= groups) throw ConfigError("split_grouped: group index out of range");
  const std::size_t m = in_channels / groups;
  GroupSplit s;
  for (std::size_t c = 0; c < in_channels; ++c) {
    (c / m == group ? s.base : s.cond).push_back(c);
  }
  return s;
}

std::pair<Tensor, Tensor> split_grouped(const Tensor& x, std::size_t groups, std::size_t group) {
  if (x.rank() != 3) throw ConfigError("split_grouped: expects a (C,H,W) tensor");
  const auto s = split_grouped(x.dim(0), groups, group);
  const std::size_t plane = x.dim(1) * x.dim(2);
  auto gather = [&](const std::vector<std::size_t>& chans) {
    Tensor t({chans.size(), x.dim(1), x.dim(2)});
    for (std::size_t i = 0; i < chans.size(); ++i) {
      std::copy_n(x.data() + chans[i] * plane, plane, t.data() + i * plane);
    }
    return t;
  };
  return {gather(s.base), gather(s.cond)};
}

Tensor assemble_dense_weight(const Tensor& w_base, const Tensor& w_cond, std::size_t groups) {
  const std::size_t c_out = w_base.dim(0), m = w_base.dim(1), k = w_base.dim(2);
  const std::size_t c_in = m * groups;
  if (w_cond.dim(1) != c_in - m) throw ConfigError("assemble_dense_weight: inconsistent parts");
  const std::size_t kk = k * k, og = c_out / groups;
  Tensor w({c_out, c_in, k, k});
  for (std::size_t o = 0; o < c_out; ++o) {
    const auto s = split_grouped(c_in, groups, o / og);
    for (std::size_t j = 0; j < s.base.size(); ++j) {
      std::copy_n(w_base.data() + (o * m + j) * kk, kk, w.data() + (o * c_in + s.base[j]) * kk);
    }
    for (std::size_t j = 0; j < s.cond.size(); ++j) {
      std::copy_n(w_cond.data() + (o * (c_in - m) + j) * kk, kk,
                  w.data() + (o * c_in + s.cond[j]) * kk);
    }
  }
  return w;
}

std::pair<Tensor, Tensor> partition_dense_weight(const Tensor& w, std::size_t groups) {
  const std::size_t c_out = w.dim(0), c_in = w.dim(1), k = w.dim(2), kk = k * k;
  if (c_in % groups != 0 || c_out % groups != 0) {
    throw ConfigError("partition_dense_weight: channels not divisible by groups");
  }
  const std::size_t m = c_in / groups, og = c_out / groups;
  Tensor wb({c_out, m, k, k}), wc({c_out, c_in - m, k, k});
  for (std::size_t o = 0; o < c_out; ++o) {
    const auto s = split_grouped(c_in, groups, o / og);
    for (std::size_t j = 0; j < s.base.size(); ++j) {
      std::copy_n(w.data() + (o * c_in + s.base[j]) * kk, kk, wb.data() + (o * m + j) * kk);
    }
    for (std::size_t j = 0; j < s.cond.size(); ++j) {
      std::copy_n(w.data() + (o * c_in + s.cond[j]) * kk, kk,
                  wc.data() + (o * (c_in - m) + j) * kk);
    }
  }
  return {wb, wc};
}

namespace {

Tensor permute_channels(const Tensor& x, std::size_t groups, bool inverse) {
  const bool batched = x.rank() == 4;
  if (x.rank() != 3 && !batched) throw ConfigError("channel_shuffle: expects rank 3 or 4");
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = batched ? x.dim(1) : x.dim(0);
  if (groups == 0 || c % groups != 0) throw ConfigError("channel_shuffle: bad group count");
  const std::size_t m = c / groups;
  const std::size_t plane = x.size() / (n * c);
  Tensor y(x.shape());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t from = g * m + j, to = j * groups + g;
        const std::size_t src = inverse ? to : from, dst = inverse ? from : to;
        std::copy_n(x.data() + (s * c + src) * plane, plane, y.data() + (s * c + dst) * plane);
      }
    }
  }
  return y;
}

}  // namespace

Tensor channel_shuffle(const Tensor& x, std::size_t groups) {
  return permute_channels(x, groups, false);
}

Tensor channel_unshuffle(const Tensor& x, std::size_t groups) {
  return permute_channels(x, groups, true);
}

// ---------------------------------------------------------------------------
// Gates
// ---------------------------------------------------------------------------

Tensor heaviside(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = heaviside(x[i]);
  return y;
}

double gate_decision(double xhat, std::size_t c, const GateState& gate, GateKind kind) {
  if (kind == GateKind::kSingleSided) return heaviside(xhat - gate.delta[c]);
  return heaviside(gate.delta_high[c] - xhat) * heaviside(xhat - gate.delta_low[c]);
}

MergedThresholds merge_gate(const GateState& gate, GateKind kind) {
  const auto& bn = gate.gate_bn;
  const std::size_t c = bn.channels();
  MergedThresholds t;
  t.low.resize(c);
  if (kind == GateKind::kTwoSided) t.high.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    const double sd = std::sqrt(bn.running_var[i] + bn.eps);
    if (kind == GateKind::kSingleSided) {
      t.low[i] = gate.delta[i] * sd + bn.running_mean[i];
    } else {
      t.low[i] = gate.delta_low[i] * sd + bn.running_mean[i];
      t.high[i] = gate.delta_high[i] * sd + bn.running_mean[i];
    }
  }
  return t;
}

namespace {

inline double merged_decision(double x, std::size_t c, const MergedThresholds& t) {
  if (t.high.empty()) return heaviside(x - t.low[c]);
  return heaviside(t.high[c] - x) * heaviside(x - t.low[c]);
}

}  // namespace

Tensor merged_gate(const Tensor& partial_sum, const GateState& gate, GateKind kind) {
  if (partial_sum.rank() != 3 || partial_sum.dim(0) != gate.gate_bn.channels()) {
    throw ConfigError("merged_gate: partial sum must be (c_out,h,w) matching the gate");
  }
  const auto t = merge_gate(gate, kind);
  const std::size_t plane = partial_sum.dim(1) * partial_sum.dim(2);
  Tensor d(partial_sum.shape());
  for (std::size_t c = 0; c < partial_sum.dim(0); ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      d[c * plane + i] = merged_decision(partial_sum[c * plane + i], c, t);
    }
  }
  return d;
}

Tensor gate_forward(const Tensor& partial_sum, GateState& gate, const CgLayerConfig& cfg,
                    bool training) {
  const GateKind kind = cfg.gate_kind();
  if (!training) {
    if (partial_sum.rank() == 3) return merged_gate(partial_sum, gate, kind);
    std::vector<Tensor> maps;
    for (std::size_t n = 0; n < partial_sum.dim(0); ++n) {
      maps.push_back(merged_gate(partial_sum.sample(n), gate, kind));
    }
    return Tensor::stack(maps);
  }
  const Tensor xhat = batchnorm_forward(partial_sum, gate.gate_bn, true, false);
  const bool batched = xhat.rank() == 4;
  const std::size_t n = batched ? xhat.dim(0) : 1;
  const std::size_t c = batched ? xhat.dim(1) : xhat.dim(0);
  const std::size_t plane = xhat.size() / (n * c);
  Tensor d(xhat.shape());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (s * c + ch) * plane + i;
        d[idx] = gate_decision(xhat[idx], ch, gate, kind);
      }
    }
  }
  return d;
}

std::vector<std::uint8_t> channel_gate(const Tensor& d, double tau_c) {
  if (d.rank() != 3) throw ConfigError("channel_gate: expects a (c,h,w) decision map");
  if (!(tau_c >= 0.0 && tau_c <= 1.0)) throw ConfigError("channel_gate: tau_c outside [0,1]");
  const std::size_t plane = d.dim(1) * d.dim(2);
  std::vector<std::uint8_t> mask(d.dim(0));
  for (std::size_t c = 0; c < d.dim(0); ++c) {
    double taken = 0.0;
    for (std::size_t i = 0; i < plane; ++i) taken += d[c * plane + i];
    mask[c] = static_cast<std::uint8_t>(
        heaviside(taken - tau_c * static_cast<double>(d.dim(1)) * static_cast<double>(d.dim(2))));
  }
  return mask;
}

double pruning_ratio(const DecisionMap& dm) {
  const std::size_t total = dm.channels() * dm.positions();
  if (total == 0) return 0.0;
  return 1.0 - static_cast<double>(dm.live_count()) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace detail {

CgGeometry CgGeometry::make(const CgLayerConfig& cfg, std::size_t height, std::size_t width) {
  CgGeometry g{};
  g.c_in = cfg.conv.in_channels;
  g.c_out = cfg.conv.out_channels;
  g.height = height;
  g.width = width;
  g.oh = cfg.conv.out_dim(height);
  g.ow = cfg.conv.out_dim(width);
  g.positions = g.oh * g.ow;
  g.groups = cfg.groups;
  g.out_per_group = g.c_out / g.groups;
  g.in_per_group = g.c_in / g.groups;
  g.kk = cfg.conv.kernel * cfg.conv.kernel;
  g.base_rows = g.in_per_group * g.kk;
  g.cond_rows = (g.c_in - g.in_per_group) * g.kk;
  return g;
}

void unfold(std::span<const double> x, const CgGeometry& g, const ConvSpec& spec,
            std::vector<double>& cols) {
  cols.resize(g.c_in * g.kk * g.positions);
  im2col(x, g.height, g.width, spec, 0, g.c_in, cols);
}

void base_sums(const std::vector<double>& cols, const CgGeometry& g, const Tensor& w_base,
               double* p) {
  for (std::size_t o = 0; o < g.c_out; ++o) {
    const double* wrow = w_base.data() + o * g.base_rows;
    const double* rows = cols.data() + g.base_row_begin(g.group_of(o)) * g.positions;
    double* out = p + o * g.positions;
    std::fill(out, out + g.positions, 0.0);
    for (std::size_t r = 0; r < g.base_rows; ++r) {
      const double wv = wrow[r];
      const double* col = rows + r * g.positions;
      for (std::size_t j = 0; j < g.positions; ++j) out[j] += wv * col[j];
    }
  }
}

void dense_cond_sums(const std::vector<double>& cols, const CgGeometry& g, const Tensor& w_cond,
                     const double* p, double* full) {
  for (std::size_t o = 0; o < g.c_out; ++o) {
    const std::size_t grp = g.group_of(o);
    const double* wrow = w_cond.data() + o * g.cond_rows;
    double* out = full + o * g.positions;
    std::copy_n(p + o * g.positions, g.positions, out);
    for (std::size_t r = 0; r < g.cond_rows; ++r) {
      const double wv = wrow[r];
      const double* col = cols.data() + g.cond_row(grp, r) * g.positions;
      for (std::size_t j = 0; j < g.positions; ++j) out[j] += wv * col[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Inference block
// ---------------------------------------------------------------------------

CgInferenceResult cg_block_forward_inference(const Tensor& x, const CgBlockParams& params,
                                             const CgLayerConfig& cfg, const Tensor* residual,
                                             const GateState* gate) {
  if (!params.frozen) {
    throw StateError("cg_block_forward_inference: statistics are not frozen");
  }
  cfg.validate();
  params.validate(cfg);
  if (x.rank() != 3 || x.dim(0) != cfg.conv.in_channels) {
    throw ConfigError("cg_block_forward_inference: expected (" +
                      std::to_string(cfg.conv.in_channels) + ",H,W) input, got " +
                      shape_string(x.shape()));
  }
  const auto g = detail::CgGeometry::make(cfg, x.dim(1), x.dim(2));
  if (residual) require_shape(*residual, {g.c_out, g.oh, g.ow}, "cg residual");

  std::vector<double> cols;
  detail::unfold(x.values(), g, cfg.conv, cols);

  Tensor p({g.c_out, g.oh, g.ow});
  detail::base_sums(cols, g, params.w_base, p.data());

  CgInferenceResult res;
  res.dm.d = merged_gate(p, gate ? *gate : params.gate, cfg.gate_kind());
  res.dm.channel_mask = cfg.channel_gate_enabled()
                            ? channel_gate(res.dm.d, cfg.tau_c)
                            : std::vector<std::uint8_t>(g.c_out, 1);

  auto& cnt = res.counters;
  cnt.base_macs = static_cast<std::uint64_t>(g.c_out) * g.positions * g.base_rows;
  cnt.cond_macs_total = static_cast<std::uint64_t>(g.c_out) * g.positions * g.cond_rows;
  const std::uint64_t per_activation = cfg.gate_kind() == GateKind::kTwoSided ? 2 : 1;
  cnt.gate_comparisons = per_activation * g.c_out * g.positions;
  cnt.thresholds_stored = per_activation * g.c_out;
  if (cfg.channel_gate_enabled()) {
    cnt.gate_comparisons += g.c_out;
    cnt.thresholds_stored += 1;
  }
  cnt.weights_total = static_cast<std::uint64_t>(g.c_out) * (g.base_rows + g.cond_rows);
  cnt.weights_accessed = static_cast<std::uint64_t>(g.c_out) * g.base_rows;

  Tensor& y = res.y = Tensor({g.c_out, g.oh, g.ow});
  std::vector<std::size_t> live;
  std::vector<double> acc;
  for (std::size_t o = 0; o < g.c_out; ++o) {
    const double* pr = p.data() + o * g.positions;
    double* yr = y.data() + o * g.positions;
    const double* rr = residual ? residual->data() + o * g.positions : nullptr;
    const double gamma = params.gamma[o], beta = params.beta[o];
    for (std::size_t j = 0; j < g.positions; ++j) {
      double z = batchnorm_infer(pr[j], params.bn1.mean[o], params.bn1.var[o], params.bn_eps,
                                 gamma, beta);
      if (rr) z += rr[j];
      yr[j] = activate(z, cfg.activation);
    }
    if (!res.dm.channel_mask[o]) continue;
    cnt.weights_accessed += g.cond_rows;

    live.clear();
    for (std::size_t j = 0; j < g.positions; ++j) {
      if (res.dm.d[o * g.positions + j] != 0.0) live.push_back(j);
    }
    if (live.empty()) continue;
    acc.resize(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) acc[i] = pr[live[i]];
    const std::size_t grp = g.group_of(o);
    const double* wrow = params.w_cond.data() + o * g.cond_rows;
    for (std::size_t r = 0; r < g.cond_rows; ++r) {
      const double wv = wrow[r];
      const double* col = cols.data() + g.cond_row(grp, r) * g.positions;
      for (std::size_t i = 0; i < live.size(); ++i) acc[i] += wv * col[live[i]];
      cnt.cond_macs_executed += live.size();
    }
    for (std::size_t i = 0; i < live.size(); ++i) {
      const std::size_t j = live[i];
      double z = batchnorm_infer(acc[i], params.bn2.mean[o], params.bn2.var[o], params.bn_eps,
                                 gamma, beta);
      if (rr) z += rr[j];
      yr[j] = activate(z, cfg.activation);
    }
  }
  if (cfg.shuffle) res.y = channel_shuffle(res.y, cfg.groups);
  return res;
}

}  // namespace cgnet
