#pragma once

// Channel gating block: a convolution split into a base path over one input
// channel group and a conditional path over the remaining groups. The base
// path's partial sum drives a per-activation threshold gate; the conditional
// path is only evaluated where the gate opens.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cgnet/nn.hpp"
#include "cgnet/tensor.hpp"

namespace cgnet {

enum class GateKind { kSingleSided, kTwoSided };

struct CgLayerConfig {
  /// Dense geometry of the layer. conv.groups must be 1; channel grouping is
  /// controlled by `groups` below.
  ConvSpec conv;
  std::size_t groups = 4;  // G = 1/eta
  Activation activation = Activation::kRelu;
  double target = 1.0;   // T
  double tau_c = 0.0;    // channel-wise gate fraction, 0 disables it
  double epsilon = 4.0;  // surrogate sharpness
  bool shuffle = false;

  void validate() const;
  GateKind gate_kind() const {
    return is_saturating(activation) ? GateKind::kTwoSided : GateKind::kSingleSided;
  }
  bool channel_gate_enabled() const { return tau_c > 0.0; }
  double eta() const { return 1.0 / static_cast<double>(groups); }
  std::size_t base_channels() const { return conv.in_channels / groups; }
  std::size_t cond_channels() const { return conv.in_channels - base_channels(); }
  std::size_t base_fan_in() const { return base_channels() * conv.kernel * conv.kernel; }
  std::size_t cond_fan_in() const { return cond_channels() * conv.kernel * conv.kernel; }
};

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  static RunningStats make(std::size_t channels);
};

struct GateState {
  std::vector<double> delta;       // single-sided thresholds, one per output channel
  std::vector<double> delta_high;  // two-sided upper thresholds
  std::vector<double> delta_low;   // two-sided lower thresholds
  BatchNormState gate_bn;          // affine-free normalizer of the partial sum

  static GateState make(std::size_t out_channels, GateKind kind);
  /// Restores delta_high >= delta_low by collapsing violating pairs to their midpoint.
  void clamp_two_sided();
  /// Sets every threshold so the gate passes everything (value <= -1e6 style).
  void force_open(double magnitude = 1e6);
};

/// Binary decisions for one sample. d is (c_out, h', w').
struct DecisionMap {
  Tensor d;
  std::vector<std::uint8_t> channel_mask;

  std::size_t channels() const { return d.dim(0); }
  std::size_t positions() const { return d.dim(1) * d.dim(2); }
  /// d AND channel_mask.
  bool effective(std::size_t channel, std::size_t position) const {
    return channel_mask[channel] != 0 && d[channel * positions() + position] != 0.0;
  }
  std::size_t live_count() const;
};

struct CgBlockParams {
  Tensor w_base;  // (c_out, c_in/G, k, k): output group i reads input group i
  Tensor w_cond;  // (c_out, c_in - c_in/G, k, k): remaining groups, ascending
  std::vector<double> gamma;  // shared by BN1 and BN2
  std::vector<double> beta;
  RunningStats bn1;  // statistics of the partial sum
  RunningStats bn2;  // statistics of the full sum
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
  GateState gate;
  /// Inference requires frozen statistics.
  bool frozen = false;

  static CgBlockParams make(const CgLayerConfig& cfg);
  void validate(const CgLayerConfig& cfg) const;
};

// ---------------------------------------------------------------------------
// Channel grouping
// ---------------------------------------------------------------------------

struct GroupSplit {
  std::vector<std::size_t> base;  // input channels of the base path
  std::vector<std::size_t> cond;  // conditional path, ascending group order
};

/// Channel assignment for output group `group`: base = input group `group`,
/// conditional = every other group in ascending order.
GroupSplit split_grouped(std::size_t in_channels, std::size_t groups, std::size_t group);
/// Materialized (x_p, x_r) for a (C,H,W) sample.
std::pair<Tensor, Tensor> split_grouped(const Tensor& x, std::size_t groups, std::size_t group);

/// Dense (c_out, c_in, k, k) weight from the base/conditional partition.
Tensor assemble_dense_weight(const Tensor& w_base, const Tensor& w_cond, std::size_t groups);
/// Inverse of assemble_dense_weight.
std::pair<Tensor, Tensor> partition_dense_weight(const Tensor& w, std::size_t groups);

/// ShuffleNet interleave: channel (group g, offset j) moves to j*G + g.
Tensor channel_shuffle(const Tensor& x, std::size_t groups);
Tensor channel_unshuffle(const Tensor& x, std::size_t groups);

// ---------------------------------------------------------------------------
// Gates
// ---------------------------------------------------------------------------

/// theta(x): 1 where x >= 0, else 0.
Tensor heaviside(const Tensor& x);
inline double heaviside(double x) { return x >= 0.0 ? 1.0 : 0.0; }

/// Half-width w of the two-sided window [-w, w] that passes the same fraction
/// of a standard normal gate input as a single-sided threshold t does:
/// 2*Phi(w) - 1 == 1 - Phi(t).
double two_sided_half_width(double single_sided_threshold);

/// Decision for an already-normalized gate input.
double gate_decision(double xhat, std::size_t channel, const GateState& gate, GateKind kind);

/// Per-channel merged thresholds delta*sqrt(var+eps)+mean built from the gate
/// normalizer's running stats.
struct MergedThresholds {
  std::vector<double> low;   // single-sided threshold, or two-sided lower bound
  std::vector<double> high;  // two-sided upper bound (empty for single-sided)
};
MergedThresholds merge_gate(const GateState& gate, GateKind kind);

/// Inference gate with normalization folded into the thresholds.
/// partial_sum is (c_out, h', w').
Tensor merged_gate(const Tensor& partial_sum, const GateState& gate,
                   GateKind kind = GateKind::kSingleSided);

/// training=true normalizes with batch statistics (updating gate_bn's running
/// stats) and thresholds the result; training=false uses merged_gate.
/// Accepts (c_out,h,w) or (N,c_out,h,w).
Tensor gate_forward(const Tensor& partial_sum, GateState& gate, const CgLayerConfig& cfg,
                    bool training);

/// mask[i] = theta(sum_{j,k} d[i,j,k] - tau_c * h' * w').
std::vector<std::uint8_t> channel_gate(const Tensor& d, double tau_c);

/// Fraction of activations whose effective decision is 0.
double pruning_ratio(const DecisionMap& dm);

// ---------------------------------------------------------------------------
// Inference block
// ---------------------------------------------------------------------------

struct BlockCounters {
  std::uint64_t base_macs = 0;
  std::uint64_t cond_macs_executed = 0;
  std::uint64_t cond_macs_total = 0;
  std::uint64_t gate_comparisons = 0;
  std::uint64_t thresholds_stored = 0;
  std::uint64_t weights_accessed = 0;
  std::uint64_t weights_total = 0;
};

struct CgInferenceResult {
  Tensor y;
  DecisionMap dm;
  BlockCounters counters;
};

/// One (C,H,W) sample through the gated block. Dead activations produce
/// f(BN1(p)); live ones f(BN2(p + W_r*x_r)), where the conditional sum
/// continues accumulating from p in x_r order. `residual`, when given, is
/// added before the activation. `gate`, when given, replaces params.gate.
/// Throws StateError unless params.frozen.
CgInferenceResult cg_block_forward_inference(const Tensor& x, const CgBlockParams& params,
                                             const CgLayerConfig& cfg,
                                             const Tensor* residual = nullptr,
                                             const GateState* gate = nullptr);

}  // namespace cgnet
