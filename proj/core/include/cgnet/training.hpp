#pragma once

// Training-time graph of the gated block. The conditional path is evaluated
// densely, the two normalized sums are combined by the hard decision map, and
// the thresholds receive gradients through a smooth sigmoid surrogate of the
// gate. When the layer has tau_c > 0, the channel-wise gate masks the forward
// exactly as at inference and is held constant in the backward pass. Also hosts the sparsity losses and the distillation loss.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "cgnet/gating.hpp"
#include "cgnet/nn.hpp"
#include "cgnet/tensor.hpp"

namespace cgnet {

enum class GateGradMode {
  kStraightThrough,  // hard d in the combine, surrogate only for gate gradients
  kSmooth,           // surrogate s replaces d in the forward combine as well
};

/// Everything the backward pass needs from one batched forward call.
struct CgTrainContext {
  Shape x_shape;
  std::vector<std::vector<double>> cols;  // per-sample full im2col
  Tensor partial;    // W_p * x_p, (N, c_out, h', w')
  Tensor full;       // partial continued over the conditional rows
  Tensor xhat_g;     // affine-free normalized partial sum
  Tensor xhat_p;     // BN1(partial)
  Tensor xhat_full;  // BN2(full)
  BatchNormCache cache_g, cache_p, cache_full;
  Tensor d;  // hard decisions
  Tensor s;  // surrogate gate values
  std::vector<std::uint8_t> mask;  // (N, c_out) channel-wise gate, constant in backward
  Tensor z;  // pre-activation
  GateGradMode mode = GateGradMode::kStraightThrough;
  bool has_residual = false;
  bool valid = false;
};

/// Smooth gate value and its partial derivatives at one activation.
struct SurrogateGate {
  double s = 0.0;
  double ds_dx = 0.0;     // w.r.t. the normalized gate input
  double ds_dlow = 0.0;   // w.r.t. delta (single-sided) or delta_low
  double ds_dhigh = 0.0;  // w.r.t. delta_high (two-sided only)
};
SurrogateGate surrogate_gate(double xhat, std::size_t channel, const GateState& gate, GateKind kind,
                             double epsilon);

/// Batched (N, c_in, H, W) forward. Updates BN1/BN2/gate running statistics.
/// `residual`, when given, has the output shape and is added before the
/// activation.
Tensor cg_block_forward_train(const Tensor& x, CgBlockParams& params, const CgLayerConfig& cfg,
                              CgTrainContext& ctx,
                              GateGradMode mode = GateGradMode::kStraightThrough,
                              const Tensor* residual = nullptr);

struct CgBlockGrads {
  Tensor dx;
  Tensor dresidual;  // empty unless the forward had a residual
  Tensor dw_base;
  Tensor dw_cond;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
  std::vector<double> ddelta;       // single-sided
  std::vector<double> ddelta_high;  // two-sided
  std::vector<double> ddelta_low;
};

/// Backward of cg_block_forward_train. `ds_extra`, when given, is an
/// additional dL/ds over the surrogate gate values (the computation-cost loss)
/// and is chained into the threshold and gate-input gradients.
CgBlockGrads cg_block_backward(const CgTrainContext& ctx, const CgBlockParams& params,
                               const CgLayerConfig& cfg, const Tensor& dy,
                               const Tensor* ds_extra = nullptr);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class SparsityMode { kNone, kTargetThreshold, kComputationCost };
SparsityMode parse_sparsity_mode(std::string_view name);
std::string_view to_string(SparsityMode m);

struct KdConfig {
  bool enabled = false;
  double kappa = 1.0;      // softmax temperature
  double lambda_kd = 0.5;  // weight of the teacher term
};

struct LossConfig {
  SparsityMode sparsity = SparsityMode::kTargetThreshold;
  double lambda = 1e-4;
  double target = 1.0;  // default T for gated layers that do not set their own
  double warmup_fraction = 0.1;  // lambda ramps linearly over this share of epochs
  KdConfig kd;

  void validate() const;
};

/// Threshold gradients for one gated layer.
struct GateGrads {
  std::vector<double> delta;
  std::vector<double> delta_high;
  std::vector<double> delta_low;
};

struct ThresholdLayer {
  const GateState* gate;
  GateKind kind;
  double target;
};

struct ThresholdLossResult {
  double loss = 0.0;
  std::vector<GateGrads> grads;  // one per layer
};

/// lambda * sum_l sum_c (T_l - delta_{l,c})^2. Two-sided layers pull
/// delta_high toward w(T) and delta_low toward -w(T), where w is
/// two_sided_half_width.
ThresholdLossResult sparsity_loss_target(std::span<const ThresholdLayer> layers, double lambda);

struct CostLayer {
  const Tensor* s;  // surrogate gate values, (N, c_out, h', w')
  std::size_t in_channels;
  std::size_t groups;
  std::size_t kernel;
};

struct CostLossResult {
  double loss = 0.0;
  double inner = 0.0;        // the squared quantity
  std::vector<Tensor> d_s;   // dL/ds per layer
};

/// lambda * (sum_l mean_n sum (1 - s) * eta*c_l * k^2 * h'w' * c_out)^2.
CostLossResult sparsity_loss_flops(std::span<const CostLayer> layers, double lambda);

/// Distillation loss averaged over the batch:
/// -((1 - lambda_kd) * sum y log P_S + lambda_kd * sum P_T log P_S), with both
/// P computed by a temperature-kappa softmax.
LossResult kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                   std::span<const int> labels, double kappa, double lambda_kd);

}  // namespace cgnet
