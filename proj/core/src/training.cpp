#include "cgnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cg_kernels.hpp"
#include "cgnet/errors.hpp"
#include "cgnet/parallel.hpp"

namespace cgnet {

namespace {

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

BatchNormState shared_bn(const CgBlockParams& p, const RunningStats& stats) {
  BatchNormState st;
  st.gamma = p.gamma;
  st.beta = p.beta;
  st.running_mean = stats.mean;
  st.running_var = stats.var;
  st.momentum = p.bn_momentum;
  st.eps = p.bn_eps;
  return st;
}

}  // namespace

SurrogateGate surrogate_gate(double xhat, std::size_t c, const GateState& gate, GateKind kind,
                             double eps) {
  SurrogateGate r;
  if (kind == GateKind::kSingleSided) {
    const double a = sigmoid(eps * (xhat - gate.delta[c]));
    const double da = eps * a * (1.0 - a);
    r.s = a;
    r.ds_dx = da;
    r.ds_dlow = -da;
    return r;
  }
  const double a = sigmoid(eps * (gate.delta_high[c] - xhat));
  const double b = sigmoid(eps * (xhat - gate.delta_low[c]));
  const double da = eps * a * (1.0 - a);
  const double db = eps * b * (1.0 - b);
  r.s = a * b;
  r.ds_dhigh = da * b;
  r.ds_dlow = -a * db;
  r.ds_dx = -da * b + a * db;
  return r;
}

Tensor cg_block_forward_train(const Tensor& x, CgBlockParams& params, const CgLayerConfig& cfg,
                              CgTrainContext& ctx, GateGradMode mode, const Tensor* residual) {
  cfg.validate();
  params.validate(cfg);
  if (x.rank() != 4 || x.dim(1) != cfg.conv.in_channels) {
    throw ConfigError("cg_block_forward_train: expected (N," +
                      std::to_string(cfg.conv.in_channels) + ",H,W) input, got " +
                      shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const auto g = detail::CgGeometry::make(cfg, x.dim(2), x.dim(3));
  const Shape out{batch, g.c_out, g.oh, g.ow};
  if (residual) require_shape(*residual, out, "cg residual");
  const std::size_t plane = g.c_out * g.positions;

  ctx = CgTrainContext{};
  ctx.x_shape = x.shape();
  ctx.mode = mode;
  ctx.has_residual = residual != nullptr;
  ctx.cols.resize(batch);
  ctx.partial = Tensor(out);
  ctx.full = Tensor(out);
  parallel_for(batch, [&](std::size_t n) {
    detail::unfold(x.slice(n), g, cfg.conv, ctx.cols[n]);
    detail::base_sums(ctx.cols[n], g, params.w_base, ctx.partial.data() + n * plane);
    detail::dense_cond_sums(ctx.cols[n], g, params.w_cond, ctx.partial.data() + n * plane,
                            ctx.full.data() + n * plane);
  });

  BatchNormState bn1 = shared_bn(params, params.bn1);
  ctx.xhat_p = batchnorm_forward(ctx.partial, bn1, true, true, &ctx.cache_p);
  params.bn1.mean = bn1.running_mean;
  params.bn1.var = bn1.running_var;
  BatchNormState bn2 = shared_bn(params, params.bn2);
  ctx.xhat_full = batchnorm_forward(ctx.full, bn2, true, true, &ctx.cache_full);
  params.bn2.mean = bn2.running_mean;
  params.bn2.var = bn2.running_var;
  ctx.xhat_g = batchnorm_forward(ctx.partial, params.gate.gate_bn, true, false, &ctx.cache_g);

  const GateKind kind = cfg.gate_kind();
  ctx.d = Tensor(out);
  ctx.s = Tensor(out);
  ctx.z = Tensor(out);
  ctx.mask.assign(batch * g.c_out, 1);
  Tensor y(out);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < g.c_out; ++c) {
      const std::size_t off = n * plane + c * g.positions;
      double taken = 0.0;
      for (std::size_t j = off; j < off + g.positions; ++j) {
        const double xg = ctx.xhat_g[j];
        ctx.d[j] = gate_decision(xg, c, params.gate, kind);
        ctx.s[j] = surrogate_gate(xg, c, params.gate, kind, cfg.epsilon).s;
        taken += ctx.d[j];
      }
      if (cfg.tau_c > 0.0) {
        ctx.mask[n * g.c_out + c] = static_cast<std::uint8_t>(
            heaviside(taken - cfg.tau_c * static_cast<double>(g.positions)));
      }
      const double keep = ctx.mask[n * g.c_out + c];
      for (std::size_t j = off; j < off + g.positions; ++j) {
        const double sel = keep * (mode == GateGradMode::kSmooth ? ctx.s[j] : ctx.d[j]);
        double z = (1.0 - sel) * ctx.xhat_p[j] + sel * ctx.xhat_full[j];
        if (residual) z += (*residual)[j];
        ctx.z[j] = z;
        y[j] = activate(z, cfg.activation);
      }
    }
  }
  ctx.valid = true;
  return cfg.shuffle ? channel_shuffle(y, cfg.groups) : y;
}

CgBlockGrads cg_block_backward(const CgTrainContext& ctx, const CgBlockParams& params,
                               const CgLayerConfig& cfg, const Tensor& dy,
                               const Tensor* ds_extra) {
  if (!ctx.valid) throw StateError("cg_block_backward: no forward context");
  const Tensor dyu = cfg.shuffle ? channel_unshuffle(dy, cfg.groups) : dy;
  if (!dyu.same_shape(ctx.z)) {
    throw StateError("cg_block_backward: gradient shape " + shape_string(dy.shape()) +
                     " does not match the cached forward " + shape_string(ctx.z.shape()));
  }
  if (ds_extra && !ds_extra->same_shape(ctx.z)) {
    throw StateError("cg_block_backward: surrogate gradient shape mismatch");
  }
  const std::size_t batch = ctx.x_shape[0];
  const auto g = detail::CgGeometry::make(cfg, ctx.x_shape[2], ctx.x_shape[3]);
  const std::size_t plane = g.c_out * g.positions;
  const GateKind kind = cfg.gate_kind();

  CgBlockGrads gr;
  Tensor dxp(ctx.z.shape()), dxf(ctx.z.shape()), dxg(ctx.z.shape());
  if (ctx.has_residual) gr.dresidual = Tensor(ctx.z.shape());
  if (kind == GateKind::kSingleSided) {
    gr.ddelta.assign(g.c_out, 0.0);
  } else {
    gr.ddelta_high.assign(g.c_out, 0.0);
    gr.ddelta_low.assign(g.c_out, 0.0);
  }
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < g.c_out; ++c) {
      const std::size_t off = n * plane + c * g.positions;
      const double keep = ctx.mask[n * g.c_out + c];
      for (std::size_t j = off; j < off + g.positions; ++j) {
        const double dz = dyu[j] * activation_derivative(ctx.z[j], cfg.activation);
        if (ctx.has_residual) gr.dresidual[j] = dz;
        const double sel = keep * (ctx.mode == GateGradMode::kSmooth ? ctx.s[j] : ctx.d[j]);
        dxp[j] = dz * (1.0 - sel);
        dxf[j] = dz * sel;
        double gs = keep * dz * (ctx.xhat_full[j] - ctx.xhat_p[j]);
        if (ds_extra) gs += (*ds_extra)[j];
        const auto sg = surrogate_gate(ctx.xhat_g[j], c, params.gate, kind, cfg.epsilon);
        dxg[j] = gs * sg.ds_dx;
        if (kind == GateKind::kSingleSided) {
          gr.ddelta[c] += gs * sg.ds_dlow;
        } else {
          gr.ddelta_low[c] += gs * sg.ds_dlow;
          gr.ddelta_high[c] += gs * sg.ds_dhigh;
        }
      }
    }
  }

  const BatchNormState bn1 = shared_bn(params, params.bn1);
  const BatchNormState bn2 = shared_bn(params, params.bn2);
  const auto g1 = batchnorm_backward(dxp, bn1, ctx.cache_p);
  const auto g2 = batchnorm_backward(dxf, bn2, ctx.cache_full);
  const auto gg = batchnorm_backward(dxg, params.gate.gate_bn, ctx.cache_g);
  gr.dgamma.resize(g.c_out);
  gr.dbeta.resize(g.c_out);
  for (std::size_t c = 0; c < g.c_out; ++c) {
    gr.dgamma[c] = g1.dgamma[c] + g2.dgamma[c];
    gr.dbeta[c] = g1.dbeta[c] + g2.dbeta[c];
  }
  const Tensor& dfull = g2.dx;
  Tensor dp(ctx.z.shape());
  for (std::size_t i = 0; i < dp.size(); ++i) dp[i] = g1.dx[i] + gg.dx[i] + dfull[i];

  gr.dx = Tensor(ctx.x_shape);
  gr.dw_base = Tensor(params.w_base.shape());
  gr.dw_cond = Tensor(params.w_cond.shape());
  const std::size_t in_plane = g.c_in * g.height * g.width;
  std::vector<std::vector<double>> dwb(batch), dwc(batch);
  parallel_for(batch, [&](std::size_t n) {
    const auto& cols = ctx.cols[n];
    std::vector<double> dcols(cols.size(), 0.0);
    dwb[n].assign(params.w_base.size(), 0.0);
    dwc[n].assign(params.w_cond.size(), 0.0);
    for (std::size_t o = 0; o < g.c_out; ++o) {
      const std::size_t grp = g.group_of(o);
      const double* dpo = dp.data() + n * plane + o * g.positions;
      const double* dfo = dfull.data() + n * plane + o * g.positions;
      const double* wb = params.w_base.data() + o * g.base_rows;
      const double* wc = params.w_cond.data() + o * g.cond_rows;
      for (std::size_t r = 0; r < g.base_rows; ++r) {
        const std::size_t row = g.base_row_begin(grp) + r;
        const double* col = cols.data() + row * g.positions;
        double* dcol = dcols.data() + row * g.positions;
        double acc = 0.0;
        for (std::size_t j = 0; j < g.positions; ++j) {
          acc += dpo[j] * col[j];
          dcol[j] += wb[r] * dpo[j];
        }
        dwb[n][o * g.base_rows + r] = acc;
      }
      for (std::size_t r = 0; r < g.cond_rows; ++r) {
        const std::size_t row = g.cond_row(grp, r);
        const double* col = cols.data() + row * g.positions;
        double* dcol = dcols.data() + row * g.positions;
        double acc = 0.0;
        for (std::size_t j = 0; j < g.positions; ++j) {
          acc += dfo[j] * col[j];
          dcol[j] += wc[r] * dfo[j];
        }
        dwc[n][o * g.cond_rows + r] = acc;
      }
    }
    col2im(dcols, g.height, g.width, cfg.conv, 0, g.c_in,
           std::span<double>(gr.dx.data() + n * in_plane, in_plane));
  });
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t i = 0; i < dwb[n].size(); ++i) gr.dw_base[i] += dwb[n][i];
    for (std::size_t i = 0; i < dwc[n].size(); ++i) gr.dw_cond[i] += dwc[n][i];
  }
  return gr;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

SparsityMode parse_sparsity_mode(std::string_view name) {
  if (name == "none") return SparsityMode::kNone;
  if (name == "target_threshold") return SparsityMode::kTargetThreshold;
  if (name == "computation_cost") return SparsityMode::kComputationCost;
  throw ConfigError("unknown sparsity mode '" + std::string(name) +
                    "' (expected none, target_threshold or computation_cost)");
}

std::string_view to_string(SparsityMode m) {
  switch (m) {
    case SparsityMode::kNone:
      return "none";
    case SparsityMode::kTargetThreshold:
      return "target_threshold";
    case SparsityMode::kComputationCost:
      return "computation_cost";
  }
  return "none";
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("loss.lambda must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw ConfigError("loss.warmup_fraction must lie in [0,1]");
  }
  if (!(kd.kappa > 0.0)) throw ConfigError("loss.kd.kappa must be positive");
  if (!(kd.lambda_kd >= 0.0 && kd.lambda_kd <= 1.0)) {
    throw ConfigError("loss.kd.lambda_kd must lie in [0,1]");
  }
}

ThresholdLossResult sparsity_loss_target(std::span<const ThresholdLayer> layers, double lambda) {
  ThresholdLossResult res;
  for (const auto& l : layers) {
    GateGrads gg;
    const auto pull = [&](const std::vector<double>& delta, double target,
                          std::vector<double>& grad) {
      grad.resize(delta.size());
      for (std::size_t c = 0; c < delta.size(); ++c) {
        const double diff = target - delta[c];
        res.loss += lambda * diff * diff;
        grad[c] = -2.0 * lambda * diff;
      }
    };
    if (l.kind == GateKind::kSingleSided) {
      pull(l.gate->delta, l.target, gg.delta);
    } else {
      const double w = two_sided_half_width(l.target);
      pull(l.gate->delta_high, w, gg.delta_high);
      pull(l.gate->delta_low, -w, gg.delta_low);
    }
    res.grads.push_back(std::move(gg));
  }
  return res;
}

CostLossResult sparsity_loss_flops(std::span<const CostLayer> layers, double lambda) {
  CostLossResult res;
  std::vector<double> coef(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const Tensor& s = *L.s;
    if (s.rank() != 4) throw ConfigError("sparsity_loss_flops: gate values must be rank 4");
    if (L.groups == 0 || L.in_channels % L.groups != 0) {
      throw ConfigError("sparsity_loss_flops: in_channels not divisible by groups");
    }
    const double batch = static_cast<double>(s.dim(0));
    const double per_position = static_cast<double>(L.in_channels / L.groups) *
                                static_cast<double>(L.kernel * L.kernel) *
                                static_cast<double>(s.dim(2) * s.dim(3)) *
                                static_cast<double>(s.dim(1));
    coef[l] = per_position / batch;
    double off = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) off += 1.0 - s[i];
    res.inner += off * coef[l];
  }
  res.loss = lambda * res.inner * res.inner;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    res.d_s.emplace_back(layers[l].s->shape(), -2.0 * lambda * res.inner * coef[l]);
  }
  return res;
}

LossResult kd_loss(const Tensor& student, const Tensor& teacher, std::span<const int> labels,
                   double kappa, double lambda_kd) {
  if (student.rank() != 2 || !student.same_shape(teacher)) {
    throw ConfigError("kd_loss: student and teacher logits must both be (N, classes)");
  }
  if (labels.size() != student.dim(0)) throw ConfigError("kd_loss: label count mismatch");
  if (!(kappa > 0.0)) throw ConfigError("kd_loss: kappa must be positive");
  const std::size_t batch = student.dim(0), classes = student.dim(1);
  const Tensor ps = softmax(student, kappa);
  const Tensor pt = softmax(teacher, kappa);
  LossResult r;
  r.dlogits = Tensor(student.shape());
  for (std::size_t n = 0; n < batch; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= classes) {
      throw DataError("kd_loss: label out of range");
    }
    for (std::size_t k = 0; k < classes; ++k) {
      const std::size_t i = n * classes + k;
      const double y = static_cast<std::size_t>(labels[n]) == k ? 1.0 : 0.0;
      const double logp = std::log(std::max(ps[i], 1e-300));
      r.loss -= (1.0 - lambda_kd) * y * logp + lambda_kd * pt[i] * logp;
      r.dlogits[i] =
          ((1.0 - lambda_kd) * (ps[i] - y) + lambda_kd * (ps[i] - pt[i])) / kappa /
          static_cast<double>(batch);
    }
  }
  r.loss /= static_cast<double>(batch);
  return r;
}

}  // namespace cgnet
