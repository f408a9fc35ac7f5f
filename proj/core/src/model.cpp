#include "cgnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cgnet/errors.hpp"

namespace cgnet {

using nlohmann::json;

namespace {

constexpr double kOpen = 1e6;

Tensor with_batch(const Tensor& x) {
  Tensor b = x;
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  b.reshape(s);
  return b;
}

Tensor without_batch(Tensor x) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  x.reshape(s);
  return x;
}

void he_normal(Tensor& w, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : w.values()) v = dist(rng);
}

void add_into(std::vector<double>& acc, const std::vector<double>& v) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

void add_into(Tensor& acc, const Tensor& v) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

std::span<double> span_of(std::vector<double>& v) { return {v.data(), v.size()}; }

std::size_t require_size(const json& j, const char* key, const std::string& layer) {
  if (!j.contains(key)) throw ConfigError("layer '" + layer + "': missing field '" + key + "'");
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() <= 0) {
    throw ConfigError("layer '" + layer + "': field '" + key + "' must be a positive integer");
  }
  return v.get<std::size_t>();
}

std::size_t size_or(const json& j, const char* key, std::size_t fallback, const std::string& layer,
                    bool allow_zero = false) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < (allow_zero ? 0 : 1)) {
    throw ConfigError("layer '" + layer + "': field '" + key + "' must be a " +
                      (allow_zero ? "non-negative" : "positive") + " integer");
  }
  return v.get<std::size_t>();
}

double real_or(const json& j, const char* key, double fallback, const std::string& layer) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number()) {
    throw ConfigError("layer '" + layer + "': field '" + key + "' must be a number");
  }
  return j.at(key).get<double>();
}

void check_in_channels(const json& j, std::size_t actual, const std::string& layer) {
  if (j.contains("in_channels") && j.at("in_channels").get<std::size_t>() != actual) {
    throw ConfigError("layer '" + layer + "': field 'in_channels' is " +
                      std::to_string(j.at("in_channels").get<std::size_t>()) +
                      " but the incoming tensor has " + std::to_string(actual) + " channels");
  }
}

ConvSpec conv_spec_from(const json& j, std::size_t in_channels, const std::string& layer,
                        bool allow_groups) {
  ConvSpec s;
  s.in_channels = in_channels;
  s.out_channels = require_size(j, "out_channels", layer);
  s.kernel = size_or(j, "kernel", 3, layer);
  s.stride = size_or(j, "stride", 1, layer);
  s.padding = size_or(j, "padding", s.kernel / 2, layer, true);
  s.groups = allow_groups ? size_or(j, "groups", 1, layer) : 1;
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("layer '" + layer + "': " + e.what());
  }
  return s;
}

Activation activation_from(const json& j, const std::string& layer) {
  try {
    return parse_activation(j.value("activation", std::string("relu")));
  } catch (const ConfigError& e) {
    throw ConfigError("layer '" + layer + "': field 'activation': " + e.what());
  }
}

void require_rank3(const Shape& s, const std::string& layer) {
  if (s.size() != 3) {
    throw ConfigError("layer '" + layer + "' needs a (C,H,W) input, got " + shape_string(s));
  }
}

std::unique_ptr<ConvUnit> make_unit(const json& j, const Shape& in, std::mt19937_64& rng,
                                    const std::string& name) {
  require_rank3(in, name);
  const std::string type = j.value("type", std::string("conv"));
  check_in_channels(j, in[0], name);
  if (type == "conv") {
    const ConvSpec spec = conv_spec_from(j, in[0], name, true);
    auto l = std::make_unique<ConvBnLayer>(name, spec, activation_from(j, name), in[1], in[2],
                                           size_or(j, "shuffle_groups", 1, name));
    he_normal(l->weight(), spec.fan_in(), rng);
    return l;
  }
  if (type == "cg_conv") {
    CgLayerConfig cfg;
    cfg.conv = conv_spec_from(j, in[0], name, false);
    cfg.groups = size_or(j, "groups", 4, name);
    cfg.activation = activation_from(j, name);
    cfg.target = real_or(j, "target", cfg.target, name);
    cfg.tau_c = real_or(j, "tau_c", cfg.tau_c, name);
    cfg.epsilon = real_or(j, "epsilon", cfg.epsilon, name);
    cfg.shuffle = j.value("shuffle", false);
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("layer '" + name + "': " + e.what());
    }
    auto l = std::make_unique<CgConvLayer>(name, cfg, in[1], in[2]);
    Tensor dense({cfg.conv.out_channels, cfg.conv.in_channels, cfg.conv.kernel, cfg.conv.kernel});
    he_normal(dense, cfg.conv.in_channels * cfg.conv.kernel * cfg.conv.kernel, rng);
    auto [wb, wc] = partition_dense_weight(dense, cfg.groups);
    l->block().w_base = std::move(wb);
    l->block().w_cond = std::move(wc);
    return l;
  }
  throw ConfigError("layer '" + name + "': field 'type' must be conv or cg_conv here, got '" +
                    type + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// ConvBnLayer
// ---------------------------------------------------------------------------

ConvBnLayer::ConvBnLayer(std::string name, ConvSpec spec, Activation act, std::size_t in_h,
                         std::size_t in_w, std::size_t shuffle_groups)
    : spec_(spec), act_(act), in_h_(in_h), in_w_(in_w), shuffle_groups_(shuffle_groups) {
  name_ = std::move(name);
  spec_.validate();
  if (shuffle_groups_ == 0 || spec_.out_channels % shuffle_groups_ != 0) {
    throw ConfigError("layer '" + name_ + "': shuffle_groups must divide out_channels");
  }
  w_ = Tensor(spec_.weight_shape());
  dw_ = Tensor(spec_.weight_shape());
  bn_ = BatchNormState::make(spec_.out_channels);
  dgamma_.assign(spec_.out_channels, 0.0);
  dbeta_.assign(spec_.out_channels, 0.0);
}

Shape ConvBnLayer::output_shape() const {
  return {spec_.out_channels, spec_.out_dim(in_h_), spec_.out_dim(in_w_)};
}

Tensor ConvBnLayer::forward_with(const Tensor& x, const Tensor* residual, bool training) {
  x_ = x;
  const Tensor y = conv2d(x, w_, spec_);
  z_ = batchnorm_forward(y, bn_, training, true, &cache_);
  has_residual_ = residual != nullptr;
  if (residual) {
    require_shape(*residual, z_.shape(), "conv residual");
    add_into(z_, *residual);
  }
  Tensor out = cgnet::activation(z_, act_);
  return shuffle_groups_ > 1 ? channel_shuffle(out, shuffle_groups_) : out;
}

std::pair<Tensor, Tensor> ConvBnLayer::backward_with(const Tensor& dy) {
  const Tensor dyu = shuffle_groups_ > 1 ? channel_unshuffle(dy, shuffle_groups_) : dy;
  Tensor dz = activation_backward(z_, dyu, act_);
  const auto bg = batchnorm_backward(dz, bn_, cache_);
  add_into(dgamma_, bg.dgamma);
  add_into(dbeta_, bg.dbeta);
  auto cg = conv2d_backward(x_, w_, bg.dx, spec_);
  add_into(dw_, cg.dw);
  return {std::move(cg.dx), has_residual_ ? std::move(dz) : Tensor()};
}

Tensor ConvBnLayer::infer_with(const Tensor& x, const Tensor* residual,
                               const InferenceOptions& opts, SampleTrace* trace) const {
  if (x.rank() != 3) throw ConfigError("layer '" + name_ + "': inference expects (C,H,W)");
  Tensor y = conv2d(x, w_, spec_);
  const std::size_t plane = y.dim(1) * y.dim(2);
  for (std::size_t c = 0; c < spec_.out_channels; ++c) {
    for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
      double z = batchnorm_infer(y[i], bn_.running_mean[c], bn_.running_var[c], bn_.eps,
                                 bn_.gamma[c], bn_.beta[c]);
      if (residual) z += (*residual)[i];
      y[i] = activate(z, act_);
    }
  }
  if (trace) {
    LayerTrace t;
    t.name = name_;
    t.gated = false;
    t.in_channels = spec_.in_channels;
    t.out_channels = spec_.out_channels;
    t.kernel = spec_.kernel;
    t.in_h = x.dim(1);
    t.in_w = x.dim(2);
    t.out_h = y.dim(1);
    t.out_w = y.dim(2);
    t.conv_groups = spec_.groups;
    if (opts.record_inputs) t.input = x;
    trace->layers.push_back(std::move(t));
  }
  return shuffle_groups_ > 1 ? channel_shuffle(y, shuffle_groups_) : y;
}

void ConvBnLayer::params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".weight", w_.values(), dw_.values(), true, false});
  out.push_back({name_ + ".bn.gamma", span_of(bn_.gamma), span_of(dgamma_), false, false});
  out.push_back({name_ + ".bn.beta", span_of(bn_.beta), span_of(dbeta_), false, false});
}

void ConvBnLayer::buffers(std::vector<BufferRef>& out) {
  const Shape c{spec_.out_channels};
  out.push_back({name_ + ".weight", w_.shape(), w_.values()});
  out.push_back({name_ + ".bn.gamma", c, span_of(bn_.gamma)});
  out.push_back({name_ + ".bn.beta", c, span_of(bn_.beta)});
  out.push_back({name_ + ".bn.running_mean", c, span_of(bn_.running_mean)});
  out.push_back({name_ + ".bn.running_var", c, span_of(bn_.running_var)});
}

void ConvBnLayer::zero_grad() {
  dw_.fill(0.0);
  std::fill(dgamma_.begin(), dgamma_.end(), 0.0);
  std::fill(dbeta_.begin(), dbeta_.end(), 0.0);
}

json ConvBnLayer::config() const {
  return {{"type", "conv"},
          {"name", name_},
          {"in_channels", spec_.in_channels},
          {"out_channels", spec_.out_channels},
          {"kernel", spec_.kernel},
          {"stride", spec_.stride},
          {"padding", spec_.padding},
          {"groups", spec_.groups},
          {"activation", std::string(to_string(act_))},
          {"shuffle_groups", shuffle_groups_}};
}

// ---------------------------------------------------------------------------
// CgConvLayer
// ---------------------------------------------------------------------------

CgConvLayer::CgConvLayer(std::string name, CgLayerConfig cfg, std::size_t in_h, std::size_t in_w)
    : cfg_(cfg), in_h_(in_h), in_w_(in_w) {
  name_ = std::move(name);
  p_ = CgBlockParams::make(cfg_);
  zero_grad();
}

Shape CgConvLayer::output_shape() const {
  return {cfg_.conv.out_channels, cfg_.conv.out_dim(in_h_), cfg_.conv.out_dim(in_w_)};
}

Tensor CgConvLayer::forward_with(const Tensor& x, const Tensor* residual, bool training) {
  if (training) return cg_block_forward_train(x, p_, cfg_, ctx_, mode_, residual);
  if (x.rank() != 4) throw ConfigError("layer '" + name_ + "': batched forward expects rank 4");
  std::vector<Tensor> outs;
  outs.reserve(x.dim(0));
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    const Tensor r = residual ? residual->sample(n) : Tensor();
    outs.push_back(
        cg_block_forward_inference(x.sample(n), p_, cfg_, residual ? &r : nullptr).y);
  }
  return Tensor::stack(outs);
}

std::pair<Tensor, Tensor> CgConvLayer::backward_with(const Tensor& dy) {
  auto g = cg_block_backward(ctx_, p_, cfg_, dy, ds_extra_.empty() ? nullptr : &ds_extra_);
  ds_extra_ = Tensor();
  add_into(grads_.dw_base, g.dw_base);
  add_into(grads_.dw_cond, g.dw_cond);
  add_into(grads_.dgamma, g.dgamma);
  add_into(grads_.dbeta, g.dbeta);
  add_into(grads_.ddelta, g.ddelta);
  add_into(grads_.ddelta_high, g.ddelta_high);
  add_into(grads_.ddelta_low, g.ddelta_low);
  return {std::move(g.dx), std::move(g.dresidual)};
}

Tensor CgConvLayer::infer_with(const Tensor& x, const Tensor* residual,
                               const InferenceOptions& opts, SampleTrace* trace) const {
  const CgLayerConfig* cfg = &cfg_;
  CgLayerConfig cfg_override;
  if (opts.tau_c_override) {
    cfg_override = cfg_;
    cfg_override.tau_c = *opts.tau_c_override;
    cfg = &cfg_override;
  }
  const GateState* gate = nullptr;
  GateState gate_override;
  if (opts.delta_override) {
    gate_override = p_.gate;
    const double v = *opts.delta_override;
    std::fill(gate_override.delta.begin(), gate_override.delta.end(), v);
    std::fill(gate_override.delta_low.begin(), gate_override.delta_low.end(), v);
    std::fill(gate_override.delta_high.begin(), gate_override.delta_high.end(), -v);
    gate = &gate_override;
  }
  auto res = cg_block_forward_inference(x, p_, *cfg, residual, gate);
  if (trace) {
    LayerTrace t;
    t.name = name_;
    t.gated = true;
    t.in_channels = cfg->conv.in_channels;
    t.out_channels = cfg->conv.out_channels;
    t.kernel = cfg->conv.kernel;
    t.in_h = x.dim(1);
    t.in_w = x.dim(2);
    t.out_h = res.dm.d.dim(1);
    t.out_w = res.dm.d.dim(2);
    t.cfg = *cfg;
    t.dm = std::move(res.dm);
    t.counters = res.counters;
    if (opts.record_inputs) t.input = x;
    trace->layers.push_back(std::move(t));
  }
  return std::move(res.y);
}

void CgConvLayer::params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".w_base", p_.w_base.values(), grads_.dw_base.values(), true, false});
  out.push_back({name_ + ".w_cond", p_.w_cond.values(), grads_.dw_cond.values(), true, false});
  out.push_back({name_ + ".gamma", span_of(p_.gamma), span_of(grads_.dgamma), false, false});
  out.push_back({name_ + ".beta", span_of(p_.beta), span_of(grads_.dbeta), false, false});
  if (locked_) return;
  if (cfg_.gate_kind() == GateKind::kSingleSided) {
    out.push_back(
        {name_ + ".gate.delta", span_of(p_.gate.delta), span_of(grads_.ddelta), false, true});
  } else {
    out.push_back({name_ + ".gate.delta_high", span_of(p_.gate.delta_high),
                   span_of(grads_.ddelta_high), false, true});
    out.push_back({name_ + ".gate.delta_low", span_of(p_.gate.delta_low),
                   span_of(grads_.ddelta_low), false, true});
  }
}

void CgConvLayer::buffers(std::vector<BufferRef>& out) {
  const Shape c{cfg_.conv.out_channels};
  out.push_back({name_ + ".w_base", p_.w_base.shape(), p_.w_base.values()});
  out.push_back({name_ + ".w_cond", p_.w_cond.shape(), p_.w_cond.values()});
  out.push_back({name_ + ".gamma", c, span_of(p_.gamma)});
  out.push_back({name_ + ".beta", c, span_of(p_.beta)});
  out.push_back({name_ + ".bn1.running_mean", c, span_of(p_.bn1.mean)});
  out.push_back({name_ + ".bn1.running_var", c, span_of(p_.bn1.var)});
  out.push_back({name_ + ".bn2.running_mean", c, span_of(p_.bn2.mean)});
  out.push_back({name_ + ".bn2.running_var", c, span_of(p_.bn2.var)});
  if (cfg_.gate_kind() == GateKind::kSingleSided) {
    out.push_back({name_ + ".gate.delta", c, span_of(p_.gate.delta)});
  } else {
    out.push_back({name_ + ".gate.delta_high", c, span_of(p_.gate.delta_high)});
    out.push_back({name_ + ".gate.delta_low", c, span_of(p_.gate.delta_low)});
  }
  out.push_back({name_ + ".gate.bn.running_mean", c, span_of(p_.gate.gate_bn.running_mean)});
  out.push_back({name_ + ".gate.bn.running_var", c, span_of(p_.gate.gate_bn.running_var)});
}

void CgConvLayer::zero_grad() {
  const std::size_t c = cfg_.conv.out_channels;
  if (grads_.dw_base.same_shape(p_.w_base)) {
    grads_.dw_base.fill(0.0);
  } else {
    grads_.dw_base = Tensor(p_.w_base.shape());
  }
  if (grads_.dw_cond.same_shape(p_.w_cond)) {
    grads_.dw_cond.fill(0.0);
  } else {
    grads_.dw_cond = Tensor(p_.w_cond.shape());
  }
  grads_.dgamma.assign(c, 0.0);
  grads_.dbeta.assign(c, 0.0);
  const bool single = cfg_.gate_kind() == GateKind::kSingleSided;
  grads_.ddelta.assign(single ? c : 0, 0.0);
  grads_.ddelta_high.assign(single ? 0 : c, 0.0);
  grads_.ddelta_low.assign(single ? 0 : c, 0.0);
}

void CgConvLayer::after_step() {
  if (cfg_.gate_kind() == GateKind::kTwoSided) p_.gate.clamp_two_sided();
}

void CgConvLayer::add_threshold_grad(const GateGrads& g) {
  add_into(grads_.ddelta, g.delta);
  add_into(grads_.ddelta_high, g.delta_high);
  add_into(grads_.ddelta_low, g.delta_low);
}

json CgConvLayer::config() const {
  return {{"type", "cg_conv"},
          {"name", name_},
          {"in_channels", cfg_.conv.in_channels},
          {"out_channels", cfg_.conv.out_channels},
          {"kernel", cfg_.conv.kernel},
          {"stride", cfg_.conv.stride},
          {"padding", cfg_.conv.padding},
          {"groups", cfg_.groups},
          {"activation", std::string(to_string(cfg_.activation))},
          {"target", cfg_.target},
          {"tau_c", cfg_.tau_c},
          {"epsilon", cfg_.epsilon},
          {"shuffle", cfg_.shuffle}};
}

std::unique_ptr<Layer> CgConvLayer::densified() const {
  auto l = std::make_unique<ConvBnLayer>(name_, cfg_.conv, cfg_.activation, in_h_, in_w_,
                                         cfg_.shuffle ? cfg_.groups : 1);
  l->weight() = assemble_dense_weight(p_.w_base, p_.w_cond, cfg_.groups);
  auto& bn = l->bn();
  bn.gamma = p_.gamma;
  bn.beta = p_.beta;
  bn.running_mean = p_.bn2.mean;
  bn.running_var = p_.bn2.var;
  bn.momentum = p_.bn_momentum;
  bn.eps = p_.bn_eps;
  return l;
}

// ---------------------------------------------------------------------------
// Pooling and linear
// ---------------------------------------------------------------------------

MaxPoolLayer::MaxPoolLayer(std::string name, std::size_t kernel, Shape in_shape)
    : kernel_(kernel), in_shape_(std::move(in_shape)) {
  name_ = std::move(name);
  require_rank3(in_shape_, name_);
  if (kernel_ == 0 || in_shape_[1] < kernel_ || in_shape_[2] < kernel_) {
    throw ConfigError("layer '" + name_ + "': pooling kernel does not fit the input");
  }
}

Shape MaxPoolLayer::output_shape() const {
  return {in_shape_[0], in_shape_[1] / kernel_, in_shape_[2] / kernel_};
}

Tensor MaxPoolLayer::forward(const Tensor& x, bool) {
  auto r = maxpool2d(x, kernel_);
  x_shape_ = x.shape();
  argmax_ = std::move(r.argmax);
  return std::move(r.y);
}

Tensor MaxPoolLayer::backward(const Tensor& dy) {
  return maxpool2d_backward(x_shape_, argmax_, dy);
}

Tensor MaxPoolLayer::infer(const Tensor& x, const InferenceOptions&, SampleTrace*) const {
  return without_batch(maxpool2d(with_batch(x), kernel_).y);
}

json MaxPoolLayer::config() const {
  return {{"type", "maxpool"}, {"name", name_}, {"kernel", kernel_}};
}

GlobalAvgPoolLayer::GlobalAvgPoolLayer(std::string name, Shape in_shape)
    : in_shape_(std::move(in_shape)) {
  name_ = std::move(name);
  require_rank3(in_shape_, name_);
}

Tensor GlobalAvgPoolLayer::forward(const Tensor& x, bool) {
  x_shape_ = x.shape();
  return global_avgpool(x);
}

Tensor GlobalAvgPoolLayer::backward(const Tensor& dy) {
  return global_avgpool_backward(x_shape_, dy);
}

Tensor GlobalAvgPoolLayer::infer(const Tensor& x, const InferenceOptions&, SampleTrace*) const {
  return without_batch(global_avgpool(with_batch(x)));
}

json GlobalAvgPoolLayer::config() const {
  return {{"type", "global_avgpool"}, {"name", name_}};
}

LinearLayer::LinearLayer(std::string name, std::size_t in_features, std::size_t out_features)
    : in_(in_features), out_(out_features) {
  name_ = std::move(name);
  w_ = Tensor({out_, in_});
  b_ = Tensor({out_});
  dw_ = Tensor({out_, in_});
  db_ = Tensor({out_});
}

Tensor LinearLayer::forward(const Tensor& x, bool) {
  x_shape_ = x.shape();
  x_ = x;
  x_.reshape({x.dim(0), x.size() / x.dim(0)});
  if (x_.dim(1) != in_) throw ConfigError("layer '" + name_ + "': input feature size mismatch");
  return linear_forward(x_, w_, b_);
}

Tensor LinearLayer::backward(const Tensor& dy) {
  auto g = linear_backward(x_, w_, dy);
  add_into(dw_, g.dw);
  add_into(db_, g.db);
  g.dx.reshape(x_shape_);
  return std::move(g.dx);
}

Tensor LinearLayer::infer(const Tensor& x, const InferenceOptions& opts, SampleTrace* trace) const {
  Tensor flat = x;
  flat.reshape({1, x.size()});
  if (flat.dim(1) != in_) throw ConfigError("layer '" + name_ + "': input feature size mismatch");
  if (trace) {
    LayerTrace t;
    t.name = name_;
    t.in_channels = in_;
    t.out_channels = out_;
    t.kernel = 1;
    t.in_h = t.in_w = t.out_h = t.out_w = 1;
    if (opts.record_inputs) t.input = x;
    trace->layers.push_back(std::move(t));
  }
  return without_batch(linear_forward(flat, w_, b_));
}

void LinearLayer::params(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".weight", w_.values(), dw_.values(), true, false});
  out.push_back({name_ + ".bias", b_.values(), db_.values(), false, false});
}

void LinearLayer::buffers(std::vector<BufferRef>& out) {
  out.push_back({name_ + ".weight", w_.shape(), w_.values()});
  out.push_back({name_ + ".bias", b_.shape(), b_.values()});
}

void LinearLayer::zero_grad() {
  dw_.fill(0.0);
  db_.fill(0.0);
}

json LinearLayer::config() const {
  return {{"type", "linear"}, {"name", name_}, {"in_features", in_}, {"out_features", out_}};
}

// ---------------------------------------------------------------------------
// ResidualBlock
// ---------------------------------------------------------------------------

ResidualBlock::ResidualBlock(std::string name, std::unique_ptr<ConvUnit> a,
                             std::unique_ptr<ConvUnit> b, std::unique_ptr<ConvBnLayer> shortcut)
    : a_(std::move(a)), b_(std::move(b)), shortcut_(std::move(shortcut)) {
  name_ = std::move(name);
}

ResidualBlock::ResidualBlock(const ResidualBlock& other) : Layer(other) {
  a_.reset(static_cast<ConvUnit*>(other.a_->clone().release()));
  b_.reset(static_cast<ConvUnit*>(other.b_->clone().release()));
  if (other.shortcut_) shortcut_ = std::make_unique<ConvBnLayer>(*other.shortcut_);
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
  const Tensor h = a_->forward_with(x, nullptr, training);
  const Tensor sc = shortcut_ ? shortcut_->forward_with(x, nullptr, training) : x;
  return b_->forward_with(h, &sc, training);
}

Tensor ResidualBlock::backward(const Tensor& dy) {
  auto [dh, dsc] = b_->backward_with(dy);
  Tensor dx = a_->backward_with(dh).first;
  const Tensor dxs = shortcut_ ? shortcut_->backward_with(dsc).first : dsc;
  add_into(dx, dxs);
  return dx;
}

Tensor ResidualBlock::infer(const Tensor& x, const InferenceOptions& opts,
                            SampleTrace* trace) const {
  const Tensor h = a_->infer_with(x, nullptr, opts, trace);
  const Tensor sc = shortcut_ ? shortcut_->infer_with(x, nullptr, opts, trace) : x;
  return b_->infer_with(h, &sc, opts, trace);
}

void ResidualBlock::params(std::vector<ParamRef>& out) {
  a_->params(out);
  b_->params(out);
  if (shortcut_) shortcut_->params(out);
}

void ResidualBlock::buffers(std::vector<BufferRef>& out) {
  a_->buffers(out);
  b_->buffers(out);
  if (shortcut_) shortcut_->buffers(out);
}

void ResidualBlock::zero_grad() {
  a_->zero_grad();
  b_->zero_grad();
  if (shortcut_) shortcut_->zero_grad();
}

void ResidualBlock::set_frozen(bool frozen) {
  a_->set_frozen(frozen);
  b_->set_frozen(frozen);
}

void ResidualBlock::after_step() {
  a_->after_step();
  b_->after_step();
}

void ResidualBlock::gated(std::vector<CgConvLayer*>& out) {
  a_->gated(out);
  b_->gated(out);
}

json ResidualBlock::config() const {
  return {{"type", "residual"},
          {"name", name_},
          {"a", a_->config()},
          {"b", b_->config()},
          {"shortcut", shortcut_ ? shortcut_->config() : json(nullptr)}};
}

std::unique_ptr<Layer> ResidualBlock::densified() const {
  std::unique_ptr<ConvUnit> a(static_cast<ConvUnit*>(a_->densified().release()));
  std::unique_ptr<ConvUnit> b(static_cast<ConvUnit*>(b_->densified().release()));
  auto sc = shortcut_ ? std::make_unique<ConvBnLayer>(*shortcut_) : nullptr;
  return std::make_unique<ResidualBlock>(name_, std::move(a), std::move(b), std::move(sc));
}

// ---------------------------------------------------------------------------
// Factory
// ---------------------------------------------------------------------------

std::unique_ptr<Layer> make_layer(const json& j, const Shape& in, std::mt19937_64& rng,
                                  std::size_t index) {
  if (!j.is_object() || !j.contains("type") || !j.at("type").is_string()) {
    throw ConfigError("layers[" + std::to_string(index) + "]: missing string field 'type'");
  }
  const std::string type = j.at("type").get<std::string>();
  const std::string name = j.value("name", "l" + std::to_string(index) + "_" + type);
  if (type == "conv" || type == "cg_conv") return make_unit(j, in, rng, name);
  if (type == "maxpool") {
    return std::make_unique<MaxPoolLayer>(name, size_or(j, "kernel", 2, name), in);
  }
  if (type == "global_avgpool") return std::make_unique<GlobalAvgPoolLayer>(name, in);
  if (type == "linear") {
    const std::size_t in_features = shape_size(in);
    if (j.contains("in_features") && j.at("in_features").get<std::size_t>() != in_features) {
      throw ConfigError("layer '" + name + "': field 'in_features' does not match input size " +
                        std::to_string(in_features));
    }
    auto l = std::make_unique<LinearLayer>(name, in_features, require_size(j, "out_features", name));
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(in_features)));
    for (auto& v : l->weight().values()) v = dist(rng);
    return l;
  }
  if (type == "residual") {
    require_rank3(in, name);
    json ja, jb, jsc;
    if (j.contains("a")) {
      ja = j.at("a");
      jb = j.at("b");
      jsc = j.value("shortcut", json(nullptr));
    } else {
      const bool gated = j.value("gated", true);
      const std::size_t out = require_size(j, "out_channels", name);
      const std::size_t stride = size_or(j, "stride", 1, name);
      json conv = {{"type", gated ? "cg_conv" : "conv"},
                   {"out_channels", out},
                   {"kernel", 3},
                   {"padding", 1},
                   {"activation", j.value("activation", std::string("relu"))}};
      if (gated) {
        conv["groups"] = size_or(j, "groups", 4, name);
        for (const char* k : {"target", "tau_c", "epsilon"}) {
          if (j.contains(k)) conv[k] = j.at(k);
        }
      }
      ja = conv;
      ja["name"] = name + ".a";
      ja["stride"] = stride;
      jb = conv;
      jb["name"] = name + ".b";
      jb["stride"] = 1;
      if (stride != 1 || out != in[0]) {
        jsc = {{"type", "conv"},     {"name", name + ".shortcut"}, {"out_channels", out},
               {"kernel", 1},        {"stride", stride},           {"padding", 0},
               {"activation", "none"}};
      }
    }
    auto a = make_unit(ja, in, rng, ja.value("name", name + ".a"));
    auto b = make_unit(jb, a->output_shape(), rng, jb.value("name", name + ".b"));
    std::unique_ptr<ConvBnLayer> sc;
    if (!jsc.is_null()) {
      auto u = make_unit(jsc, in, rng, jsc.value("name", name + ".shortcut"));
      sc.reset(dynamic_cast<ConvBnLayer*>(u.release()));
      if (!sc) throw ConfigError("layer '" + name + "': shortcut must be a dense conv");
      if (sc->output_shape() != b->output_shape()) {
        throw ConfigError("layer '" + name + "': shortcut output shape mismatch");
      }
    } else if (b->output_shape() != in) {
      throw ConfigError("layer '" + name + "': identity shortcut needs matching shapes");
    }
    return std::make_unique<ResidualBlock>(name, std::move(a), std::move(b), std::move(sc));
  }
  throw ConfigError("layer '" + name + "': unknown type '" + type + "'");
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

Network::Network(const Network& other) : input_shape_(other.input_shape_) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

Network Network::build(const json& spec, std::uint64_t seed) {
  if (!spec.is_object()) throw ConfigError("model: expected an object");
  if (!spec.contains("input_shape") || !spec.at("input_shape").is_array()) {
    throw ConfigError("model: missing array field 'input_shape'");
  }
  if (!spec.contains("layers") || !spec.at("layers").is_array() || spec.at("layers").empty()) {
    throw ConfigError("model: missing non-empty array field 'layers'");
  }
  Network net;
  try {
    net.input_shape_ = spec.at("input_shape").get<Shape>();
  } catch (const json::exception&) {
    throw ConfigError("model: field 'input_shape' must be a list of positive integers");
  }
  if (net.input_shape_.size() != 3 || shape_size(net.input_shape_) == 0) {
    throw ConfigError("model: field 'input_shape' must be [C,H,W]");
  }
  std::mt19937_64 rng(seed);
  Shape shape = net.input_shape_;
  std::size_t i = 0;
  for (const auto& lj : spec.at("layers")) {
    try {
      net.layers_.push_back(make_layer(lj, shape, rng, i));
    } catch (const json::exception& e) {
      throw ConfigError("layers[" + std::to_string(i) + "]: " + e.what());
    }
    shape = net.layers_.back()->output_shape();
    ++i;
  }
  if (shape.size() != 1) {
    throw ConfigError("model: last layer must produce a flat vector of logits, got " +
                      shape_string(shape));
  }
  return net;
}

std::size_t Network::num_classes() const { return layers_.back()->output_shape().at(0); }

Tensor Network::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, training);
  return h;
}

Tensor Network::backward(const Tensor& dlogits) {
  Tensor d = dlogits;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
  return d;
}

Tensor Network::infer(const Tensor& sample, const InferenceOptions& opts,
                      SampleTrace* trace) const {
  require_shape(sample, input_shape_, "network input");
  Tensor h = sample;
  for (const auto& l : layers_) h = l->infer(h, opts, trace);
  return h;
}

std::vector<ParamRef> Network::params() {
  std::vector<ParamRef> out;
  for (auto& l : layers_) l->params(out);
  return out;
}

std::vector<BufferRef> Network::buffers() {
  std::vector<BufferRef> out;
  for (auto& l : layers_) l->buffers(out);
  return out;
}

void Network::zero_grad() {
  for (auto& l : layers_) l->zero_grad();
}

void Network::set_frozen(bool frozen) {
  for (auto& l : layers_) l->set_frozen(frozen);
}

void Network::after_step() {
  for (auto& l : layers_) l->after_step();
}

std::vector<CgConvLayer*> Network::gated_layers() {
  std::vector<CgConvLayer*> out;
  for (auto& l : layers_) l->gated(out);
  return out;
}

std::vector<const CgConvLayer*> Network::gated_layers() const {
  std::vector<CgConvLayer*> tmp;
  for (const auto& l : layers_) l->gated(tmp);
  return {tmp.begin(), tmp.end()};
}

void Network::force_gates_open(bool lock) {
  for (auto* g : gated_layers()) {
    g->block().gate.force_open(kOpen);
    g->lock_thresholds(lock);
  }
}

void Network::set_grad_mode(GateGradMode mode) {
  for (auto* g : gated_layers()) g->set_grad_mode(mode);
}

Network Network::densified() const {
  Network net;
  net.input_shape_ = input_shape_;
  for (const auto& l : layers_) net.layers_.push_back(l->densified());
  return net;
}

json Network::topology() const {
  json layers = json::array();
  for (const auto& l : layers_) layers.push_back(l->config());
  return {{"input_shape", input_shape_}, {"layers", layers}};
}

}  // namespace cgnet
