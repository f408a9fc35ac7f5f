#pragma once

// Layer stack used by the harness: dense conv+BN units, gated conv units,
// pooling, fully-connected heads and residual blocks. Each layer supports a
// batched training path (forward/backward) and a per-sample inference path
// that records decision maps and work counters.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgnet/gating.hpp"
#include "cgnet/nn.hpp"
#include "cgnet/tensor.hpp"
#include "cgnet/training.hpp"

namespace cgnet {

struct InferenceOptions {
  /// Replaces every gate threshold. Single-sided layers use delta = v,
  /// two-sided layers the window [v, -v]; v = -1e6 opens every gate.
  std::optional<double> delta_override;
  std::optional<double> tau_c_override;
  /// Store each conv layer's input in the trace (used by the correlation study).
  bool record_inputs = false;
};

/// Per-sample record of one convolution (dense or gated) during inference.
struct LayerTrace {
  std::string name;
  bool gated = false;
  std::size_t in_channels = 0, out_channels = 0, kernel = 0;
  std::size_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::size_t conv_groups = 1;  // dense layers only
  CgLayerConfig cfg;            // gated layers only (tau_c reflects any override)
  DecisionMap dm;               // gated layers only
  BlockCounters counters;       // gated layers only
  Tensor input;                 // when InferenceOptions::record_inputs
};

struct SampleTrace {
  std::vector<LayerTrace> layers;
};

/// A trainable value with its gradient buffer.
struct ParamRef {
  std::string name;
  std::span<double> value;
  std::span<double> grad;
  bool decay = false;      // subject to weight decay
  bool threshold = false;  // a gate threshold
};

/// Any persistent value (parameters and running statistics).
struct BufferRef {
  std::string name;
  Shape shape;
  std::span<double> value;
};

class CgConvLayer;

class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string_view kind() const = 0;
  const std::string& name() const { return name_; }
  /// Per-sample output shape.
  virtual Shape output_shape() const = 0;

  /// Batched training/eval forward over (N, ...). Caches what backward needs.
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  /// Accumulates parameter gradients and returns dL/dx.
  virtual Tensor backward(const Tensor& dy) = 0;
  /// One sample without batch dimension.
  virtual Tensor infer(const Tensor& x, const InferenceOptions& opts,
                       SampleTrace* trace) const = 0;

  virtual void params(std::vector<ParamRef>& out) = 0;
  virtual void buffers(std::vector<BufferRef>& out) = 0;
  virtual void zero_grad() {}
  virtual void set_frozen(bool) {}
  virtual void after_step() {}
  virtual void gated(std::vector<CgConvLayer*>&) {}

  /// Fully-resolved config (includes inferred input sizes).
  virtual nlohmann::json config() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
  /// Same layer with gated convolutions replaced by their dense equivalent.
  virtual std::unique_ptr<Layer> densified() const { return clone(); }

 protected:
  std::string name_;
};

/// Convolution followed by BN and activation, with an optional residual added
/// before the activation.
class ConvUnit : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override {
    return forward_with(x, nullptr, training);
  }
  Tensor backward(const Tensor& dy) override { return backward_with(dy).first; }
  Tensor infer(const Tensor& x, const InferenceOptions& opts, SampleTrace* trace) const override {
    return infer_with(x, nullptr, opts, trace);
  }
  virtual Tensor forward_with(const Tensor& x, const Tensor* residual, bool training) = 0;
  /// Returns (dx, dresidual); dresidual is empty without a residual.
  virtual std::pair<Tensor, Tensor> backward_with(const Tensor& dy) = 0;
  virtual Tensor infer_with(const Tensor& x, const Tensor* residual, const InferenceOptions& opts,
                            SampleTrace* trace) const = 0;
};

class ConvBnLayer : public ConvUnit {
 public:
  ConvBnLayer(std::string name, ConvSpec spec, Activation act, std::size_t in_h, std::size_t in_w,
              std::size_t shuffle_groups = 1);

  std::string_view kind() const override { return "conv"; }
  Shape output_shape() const override;
  Tensor forward_with(const Tensor& x, const Tensor* residual, bool training) override;
  std::pair<Tensor, Tensor> backward_with(const Tensor& dy) override;
  Tensor infer_with(const Tensor& x, const Tensor* residual, const InferenceOptions& opts,
                    SampleTrace* trace) const override;
  void params(std::vector<ParamRef>& out) override;
  void buffers(std::vector<BufferRef>& out) override;
  void zero_grad() override;
  nlohmann::json config() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ConvBnLayer>(*this); }

  const ConvSpec& spec() const { return spec_; }
  Activation activation() const { return act_; }
  Tensor& weight() { return w_; }
  const Tensor& weight() const { return w_; }
  BatchNormState& bn() { return bn_; }
  const BatchNormState& bn() const { return bn_; }
  const Tensor& weight_grad() const { return dw_; }

 private:
  ConvSpec spec_;
  Activation act_;
  std::size_t in_h_, in_w_, shuffle_groups_;
  Tensor w_, dw_;
  BatchNormState bn_;
  std::vector<double> dgamma_, dbeta_;
  // forward cache
  Tensor x_, z_;
  BatchNormCache cache_;
  bool has_residual_ = false;
};

class CgConvLayer : public ConvUnit {
 public:
  CgConvLayer(std::string name, CgLayerConfig cfg, std::size_t in_h, std::size_t in_w);

  std::string_view kind() const override { return "cg_conv"; }
  Shape output_shape() const override;
  Tensor forward_with(const Tensor& x, const Tensor* residual, bool training) override;
  std::pair<Tensor, Tensor> backward_with(const Tensor& dy) override;
  Tensor infer_with(const Tensor& x, const Tensor* residual, const InferenceOptions& opts,
                    SampleTrace* trace) const override;
  void params(std::vector<ParamRef>& out) override;
  void buffers(std::vector<BufferRef>& out) override;
  void zero_grad() override;
  void set_frozen(bool frozen) override { p_.frozen = frozen; }
  void after_step() override;
  void gated(std::vector<CgConvLayer*>& out) override { out.push_back(this); }
  nlohmann::json config() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<CgConvLayer>(*this); }
  std::unique_ptr<Layer> densified() const override;

  const CgLayerConfig& cfg() const { return cfg_; }
  CgLayerConfig& cfg() { return cfg_; }
  CgBlockParams& block() { return p_; }
  const CgBlockParams& block() const { return p_; }
  const CgTrainContext& context() const { return ctx_; }
  const CgBlockGrads& grads() const { return grads_; }
  std::size_t in_h() const { return in_h_; }
  std::size_t in_w() const { return in_w_; }

  void set_grad_mode(GateGradMode m) { mode_ = m; }
  /// Thresholds excluded from training (used with force_open baselines).
  void lock_thresholds(bool locked) { locked_ = locked; }
  bool thresholds_locked() const { return locked_; }
  /// Extra dL/ds for the next backward call (computation-cost loss).
  void set_surrogate_grad(Tensor ds) { ds_extra_ = std::move(ds); }
  /// Adds to the threshold gradients (target-threshold loss).
  void add_threshold_grad(const GateGrads& g);

 private:
  CgLayerConfig cfg_;
  std::size_t in_h_, in_w_;
  CgBlockParams p_;
  CgTrainContext ctx_;
  CgBlockGrads grads_;
  Tensor ds_extra_;
  GateGradMode mode_ = GateGradMode::kStraightThrough;
  bool locked_ = false;
};

class MaxPoolLayer : public Layer {
 public:
  MaxPoolLayer(std::string name, std::size_t kernel, Shape in_shape);
  std::string_view kind() const override { return "maxpool"; }
  Shape output_shape() const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  Tensor infer(const Tensor& x, const InferenceOptions& opts, SampleTrace* trace) const override;
  void params(std::vector<ParamRef>&) override {}
  void buffers(std::vector<BufferRef>&) override {}
  nlohmann::json config() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPoolLayer>(*this); }

 private:
  std::size_t kernel_;
  Shape in_shape_;
  Shape x_shape_;
  std::vector<std::size_t> argmax_;
};

class GlobalAvgPoolLayer : public Layer {
 public:
  GlobalAvgPoolLayer(std::string name, Shape in_shape);
  std::string_view kind() const override { return "global_avgpool"; }
  Shape output_shape() const override { return {in_shape_[0]}; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  Tensor infer(const Tensor& x, const InferenceOptions& opts, SampleTrace* trace) const override;
  void params(std::vector<ParamRef>&) override {}
  void buffers(std::vector<BufferRef>&) override {}
  nlohmann::json config() const override;
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<GlobalAvgPoolLayer>(*this);
  }

 private:
  Shape in_shape_;
  Shape x_shape_;
};

/// Fully-connected layer; flattens its input.
class LinearLayer : public Layer {
 public:
  LinearLayer(std::string name, std::size_t in_features, std::size_t out_features);
  std::string_view kind() const override { return "linear"; }
  Shape output_shape() const override { return {out_}; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  Tensor infer(const Tensor& x, const InferenceOptions& opts, SampleTrace* trace) const override;
  void params(std::vector<ParamRef>& out) override;
  void buffers(std::vector<BufferRef>& out) override;
  void zero_grad() override;
  nlohmann::json config() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LinearLayer>(*this); }

  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

 private:
  std::size_t in_, out_;
  Tensor w_, b_, dw_, db_;
  Tensor x_;
  Shape x_shape_;
};

/// y = f(b(f(a(x))) + shortcut(x)) where the shortcut is the identity or a
/// 1x1 projection conv+BN.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(std::string name, std::unique_ptr<ConvUnit> a, std::unique_ptr<ConvUnit> b,
                std::unique_ptr<ConvBnLayer> shortcut);
  ResidualBlock(const ResidualBlock& other);

  std::string_view kind() const override { return "residual"; }
  Shape output_shape() const override { return b_->output_shape(); }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  Tensor infer(const Tensor& x, const InferenceOptions& opts, SampleTrace* trace) const override;
  void params(std::vector<ParamRef>& out) override;
  void buffers(std::vector<BufferRef>& out) override;
  void zero_grad() override;
  void set_frozen(bool frozen) override;
  void after_step() override;
  void gated(std::vector<CgConvLayer*>& out) override;
  nlohmann::json config() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ResidualBlock>(*this); }
  std::unique_ptr<Layer> densified() const override;

 private:
  std::unique_ptr<ConvUnit> a_, b_;
  std::unique_ptr<ConvBnLayer> shortcut_;
};

class Network {
 public:
  Network() = default;
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  /// spec = {"input_shape": [C,H,W], "layers": [...]}. Weights are drawn
  /// from a He-normal distribution seeded by `seed`.
  static Network build(const nlohmann::json& spec, std::uint64_t seed);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const;
  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& dlogits);
  Tensor infer(const Tensor& sample, const InferenceOptions& opts = {},
               SampleTrace* trace = nullptr) const;

  std::vector<ParamRef> params();
  std::vector<BufferRef> buffers();
  void zero_grad();
  void set_frozen(bool frozen);
  void after_step();
  std::vector<CgConvLayer*> gated_layers();
  std::vector<const CgConvLayer*> gated_layers() const;

  /// Sets every threshold so all gates pass and optionally locks them.
  void force_gates_open(bool lock);
  void set_grad_mode(GateGradMode mode);

  /// Dense network with W = [W_p | W_r] reassembled and BN2 statistics.
  Network densified() const;
  nlohmann::json topology() const;

 private:
  Shape input_shape_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Builds one layer from its JSON config given the per-sample input shape.
std::unique_ptr<Layer> make_layer(const nlohmann::json& cfg, const Shape& in_shape,
                                  std::mt19937_64& rng, std::size_t index);

}  // namespace cgnet
