#pragma once

// Numeric substrate: convolution, batch normalization, activations, pooling,
// fully-connected layers, softmax losses and SGD. All ops are free functions
// over explicit state; nothing here keeps hidden mutable state.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cgnet/tensor.hpp"

namespace cgnet {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  /// Throws ConfigError on zero sizes or channel counts not divisible by groups.
  void validate() const;
  /// floor((in + 2*pad - k) / stride) + 1; throws if the result would be < 1.
  std::size_t out_dim(std::size_t in) const;
  Shape weight_shape() const;
  /// Reduction length per output activation: (in/groups) * k * k.
  std::size_t fan_in() const { return in_channels / groups * kernel * kernel; }
};

/// Unfolds channels [c_begin, c_begin + c_count) of one (C,H,W) sample into a
/// (c_count*k*k) x (oh*ow) row-major matrix.
void im2col(std::span<const double> x, std::size_t height, std::size_t width,
            const ConvSpec& spec, std::size_t c_begin, std::size_t c_count,
            std::span<double> cols);
/// Adjoint of im2col: scatters-adds cols back into dx.
void col2im(std::span<const double> cols, std::size_t height, std::size_t width,
            const ConvSpec& spec, std::size_t c_begin, std::size_t c_count,
            std::span<double> dx);

/// Cross-correlation without bias. x is (C,H,W) or (N,C,H,W); w is
/// (out, in/groups, k, k). Output group g reads only input group g.
/// Each output accumulates its reduction in ascending (channel, ky, kx) order.
Tensor conv2d(const Tensor& x, const Tensor& w, const ConvSpec& spec);

/// Straightforward nested-loop convolution used as a correctness reference.
Tensor conv2d_direct(const Tensor& x, const Tensor& w, const ConvSpec& spec);

struct ConvGrads {
  Tensor dx;
  Tensor dw;
};
ConvGrads conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                          const ConvSpec& spec);

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNormState {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  static BatchNormState make(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
  void validate() const;
};

struct BatchNormCache {
  Tensor x_hat;                 // normalized input, same shape as x
  std::vector<double> inv_std;  // per channel
  bool training = false;
  bool affine = true;
};

/// x may be (N,C), (C,H,W) or (N,C,H,W); the channel axis is 0 for rank 3 and
/// 1 otherwise. Training mode normalizes with biased batch statistics and
/// folds them into the running stats as r = momentum*r + (1-momentum)*batch
/// (unbiased variance). affine=false skips gamma/beta.
Tensor batchnorm_forward(const Tensor& x, BatchNormState& st, bool training, bool affine,
                         BatchNormCache* cache = nullptr);

/// Inference-mode transform of a single value. Every inference path uses this
/// exact expression so results are reproducible bit-for-bit.
inline double batchnorm_infer(double x, double mean, double var, double eps, double gamma,
                              double beta);

struct BatchNormGrads {
  Tensor dx;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
};
BatchNormGrads batchnorm_backward(const Tensor& dy, const BatchNormState& st,
                                  const BatchNormCache& cache);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { kNone, kRelu, kTanh, kSigmoid, kBinarySign };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);
/// Saturating activations use the two-sided gate.
bool is_saturating(Activation a);

double activate(double x, Activation a);
/// Derivative w.r.t. the pre-activation. binary_sign uses the straight-through
/// estimator 1{|x| <= 1}.
double activation_derivative(double x, Activation a);

Tensor activation(const Tensor& x, Activation a);
Tensor activation_backward(const Tensor& pre, const Tensor& dy, Activation a);

// ---------------------------------------------------------------------------
// Dense, pooling, losses
// ---------------------------------------------------------------------------

/// x (N, in), w (out, in), b (out) -> (N, out).
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
struct LinearGrads {
  Tensor dx;
  Tensor dw;
  Tensor db;
};
LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy);

struct MaxPoolResult {
  Tensor y;
  std::vector<std::size_t> argmax;  // flat input index per output element
};
MaxPoolResult maxpool2d(const Tensor& x, std::size_t kernel);
Tensor maxpool2d_backward(const Shape& x_shape, const std::vector<std::size_t>& argmax,
                          const Tensor& dy);

/// (N,C,H,W) -> (N,C)
Tensor global_avgpool(const Tensor& x);
Tensor global_avgpool_backward(const Shape& x_shape, const Tensor& dy);

/// Row-wise softmax of logits / temperature.
Tensor softmax(const Tensor& logits, double temperature = 1.0);

struct LossResult {
  double loss = 0.0;
  Tensor dlogits;
};
/// Mean cross-entropy over the batch; labels are class indices.
LossResult cross_entropy(const Tensor& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
/// velocity tensors are created on first use when empty.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
              std::span<Tensor* const> velocity, double lr, double momentum,
              double weight_decay);
/// Same update on one flat parameter span; `velocity` is sized on first use.
void sgd_update(std::span<double> param, std::span<const double> grad,
                std::vector<double>& velocity, double lr, double momentum, double weight_decay);

// ---------------------------------------------------------------------------

inline double batchnorm_infer(double x, double mean, double var, double eps, double gamma,
                              double beta) {
  return (x - mean) / std::sqrt(var + eps) * gamma + beta;
}

}  // namespace cgnet
