#include "cgnet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cgnet/errors.hpp"
#include "cgnet/parallel.hpp"

namespace cgnet {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

void ConvSpec::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || groups == 0) {
    throw ConfigError("conv spec: channels, kernel, stride and groups must be positive");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv spec: in_channels (" + std::to_string(in_channels) +
                      ") and out_channels (" + std::to_string(out_channels) +
                      ") must be divisible by groups (" + std::to_string(groups) + ")");
  }
}

std::size_t ConvSpec::out_dim(std::size_t in) const {
  const std::size_t padded = in + 2 * padding;
  if (padded < kernel) {
    throw ConfigError("conv spec: kernel " + std::to_string(kernel) +
                      " larger than padded input " + std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

Shape ConvSpec::weight_shape() const {
  return {out_channels, in_channels / groups, kernel, kernel};
}

void im2col(std::span<const double> x, std::size_t height, std::size_t width,
            const ConvSpec& spec, std::size_t c_begin, std::size_t c_count,
            std::span<double> cols) {
  const std::size_t oh = spec.out_dim(height), ow = spec.out_dim(width);
  const std::size_t k = spec.kernel, positions = oh * ow;
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t c = 0; c < c_count; ++c) {
    const double* plane = x.data() + (c_begin + c) * height * width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols.data() + ((c * k + ky) * k + kx) * positions;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
          double* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                          ? 0.0
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im(std::span<const double> cols, std::size_t height, std::size_t width,
            const ConvSpec& spec, std::size_t c_begin, std::size_t c_count,
            std::span<double> dx) {
  const std::size_t oh = spec.out_dim(height), ow = spec.out_dim(width);
  const std::size_t k = spec.kernel, positions = oh * ow;
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  for (std::size_t c = 0; c < c_count; ++c) {
    double* plane = dx.data() + (c_begin + c) * height * width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols.data() + ((c * k + ky) * k + kx) * positions;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            dst[static_cast<std::size_t>(ix)] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width, oh, ow;
  bool batched;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  spec.validate();
  ConvGeometry g{};
  if (x.rank() == 3) {
    g = {1, x.dim(0), x.dim(1), x.dim(2), 0, 0, false};
  } else if (x.rank() == 4) {
    g = {x.dim(0), x.dim(1), x.dim(2), x.dim(3), 0, 0, true};
  } else {
    throw ConfigError("conv2d: input must be rank 3 or 4, got " + shape_string(x.shape()));
  }
  if (g.channels != spec.in_channels) {
    throw ConfigError("conv2d: input has " + std::to_string(g.channels) +
                      " channels, spec expects " + std::to_string(spec.in_channels));
  }
  require_shape(w, spec.weight_shape(), "conv2d weight");
  g.oh = spec.out_dim(g.height);
  g.ow = spec.out_dim(g.width);
  return g;
}

Tensor make_output(const ConvGeometry& g, std::size_t channels) {
  return g.batched ? Tensor({g.batch, channels, g.oh, g.ow}) : Tensor({channels, g.oh, g.ow});
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  const auto g = conv_geometry(x, w, spec);
  Tensor y = make_output(g, spec.out_channels);
  const std::size_t cg = spec.in_channels / spec.groups;
  const std::size_t og = spec.out_channels / spec.groups;
  const std::size_t kk = cg * spec.kernel * spec.kernel;
  const std::size_t positions = g.oh * g.ow;
  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t out_plane = spec.out_channels * positions;

  parallel_for(g.batch, [&](std::size_t n) {
    std::vector<double> cols(kk * positions);
    std::span<const double> xs(x.data() + n * in_plane, in_plane);
    double* ys = y.data() + n * out_plane;
    for (std::size_t grp = 0; grp < spec.groups; ++grp) {
      im2col(xs, g.height, g.width, spec, grp * cg, cg, cols);
      for (std::size_t o = grp * og; o < (grp + 1) * og; ++o) {
        const double* wrow = w.data() + o * kk;
        double* out = ys + o * positions;
        for (std::size_t r = 0; r < kk; ++r) {
          const double wv = wrow[r];
          const double* col = cols.data() + r * positions;
          for (std::size_t p = 0; p < positions; ++p) out[p] += wv * col[p];
        }
      }
    }
  });
  return y;
}

Tensor conv2d_direct(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  const auto g = conv_geometry(x, w, spec);
  Tensor y = make_output(g, spec.out_channels);
  const std::size_t cg = spec.in_channels / spec.groups;
  const std::size_t og = spec.out_channels / spec.groups;
  const auto pad = static_cast<long>(spec.padding);
  const auto k = static_cast<long>(spec.kernel);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < spec.out_channels; ++o) {
      const std::size_t grp = o / og;
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < cg; ++ci) {
            const std::size_t c = grp * cg + ci;
            for (long ky = 0; ky < k; ++ky) {
              for (long kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * spec.stride) + ky - pad;
                const long ix = static_cast<long>(ox * spec.stride) + kx - pad;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                    ix >= static_cast<long>(g.width)) {
                  continue;
                }
                const double xv =
                    x[((n * g.channels + c) * g.height + static_cast<std::size_t>(iy)) * g.width +
                      static_cast<std::size_t>(ix)];
                const double wv =
                    w[((o * cg + ci) * spec.kernel + static_cast<std::size_t>(ky)) * spec.kernel +
                      static_cast<std::size_t>(kx)];
                acc += wv * xv;
              }
            }
          }
          y[((n * spec.out_channels + o) * g.oh + oy) * g.ow + ox] = acc;
        }
      }
    }
  }
  return y;
}

ConvGrads conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                          const ConvSpec& spec) {
  const auto g = conv_geometry(x, w, spec);
  require_shape(dy, make_output(g, spec.out_channels).shape(), "conv2d_backward dy");
  const std::size_t cg = spec.in_channels / spec.groups;
  const std::size_t og = spec.out_channels / spec.groups;
  const std::size_t kk = cg * spec.kernel * spec.kernel;
  const std::size_t positions = g.oh * g.ow;
  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t out_plane = spec.out_channels * positions;

  ConvGrads grads{Tensor(x.shape()), Tensor(w.shape())};
  // Per-sample weight gradients are reduced in sample order afterwards so the
  // result does not depend on the worker count.
  std::vector<std::vector<double>> per_sample_dw(g.batch, std::vector<double>(w.size()));

  parallel_for(g.batch, [&](std::size_t n) {
    std::vector<double> cols(kk * positions);
    std::vector<double> dcols(kk * positions);
    std::span<const double> xs(x.data() + n * in_plane, in_plane);
    std::span<double> dxs(grads.dx.data() + n * in_plane, in_plane);
    const double* dys = dy.data() + n * out_plane;
    auto& dw = per_sample_dw[n];
    for (std::size_t grp = 0; grp < spec.groups; ++grp) {
      im2col(xs, g.height, g.width, spec, grp * cg, cg, cols);
      std::fill(dcols.begin(), dcols.end(), 0.0);
      for (std::size_t o = grp * og; o < (grp + 1) * og; ++o) {
        const double* d = dys + o * positions;
        const double* wrow = w.data() + o * kk;
        double* dwrow = dw.data() + o * kk;
        for (std::size_t r = 0; r < kk; ++r) {
          const double* col = cols.data() + r * positions;
          double acc = 0.0;
          for (std::size_t p = 0; p < positions; ++p) acc += d[p] * col[p];
          dwrow[r] = acc;
          const double wv = wrow[r];
          double* dcol = dcols.data() + r * positions;
          for (std::size_t p = 0; p < positions; ++p) dcol[p] += wv * d[p];
        }
      }
      col2im(dcols, g.height, g.width, spec, grp * cg, cg, dxs);
    }
  });

  for (const auto& dw : per_sample_dw) {
    for (std::size_t i = 0; i < dw.size(); ++i) grads.dw[i] += dw[i];
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

BatchNormState BatchNormState::make(std::size_t channels) {
  BatchNormState st;
  st.gamma.assign(channels, 1.0);
  st.beta.assign(channels, 0.0);
  st.running_mean.assign(channels, 0.0);
  st.running_var.assign(channels, 1.0);
  return st;
}

void BatchNormState::validate() const {
  const auto c = running_mean.size();
  if (gamma.size() != c || beta.size() != c || running_var.size() != c) {
    throw ConfigError("batchnorm state: gamma/beta/running stats lengths differ");
  }
  for (double v : running_var) {
    if (!(v >= 0.0)) throw ConfigError("batchnorm state: negative running variance");
  }
}

namespace {

struct BnLayout {
  std::size_t outer, channels, inner;
};

BnLayout bn_layout(const Tensor& x) {
  switch (x.rank()) {
    case 2:
      return {x.dim(0), x.dim(1), 1};
    case 3:
      return {1, x.dim(0), x.dim(1) * x.dim(2)};
    case 4:
      return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
    default:
      throw ConfigError("batchnorm: unsupported rank " + std::to_string(x.rank()));
  }
}

}  // namespace

Tensor batchnorm_forward(const Tensor& x, BatchNormState& st, bool training, bool affine,
                         BatchNormCache* cache) {
  const auto lay = bn_layout(x);
  if (lay.channels != st.channels()) {
    throw ConfigError("batchnorm: input has " + std::to_string(lay.channels) +
                      " channels, state has " + std::to_string(st.channels()));
  }
  const std::size_t count = lay.outer * lay.inner;
  if (count == 0) throw DataError("batchnorm: zero elements per channel");

  Tensor y(x.shape());
  if (cache) {
    cache->x_hat = Tensor(x.shape());
    cache->inv_std.assign(lay.channels, 0.0);
    cache->training = training;
    cache->affine = affine;
  }
  for (std::size_t c = 0; c < lay.channels; ++c) {
    double mean, var;
    if (training) {
      double sum = 0.0;
      for (std::size_t n = 0; n < lay.outer; ++n) {
        const double* p = x.data() + (n * lay.channels + c) * lay.inner;
        for (std::size_t i = 0; i < lay.inner; ++i) sum += p[i];
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < lay.outer; ++n) {
        const double* p = x.data() + (n * lay.channels + c) * lay.inner;
        for (std::size_t i = 0; i < lay.inner; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      st.running_mean[c] = st.momentum * st.running_mean[c] + (1.0 - st.momentum) * mean;
      st.running_var[c] = st.momentum * st.running_var[c] + (1.0 - st.momentum) * unbiased;
    } else {
      mean = st.running_mean[c];
      var = st.running_var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + st.eps);
    const double gamma = affine ? st.gamma[c] : 1.0;
    const double beta = affine ? st.beta[c] : 0.0;
    if (cache) cache->inv_std[c] = inv_std;
    for (std::size_t n = 0; n < lay.outer; ++n) {
      const std::size_t off = (n * lay.channels + c) * lay.inner;
      for (std::size_t i = 0; i < lay.inner; ++i) {
        double out;
        if (training) {
          const double xh = (x[off + i] - mean) * inv_std;
          if (cache) cache->x_hat[off + i] = xh;
          out = xh * gamma + beta;
        } else {
          out = batchnorm_infer(x[off + i], mean, var, st.eps, gamma, beta);
          if (cache) cache->x_hat[off + i] = (x[off + i] - mean) * inv_std;
        }
        y[off + i] = out;
      }
    }
  }
  return y;
}

BatchNormGrads batchnorm_backward(const Tensor& dy, const BatchNormState& st,
                                  const BatchNormCache& cache) {
  if (!dy.same_shape(cache.x_hat)) {
    throw StateError("batchnorm_backward: gradient shape does not match cached forward");
  }
  const auto lay = bn_layout(dy);
  const double m = static_cast<double>(lay.outer * lay.inner);
  BatchNormGrads g{Tensor(dy.shape()), std::vector<double>(lay.channels, 0.0),
                   std::vector<double>(lay.channels, 0.0)};
  for (std::size_t c = 0; c < lay.channels; ++c) {
    const double gamma = cache.affine ? st.gamma[c] : 1.0;
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t n = 0; n < lay.outer; ++n) {
      const std::size_t off = (n * lay.channels + c) * lay.inner;
      for (std::size_t i = 0; i < lay.inner; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xh += dy[off + i] * cache.x_hat[off + i];
      }
    }
    g.dgamma[c] = sum_dy_xh;
    g.dbeta[c] = sum_dy;
    const double scale = gamma * cache.inv_std[c];
    for (std::size_t n = 0; n < lay.outer; ++n) {
      const std::size_t off = (n * lay.channels + c) * lay.inner;
      for (std::size_t i = 0; i < lay.inner; ++i) {
        if (cache.training) {
          g.dx[off + i] =
              scale * (dy[off + i] - sum_dy / m - cache.x_hat[off + i] * sum_dy_xh / m);
        } else {
          g.dx[off + i] = scale * dy[off + i];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Activation parse_activation(std::string_view name) {
  if (name == "none" || name == "identity") return Activation::kNone;
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "binary_sign" || name == "sign") return Activation::kBinarySign;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kNone:
      return "none";
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
    case Activation::kSigmoid:
      return "sigmoid";
    case Activation::kBinarySign:
      return "binary_sign";
  }
  return "none";
}

bool is_saturating(Activation a) {
  return a == Activation::kTanh || a == Activation::kSigmoid || a == Activation::kBinarySign;
}

double activate(double x, Activation a) {
  switch (a) {
    case Activation::kNone:
      return x;
    case Activation::kRelu:
      return x > 0.0 ? x : 0.0;
    case Activation::kTanh:
      return std::tanh(x);
    case Activation::kSigmoid:
      return 1.0 / (1.0 + std::exp(-x));
    case Activation::kBinarySign:
      return x >= 0.0 ? 1.0 : -1.0;
  }
  return x;
}

double activation_derivative(double x, Activation a) {
  switch (a) {
    case Activation::kNone:
      return 1.0;
    case Activation::kRelu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::kTanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::kSigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 - s);
    }
    case Activation::kBinarySign:
      return std::abs(x) <= 1.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

Tensor activation(const Tensor& x, Activation a) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(x[i], a);
  return y;
}

Tensor activation_backward(const Tensor& pre, const Tensor& dy, Activation a) {
  if (!pre.same_shape(dy)) throw ConfigError("activation_backward: shape mismatch");
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * activation_derivative(pre[i], a);
  return dx;
}

// ---------------------------------------------------------------------------
// Dense, pooling, losses
// ---------------------------------------------------------------------------

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.size() != w.dim(0)) {
    throw ConfigError("linear: incompatible shapes x" + shape_string(x.shape()) + " w" +
                      shape_string(w.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y({n, out});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < in; ++k) acc += w[o * in + k] * x[i * in + k];
      y[i * out + o] = acc;
    }
  }
  return y;
}

LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  require_shape(dy, {n, out}, "linear_backward dy");
  LinearGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({out})};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out; ++o) {
      const double d = dy[i * out + o];
      g.db[o] += d;
      for (std::size_t k = 0; k < in; ++k) {
        g.dw[o * in + k] += d * x[i * in + k];
        g.dx[i * in + k] += d * w[o * in + k];
      }
    }
  }
  return g;
}

MaxPoolResult maxpool2d(const Tensor& x, std::size_t kernel) {
  if (x.rank() != 4 || kernel == 0) throw ConfigError("maxpool2d: expects (N,C,H,W)");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / kernel, ow = w / kernel;
  if (oh == 0 || ow == 0) throw ConfigError("maxpool2d: kernel larger than input");
  MaxPoolResult r{Tensor({n, c, oh, ow}), std::vector<std::size_t>(n * c * oh * ow)};
  for (std::size_t s = 0; s < n * c; ++s) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = s * h * w + oy * kernel * w + ox * kernel;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = s * h * w + (oy * kernel + ky) * w + ox * kernel + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (s * oh + oy) * ow + ox;
        r.y[o] = x[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

Tensor maxpool2d_backward(const Shape& x_shape, const std::vector<std::size_t>& argmax,
                          const Tensor& dy) {
  Tensor dx(x_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  return dx;
}

Tensor global_avgpool(const Tensor& x) {
  if (x.rank() != 4) throw ConfigError("global_avgpool: expects (N,C,H,W)");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (std::size_t s = 0; s < n * c; ++s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[s * hw + i];
    y[s] = acc / static_cast<double>(hw);
  }
  return y;
}

Tensor global_avgpool_backward(const Shape& x_shape, const Tensor& dy) {
  Tensor dx(x_shape);
  const std::size_t hw = x_shape[2] * x_shape[3];
  for (std::size_t s = 0; s < dy.size(); ++s) {
    const double g = dy[s] / static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) dx[s * hw + i] = g;
  }
  return dx;
}

Tensor softmax(const Tensor& logits, double temperature) {
  if (logits.rank() != 2) throw ConfigError("softmax: expects (N,K)");
  if (!(temperature > 0.0)) throw ConfigError("softmax: temperature must be positive");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data() + i * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z[j] / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[i * k + j] = std::exp(z[j] / temperature - mx);
      sum += p[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= sum;
  }
  return p;
}

LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
    throw ConfigError("cross_entropy: label count does not match batch");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, softmax(logits)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= k) throw ConfigError("cross_entropy: label out of range");
    r.loss -= std::log(std::max(r.dlogits[i * k + y], 1e-300));
    r.dlogits[i * k + y] -= 1.0;
  }
  r.loss /= static_cast<double>(n);
  for (std::size_t i = 0; i < r.dlogits.size(); ++i) r.dlogits[i] /= static_cast<double>(n);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
              std::span<Tensor* const> velocity, double lr, double momentum,
              double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ConfigError("sgd_step: params, grads and velocity lists differ in length");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& v = *velocity[i];
    if (!p.same_shape(g)) {
      throw ConfigError("sgd_step: parameter " + std::to_string(i) + " shape " +
                        shape_string(p.shape()) + " vs gradient " + shape_string(g.shape()));
    }
    if (v.empty()) v = Tensor(p.shape());
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + g[j] + weight_decay * p[j];
      p[j] -= lr * v[j];
    }
  }
}

void sgd_update(std::span<double> param, std::span<const double> grad,
                std::vector<double>& velocity, double lr, double momentum, double weight_decay) {
  if (param.size() != grad.size()) {
    throw ConfigError("sgd_update: parameter length " + std::to_string(param.size()) +
                      " vs gradient length " + std::to_string(grad.size()));
  }
  if (velocity.empty()) velocity.assign(param.size(), 0.0);
  if (velocity.size() != param.size()) throw ConfigError("sgd_update: velocity length mismatch");
  for (std::size_t j = 0; j < param.size(); ++j) {
    velocity[j] = momentum * velocity[j] + grad[j] + weight_decay * param[j];
    param[j] -= lr * velocity[j];
  }
}

}  // namespace cgnet
