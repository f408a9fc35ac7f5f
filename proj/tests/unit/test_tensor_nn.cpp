#include <algorithm>
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cgnet/errors.hpp"
#include "cgnet/nn.hpp"
#include "test_util.hpp"

using namespace cgnet;
using cgtest::kFdSeeds;
using cgtest::kFdStep;
using cgtest::kFdTol;

namespace {

// Six nested loops over (o, c, oy, ox, ky, kx), written independently of the
// library's conv paths.
Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                  std::size_t groups) {
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t co = w.dim(0), cg = w.dim(1), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  const std::size_t og = co / groups;
  (void)ci;
  Tensor y({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o) {
    const std::size_t g = o / og;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::size_t c = 0; c < cg; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) {
                continue;
              }
              s += x.at(g * cg + c, iy, ix) * w[((o * cg + c) * k + ky) * k + kx];
            }
          }
        }
        y.at(o, oy, ox) = s;
      }
    }
  }
  return y;
}

}  // namespace

TEST(Conv2d, ScalarProduct) {
  ConvSpec s;
  const Tensor y = conv2d(Tensor({1, 1, 1}, {2.0}), Tensor({1, 1, 1, 1}, {3.0}), s);
  EXPECT_EQ(y[0], 6.0);
}

TEST(Conv2d, OverlapCountWithPadding) {
  ConvSpec s{1, 1, 3, 1, 1, 1};
  const Tensor y = conv2d(Tensor({1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), s);
  EXPECT_EQ(y.at(0, 1, 1), 9.0);
  EXPECT_EQ(y.at(0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 2, 2), 4.0);
  EXPECT_EQ(y.at(0, 0, 2), 4.0);
}

TEST(Conv2d, MatchesNaiveLoopReference) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = cgtest::random_tensor({4, 8, 8}, rng);
    const Tensor w = cgtest::random_tensor({6, 4, 3, 3}, rng);
    ConvSpec s{4, 6, 3, 1, static_cast<std::size_t>(trial % 2), 1};
    const Tensor ref = naive_conv(x, w, 1, s.padding, 1);
    EXPECT_LT(cgtest::max_rel_diff(conv2d(x, w, s).values(), ref.values()), 1e-5);
    EXPECT_LT(cgtest::max_rel_diff(conv2d_direct(x, w, s).values(), ref.values()), 1e-5);
  }
}

TEST(Conv2d, StridedAndGroupedMatchNaive) {
  std::mt19937_64 rng(12);
  const Tensor x = cgtest::random_tensor({8, 9, 7}, rng);
  const Tensor w = cgtest::random_tensor({4, 2, 3, 3}, rng);
  ConvSpec s{8, 4, 3, 2, 1, 4};
  const Tensor ref = naive_conv(x, w, 2, 1, 4);
  EXPECT_LT(cgtest::max_rel_diff(conv2d(x, w, s).values(), ref.values()), 1e-12);
}

TEST(Conv2d, GroupedEqualsIndependentConvsConcatenated) {
  std::mt19937_64 rng(13);
  const std::size_t G = 4;
  const Tensor x = cgtest::random_tensor({8, 6, 6}, rng);
  const Tensor w = cgtest::random_tensor({8, 2, 3, 3}, rng);
  const Tensor y = conv2d(x, w, ConvSpec{8, 8, 3, 1, 1, G});
  for (std::size_t g = 0; g < G; ++g) {
    Tensor xg({2, 6, 6}), wg({2, 2, 3, 3});
    std::copy_n(x.data() + g * 2 * 36, 2 * 36, xg.data());
    std::copy_n(w.data() + g * 2 * 18, 2 * 18, wg.data());
    const Tensor yg = conv2d(xg, wg, ConvSpec{2, 2, 3, 1, 1, 1});
    for (std::size_t i = 0; i < yg.size(); ++i) EXPECT_EQ(yg[i], y[g * yg.size() + i]);
  }
}

TEST(Conv2d, ShapeMismatchIsConfigError) {
  ConvSpec s{3, 2, 3, 1, 1, 1};
  EXPECT_THROW(conv2d(Tensor({2, 5, 5}), Tensor({2, 3, 3, 3}), s), ConfigError);
  EXPECT_THROW((ConvSpec{3, 2, 3, 1, 0, 2}.validate()), ConfigError);
  EXPECT_THROW((ConvSpec{1, 1, 5, 1, 0, 1}.out_dim(3)), ConfigError);
}

TEST(Conv2d, IdentityKernelBackwardIsAlignment) {
  std::mt19937_64 rng(14);
  Tensor w({2, 2, 3, 3});
  w[(0 * 2 + 0) * 9 + 4] = 1.0;
  w[(1 * 2 + 1) * 9 + 4] = 1.0;
  const Tensor x = cgtest::random_tensor({2, 5, 5}, rng);
  const Tensor dy = cgtest::random_tensor({2, 5, 5}, rng);
  const auto g = conv2d_backward(x, w, dy, ConvSpec{2, 2, 3, 1, 1, 1});
  for (std::size_t i = 0; i < dy.size(); ++i) EXPECT_DOUBLE_EQ(g.dx[i], dy[i]);
}

TEST(Conv2d, BackwardFiniteDifference) {
  for (int seed = 0; seed < kFdSeeds; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const std::size_t groups = seed % 2 ? 2 : 1;
    ConvSpec s{4, 4, 3, 1 + seed % 2, 1, groups};
    Tensor x = cgtest::random_tensor({2, 4, 5, 5}, rng);
    Tensor w = cgtest::random_tensor(s.weight_shape(), rng);
    const Tensor r = cgtest::random_tensor({2, 4, s.out_dim(5), s.out_dim(5)}, rng);
    auto loss = [&] { return cgtest::dot(conv2d(x, w, s).values(), r.values()); };
    const auto g = conv2d_backward(x, w, r, s);
    EXPECT_LT(cgtest::rel_error(g.dx.values(), cgtest::numeric_grad(x.values(), loss, kFdStep)),
              kFdTol);
    EXPECT_LT(cgtest::rel_error(g.dw.values(), cgtest::numeric_grad(w.values(), loss, kFdStep)),
              kFdTol);
  }
}

TEST(BatchNorm, AffineFreeStandardizes) {
  std::mt19937_64 rng(21);
  Tensor x = cgtest::normal_tensor({64, 2, 4, 4}, rng);
  // Force per-channel mean 5 and variance 4.
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    const std::size_t n = 64 * 16;
    for (std::size_t b = 0; b < 64; ++b) {
      for (std::size_t i = 0; i < 16; ++i) m += x[(b * 2 + c) * 16 + i];
    }
    m /= n;
    for (std::size_t b = 0; b < 64; ++b) {
      for (std::size_t i = 0; i < 16; ++i) v += std::pow(x[(b * 2 + c) * 16 + i] - m, 2);
    }
    v /= n;
    for (std::size_t b = 0; b < 64; ++b) {
      for (std::size_t i = 0; i < 16; ++i) {
        auto& e = x[(b * 2 + c) * 16 + i];
        e = 5.0 + 2.0 * (e - m) / std::sqrt(v);
      }
    }
  }
  auto st = BatchNormState::make(2);
  const Tensor y = batchnorm_forward(x, st, true, false);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 64; ++b) {
      for (std::size_t i = 0; i < 16; ++i) m += y[(b * 2 + c) * 16 + i];
    }
    m /= 1024.0;
    for (std::size_t b = 0; b < 64; ++b) {
      for (std::size_t i = 0; i < 16; ++i) v += std::pow(y[(b * 2 + c) * 16 + i] - m, 2);
    }
    v /= 1024.0;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(BatchNorm, AffineShiftAndScale) {
  std::mt19937_64 rng(22);
  Tensor x = cgtest::normal_tensor({500, 1}, rng);
  auto st = BatchNormState::make(1);
  st.gamma[0] = 2.0;
  st.beta[0] = 3.0;
  const Tensor y = batchnorm_forward(x, st, true, true);
  double m = 0.0, v = 0.0;
  for (double e : y.values()) m += e;
  m /= 500.0;
  for (double e : y.values()) v += (e - m) * (e - m);
  EXPECT_NEAR(m, 3.0, 1e-5);
  EXPECT_NEAR(std::sqrt(v / 500.0), 2.0, 1e-5);
}

TEST(BatchNorm, InferenceMatchesScalarLoop) {
  std::mt19937_64 rng(23);
  auto st = BatchNormState::make(3);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (std::size_t c = 0; c < 3; ++c) {
    st.gamma[c] = u(rng);
    st.beta[c] = u(rng) - 1.0;
    st.running_mean[c] = u(rng) - 1.0;
    st.running_var[c] = u(rng);
  }
  const Tensor x = cgtest::random_tensor({3, 4, 4}, rng);
  const Tensor y = batchnorm_forward(x, st, false, true);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < 16; ++i) {
      const double ref = (x[c * 16 + i] - st.running_mean[c]) /
                             std::sqrt(st.running_var[c] + 1e-5) * st.gamma[c] +
                         st.beta[c];
      EXPECT_EQ(y[c * 16 + i], ref);
    }
  }
}

TEST(BatchNorm, InferenceTwiceIsOneAffineMap) {
  std::mt19937_64 rng(24);
  auto st = BatchNormState::make(2);
  st.gamma = {1.5, -0.7};
  st.beta = {0.2, 0.9};
  st.running_mean = {0.3, -1.1};
  st.running_var = {2.0, 0.4};
  const Tensor x = cgtest::random_tensor({2, 3, 3}, rng);
  const Tensor twice = batchnorm_forward(batchnorm_forward(x, st, false, true), st, false, true);
  for (std::size_t c = 0; c < 2; ++c) {
    const double a = st.gamma[c] / std::sqrt(st.running_var[c] + st.eps);
    const double b = st.beta[c] - a * st.running_mean[c];
    const double a2 = a * a, b2 = a * b + b;
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(twice[c * 9 + i], a2 * x[c * 9 + i] + b2, 1e-6);
  }
}

TEST(BatchNorm, RunningStatsUpdate) {
  Tensor x({4, 1}, {1.0, 2.0, 3.0, 4.0});
  auto st = BatchNormState::make(1);
  batchnorm_forward(x, st, true, true);
  EXPECT_NEAR(st.running_mean[0], 0.9 * 0.0 + 0.1 * 2.5, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 * 1.0 + 0.1 * (5.0 / 3.0), 1e-15);
  EXPECT_GE(st.running_var[0], 0.0);
}

TEST(BatchNorm, DegenerateInputIsError) {
  auto st = BatchNormState::make(2);
  EXPECT_THROW(batchnorm_forward(Tensor({0, 2}), st, true, true), DataError);
}

TEST(BatchNorm, BackwardFiniteDifference) {
  for (int seed = 0; seed < kFdSeeds; ++seed) {
    std::mt19937_64 rng(200 + seed);
    Tensor x = cgtest::normal_tensor({3, 2, 3, 3}, rng);
    auto st = BatchNormState::make(2);
    st.gamma = {1.3, -0.6};
    st.beta = {0.1, 0.4};
    const bool affine = seed % 3 != 0;
    const Tensor r = cgtest::random_tensor(x.shape(), rng);
    auto loss = [&] {
      auto tmp = st;
      return cgtest::dot(batchnorm_forward(x, tmp, true, affine).values(), r.values());
    };
    BatchNormCache cache;
    auto tmp = st;
    batchnorm_forward(x, tmp, true, affine, &cache);
    const auto g = batchnorm_backward(r, st, cache);
    EXPECT_LT(cgtest::rel_error(g.dx.values(), cgtest::numeric_grad(x.values(), loss, kFdStep)),
              kFdTol);
    if (affine) {
      EXPECT_LT(cgtest::rel_error(g.dgamma, cgtest::numeric_grad(st.gamma, loss, kFdStep)), kFdTol);
      EXPECT_LT(cgtest::rel_error(g.dbeta, cgtest::numeric_grad(st.beta, loss, kFdStep)), kFdTol);
    }
  }
}

TEST(Activation, Examples) {
  const Tensor r = activation(Tensor({3}, {-1.0, 0.0, 2.0}), Activation::kRelu);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 2.0);
  EXPECT_EQ(activate(0.0, Activation::kTanh), 0.0);
  const Tensor b = activation(Tensor({2}, {-0.3, 0.0}), Activation::kBinarySign);
  EXPECT_EQ(b[0], -1.0);
  EXPECT_EQ(b[1], 1.0);
  EXPECT_THROW(parse_activation("swish"), ConfigError);
}

TEST(Activation, BackwardFiniteDifference) {
  for (Activation a : {Activation::kRelu, Activation::kTanh, Activation::kSigmoid}) {
    for (int seed = 0; seed < kFdSeeds; ++seed) {
      std::mt19937_64 rng(300 + seed);
      Tensor x = cgtest::random_tensor({40}, rng, -2.0, 2.0);
      for (auto& v : x.values()) {
        if (std::abs(v) < 0.01) v += 0.05;  // keep away from the ReLU kink
      }
      const Tensor r = cgtest::random_tensor({40}, rng);
      auto loss = [&] { return cgtest::dot(activation(x, a).values(), r.values()); };
      const Tensor g = activation_backward(x, r, a);
      EXPECT_LT(cgtest::rel_error(g.values(), cgtest::numeric_grad(x.values(), loss, kFdStep)),
                kFdTol);
    }
  }
}

TEST(Linear, BackwardFiniteDifference) {
  for (int seed = 0; seed < kFdSeeds; ++seed) {
    std::mt19937_64 rng(400 + seed);
    Tensor x = cgtest::random_tensor({3, 5}, rng);
    Tensor w = cgtest::random_tensor({4, 5}, rng);
    Tensor b = cgtest::random_tensor({4}, rng);
    const Tensor r = cgtest::random_tensor({3, 4}, rng);
    auto loss = [&] { return cgtest::dot(linear_forward(x, w, b).values(), r.values()); };
    const auto g = linear_backward(x, w, r);
    EXPECT_LT(cgtest::rel_error(g.dx.values(), cgtest::numeric_grad(x.values(), loss)), kFdTol);
    EXPECT_LT(cgtest::rel_error(g.dw.values(), cgtest::numeric_grad(w.values(), loss)), kFdTol);
    EXPECT_LT(cgtest::rel_error(g.db.values(), cgtest::numeric_grad(b.values(), loss)), kFdTol);
  }
}

TEST(Pooling, BackwardFiniteDifference) {
  for (int seed = 0; seed < kFdSeeds; ++seed) {
    std::mt19937_64 rng(500 + seed);
    // Distinct values spaced well beyond the step keep the max away from ties.
    Tensor x({2, 3, 4, 4});
    std::vector<double> levels(x.size());
    for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = 0.02 * static_cast<double>(i) - 1.0;
    std::shuffle(levels.begin(), levels.end(), rng);
    std::copy(levels.begin(), levels.end(), x.values().begin());
    const Tensor r = cgtest::random_tensor({2, 3, 2, 2}, rng);
    auto loss = [&] { return cgtest::dot(maxpool2d(x, 2).y.values(), r.values()); };
    const auto fwd = maxpool2d(x, 2);
    const Tensor g = maxpool2d_backward(x.shape(), fwd.argmax, r);
    EXPECT_LT(cgtest::rel_error(g.values(), cgtest::numeric_grad(x.values(), loss)), kFdTol);

    const Tensor r2 = cgtest::random_tensor({2, 3}, rng);
    auto loss2 = [&] { return cgtest::dot(global_avgpool(x).values(), r2.values()); };
    const Tensor g2 = global_avgpool_backward(x.shape(), r2);
    EXPECT_LT(cgtest::rel_error(g2.values(), cgtest::numeric_grad(x.values(), loss2)), kFdTol);
  }
}

TEST(CrossEntropy, BackwardFiniteDifference) {
  for (int seed = 0; seed < kFdSeeds; ++seed) {
    std::mt19937_64 rng(600 + seed);
    Tensor z = cgtest::random_tensor({4, 10}, rng, -3.0, 3.0);
    const std::vector<int> labels{1, 7, 3, 3};
    auto loss = [&] { return cross_entropy(z, labels).loss; };
    const auto r = cross_entropy(z, labels);
    EXPECT_LT(cgtest::rel_error(r.dlogits.values(), cgtest::numeric_grad(z.values(), loss)),
              kFdTol);
  }
}

TEST(CrossEntropy, ConfidentCorrectHasZeroGradient) {
  Tensor z({1, 3}, {0.0, 800.0, 0.0});
  const auto r = cross_entropy(z, std::vector<int>{1});
  for (double g : r.dlogits.values()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(Sgd, Examples) {
  Tensor p({1}, {1.0}), g({1}, {1.0}), v;
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  Tensor* vs[] = {&v};
  sgd_step(ps, gs, vs, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 0.9);

  Tensor q({1}, {0.0}), w;
  Tensor* qs[] = {&q};
  Tensor* ws[] = {&w};
  sgd_step(qs, gs, ws, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(q[0], -0.1);
  sgd_step(qs, gs, ws, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(q[0], -0.29);

  Tensor bad({2});
  const Tensor* bs[] = {&bad};
  EXPECT_THROW(sgd_step(ps, bs, vs, 0.1, 0.9, 0.0), ConfigError);
}

TEST(Sgd, MatchesScalarReference) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor p = cgtest::random_tensor({5}, rng), v;
  std::vector<double> ref(p.values().begin(), p.values().end()), ref_v(5, 0.0);
  std::vector<double> span_p = ref, span_v;
  for (int step = 0; step < 100; ++step) {
    Tensor g = cgtest::random_tensor({5}, rng);
    Tensor* ps[] = {&p};
    const Tensor* gs[] = {&g};
    Tensor* vs[] = {&v};
    sgd_step(ps, gs, vs, 0.05, 0.9, 1e-3);
    sgd_update(span_p, g.values(), span_v, 0.05, 0.9, 1e-3);
    for (std::size_t i = 0; i < 5; ++i) {
      ref_v[i] = 0.9 * ref_v[i] + g[i] + 1e-3 * ref[i];
      ref[i] -= 0.05 * ref_v[i];
    }
  }
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(p[i], ref[i]);
    EXPECT_EQ(span_p[i], ref[i]);
  }
}

TEST(Tensor, FiniteOutputsOnFiniteInputs) {
  std::mt19937_64 rng(41);
  const Tensor x = cgtest::random_tensor({2, 3, 6, 6}, rng);
  const Tensor w = cgtest::random_tensor({4, 3, 3, 3}, rng);
  auto st = BatchNormState::make(4);
  const Tensor y =
      activation(batchnorm_forward(conv2d(x, w, ConvSpec{3, 4, 3, 1, 1, 1}), st, true, true),
                 Activation::kTanh);
  EXPECT_TRUE(y.all_finite());
  EXPECT_EQ(shape_size(y.shape()), y.size());
}
