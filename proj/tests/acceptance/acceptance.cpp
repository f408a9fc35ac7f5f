// Acceptance runner: evaluates every criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exit status is nonzero when any
// criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cg_fixtures.hpp"
#include "cgnet/analysis.hpp"
#include "cgnet/config.hpp"
#include "cgnet/gating.hpp"
#include "cgnet/model.hpp"
#include "cgnet/nn.hpp"
#include "cgnet/parallel.hpp"
#include "cgnet/perf_model.hpp"
#include "cgnet/trainer.hpp"
#include "cgnet/training.hpp"
#include "test_util.hpp"

using namespace cgnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

const fs::path kConfigDir = CGNET_CONFIG_DIR;
const fs::path kCgBinary = CGNET_CG_BINARY;

// ---------------------------------------------------------------------------
// 1. Dense equivalence with every gate open
// ---------------------------------------------------------------------------

Outcome dense_equivalence() {
  const char* configs[] = {"cg_cnn4.json", "vgg8_cg.json", "resnet_cg.json", "smoke.json"};
  double worst = 0.0;
  std::size_t inputs = 0;
  for (const char* name : configs) {
    const auto cfg = load_config(kConfigDir / name);
    auto net = Network::build(cfg.model, cfg.seed);
    std::mt19937_64 rng(cfg.seed + 100);
    // A few training-mode passes give every normalizer non-trivial statistics.
    Shape batch_shape{8};
    for (auto d : net.input_shape()) batch_shape.push_back(d);
    for (int i = 0; i < 3; ++i) net.forward(cgtest::random_tensor(batch_shape, rng, 0.0, 1.0), true);
    net.set_frozen(true);
    const Network dense = net.densified();
    InferenceOptions open;
    open.delta_override = -1e6;
    open.tau_c_override = 0.0;
    for (int i = 0; i < 100; ++i) {
      const Tensor x = cgtest::random_tensor(net.input_shape(), rng, 0.0, 1.0);
      const Tensor a = net.infer(x, open);
      const Tensor b = dense.infer(x);
      double diff = 0.0, norm = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        diff += (a[k] - b[k]) * (a[k] - b[k]);
        norm += b[k] * b[k];
      }
      worst = std::max(worst, std::sqrt(diff) / std::max(std::sqrt(norm), 1e-300));
      ++inputs;
    }
  }
  return {worst <= 1e-5, "max relative logit error " + fmt(worst) + " over " +
                             std::to_string(inputs) + " inputs on 4 bundled models (tol 1e-5)"};
}

// ---------------------------------------------------------------------------
// 2. Vectorized block versus per-activation scalar evaluation
// ---------------------------------------------------------------------------

Outcome scalar_oracle() {
  std::mt19937_64 rng(2024);
  std::size_t mismatched_layers = 0, values = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto cfg = cgtest::random_config(rng);
    const auto P = cgtest::random_params(cfg, rng);
    const Tensor x = cgtest::random_tensor({cfg.conv.in_channels, 6, 5}, rng);
    const auto r = cg_block_forward_inference(x, P, cfg);
    const auto ref = cgtest::scalar_block(x, P, cfg);
    bool same = r.y.same_shape(ref.y) && r.dm.channel_mask == ref.mask;
    for (std::size_t i = 0; same && i < r.y.size(); ++i) {
      same = std::bit_cast<std::uint64_t>(r.y[i]) == std::bit_cast<std::uint64_t>(ref.y[i]) &&
             r.dm.d[i] == ref.d[i];
    }
    values += r.y.size();
    if (!same) ++mismatched_layers;
  }
  return {mismatched_layers == 0, std::to_string(mismatched_layers) +
                                      " of 50 random layers differ bitwise (" +
                                      std::to_string(values) + " outputs compared)"};
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient suite
// ---------------------------------------------------------------------------

struct GradSuite {
  double worst = 0.0;
  std::size_t checks = 0;
  std::map<std::string, std::size_t> seeds;
  void record(const std::string& op, std::span<const double> analytic,
              const std::vector<double>& numeric) {
    worst = std::max(worst, cgtest::rel_error(analytic, numeric));
    ++checks;
    ++seeds[op];
  }
};

Outcome gradient_suite() {
  GradSuite s;
  constexpr int kSeeds = 10;
  // Inputs that pass through a ReLU or a max use a small step so the central
  // difference stays on one side of every kink.
  constexpr double kSmooth = 1e-4, kKinked = 1e-6;
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(9000 + seed);

    {  // convolution, grouped and strided
      const std::size_t stride = 1 + static_cast<std::size_t>(seed % 2);
      const ConvSpec spec{4, 6, 3, stride, 1, seed % 3 == 0 ? 2u : 1u};
      Tensor x = cgtest::random_tensor({2, 4, 5, 5}, rng);
      Tensor w = cgtest::random_tensor({6, 4 / spec.groups, 3, 3}, rng);
      const Tensor y0 = conv2d(x, w, spec);
      const Tensor r = cgtest::random_tensor(y0.shape(), rng);
      auto loss = [&] { return cgtest::dot(conv2d(x, w, spec).values(), r.values()); };
      const auto g = conv2d_backward(x, w, r, spec);
      s.record("conv", g.dx.values(), cgtest::numeric_grad(x.values(), loss, kSmooth));
      s.record("conv", g.dw.values(), cgtest::numeric_grad(w.values(), loss, kSmooth));
    }
    {  // batch normalization in training mode
      Tensor x = cgtest::random_tensor({4, 3, 3, 3}, rng);
      auto st = BatchNormState::make(3);
      for (std::size_t c = 0; c < 3; ++c) {
        st.gamma[c] = 0.5 + 0.3 * static_cast<double>(c);
        st.beta[c] = 0.1 * static_cast<double>(c);
      }
      const Tensor r = cgtest::random_tensor(x.shape(), rng);
      auto loss = [&] {
        auto tmp = st;
        return cgtest::dot(batchnorm_forward(x, tmp, true, true).values(), r.values());
      };
      BatchNormCache cache;
      auto tmp = st;
      batchnorm_forward(x, tmp, true, true, &cache);
      const auto g = batchnorm_backward(r, st, cache);
      s.record("batchnorm", g.dx.values(), cgtest::numeric_grad(x.values(), loss, kSmooth));
      s.record("batchnorm", g.dgamma, cgtest::numeric_grad(st.gamma, loss, kSmooth));
      s.record("batchnorm", g.dbeta, cgtest::numeric_grad(st.beta, loss, kSmooth));
    }
    for (Activation a : {Activation::kRelu, Activation::kTanh, Activation::kSigmoid}) {
      Tensor x = cgtest::random_tensor({20}, rng, -2.0, 2.0);
      const Tensor r = cgtest::random_tensor({20}, rng);
      auto loss = [&] { return cgtest::dot(activation(x, a).values(), r.values()); };
      const Tensor g = activation_backward(x, r, a);
      s.record("activation", g.values(), cgtest::numeric_grad(x.values(), loss, kKinked));
    }
    {  // fully connected, pooling and cross-entropy
      Tensor x = cgtest::random_tensor({3, 5}, rng);
      Tensor w = cgtest::random_tensor({4, 5}, rng);
      Tensor b = cgtest::random_tensor({4}, rng);
      const Tensor r = cgtest::random_tensor({3, 4}, rng);
      auto loss = [&] { return cgtest::dot(linear_forward(x, w, b).values(), r.values()); };
      const auto g = linear_backward(x, w, r);
      s.record("linear", g.dx.values(), cgtest::numeric_grad(x.values(), loss, kSmooth));
      s.record("linear", g.dw.values(), cgtest::numeric_grad(w.values(), loss, kSmooth));

      Tensor z = cgtest::random_tensor({3, 6}, rng, -3.0, 3.0);
      const std::vector<int> labels{0, 5, 2};
      auto ce = [&] { return cross_entropy(z, labels).loss; };
      s.record("cross_entropy", cross_entropy(z, labels).dlogits.values(),
               cgtest::numeric_grad(z.values(), ce, kSmooth));

      Tensor p = cgtest::random_tensor({1, 2, 4, 4}, rng);
      const Tensor rp = cgtest::random_tensor({1, 2, 2, 2}, rng);
      auto pl = [&] { return cgtest::dot(maxpool2d(p, 2).y.values(), rp.values()); };
      const auto mp = maxpool2d(p, 2);
      s.record("pooling", maxpool2d_backward(p.shape(), mp.argmax, rp).values(),
               cgtest::numeric_grad(p.values(), pl, kKinked));
    }
    for (Activation act : {Activation::kRelu, Activation::kTanh}) {  // gated block surrogate
      CgLayerConfig cfg;
      cfg.conv = ConvSpec{4, 4, 3, 1, 1, 1};
      cfg.groups = 2;
      cfg.activation = act;
      cfg.epsilon = 2.0;
      auto P = cgtest::random_params(cfg, rng);
      P.frozen = false;
      Tensor x = cgtest::random_tensor({2, 4, 4, 4}, rng);
      const Tensor r = cgtest::random_tensor({2, 4, 4, 4}, rng);
      const Tensor q = cgtest::random_tensor({2, 4, 4, 4}, rng);
      auto loss = [&] {
        CgTrainContext ctx;
        auto p = P;
        const Tensor y = cg_block_forward_train(x, p, cfg, ctx, GateGradMode::kSmooth);
        return cgtest::dot(y.values(), r.values()) + cgtest::dot(ctx.s.values(), q.values());
      };
      CgTrainContext ctx;
      auto p = P;
      cg_block_forward_train(x, p, cfg, ctx, GateGradMode::kSmooth);
      const auto g = cg_block_backward(ctx, P, cfg, r, &q);
      s.record("gate", g.dx.values(), cgtest::numeric_grad(x.values(), loss, kKinked));
      s.record("gate", g.dw_base.values(), cgtest::numeric_grad(P.w_base.values(), loss, kKinked));
      s.record("gate", g.dw_cond.values(), cgtest::numeric_grad(P.w_cond.values(), loss, kKinked));
      s.record("gate", g.dgamma, cgtest::numeric_grad(P.gamma, loss, kKinked));
      s.record("gate", g.dbeta, cgtest::numeric_grad(P.beta, loss, kKinked));
      if (act == Activation::kRelu) {
        s.record("gate", g.ddelta, cgtest::numeric_grad(P.gate.delta, loss, kKinked));
      } else {
        s.record("gate", g.ddelta_high, cgtest::numeric_grad(P.gate.delta_high, loss, kKinked));
        s.record("gate", g.ddelta_low, cgtest::numeric_grad(P.gate.delta_low, loss, kKinked));
      }
    }
    {  // target-threshold loss
      auto g1 = GateState::make(4, GateKind::kSingleSided);
      auto g2 = GateState::make(3, GateKind::kTwoSided);
      std::uniform_real_distribution<double> u(-2.0, 2.0);
      for (auto& d : g1.delta) d = u(rng);
      for (auto& d : g2.delta_high) d = u(rng);
      for (auto& d : g2.delta_low) d = u(rng);
      const ThresholdLayer layers[] = {{&g1, GateKind::kSingleSided, 1.3},
                                       {&g2, GateKind::kTwoSided, 0.6}};
      auto loss = [&] { return sparsity_loss_target(layers, 0.7).loss; };
      const auto res = sparsity_loss_target(layers, 0.7);
      s.record("target_loss", res.grads[0].delta, cgtest::numeric_grad(g1.delta, loss, kSmooth));
      s.record("target_loss", res.grads[1].delta_high,
               cgtest::numeric_grad(g2.delta_high, loss, kSmooth));
      s.record("target_loss", res.grads[1].delta_low,
               cgtest::numeric_grad(g2.delta_low, loss, kSmooth));
    }
    {  // computation-cost loss, chained through the surrogate into the thresholds
      CgLayerConfig cfg;
      cfg.conv = ConvSpec{4, 4, 3, 1, 1, 1};
      cfg.groups = 2;
      cfg.epsilon = 2.0;
      auto P = cgtest::random_params(cfg, rng);
      P.frozen = false;
      Tensor x = cgtest::random_tensor({2, 4, 4, 4}, rng);
      const double lambda = 1e-6;
      auto loss = [&] {
        CgTrainContext ctx;
        auto p = P;
        cg_block_forward_train(x, p, cfg, ctx);
        const CostLayer l{&ctx.s, 4, 2, 3};
        return sparsity_loss_flops(std::span(&l, 1), lambda).loss;
      };
      CgTrainContext ctx;
      auto p = P;
      cg_block_forward_train(x, p, cfg, ctx);
      const CostLayer l{&ctx.s, 4, 2, 3};
      const auto res = sparsity_loss_flops(std::span(&l, 1), lambda);
      const auto g = cg_block_backward(ctx, P, cfg, Tensor(ctx.s.shape()), &res.d_s[0]);
      s.record("cost_loss", g.ddelta, cgtest::numeric_grad(P.gate.delta, loss, kKinked));
    }
    {  // distillation loss
      Tensor z = cgtest::random_tensor({3, 10}, rng, -3.0, 3.0);
      const Tensor t = cgtest::random_tensor({3, 10}, rng, -3.0, 3.0);
      const std::vector<int> labels{1, 7, static_cast<int>(seed % 10)};
      const double kappa = 1.0 + 0.5 * static_cast<double>(seed % 4);
      auto loss = [&] { return kd_loss(z, t, labels, kappa, 0.5).loss; };
      s.record("kd_loss", kd_loss(z, t, labels, kappa, 0.5).dlogits.values(),
               cgtest::numeric_grad(z.values(), loss, kSmooth));
    }
  }
  std::size_t min_seeds = SIZE_MAX;
  for (const auto& [op, n] : s.seeds) min_seeds = std::min(min_seeds, n);
  const bool pass = s.worst < 1e-3 && min_seeds >= kSeeds;
  return {pass, "worst relative error " + fmt(s.worst) + " over " + std::to_string(s.checks) +
                    " checks, " + std::to_string(s.seeds.size()) + " op families x " +
                    std::to_string(kSeeds) + " seeds (tol 1e-3)"};
}

// ---------------------------------------------------------------------------
// 4. Grouping structure
// ---------------------------------------------------------------------------

Outcome grouping_structure() {
  bool ok = true;
  for (std::size_t G : {2u, 4u, 8u}) {
    const std::size_t c_in = 3 * G;
    std::vector<std::size_t> base(c_in, 0), cond(c_in, 0);
    for (std::size_t g = 0; g < G; ++g) {
      const auto s = split_grouped(c_in, G, g);
      for (auto c : s.base) ++base[c];
      for (auto c : s.cond) ++cond[c];
    }
    // Each input group as a whole: base for exactly one output group.
    for (std::size_t grp = 0; grp < G; ++grp) {
      for (std::size_t c = grp * 3; c < grp * 3 + 3; ++c) {
        ok = ok && base[c] == 1 && cond[c] == G - 1;
      }
    }
  }
  return {ok, "base count 1 and conditional count G-1 for every input channel, G in {2,4,8}"};
}

// ---------------------------------------------------------------------------
// 5. Merged gate equivalence
// ---------------------------------------------------------------------------

Outcome merged_gate_equivalence() {
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> u(-3.0, 3.0), pos(1e-3, 5.0);
  std::size_t cases = 0, mismatches = 0;
  while (cases < 10000) {
    const GateKind kind = cases % 2 ? GateKind::kTwoSided : GateKind::kSingleSided;
    auto gate = GateState::make(4, kind);
    for (std::size_t c = 0; c < 4; ++c) {
      gate.gate_bn.running_mean[c] = u(rng);
      gate.gate_bn.running_var[c] = pos(rng);
      if (kind == GateKind::kSingleSided) {
        gate.delta[c] = 0.5 * u(rng);
      } else {
        gate.delta_low[c] = -0.5 * std::abs(u(rng));
        gate.delta_high[c] = 0.5 * std::abs(u(rng));
      }
    }
    const Tensor x = cgtest::random_tensor({4, 5, 5}, rng, -4.0, 4.0);
    const Tensor d = merged_gate(x, gate, kind);
    for (std::size_t c = 0; c < 4; ++c) {
      const double sd = std::sqrt(gate.gate_bn.running_var[c] + gate.gate_bn.eps);
      for (std::size_t i = 0; i < 25; ++i) {
        const double xhat = (x[c * 25 + i] - gate.gate_bn.running_mean[c]) / sd;
        const bool ref = kind == GateKind::kSingleSided
                             ? xhat >= gate.delta[c]
                             : xhat >= gate.delta_low[c] && xhat <= gate.delta_high[c];
        mismatches += (d[c * 25 + i] != 0.0) != ref;
        ++cases;
      }
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in " +
                               std::to_string(cases) + " random cases"};
}

// ---------------------------------------------------------------------------
// 6 and 7. Cost accounting on random gated models
// ---------------------------------------------------------------------------

nlohmann::json random_model(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 1 << 20);
  const std::size_t groups[] = {1, 2, 4};
  nlohmann::json layers = nlohmann::json::array();
  layers.push_back({{"type", "conv"}, {"name", "stem"}, {"out_channels", 8}});
  const int n = 1 + pick(rng) % 3;
  for (int i = 0; i < n; ++i) {
    nlohmann::json l = {{"type", "cg_conv"},
                        {"name", "g" + std::to_string(i)},
                        {"out_channels", 4 * (1 + pick(rng) % 3)},
                        {"groups", groups[pick(rng) % 3]},
                        {"kernel", pick(rng) % 3 ? 3 : 1},
                        {"stride", 1 + (pick(rng) % 4 == 0)},
                        {"tau_c", 0.05 * (pick(rng) % 5)},
                        {"shuffle", pick(rng) % 2 == 0},
                        {"activation", pick(rng) % 4 ? "relu" : "tanh"}};
    layers.push_back(l);
  }
  layers.push_back({{"type", "global_avgpool"}});
  layers.push_back({{"type", "linear"}, {"out_features", 3}});
  return {{"input_shape", {2, 9, 9}}, {"layers", layers}};
}

Network random_frozen_network(std::mt19937_64& rng, std::uint64_t seed) {
  auto net = Network::build(random_model(rng), seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto* l : net.gated_layers()) {
    for (auto& d : l->block().gate.delta) d = u(rng);
    for (std::size_t c = 0; c < l->block().gate.delta_high.size(); ++c) {
      l->block().gate.delta_low[c] = u(rng) - 0.7;
      l->block().gate.delta_high[c] = u(rng) + 0.7;
    }
  }
  net.set_frozen(true);
  return net;
}

Outcome cost_oracles() {
  std::mt19937_64 rng(66);
  std::size_t mismatches = 0, layers = 0;
  for (int m = 0; m < 20; ++m) {
    const Network net = random_frozen_network(rng, 100 + m);
    std::vector<SampleTrace> traces(4);
    for (auto& t : traces) net.infer(cgtest::random_tensor(net.input_shape(), rng), {}, &t);
    const auto cost = count_flops(traces);
    std::uint64_t brute_accesses = 0, brute_total = 0;
    for (std::size_t i = 0; i < cost.layers.size(); ++i) {
      const auto& lc = cost.layers[i];
      std::uint64_t base = 0, exec = 0, total = 0, weights = 0;
      for (const auto& t : traces) {
        const auto& l = t.layers[i];
        const std::uint64_t kk = l.kernel * l.kernel;
        base += l.counters.base_macs;
        exec += l.counters.cond_macs_executed;
        total += l.counters.cond_macs_total;
        weights += l.counters.weights_accessed;
        for (std::size_t o = 0; o < l.out_channels; ++o) {
          if (!l.gated) {
            brute_accesses += l.in_channels / l.conv_groups * kk;
            brute_total += l.in_channels / l.conv_groups * kk;
            continue;
          }
          for (std::size_t c = 0; c < l.in_channels; ++c) {
            const bool in_base =
                c / (l.in_channels / l.cfg.groups) == o / (l.out_channels / l.cfg.groups);
            if (in_base || l.dm.channel_mask[o]) brute_accesses += kk;
            brute_total += kk;
          }
        }
      }
      if (!lc.gated) continue;
      ++layers;
      mismatches += lc.base_flops != base;
      mismatches += lc.cond_flops_executed != exec;
      mismatches += lc.cond_flops_total != total;
      mismatches += lc.weight_accesses != weights;
    }
    mismatches += cost.weight_accesses != brute_accesses;
    mismatches += cost.weight_total != brute_total;
    const auto wa = count_weight_accesses(traces);
    mismatches += wa.mean_accesses * 4.0 != static_cast<double>(brute_accesses);
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches across 20 random models (" +
                               std::to_string(layers) + " gated layers, 4 samples each)"};
}

Outcome gate_overhead() {
  std::mt19937_64 rng(77);
  std::size_t checked = 0, mismatches = 0;
  for (int m = 0; m < 20; ++m) {
    const Network net = random_frozen_network(rng, 300 + m);
    InferenceOptions opts;
    opts.tau_c_override = 0.1;
    SampleTrace t;
    net.infer(cgtest::random_tensor(net.input_shape(), rng), opts, &t);
    const SampleTrace one[] = {t};
    const auto cost = count_flops(one);
    for (std::size_t i = 0; i < t.layers.size(); ++i) {
      const auto& l = t.layers[i];
      if (!l.gated || l.cfg.gate_kind() != GateKind::kSingleSided) continue;
      const std::uint64_t expected = (l.out_h * l.out_w + 1) * l.out_channels;
      mismatches += l.counters.gate_comparisons != expected;
      mismatches += cost.layers[i].gate_comparisons != expected;
      ++checked;
    }
  }
  return {mismatches == 0 && checked > 0,
          std::to_string(mismatches) + " mismatches over " + std::to_string(checked) +
              " single-sided layers with the channel gate on"};
}

// ---------------------------------------------------------------------------
// 8 to 11. Desk-scale model
// ---------------------------------------------------------------------------

struct DeskRun {
  ExperimentConfig cfg;
  Dataset train;
  Dataset test;
  TrainOptions opts;
  std::optional<Network> open;
  std::optional<Network> gated;
  EvalResult open_eval;
  EvalResult gated_eval;
  double seconds = 0.0;
};

DeskRun& desk() {
  static DeskRun run = [] {
    DeskRun r;
    const auto start = std::chrono::steady_clock::now();
    r.cfg = load_config(kConfigDir / "cg_cnn4.json");
    set_deterministic(r.cfg.deterministic);
    r.train = load_dataset(r.cfg.train);
    r.test = load_dataset(r.cfg.test);
    r.opts.loss = r.cfg.loss;
    r.opts.schedule = r.cfg.schedule;
    r.opts.seed = r.cfg.seed;
    r.opts.eval_limit = r.cfg.eval_limit;
    r.opts.grad_mode = r.cfg.grad_mode;
    r.opts.on_epoch = [](const EpochMetrics& m) {
      std::cout << "  epoch " << m.epoch << " val_acc " << fmt(m.val_acc) << " flop_reduction "
                << fmt(m.flop_reduction) << std::endl;
    };

    std::cout << "  training gates-open baseline" << std::endl;
    r.open = Network::build(r.cfg.model, r.cfg.seed);
    r.open->force_gates_open(true);
    train_network(*r.open, r.train, r.test, r.opts);
    r.open_eval = evaluate(*r.open, r.test);

    std::cout << "  training gated model" << std::endl;
    r.gated = Network::build(r.cfg.model, r.cfg.seed);
    train_network(*r.gated, r.train, r.test, r.opts);
    r.gated_eval = evaluate(*r.gated, r.test);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
  }();
  return run;
}

Outcome desk_training() {
  auto& d = desk();
  const double drop = d.open_eval.accuracy - d.gated_eval.accuracy;
  const double fr = d.gated_eval.cost.flop_reduction;
  const bool pass = fr >= 2.0 && drop <= 0.01 && d.seconds < 1800.0;
  return {pass, "FLOP reduction " + fmt(fr) + "x (need >= 2.0), accuracy open " +
                    fmt(d.open_eval.accuracy) + " vs gated " + fmt(d.gated_eval.accuracy) +
                    " (drop " + fmt(drop) + ", need <= 0.01), " + fmt(d.seconds, 3) +
                    " s for both runs"};
}

std::vector<SampleTrace> desk_traces(const InferenceOptions& opts, std::size_t limit) {
  auto& d = desk();
  return evaluate(*d.gated, d.test, opts, limit, true).traces;
}

Outcome correlation_trend() {
  auto& d = desk();
  InferenceOptions o;
  o.record_inputs = true;
  const auto traces = desk_traces(o, d.cfg.analysis.samples);
  const std::size_t groups[] = {8, 4, 2, 1};
  const auto r = partial_final_correlation(*d.gated, traces, groups);
  const auto get = [&](std::size_t g) {
    const auto it = r.mean_r.find(g);
    return it == r.mean_r.end() ? std::nan("") : it->second;
  };
  const double r8 = get(8), r4 = get(4), r2 = get(2), r1 = get(1);
  const bool pass = r8 < r4 && r4 < r2 && std::abs(r1 - 1.0) <= 1e-12;
  return {pass, "mean r at eta=1/8,1/4,1/2,1: " + fmt(r8) + ", " + fmt(r4) + ", " + fmt(r2) +
                    ", " + fmt(r1, 15)};
}

// Each nonzero tau_c is a separate model trained with the channel-wise gate on
// every gated layer, same seed and schedule as the tau_c = 0 desk model.
Outcome channel_gate_sweep() {
  auto& d = desk();
  const double taus[] = {0.0, 0.05, 0.1, 0.2};
  std::vector<double> reduction, accuracy;
  for (double tau : taus) {
    std::optional<Network> trained;
    if (tau > 0.0) {
      nlohmann::json model = d.cfg.model;
      for (auto& layer : model["layers"]) {
        const auto type = layer.value("type", std::string());
        if (type == "cg_conv" || type == "residual") layer["tau_c"] = tau;
      }
      std::cout << "  training with tau_c " << fmt(tau) << std::endl;
      trained = Network::build(model, d.cfg.seed);
      train_network(*trained, d.train, d.test, d.opts);
    }
    const Network& net = trained ? *trained : *d.gated;
    const auto r = evaluate(net, d.test, {}, 0, true);
    reduction.push_back(count_weight_accesses(r.traces).reduction);
    accuracy.push_back(r.accuracy);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < reduction.size(); ++i) monotone &= reduction[i] >= reduction[i - 1];
  const double drop = accuracy.front() - accuracy.back();
  std::string detail = "tau_c 0/0.05/0.1/0.2 weight-access reduction";
  for (double v : reduction) detail += " " + fmt(v);
  detail += ", accuracy";
  for (double v : accuracy) detail += " " + fmt(v);
  detail += " (drop at 0.2: " + fmt(drop) + ", need <= 0.02)";
  return {monotone && drop <= 0.02, detail};
}

Outcome perf_model() {
  auto& d = desk();
  const auto traces = desk_traces({}, d.cfg.analysis.samples);
  bool bounded = true;
  std::size_t configs = 0;
  for (std::size_t rows : {1u, 4u, 16u, 32u}) {
    for (std::size_t cols : {1u, 4u, 16u, 32u}) {
      for (bool fd : {true, false}) {
        const auto r = model_network_speedup(traces, ArrayConfig{rows, cols, fd});
        bounded &= r.speedup <= r.flop_reduction;
        ++configs;
      }
    }
  }
  for (double delta : {-0.5, 0.0, 0.5, 1.0, 2.0}) {
    InferenceOptions o;
    o.delta_override = delta;
    const auto sweep = desk_traces(o, 100);
    const auto r = model_network_speedup(sweep, d.cfg.perf);
    bounded &= r.speedup <= r.flop_reduction;
    ++configs;
  }
  const auto main = model_network_speedup(traces, ArrayConfig{16, 16, true});
  const bool in_band = main.speedup >= 1.8 && main.speedup <= 2.8;
  return {bounded && in_band,
          "speedup <= FLOP reduction on " + std::to_string(configs) + " configurations: " +
              (bounded ? "yes" : "no") + "; 16x16 array: speedup " + fmt(main.speedup) +
              "x at FLOP reduction " + fmt(main.flop_reduction) + "x (band [1.8, 2.8])"};
}

// ---------------------------------------------------------------------------
// 12. Determinism of the command line tool
// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "cgnet_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> metrics, checkpoints;
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    const std::string cmd = "\"" + kCgBinary.string() + "\" train --config \"" +
                            (kConfigDir / "smoke.json").string() +
                            "\" --seed 11 --deterministic --out \"" + out.string() +
                            "\" > \"" + (root.string() + "_" + run + ".log") + "\" 2>&1";
    fs::create_directories(root);
    if (std::system(cmd.c_str()) != 0) return {false, "cg train exited with an error"};
    metrics.push_back(slurp(out / "metrics.csv"));
    checkpoints.push_back(slurp(out / "checkpoint.cgn"));
  }
  const bool same = !metrics[0].empty() && !checkpoints[0].empty() && metrics[0] == metrics[1] &&
                    checkpoints[0] == checkpoints[1];
  fs::remove_all(root);
  return {same, "two runs: metrics.csv " + std::string(metrics[0] == metrics[1] ? "identical" : "differ") +
                    " (" + std::to_string(metrics[0].size()) + " bytes), checkpoint " +
                    (checkpoints[0] == checkpoints[1] ? "identical" : "differ") + " (" +
                    std::to_string(checkpoints[0].size()) + " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments select a subset of criteria by number.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "dense equivalence with open gates", dense_equivalence},
      {2, "block output equals scalar oracle", scalar_oracle},
      {3, "finite-difference gradient suite", gradient_suite},
      {4, "grouping structure", grouping_structure},
      {5, "merged gate equivalence", merged_gate_equivalence},
      {6, "FLOP and weight-access oracles", cost_oracles},
      {7, "gate overhead identity", gate_overhead},
      {8, "desk-scale training", desk_training},
      {9, "partial/final correlation trend", correlation_trend},
      {10, "channel-wise gate sweep", channel_gate_sweep},
      {11, "systolic array model", perf_model},
      {12, "determinism of cg train", determinism},
  };
  int failed = 0;
  std::vector<std::string> lines;
  std::size_t ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << c.id << "  " << c.name
         << ": " << o.detail << " [" << fmt(secs, 3) << " s]";
    std::cout << line.str() << std::endl;
    lines.push_back(line.str());
    failed += o.pass ? 0 : 1;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << '\n';
  std::cout << (ran - static_cast<std::size_t>(failed)) << " of " << ran
            << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
