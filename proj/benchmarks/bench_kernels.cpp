#include <benchmark/benchmark.h>

#include <random>

#include "cgnet/analysis.hpp"
#include "cgnet/gating.hpp"
#include "cgnet/model.hpp"
#include "cgnet/nn.hpp"
#include "cgnet/perf_model.hpp"

namespace {

cgnet::Tensor uniform(const cgnet::Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  cgnet::Tensor t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Args: channels, spatial size.
void BM_Conv2dIm2col(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  const cgnet::ConvSpec spec{c, c, 3, 1, 1, 1};
  const auto x = uniform({8, c, hw, hw}, 1);
  const auto w = uniform({c, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(cgnet::conv2d(x, w, spec));
  state.SetItemsProcessed(state.iterations() * 8 * static_cast<std::int64_t>(c * c * 9 * hw * hw));
}
BENCHMARK(BM_Conv2dIm2col)->Args({16, 14})->Args({32, 14})->Args({32, 7});

void BM_Conv2dDirect(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  const cgnet::ConvSpec spec{c, c, 3, 1, 1, 1};
  const auto x = uniform({8, c, hw, hw}, 1);
  const auto w = uniform({c, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(cgnet::conv2d_direct(x, w, spec));
  state.SetItemsProcessed(state.iterations() * 8 * static_cast<std::int64_t>(c * c * 9 * hw * hw));
}
BENCHMARK(BM_Conv2dDirect)->Args({16, 14})->Args({32, 14})->Args({32, 7});

// Args: channels, groups, threshold in tenths.
void BM_GatedBlockInference(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  cgnet::CgLayerConfig cfg;
  cfg.conv = cgnet::ConvSpec{c, c, 3, 1, 1, 1};
  cfg.groups = static_cast<std::size_t>(state.range(1));
  auto p = cgnet::CgBlockParams::make(cfg);
  p.w_base = uniform(p.w_base.shape(), 3);
  p.w_cond = uniform(p.w_cond.shape(), 4);
  for (std::size_t i = 0; i < c; ++i) p.gate.gate_bn.running_var[i] = 1.0;
  for (auto& d : p.gate.delta) d = static_cast<double>(state.range(2)) / 10.0;
  p.frozen = true;
  const auto x = uniform({c, 14, 14}, 5);
  double pruned = 0.0;
  for (auto _ : state) {
    auto r = cgnet::cg_block_forward_inference(x, p, cfg);
    pruned = cgnet::pruning_ratio(r.dm);
    benchmark::DoNotOptimize(r.y);
  }
  state.counters["pruning"] = pruned;
}
BENCHMARK(BM_GatedBlockInference)
    ->Args({32, 4, -100})
    ->Args({32, 4, 0})
    ->Args({32, 4, 10})
    ->Args({32, 4, 20})
    ->Args({32, 8, 10});

void BM_NetworkTrainStep(benchmark::State& state) {
  const nlohmann::json spec = {
      {"input_shape", {1, 28, 28}},
      {"layers",
       {{{"type", "conv"}, {"out_channels", 8}, {"stride", 2}},
        {{"type", "cg_conv"}, {"out_channels", 16}, {"groups", 4}},
        {{"type", "maxpool"}, {"kernel", 2}},
        {{"type", "cg_conv"}, {"out_channels", 32}, {"groups", 4}},
        {{"type", "global_avgpool"}},
        {{"type", "linear"}, {"out_features", 10}}}}};
  auto net = cgnet::Network::build(spec, 1);
  const auto x = uniform({32, 1, 28, 28}, 6);
  std::vector<int> labels(32);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
  for (auto _ : state) {
    net.zero_grad();
    const auto loss = cgnet::cross_entropy(net.forward(x, true), labels);
    net.backward(loss.dlogits);
  }
}
BENCHMARK(BM_NetworkTrainStep);

void BM_PerfModelLayer(benchmark::State& state) {
  std::mt19937_64 rng(7);
  std::bernoulli_distribution coin(0.3);
  cgnet::DecisionMap dm;
  dm.d = cgnet::Tensor({64, 28, 28});
  for (auto& v : dm.d.values()) v = coin(rng) ? 1.0 : 0.0;
  dm.channel_mask.assign(64, 1);
  const cgnet::LayerDims dims{"l", 64, 28, 28, 144, 432};
  for (auto _ : state) {
    benchmark::DoNotOptimize(cgnet::model_layer_cycles(dims, &dm, cgnet::ArrayConfig{}));
  }
}
BENCHMARK(BM_PerfModelLayer);

}  // namespace

BENCHMARK_MAIN();
