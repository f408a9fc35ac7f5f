#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "cgnet/errors.hpp"
#include "cgnet/perf_model.hpp"
#include "test_util.hpp"

using namespace cgnet;

namespace {

DecisionMap random_map(std::size_t c, std::size_t h, std::size_t w, double p,
                       std::mt19937_64& rng) {
  std::bernoulli_distribution coin(p);
  DecisionMap dm;
  dm.d = Tensor({c, h, w});
  for (auto& v : dm.d.values()) v = coin(rng) ? 1.0 : 0.0;
  dm.channel_mask.assign(c, 1);
  return dm;
}

// Steps through the schedule one cycle at a time: every tile of `rows`
// vectors walks the base reduction plus its fill/drain, then the vectors with
// a live lane are regrouped into tiles that walk the conditional reduction.
struct Enumerated {
  std::uint64_t dense = 0, gated = 0, macs = 0;
};

Enumerated enumerate(const LayerDims& d, const DecisionMap& dm, const ArrayConfig& cfg) {
  struct Vec {
    std::size_t c, y, x0, x1;
  };
  std::vector<Vec> vecs;
  for (std::size_t c = 0; c < d.out_channels; ++c) {
    for (std::size_t y = 0; y < d.out_h; ++y) {
      for (std::size_t x = 0; x < d.out_w; x += cfg.cols) {
        vecs.push_back({c, y, x, std::min(d.out_w, x + cfg.cols)});
      }
    }
  }
  const std::size_t k = d.base_reduction + d.cond_reduction;
  const std::size_t fd = cfg.fill_drain ? cfg.rows + cfg.cols : 0;
  Enumerated e;
  std::vector<Vec> live;
  for (std::size_t start = 0; start < vecs.size(); start += cfg.rows) {
    for (std::size_t step = 0; step < k + fd; ++step) ++e.dense;
    for (std::size_t step = 0; step < d.base_reduction + fd; ++step) ++e.gated;
    for (std::size_t i = start; i < std::min(vecs.size(), start + cfg.rows); ++i) {
      const auto& v = vecs[i];
      bool any = false;
      for (std::size_t x = v.x0; x < v.x1; ++x) {
        e.macs += d.base_reduction;
        if (dm.effective(v.c, v.y * d.out_w + x)) {
          e.macs += d.cond_reduction;
          any = true;
        }
      }
      if (any) live.push_back(v);
    }
  }
  for (std::size_t start = 0; start < live.size(); start += cfg.rows) {
    for (std::size_t step = 0; step < d.cond_reduction; ++step) ++e.gated;
  }
  return e;
}

LayerDims dims(std::size_t c, std::size_t h, std::size_t w, std::size_t kb, std::size_t kc) {
  return LayerDims{"l", c, h, w, kb, kc};
}

}  // namespace

TEST(PerfModel, AllLiveEqualsDense) {
  std::mt19937_64 rng(1);
  const auto d = dims(8, 6, 20, 18, 54);
  const auto dm = random_map(8, 6, 20, 1.0, rng);
  for (bool fd : {true, false}) {
    ArrayConfig cfg{4, 8, fd};
    const auto r = model_layer_cycles(d, &dm, cfg);
    EXPECT_EQ(r.gated_cycles, r.dense_cycles);
  }
}

TEST(PerfModel, AllDeadRunsBaseOnly) {
  std::mt19937_64 rng(2);
  const auto d = dims(8, 6, 20, 18, 54);
  const auto dm = random_map(8, 6, 20, 0.0, rng);
  ArrayConfig cfg{4, 8, true};
  const auto r = model_layer_cycles(d, &dm, cfg);
  const std::uint64_t tiles = (8 * 6 * 3 + 3) / 4;
  EXPECT_EQ(r.gated_cycles, tiles * (18 + 12));
  EXPECT_EQ(r.live_vectors, 0u);
}

TEST(PerfModel, MatchesCycleEnumeration) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> size(1, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto d = dims(size(rng), size(rng), size(rng), size(rng), size(rng) * 3);
    ArrayConfig cfg{size(rng), size(rng), trial % 2 == 0};
    const auto dm = random_map(d.out_channels, d.out_h, d.out_w, 0.1 * (trial % 10), rng);
    const auto r = model_layer_cycles(d, &dm, cfg);
    const auto e = enumerate(d, dm, cfg);
    EXPECT_EQ(r.dense_cycles, e.dense);
    EXPECT_EQ(r.gated_cycles, e.gated);
    EXPECT_EQ(r.ideal_macs, e.macs);
    EXPECT_LE(r.theoretical_cycles, static_cast<double>(r.gated_cycles));
    EXPECT_LE(r.gated_cycles, r.dense_cycles);
  }
}

TEST(PerfModel, UngatedLayerHasNoSavings) {
  const auto d = dims(4, 4, 4, 36, 0);
  const auto r = model_layer_cycles(d, nullptr, ArrayConfig{});
  EXPECT_EQ(r.gated_cycles, r.dense_cycles);
  EXPECT_FALSE(r.gated);
}

TEST(PerfModel, Errors) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(model_layer_cycles(dims(0, 4, 4, 1, 1), nullptr, ArrayConfig{}), ConfigError);
  EXPECT_THROW(model_layer_cycles(dims(4, 4, 4, 1, 1), nullptr, ArrayConfig{0, 4, true}),
               ConfigError);
  const auto dm = random_map(4, 4, 5, 0.5, rng);
  EXPECT_THROW(model_layer_cycles(dims(4, 4, 4, 1, 1), &dm, ArrayConfig{}), ConfigError);
}

namespace {

// A three-layer trace with a dense first layer and two gated layers whose
// rows are multiples of the array width.
std::vector<SampleTrace> synthetic_traces(double p, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SampleTrace> out(samples);
  for (auto& t : out) {
    LayerTrace stem;
    stem.name = "stem";
    stem.in_channels = 1;
    stem.out_channels = 8;
    stem.kernel = 3;
    stem.out_h = stem.out_w = 16;
    t.layers.push_back(stem);
    for (std::size_t i = 0; i < 2; ++i) {
      LayerTrace g;
      g.name = "g" + std::to_string(i);
      g.gated = true;
      g.in_channels = 8;
      g.out_channels = 16;
      g.kernel = 3;
      g.out_h = g.out_w = 16;
      g.cfg.conv = ConvSpec{8, 16, 3, 1, 1, 1};
      g.cfg.groups = 4;
      g.dm = random_map(16, 16, 16, p, rng);
      t.layers.push_back(g);
    }
  }
  return out;
}

}  // namespace

TEST(PerfNetwork, NoPruningGivesUnitSpeedup) {
  const auto traces = synthetic_traces(1.0, 2, 5);
  const auto r = model_network_speedup(traces, ArrayConfig{});
  EXPECT_NEAR(r.speedup, 1.0, 1e-9);
  EXPECT_NEAR(r.flop_reduction, 1.0, 1e-9);
}

TEST(PerfNetwork, SpeedupNeverExceedsFlopReduction) {
  for (int trial = 0; trial < 40; ++trial) {
    const double p = 0.05 * (trial % 20);
    const auto traces = synthetic_traces(p, 2, 100 + trial);
    for (std::size_t cols : {1, 2, 4, 8, 16}) {
      for (bool fd : {true, false}) {
        const auto r = model_network_speedup(traces, ArrayConfig{4, cols, fd});
        EXPECT_LE(r.speedup, r.flop_reduction * (1.0 + 1e-12)) << "p=" << p << " cols=" << cols;
        EXPECT_GE(r.speedup, 1.0);
      }
    }
  }
}

TEST(PerfNetwork, SingleLaneSkippingReachesFlopReduction) {
  // With one-lane vectors, a row count dividing every layer's vector count,
  // no fill/drain and uniformly distributed live lanes, modeled time is
  // proportional to executed MACs.
  auto traces = synthetic_traces(0.3, 1, 8);
  const auto r = model_network_speedup(traces, ArrayConfig{1, 1, false});
  EXPECT_NEAR(r.speedup, r.flop_reduction, 1e-12);
}

TEST(PerfNetwork, FinerVectorsApproachFlopReduction) {
  const auto traces = synthetic_traces(0.2, 2, 9);
  double last = 0.0;
  for (std::size_t cols : {16, 8, 4, 2, 1}) {
    const auto r = model_network_speedup(traces, ArrayConfig{1, cols, false});
    EXPECT_GE(r.speedup, last) << "cols=" << cols;
    last = r.speedup;
  }
  EXPECT_NEAR(last, model_network_speedup(traces, ArrayConfig{1, 1, false}).flop_reduction, 1e-12);
}

TEST(PerfNetwork, MorePruningNeverSlowsDown) {
  std::mt19937_64 rng(10);
  std::bernoulli_distribution coin(0.3);
  auto traces = synthetic_traces(0.8, 2, 11);
  double last = model_network_speedup(traces, ArrayConfig{}).speedup;
  for (int round = 0; round < 10; ++round) {
    for (auto& t : traces) {
      for (auto& l : t.layers) {
        if (!l.gated) continue;
        for (auto& v : l.dm.d.values()) {
          if (coin(rng)) v = 0.0;
        }
      }
    }
    const double s = model_network_speedup(traces, ArrayConfig{}).speedup;
    EXPECT_GE(s, last);
    last = s;
  }
}

TEST(PerfNetwork, HalfVectorAlignedPruningLimit) {
  // Every other vector dead; fill/drain off; speedup is k / (kb + kc / 2).
  auto traces = synthetic_traces(1.0, 1, 12);
  for (auto& l : traces[0].layers) {
    if (!l.gated) continue;
    for (std::size_t c = 0; c < 16; ++c) {
      for (std::size_t y = 0; y < 16; ++y) {
        if ((c + y) % 2) {
          for (std::size_t x = 0; x < 16; ++x) l.dm.d.at(c, y, x) = 0.0;
        }
      }
    }
  }
  traces[0].layers.erase(traces[0].layers.begin());
  const auto r = model_network_speedup(traces, ArrayConfig{2, 16, false});
  const double kb = 18.0, kc = 54.0;
  EXPECT_NEAR(r.speedup, (kb + kc) / (kb + kc / 2.0), 1e-12);
  EXPECT_LT(r.speedup, 2.0);
}

TEST(PerfNetwork, CsvLayout) {
  const auto r = model_network_speedup(synthetic_traces(0.5, 1, 13), ArrayConfig{});
  std::ostringstream os;
  write_perf_csv(os, r);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "layer,dense_cycles,gated_cycles,theoretical_cycles,utilization");
}
