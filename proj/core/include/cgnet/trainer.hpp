#pragma once

// Mini-batch SGD driver for gated networks plus batch evaluation with cost
// accounting.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string_view>
#include <vector>

#include "cgnet/analysis.hpp"
#include "cgnet/dataset.hpp"
#include "cgnet/model.hpp"
#include "cgnet/training.hpp"

namespace cgnet {

enum class LrSchedule { kConstant, kStep, kCosine };
LrSchedule parse_lr_schedule(std::string_view name);
std::string_view to_string(LrSchedule s);

struct Schedule {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  std::vector<std::size_t> milestones;  // step schedule: epochs where lr *= gamma
  double gamma = 0.1;

  void validate() const;
  /// Learning rate used throughout the given (0-based) epoch.
  double lr_at(std::size_t epoch) const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_acc = 0.0;
  double mean_delta = 0.0;
  double pruning_ratio = 0.0;
  double flop_reduction = 1.0;
};

struct TrainOptions {
  LossConfig loss;
  Schedule schedule;
  std::uint64_t seed = 1;
  /// Teacher for distillation, required when loss.kd.enabled.
  Network* teacher = nullptr;
  /// Validation samples used for the per-epoch metrics (0 = all).
  std::size_t eval_limit = 0;
  GateGradMode grad_mode = GateGradMode::kStraightThrough;
  /// Called after each epoch's metrics are computed.
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Sparsity weight for the given epoch after linear warm-up.
double warmup_lambda(const LossConfig& loss, std::size_t epoch, std::size_t epochs);

/// Trains in place; the network is left with frozen statistics. Throws
/// DivergenceError when the loss becomes non-finite.
std::vector<EpochMetrics> train_network(Network& net, const Dataset& train, const Dataset& val,
                                        const TrainOptions& opts);

struct EvalResult {
  std::size_t samples = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  CostReport cost;
  std::vector<int> predictions;
  std::vector<SampleTrace> traces;  // when requested
};

/// Per-sample inference over the first `limit` samples (0 = all). Requires
/// frozen statistics.
EvalResult evaluate(const Network& net, const Dataset& data, const InferenceOptions& opts = {},
                    std::size_t limit = 0, bool keep_traces = false);

/// Mean threshold over all gated channels. Two-sided windows are reported as
/// the single-sided threshold passing the same share of a standard normal.
double mean_delta(const Network& net);
/// Inverse of two_sided_half_width.
double equivalent_single_sided(double half_width);

/// Header: epoch,train_loss,val_acc,mean_delta,pruning_ratio,flop_reduction
void write_metrics_csv(std::ostream& out, const std::vector<EpochMetrics>& rows);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows);

}  // namespace cgnet
