#include "cgnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "cgnet/errors.hpp"
#include "cgnet/parallel.hpp"

namespace cgnet {

LrSchedule parse_lr_schedule(std::string_view name) {
  if (name == "constant") return LrSchedule::kConstant;
  if (name == "step") return LrSchedule::kStep;
  if (name == "cosine") return LrSchedule::kCosine;
  throw ConfigError("unknown lr schedule '" + std::string(name) +
                    "' (expected constant, step or cosine)");
}

std::string_view to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::kConstant: return "constant";
    case LrSchedule::kStep: return "step";
    case LrSchedule::kCosine: return "cosine";
  }
  return "constant";
}

void Schedule::validate() const {
  if (epochs == 0) throw ConfigError("optimizer.epochs must be positive");
  if (batch_size == 0) throw ConfigError("optimizer.batch_size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer.lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer.momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be non-negative");
  if (!(gamma > 0.0)) throw ConfigError("optimizer.gamma must be positive");
}

double Schedule::lr_at(std::size_t epoch) const {
  switch (lr_schedule) {
    case LrSchedule::kConstant: return lr;
    case LrSchedule::kStep: {
      double r = lr;
      for (std::size_t m : milestones) {
        if (epoch >= m) r *= gamma;
      }
      return r;
    }
    case LrSchedule::kCosine:
      return 0.5 * lr *
             (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                             static_cast<double>(epochs)));
  }
  return lr;
}

double warmup_lambda(const LossConfig& loss, std::size_t epoch, std::size_t epochs) {
  const double warm = std::ceil(loss.warmup_fraction * static_cast<double>(epochs));
  if (warm <= 0.0) return loss.lambda;
  return loss.lambda * std::min(1.0, static_cast<double>(epoch + 1) / warm);
}

double equivalent_single_sided(double half_width) {
  if (half_width <= 0.0) return std::numeric_limits<double>::infinity();
  // two_sided_half_width is decreasing in its argument.
  double lo = -40.0, hi = 40.0;
  if (two_sided_half_width(lo) <= half_width) return lo;
  if (two_sided_half_width(hi) >= half_width) return hi;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (two_sided_half_width(mid) > half_width) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double mean_delta(const Network& net) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const CgConvLayer* l : net.gated_layers()) {
    const auto& g = l->block().gate;
    if (l->cfg().gate_kind() == GateKind::kSingleSided) {
      for (double d : g.delta) sum += d;
      n += g.delta.size();
    } else {
      for (std::size_t c = 0; c < g.delta_high.size(); ++c) {
        sum += equivalent_single_sided(0.5 * (g.delta_high[c] - g.delta_low[c]));
      }
      n += g.delta_high.size();
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

EvalResult evaluate(const Network& net, const Dataset& data, const InferenceOptions& opts,
                    std::size_t limit, bool keep_traces) {
  constexpr std::size_t kChunk = 256;
  const std::size_t n = limit ? std::min(limit, data.size()) : data.size();
  EvalResult r;
  r.samples = n;
  r.predictions.assign(n, -1);
  std::vector<CostReport> parts;
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t count = std::min(kChunk, n - begin);
    std::vector<SampleTrace> traces(count);
    parallel_for(count, [&](std::size_t i) {
      const Tensor logits = net.infer(data.images.sample(begin + i), opts, &traces[i]);
      const auto v = logits.values();
      r.predictions[begin + i] =
          static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    });
    parts.push_back(count_flops(traces));
    if (keep_traces) {
      for (auto& t : traces) r.traces.push_back(std::move(t));
    }
  }
  for (std::size_t i = 0; i < n; ++i) r.correct += r.predictions[i] == data.labels[i] ? 1 : 0;
  r.accuracy = n ? static_cast<double>(r.correct) / static_cast<double>(n) : 0.0;
  r.cost = merge_costs(parts);
  return r;
}

namespace {

void check_finite(double loss, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "training diverged: loss is " << loss << " at epoch " << epoch + 1 << ", step "
       << step + 1 << " (try a smaller optimizer.lr or loss.lambda)";
    throw DivergenceError(os.str());
  }
}

}  // namespace

std::vector<EpochMetrics> train_network(Network& net, const Dataset& train, const Dataset& val,
                                        const TrainOptions& opts) {
  opts.loss.validate();
  opts.schedule.validate();
  train.validate();
  if (train.size() == 0) throw DataError("training set is empty");
  if (opts.loss.kd.enabled && !opts.teacher) {
    throw ConfigError("loss.kd.enabled requires a teacher checkpoint");
  }
  if (opts.teacher) opts.teacher->set_frozen(true);

  const auto& sch = opts.schedule;
  net.set_grad_mode(opts.grad_mode);
  net.set_frozen(false);
  auto params = net.params();
  std::vector<std::vector<double>> velocity(params.size());
  auto gated = net.gated_layers();

  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<EpochMetrics> history;
  for (std::size_t epoch = 0; epoch < sch.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = sch.lr_at(epoch);
    const double lambda = warmup_lambda(opts.loss, epoch, sch.epochs);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    const std::size_t steps = (train.size() + sch.batch_size - 1) / sch.batch_size;
    for (std::size_t step = 0; step < steps; ++step) {
      const std::size_t begin = step * sch.batch_size;
      const std::size_t count = std::min(sch.batch_size, train.size() - begin);
      const std::span<const std::size_t> idx(order.data() + begin, count);
      const Tensor x = train.batch(idx);
      const std::vector<int> y = train.batch_labels(idx);

      net.zero_grad();
      const Tensor logits = net.forward(x, true);
      LossResult task;
      if (opts.loss.kd.enabled) {
        const Tensor t = opts.teacher->forward(x, false);
        task = kd_loss(logits, t, y, opts.loss.kd.kappa, opts.loss.kd.lambda_kd);
      } else {
        task = cross_entropy(logits, y);
      }
      double loss = task.loss;

      if (lambda > 0.0 && opts.loss.sparsity == SparsityMode::kTargetThreshold) {
        std::vector<ThresholdLayer> layers;
        std::vector<CgConvLayer*> owners;
        for (CgConvLayer* l : gated) {
          if (l->thresholds_locked()) continue;
          layers.push_back({&l->block().gate, l->cfg().gate_kind(), l->cfg().target});
          owners.push_back(l);
        }
        const auto r = sparsity_loss_target(layers, lambda);
        loss += r.loss;
        for (std::size_t i = 0; i < owners.size(); ++i) owners[i]->add_threshold_grad(r.grads[i]);
      } else if (lambda > 0.0 && opts.loss.sparsity == SparsityMode::kComputationCost) {
        std::vector<CostLayer> layers;
        std::vector<CgConvLayer*> owners;
        for (CgConvLayer* l : gated) {
          if (l->thresholds_locked()) continue;
          layers.push_back(
              {&l->context().s, l->cfg().conv.in_channels, l->cfg().groups, l->cfg().conv.kernel});
          owners.push_back(l);
        }
        auto r = sparsity_loss_flops(layers, lambda);
        loss += r.loss;
        for (std::size_t i = 0; i < owners.size(); ++i) {
          owners[i]->set_surrogate_grad(std::move(r.d_s[i]));
        }
      }
      check_finite(loss, epoch, step);

      net.backward(task.dlogits);
      for (std::size_t i = 0; i < params.size(); ++i) {
        sgd_update(params[i].value, params[i].grad, velocity[i], lr, sch.momentum,
                   params[i].decay ? sch.weight_decay : 0.0);
      }
      net.after_step();
      loss_sum += loss * static_cast<double>(count);
      seen += count;
    }

    net.set_frozen(true);
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.train_loss = loss_sum / static_cast<double>(seen);
    if (val.size() > 0) {
      const auto ev = evaluate(net, val, {}, opts.eval_limit);
      m.val_acc = ev.accuracy;
      m.pruning_ratio = ev.cost.pruning_ratio;
      m.flop_reduction = ev.cost.flop_reduction;
    }
    m.mean_delta = mean_delta(net);
    history.push_back(m);
    if (opts.on_epoch) opts.on_epoch(m);
    if (epoch + 1 < sch.epochs) net.set_frozen(false);
  }
  return history;
}

void write_metrics_csv(std::ostream& out, const std::vector<EpochMetrics>& rows) {
  out << "epoch,train_loss,val_acc,mean_delta,pruning_ratio,flop_reduction\n";
  out << std::setprecision(17);
  for (const auto& m : rows) {
    out << m.epoch << ',' << m.train_loss << ',' << m.val_acc << ',' << m.mean_delta << ','
        << m.pruning_ratio << ',' << m.flop_reduction << '\n';
  }
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_metrics_csv(out, rows);
}

}  // namespace cgnet
