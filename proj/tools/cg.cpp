// cg: train, evaluate, analyze and model gated CNNs from a JSON experiment
// config.
//
//   cg train   --config FILE [--seed N] [--deterministic] [--out DIR] [--force-open]
//   cg eval    --config FILE [--checkpoint FILE] [--open-gates] [--tau-c V]
//   cg analyze --config FILE [--checkpoint FILE]
//   cg perf    --config FILE [--checkpoint FILE] [--rows R] [--cols C]

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cgnet/analysis.hpp"
#include "cgnet/checkpoint.hpp"
#include "cgnet/config.hpp"
#include "cgnet/errors.hpp"
#include "cgnet/parallel.hpp"
#include "cgnet/perf_model.hpp"
#include "cgnet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
  std::string checkpoint;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Experiment config (JSON)")->required();
  app->add_option("--seed", c.seed, "Override the config seed");
  app->add_flag("--deterministic", c.deterministic, "Serial reductions, bitwise-reproducible");
  app->add_option("--out", c.out, "Output directory (overrides output_dir)");
}

void add_checkpoint(CLI::App* app, Common& c) {
  app->add_option("--checkpoint", c.checkpoint,
                  "Checkpoint to load (default: <out>/checkpoint.cgn)");
}

cgnet::ExperimentConfig prepare(const Common& c) {
  auto cfg = cgnet::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.deterministic) cfg.deterministic = true;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cgnet::set_deterministic(cfg.deterministic);
  fs::create_directories(cfg.output_dir);
  return cfg;
}

fs::path checkpoint_path(const Common& c, const cgnet::ExperimentConfig& cfg) {
  return c.checkpoint.empty() ? cfg.output_dir / "checkpoint.cgn" : fs::path(c.checkpoint);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw cgnet::DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

json summary_header(const char* command, const cgnet::ExperimentConfig& cfg) {
  return {{"schema_version", 1}, {"command", command}, {"seed", cfg.seed}};
}

int cmd_train(const Common& c, bool force_open) {
  auto cfg = prepare(c);
  if (force_open) cfg.force_open = true;
  const auto train = cgnet::load_dataset(cfg.train);
  const auto test = cgnet::load_dataset(cfg.test);
  auto net = cgnet::Network::build(cfg.model, cfg.seed);
  if (cfg.force_open) net.force_gates_open(true);

  std::optional<cgnet::LoadedModel> teacher;
  cgnet::TrainOptions opts;
  opts.loss = cfg.loss;
  opts.schedule = cfg.schedule;
  opts.seed = cfg.seed;
  opts.eval_limit = cfg.eval_limit;
  opts.grad_mode = cfg.grad_mode;
  if (cfg.loss.kd.enabled) {
    teacher = cgnet::load_checkpoint(cfg.teacher);
    opts.teacher = &teacher->net;
  }
  opts.on_epoch = [](const cgnet::EpochMetrics& m) {
    std::cout << "epoch " << m.epoch << "  loss " << std::fixed << std::setprecision(4)
              << m.train_loss << "  val_acc " << m.val_acc << "  mean_delta " << m.mean_delta
              << "  pruning " << m.pruning_ratio << "  flop_reduction " << m.flop_reduction
              << "x" << std::defaultfloat << std::endl;
  };
  const auto history = cgnet::train_network(net, train, test, opts);

  const json meta = {{"seed", cfg.seed},
                     {"epochs", cfg.schedule.epochs},
                     {"sparsity", std::string(cgnet::to_string(cfg.loss.sparsity))},
                     {"lambda", cfg.loss.lambda},
                     {"target", cfg.loss.target},
                     {"force_open", cfg.force_open}};
  const fs::path ckpt = cfg.output_dir / "checkpoint.cgn";
  cgnet::save_checkpoint(ckpt, net, meta);
  cgnet::write_metrics_csv(cfg.output_dir / "metrics.csv", history);
  std::cout << "wrote " << ckpt.string() << " and " << (cfg.output_dir / "metrics.csv").string()
            << '\n';
  return 0;
}

int cmd_eval(const Common& c, bool open_gates, std::optional<double> tau_c) {
  auto cfg = prepare(c);
  const auto model = cgnet::load_checkpoint(checkpoint_path(c, cfg));
  const auto test = cgnet::load_dataset(cfg.test);
  cgnet::InferenceOptions opts;
  if (open_gates) opts.delta_override = -1e6;
  opts.tau_c_override = tau_c;
  const auto r = cgnet::evaluate(model.net, test, opts);

  json j = summary_header("eval", cfg);
  j["samples"] = r.samples;
  j["accuracy"] = r.accuracy;
  j["cost"] = cgnet::cost_to_json(r.cost);
  write_json(cfg.output_dir / "eval.json", j);
  std::ofstream csv(cfg.output_dir / "eval_cost.csv", std::ios::trunc);
  cgnet::write_cost_csv(csv, r.cost);

  std::cout << "accuracy " << std::fixed << std::setprecision(4) << r.accuracy << " on "
            << r.samples << " samples\n"
            << "flop_reduction " << r.cost.flop_reduction << "x  pruning_ratio "
            << r.cost.pruning_ratio << "  weight_access_reduction "
            << r.cost.weight_access_reduction << "x\n";
  return 0;
}

int cmd_analyze(const Common& c) {
  auto cfg = prepare(c);
  const auto model = cgnet::load_checkpoint(checkpoint_path(c, cfg));
  const auto test = cgnet::load_dataset(cfg.test);
  const auto& an = cfg.analysis;
  const fs::path out = cfg.output_dir;
  json summary = summary_header("analyze", cfg);

  // Computation intensity maps.
  {
    cgnet::InferenceOptions opts;
    const auto r = cgnet::evaluate(model.net, test, opts, an.intensity_samples, true);
    const auto shape = model.net.input_shape();
    std::map<std::string, std::vector<cgnet::IntensityMap>> per_layer;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < r.traces.size(); ++i) {
      std::vector<cgnet::IntensityMap> maps;
      for (const auto& l : r.traces[i].layers) {
        if (!l.gated) continue;
        maps.push_back(cgnet::intensity_map(l.dm));
        if (!per_layer.count(l.name)) order.push_back(l.name);
        per_layer[l.name].push_back(maps.back());
      }
      if (maps.empty()) continue;
      const auto agg = cgnet::aggregate_intensity(maps, shape[1], shape[2]);
      cgnet::write_pgm(out / ("intensity_sample" + std::to_string(i) + ".pgm"), agg);
    }
    for (const auto& name : order) {
      const auto& maps = per_layer[name];
      const auto mean = cgnet::aggregate_intensity(maps, maps.front().height, maps.front().width);
      cgnet::write_pgm(out / ("intensity_" + name + ".pgm"), mean);
    }
    summary["intensity_samples"] = r.traces.size();
  }

  // Partial/final-sum correlation.
  {
    cgnet::InferenceOptions opts;
    opts.record_inputs = true;
    const auto r = cgnet::evaluate(model.net, test, opts, an.samples, true);
    const auto corr = cgnet::partial_final_correlation(model.net, r.traces, an.group_sweep);
    for (const auto& w : corr.warnings) std::cerr << "warning: " << w << '\n';
    std::ofstream csv(out / "correlation.csv", std::ios::trunc);
    csv << "layer,groups,eta,r,channels_used,channels_excluded\n" << std::setprecision(12);
    for (const auto& row : corr.rows) {
      csv << row.layer << ',' << row.groups << ',' << 1.0 / static_cast<double>(row.groups) << ','
          << row.r << ',' << row.channels_used << ',' << row.channels_excluded << '\n';
    }
    json mean = json::array();
    std::cout << "partial/final correlation (mean over gated layers)\n";
    for (const auto& [g, r_mean] : corr.mean_r) {
      csv << "mean," << g << ',' << 1.0 / static_cast<double>(g) << ',' << r_mean << ",,\n";
      mean.push_back({{"groups", g}, {"eta", 1.0 / static_cast<double>(g)}, {"r", r_mean}});
      std::cout << "  eta=1/" << g << "  r=" << std::fixed << std::setprecision(4) << r_mean
                << std::defaultfloat << '\n';
    }
    summary["correlation"] = mean;
  }

  // Channel-wise gate sweep: weight accesses and accuracy.
  {
    std::ofstream csv(out / "tau_c_sweep.csv", std::ios::trunc);
    csv << "tau_c,accuracy,weight_access_reduction,flop_reduction,pruning_ratio\n"
        << std::setprecision(12);
    json rows = json::array();
    std::cout << "channel gate sweep\n";
    for (double tau : an.tau_c_sweep) {
      cgnet::InferenceOptions opts;
      opts.tau_c_override = tau;
      const auto r = cgnet::evaluate(model.net, test, opts, an.samples);
      csv << tau << ',' << r.accuracy << ',' << r.cost.weight_access_reduction << ','
          << r.cost.flop_reduction << ',' << r.cost.pruning_ratio << '\n';
      rows.push_back({{"tau_c", tau},
                      {"accuracy", r.accuracy},
                      {"weight_access_reduction", r.cost.weight_access_reduction},
                      {"flop_reduction", r.cost.flop_reduction},
                      {"pruning_ratio", r.cost.pruning_ratio}});
      std::cout << "  tau_c=" << tau << "  acc=" << std::fixed << std::setprecision(4)
                << r.accuracy << "  weight_access_reduction=" << r.cost.weight_access_reduction
                << "x" << std::defaultfloat << '\n';
    }
    summary["tau_c_sweep"] = rows;
  }
  write_json(out / "analysis.json", summary);
  return 0;
}

int cmd_perf(const Common& c, std::optional<std::size_t> rows, std::optional<std::size_t> cols) {
  auto cfg = prepare(c);
  if (rows) cfg.perf.rows = *rows;
  if (cols) cfg.perf.cols = *cols;
  cfg.perf.validate();
  const auto model = cgnet::load_checkpoint(checkpoint_path(c, cfg));
  const auto test = cgnet::load_dataset(cfg.test);
  const auto r = cgnet::evaluate(model.net, test, {}, cfg.analysis.samples, true);
  const auto rep = cgnet::model_network_speedup(r.traces, cfg.perf);
  cgnet::write_perf_csv(cfg.output_dir / "perf.csv", rep);

  json layers = json::array();
  for (const auto& l : rep.layers) {
    layers.push_back({{"name", l.name},
                      {"dense_cycles", l.dense_cycles},
                      {"gated_cycles", l.gated_cycles},
                      {"theoretical_cycles", l.theoretical_cycles},
                      {"utilization", l.utilization}});
  }
  json j = summary_header("perf", cfg);
  j["array"] = {{"rows", rep.array.rows},
                {"cols", rep.array.cols},
                {"fill_drain", rep.array.fill_drain},
                {"note", "parametric model, not a measurement"}};
  j["samples"] = rep.samples;
  j["dense_cycles"] = rep.dense_cycles;
  j["gated_cycles"] = rep.gated_cycles;
  j["theoretical_cycles"] = rep.theoretical_cycles;
  j["speedup"] = rep.speedup;
  j["flop_reduction"] = rep.flop_reduction;
  j["layers"] = layers;
  write_json(cfg.output_dir / "perf.json", j);
  std::cout << std::fixed << std::setprecision(3) << "array " << rep.array.rows << "x"
            << rep.array.cols << "  speedup " << rep.speedup << "x  flop_reduction "
            << rep.flop_reduction << "x\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-gated CNN harness"};
  app.require_subcommand(1);

  Common train_c, eval_c, analyze_c, perf_c;
  bool force_open = false;
  auto* train = app.add_subcommand("train", "Train a network and write checkpoint + metrics.csv");
  add_common(train, train_c);
  train->add_flag("--force-open", force_open, "Open and lock every gate (dense baseline)");

  bool open_gates = false;
  std::optional<double> tau_c;
  auto* eval = app.add_subcommand("eval", "Accuracy and cost report on the test set");
  add_common(eval, eval_c);
  add_checkpoint(eval, eval_c);
  eval->add_flag("--open-gates", open_gates, "Override every threshold so all gates pass");
  eval->add_option("--tau-c", tau_c, "Override the channel-wise gate fraction")
      ->check(CLI::Range(0.0, 1.0));

  auto* analyze =
      app.add_subcommand("analyze", "Intensity maps, correlation table, channel-gate sweep");
  add_common(analyze, analyze_c);
  add_checkpoint(analyze, analyze_c);

  std::optional<std::size_t> rows, cols;
  auto* perf = app.add_subcommand("perf", "Systolic-array speedup breakdown");
  add_common(perf, perf_c);
  add_checkpoint(perf, perf_c);
  perf->add_option("--rows", rows, "PE array rows")->check(CLI::PositiveNumber);
  perf->add_option("--cols", cols, "PE array columns")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_c, force_open);
    if (*eval) return cmd_eval(eval_c, open_gates, tau_c);
    if (*analyze) return cmd_analyze(analyze_c);
    if (*perf) return cmd_perf(perf_c, rows, cols);
  } catch (const cgnet::DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const cgnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
