#pragma once

// Experiment configuration: a versioned JSON document describing data,
// model topology, losses, optimizer, analysis sweeps and the array model.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgnet/dataset.hpp"
#include "cgnet/perf_model.hpp"
#include "cgnet/trainer.hpp"

namespace cgnet {

inline constexpr int kConfigSchemaVersion = 1;

enum class DataFormat { kSynthetic, kIdx, kRawChw };

struct DataSource {
  DataFormat format = DataFormat::kSynthetic;
  SyntheticSpec synthetic;
  std::filesystem::path images;  // idx
  std::filesystem::path labels;  // idx
  std::filesystem::path path;    // raw_chw
  std::size_t limit = 0;         // keep only the first `limit` samples (0 = all)
};

struct AnalysisConfig {
  std::size_t samples = 200;          // evaluation samples for analyze/perf
  std::vector<double> tau_c_sweep{0.0, 0.05, 0.1, 0.2};
  std::vector<std::size_t> group_sweep{8, 4, 2, 1};
  std::size_t intensity_samples = 16;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 1;
  bool deterministic = false;
  std::filesystem::path output_dir = "cg_out";
  DataSource train;
  DataSource test;
  nlohmann::json model;  // {"input_shape", "layers"}
  LossConfig loss;
  std::filesystem::path teacher;  // checkpoint used for distillation
  Schedule schedule;
  GateGradMode grad_mode = GateGradMode::kStraightThrough;
  bool force_open = false;
  std::size_t eval_limit = 0;  // validation samples per epoch (0 = all)
  AnalysisConfig analysis;
  ArrayConfig perf;
};

/// Parses and validates a config document. Relative paths are resolved
/// against `base_dir`. Errors name the offending field, e.g. 'optimizer.lr'.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Copies loss.target into gated layers that do not set their own target.
nlohmann::json with_default_targets(const nlohmann::json& model, double target);

Dataset load_dataset(const DataSource& src);

}  // namespace cgnet
