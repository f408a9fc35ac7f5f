#pragma once

// In-memory labelled image datasets: MNIST-style idx files, raw CHW binaries
// with a JSON sidecar, and a seeded synthetic glyph generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cgnet/tensor.hpp"

namespace cgnet {

struct Dataset {
  Tensor images;  // (N, C, H, W), values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  /// Gathers the given samples into an (n, C, H, W) batch.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::size_t begin, std::size_t count) const;
  /// Throws DataError on label/image count mismatch or out-of-range labels.
  void validate() const;
};

/// Reads an idx image file (magic 0x00000803, u8 pixels) and an idx label
/// file (magic 0x00000801). Pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const Dataset& data);

/// Raw CHW samples back to back; `<path>.json` describes them:
/// {"count", "channels", "height", "width", "dtype": "uint8"|"float32"|"float64",
///  "num_classes", "labels": [...] or "labels_file": "<u8 file>"}.
Dataset load_raw_chw(const std::filesystem::path& path);

struct SyntheticSpec {
  std::size_t count = 10000;
  std::size_t classes = 10;
  std::size_t height = 28;
  std::size_t width = 28;
  std::uint64_t seed = 1;            // per-sample variation
  std::uint64_t prototype_seed = 7;  // class shapes, shared by train and test splits
  double noise = 0.08;               // std of additive pixel noise
  double jitter = 2.0;               // max translation in pixels
  double deform = 0.15;              // max stroke end point displacement (glyph units)
  std::size_t clutter = 1;           // random distractor strokes per image
};

/// Stroke-based glyphs: each class is a fixed set of line segments rendered
/// with random translation, scale, rotation, end point deformation, stroke
/// width, distractor strokes and pixel noise.
Dataset make_synthetic(const SyntheticSpec& spec);

}  // namespace cgnet
