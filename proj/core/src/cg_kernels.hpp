#pragma once

// Shared inner loops of the gated convolution. Both the training and the
// inference path go through these so that a conditional sum is always the
// partial sum continued over the conditional rows in the same order.

#include <cstddef>
#include <span>
#include <vector>

#include "cgnet/gating.hpp"

namespace cgnet::detail {

struct CgGeometry {
  std::size_t c_in, c_out, height, width, oh, ow, positions;
  std::size_t groups, out_per_group, in_per_group, kk;
  std::size_t base_rows, cond_rows;  // fan-in of each path

  static CgGeometry make(const CgLayerConfig& cfg, std::size_t height, std::size_t width);
  std::size_t group_of(std::size_t out_channel) const { return out_channel / out_per_group; }
  std::size_t base_row_begin(std::size_t group) const { return group * in_per_group * kk; }
  /// im2col row for conditional weight column `j` of an output channel in `group`.
  std::size_t cond_row(std::size_t group, std::size_t j) const {
    const std::size_t before = group * in_per_group * kk;
    return j < before ? j : j + in_per_group * kk;
  }
};

/// Full im2col (all input channels) of one (C,H,W) sample.
void unfold(std::span<const double> x, const CgGeometry& g, const ConvSpec& spec,
            std::vector<double>& cols);

/// p[o, :] = W_base[o] . cols[base rows of group(o)]
void base_sums(const std::vector<double>& cols, const CgGeometry& g, const Tensor& w_base,
               double* p);

/// full[o, :] = p[o, :] continued over all conditional rows.
void dense_cond_sums(const std::vector<double>& cols, const CgGeometry& g, const Tensor& w_cond,
                     const double* p, double* full);

}  // namespace cgnet::detail
