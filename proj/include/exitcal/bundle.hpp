#pragma once

#include "exitcal/numerics.hpp"

#include <cstdint>
#include <vector>

namespace exitcal {

enum class SplitTag : std::uint8_t { train = 0, val = 1, test = 2 };

/// Per-exit features, last-layer parameters, and cumulative backbone cost.
/// The interchange unit between the backbone and everything downstream.
struct FeatureBundle {
  struct Exit {
    Matrix features;        // n x p_k, row i aligned with labels[i]
    Matrix weights;         // p_k x c
    Vector bias;            // c
    long long cum_flops = 0;  // cumulative practical FLOPs up to this exit
  };

  int num_classes = 0;
  std::vector<int> labels;
  std::vector<SplitTag> split;
  std::vector<Exit> exits;

  Eigen::Index n() const { return static_cast<Eigen::Index>(labels.size()); }
  int n_exits() const { return static_cast<int>(exits.size()); }

  std::vector<std::size_t> split_indices(SplitTag tag) const;

  /// Checks alignment, strictly increasing cum_flops, finite arrays.
  /// Throws std::invalid_argument on violation.
  void validate() const;
};

}  // namespace exitcal
