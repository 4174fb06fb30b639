#include "exitcal/bundle.hpp"

#include <stdexcept>
#include <string>

namespace exitcal {

std::vector<std::size_t> FeatureBundle::split_indices(SplitTag tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == tag) out.push_back(i);
  }
  return out;
}

void FeatureBundle::validate() const {
  if (num_classes < 2) {
    throw std::invalid_argument("bundle: needs at least two classes");
  }
  if (labels.size() != split.size()) {
    throw std::invalid_argument("bundle: labels/split misaligned");
  }
  if (exits.empty()) {
    throw std::invalid_argument("bundle: no exits");
  }
  long long prev_flops = 0;
  for (std::size_t k = 0; k < exits.size(); ++k) {
    const Exit& e = exits[k];
    const std::string where = "bundle exit " + std::to_string(k + 1);
    if (e.features.rows() != n()) {
      throw std::invalid_argument(where + ": feature rows misaligned");
    }
    if (e.weights.rows() != e.features.cols() ||
        e.weights.cols() != num_classes ||
        e.bias.size() != num_classes) {
      throw std::invalid_argument(where + ": last-layer shape mismatch");
    }
    if (!e.features.allFinite() || !e.weights.allFinite() ||
        !e.bias.allFinite()) {
      throw std::invalid_argument(where + ": non-finite values");
    }
    if (e.cum_flops <= prev_flops) {
      throw std::invalid_argument(where +
                                  ": cumulative FLOPs not strictly increasing");
    }
    prev_flops = e.cum_flops;
  }
  for (const int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw std::invalid_argument("bundle: label out of range");
    }
  }
}

}  // namespace exitcal
