#include "exitcal/ensemble.hpp"

#include <stdexcept>

namespace exitcal {

MieState mie_push(MieState state, const ProbVector& prediction, double weight) {
  if (!(weight > 0.0)) {
    throw std::invalid_argument("mie_push: weight must be positive");
  }
  if (state.exits_seen == 0) {
    state.weighted_sum = weight * prediction;
  } else {
    if (state.weighted_sum.size() != prediction.size()) {
      throw std::invalid_argument("mie_push: prediction size changed");
    }
    state.weighted_sum += weight * prediction;
  }
  state.total_weight += weight;
  ++state.exits_seen;
  return state;
}

ProbVector mie_current(const MieState& state) {
  if (state.exits_seen < 1) {
    throw std::invalid_argument("mie_current: empty ensemble");
  }
  return state.weighted_sum / state.total_weight;
}

}  // namespace exitcal
