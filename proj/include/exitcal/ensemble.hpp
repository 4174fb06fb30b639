#pragma once

#include "exitcal/numerics.hpp"

namespace exitcal {

/// Running FLOPs-weighted average over the exit predictions seen so far.
/// A per-sample value; updates are pure.
struct MieState {
  Vector weighted_sum;      // sum of w_m * p_m over consumed exits
  double total_weight = 0;  // sum of w_m
  int exits_seen = 0;
};

/// Advances the ensemble by one exit prediction with weight w > 0.
MieState mie_push(MieState state, const ProbVector& prediction, double weight);

/// Current ensemble prediction: weighted sum divided by the total weight.
ProbVector mie_current(const MieState& state);

}  // namespace exitcal
