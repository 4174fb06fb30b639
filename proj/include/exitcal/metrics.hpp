#pragma once

#include "exitcal/numerics.hpp"

#include <cstddef>
#include <vector>

namespace exitcal {

struct MetricsReport {
  double top1 = 0.0;   // percent
  double top5 = 0.0;   // percent
  double nlpd = 0.0;   // mean nats per sample
  double ece = 0.0;
  std::size_t n = 0;
};

/// Percentage of rows whose label is among the k highest-probability
/// classes. Probability ties are broken toward the lower class index.
double top_k_accuracy(const Matrix& probs, const std::vector<int>& labels,
                      int k);

/// Mean negative log probability of the true label, with probabilities
/// clamped below at 1e-12 before the logarithm.
double nlpd(const Matrix& probs, const std::vector<int>& labels);

/// Expected calibration error over `bins` equal-width confidence bins on
/// (0, 1]; confidence is the max predicted probability. Empty bins
/// contribute zero; a confidence of exactly 0 lands in the first bin.
double ece(const Matrix& probs, const std::vector<int>& labels, int bins = 10);

/// All four metrics in one pass; top5 uses k = min(5, c).
MetricsReport evaluate_metrics(const Matrix& probs,
                               const std::vector<int>& labels);

struct ScatterRow {
  std::size_t sample = 0;
  int exit = 0;              // 1-based
  double entropy_nats = 0.0;
  double error = 0.0;        // 1 - p(label)
  bool correct = false;
};

struct ScatterSummary {
  std::vector<ScatterRow> rows;
  // Per exit, the proportion of rows with error > 0.5.
  std::vector<double> high_error_fraction;
};

/// One row per sample per exit from per-exit prediction matrices.
ScatterSummary scatter_export(const std::vector<Matrix>& per_exit_probs,
                              const std::vector<int>& labels);

}  // namespace exitcal
