#include "exitcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace exitcal {

namespace {

constexpr double kProbFloor = 1e-12;

void check_aligned(const Matrix& probs, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) {
    throw std::invalid_argument("metrics: rows and labels misaligned");
  }
  for (const int y : labels) {
    if (y < 0 || y >= probs.cols()) {
      throw std::invalid_argument("metrics: label out of range");
    }
  }
}

}  // namespace

double top_k_accuracy(const Matrix& probs, const std::vector<int>& labels,
                      int k) {
  check_aligned(probs, labels);
  const int c = static_cast<int>(probs.cols());
  if (k < 1 || k > c) {
    throw std::invalid_argument("top_k_accuracy: k out of range");
  }
  if (labels.empty()) return 0.0;

  std::size_t hits = 0;
  std::vector<int> order(static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::iota(order.begin(), order.end(), 0);
    const auto row = probs.row(static_cast<Eigen::Index>(i));
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](int a, int b) {
                        if (row(a) != row(b)) return row(a) > row(b);
                        return a < b;
                      });
    for (int j = 0; j < k; ++j) {
      if (order[static_cast<std::size_t>(j)] == labels[i]) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) /
         static_cast<double>(labels.size());
}

double nlpd(const Matrix& probs, const std::vector<int>& labels) {
  check_aligned(probs, labels);
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p =
        std::max(probs(static_cast<Eigen::Index>(i), labels[i]), kProbFloor);
    total -= std::log(p);
  }
  return total / static_cast<double>(labels.size());
}

double ece(const Matrix& probs, const std::vector<int>& labels, int bins) {
  check_aligned(probs, labels);
  if (bins < 1) throw std::invalid_argument("ece: bins must be >= 1");
  if (labels.empty()) return 0.0;

  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> hit_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<std::size_t> count(static_cast<std::size_t>(bins), 0);

  for (std::size_t i = 0; i < labels.size(); ++i) {
    Eigen::Index argmax = 0;
    const double conf = probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&argmax);
    int bin = conf > 0.0
                  ? static_cast<int>(std::ceil(conf * bins)) - 1
                  : 0;
    bin = std::clamp(bin, 0, bins - 1);
    const std::size_t b = static_cast<std::size_t>(bin);
    conf_sum[b] += conf;
    hit_sum[b] += (argmax == labels[i]) ? 1.0 : 0.0;
    ++count[b];
  }

  const double n = static_cast<double>(labels.size());
  double result = 0.0;
  for (std::size_t b = 0; b < static_cast<std::size_t>(bins); ++b) {
    if (count[b] == 0) continue;
    const double frac = static_cast<double>(count[b]) / n;
    const double acc = hit_sum[b] / static_cast<double>(count[b]);
    const double mean_conf = conf_sum[b] / static_cast<double>(count[b]);
    result += frac * std::abs(acc - mean_conf);
  }
  return result;
}

MetricsReport evaluate_metrics(const Matrix& probs,
                               const std::vector<int>& labels) {
  MetricsReport report;
  report.n = labels.size();
  const int c = static_cast<int>(probs.cols());
  report.top1 = top_k_accuracy(probs, labels, 1);
  report.top5 = top_k_accuracy(probs, labels, std::min(5, c));
  report.nlpd = nlpd(probs, labels);
  report.ece = ece(probs, labels);
  return report;
}

ScatterSummary scatter_export(const std::vector<Matrix>& per_exit_probs,
                              const std::vector<int>& labels) {
  ScatterSummary summary;
  summary.high_error_fraction.resize(per_exit_probs.size(), 0.0);
  for (std::size_t k = 0; k < per_exit_probs.size(); ++k) {
    const Matrix& probs = per_exit_probs[k];
    check_aligned(probs, labels);
    std::size_t high = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto row = probs.row(static_cast<Eigen::Index>(i));
      Eigen::Index argmax = 0;
      row.maxCoeff(&argmax);
      ScatterRow r;
      r.sample = i;
      r.exit = static_cast<int>(k + 1);
      r.entropy_nats = entropy(row.transpose());
      r.error = 1.0 - row(labels[i]);
      r.correct = (argmax == labels[i]);
      if (r.error > 0.5) ++high;
      summary.rows.push_back(r);
    }
    summary.high_error_fraction[k] =
        labels.empty() ? 0.0
                       : static_cast<double>(high) /
                             static_cast<double>(labels.size());
  }
  return summary;
}

}  // namespace exitcal
