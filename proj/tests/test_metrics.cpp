#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitcal/metrics.hpp"

#include <cmath>

using namespace exitcal;

namespace {

// From-scratch oracles, coded independently of the library path.

double oracle_nlpd(const Matrix& probs, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double p = probs(static_cast<Eigen::Index>(i), labels[i]);
    if (p < 1e-12) p = 1e-12;
    total += -std::log(p);
  }
  return total / static_cast<double>(labels.size());
}

double oracle_ece(const Matrix& probs, const std::vector<int>& labels,
                  int m) {
  const std::size_t n = labels.size();
  double total = 0.0;
  for (int j = 1; j <= m; ++j) {
    const double lo = static_cast<double>(j - 1) / m;
    const double hi = static_cast<double>(j) / m;
    double conf_sum = 0.0;
    double acc_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index arg = 0;
      const double conf =
          probs.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      const bool inside = (j == 1) ? (conf <= hi) : (conf > lo && conf <= hi);
      if (!inside) continue;
      conf_sum += conf;
      acc_sum += (arg == labels[i]) ? 1.0 : 0.0;
      ++count;
    }
    if (count == 0) continue;
    total += (static_cast<double>(count) / static_cast<double>(n)) *
             std::abs(acc_sum / count - conf_sum / count);
  }
  return total;
}

Matrix random_probs(int n, int c, std::uint64_t seed) {
  Matrix probs(n, c);
  for (int i = 0; i < n; ++i) {
    const GaussianStream s{seed, static_cast<std::uint64_t>(i), 0, 0};
    probs.row(i) = softmax(2.0 * draw_gaussian(s, c)).transpose();
  }
  return probs;
}

std::vector<int> random_labels(int n, int c, std::uint64_t seed) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(
        keyed_u64(seed, static_cast<std::uint64_t>(i), 1, 2, 3) %
        static_cast<std::uint64_t>(c));
  }
  return labels;
}

}  // namespace

TEST_CASE("top-k accuracy closed forms") {
  Matrix probs(2, 3);
  probs << 0.5, 0.3, 0.2, 0.1, 0.2, 0.7;
  const std::vector<int> labels = {1, 0};
  CHECK(top_k_accuracy(probs, labels, 2) == doctest::Approx(50.0));
  CHECK(top_k_accuracy(probs, labels, 3) == doctest::Approx(100.0));

  Matrix onehot(3, 4);
  onehot.setZero();
  onehot(0, 2) = 1.0;
  onehot(1, 0) = 1.0;
  onehot(2, 3) = 1.0;
  CHECK(top_k_accuracy(onehot, {2, 0, 3}, 1) == doctest::Approx(100.0));

  CHECK_THROWS_AS(top_k_accuracy(probs, labels, 4), std::invalid_argument);
  CHECK_THROWS_AS(top_k_accuracy(probs, labels, 0), std::invalid_argument);
}

TEST_CASE("top-k ties break toward the lower class index") {
  Matrix probs(1, 3);
  probs << 0.4, 0.3, 0.3;  // classes 1 and 2 tie
  CHECK(top_k_accuracy(probs, {1}, 2) == doctest::Approx(100.0));
  CHECK(top_k_accuracy(probs, {2}, 2) == doctest::Approx(0.0));
}

TEST_CASE("nlpd closed forms") {
  const int c = 7;
  Matrix uniform = Matrix::Constant(5, c, 1.0 / c);
  CHECK(nlpd(uniform, {0, 1, 2, 3, 4}) ==
        doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-14));

  Matrix onehot(2, 3);
  onehot.setZero();
  onehot(0, 1) = 1.0;
  onehot(1, 2) = 1.0;
  CHECK(nlpd(onehot, {1, 2}) <= 1e-11);

  Matrix pair(2, 2);
  pair << 0.5, 0.5, 0.9, 0.1;
  const double expected = (-std::log(0.5) - std::log(0.1)) / 2.0;
  CHECK(nlpd(pair, {0, 1}) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(nlpd(pair, {0, 1}) == doctest::Approx(1.49787).epsilon(1e-5));
}

TEST_CASE("ece closed forms") {
  Matrix confident(4, 2);
  confident << 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0;
  CHECK(ece(confident, {0, 0, 0, 0}) == doctest::Approx(0.0));

  Matrix overconfident(4, 2);
  for (int i = 0; i < 4; ++i) {
    overconfident(i, 0) = 0.95;
    overconfident(i, 1) = 0.05;
  }
  // Half correct at confidence 0.95: single occupied bin.
  CHECK(ece(overconfident, {0, 0, 1, 1}) ==
        doctest::Approx(0.45).epsilon(1e-12));
}

TEST_CASE("ece and nlpd match from-scratch oracles on random instances") {
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 10 + static_cast<int>(keyed_u64(31, trial, 0, 0, 0) % 991);
    const int c = 2 + static_cast<int>(keyed_u64(31, trial, 1, 0, 0) % 9);
    const Matrix probs = random_probs(n, c, 1000 + trial);
    const std::vector<int> labels = random_labels(n, c, 2000 + trial);
    CHECK(std::abs(ece(probs, labels) - oracle_ece(probs, labels, 10)) <
          1e-12);
    CHECK(std::abs(nlpd(probs, labels) - oracle_nlpd(probs, labels)) < 1e-12);
  }
}

TEST_CASE("ece is invariant to dataset duplication") {
  const Matrix probs = random_probs(257, 5, 77);
  const std::vector<int> labels = random_labels(257, 5, 78);
  Matrix doubled(probs.rows() * 2, probs.cols());
  doubled << probs, probs;
  std::vector<int> doubled_labels = labels;
  doubled_labels.insert(doubled_labels.end(), labels.begin(), labels.end());
  CHECK(std::abs(ece(probs, labels) - ece(doubled, doubled_labels)) < 1e-12);
}

TEST_CASE("nlpd decomposes over concatenation") {
  const Matrix a = random_probs(100, 4, 5);
  const Matrix b = random_probs(60, 4, 6);
  const std::vector<int> la = random_labels(100, 4, 7);
  const std::vector<int> lb = random_labels(60, 4, 8);
  Matrix both(160, 4);
  both << a, b;
  std::vector<int> labels = la;
  labels.insert(labels.end(), lb.begin(), lb.end());
  const double combined = nlpd(both, labels);
  const double weighted =
      (100.0 * nlpd(a, la) + 60.0 * nlpd(b, lb)) / 160.0;
  CHECK(combined == doctest::Approx(weighted).epsilon(1e-12));
}

TEST_CASE("high temperature collapses confidences into one bin") {
  const int c = 4;
  Matrix probs(50, c);
  for (int i = 0; i < 50; ++i) {
    const GaussianStream s{91, static_cast<std::uint64_t>(i), 0, 0};
    probs.row(i) = softmax(draw_gaussian(s, c), 1e9).transpose();
  }
  // All max-confidences are essentially 1/c -> same bin; ECE equals the
  // single-bin |accuracy - confidence| regardless of bin bookkeeping.
  const std::vector<int> labels = random_labels(50, c, 92);
  double acc = 0.0, conf = 0.0;
  for (int i = 0; i < 50; ++i) {
    Eigen::Index arg = 0;
    conf += probs.row(i).maxCoeff(&arg);
    acc += (arg == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
  }
  CHECK(ece(probs, labels) ==
        doctest::Approx(std::abs(acc - conf) / 50.0).epsilon(1e-12));
}

TEST_CASE("metrics report invariants") {
  const Matrix probs = random_probs(300, 8, 55);
  const std::vector<int> labels = random_labels(300, 8, 56);
  const MetricsReport report = evaluate_metrics(probs, labels);
  CHECK(report.top1 <= report.top5);
  CHECK(report.top5 <= 100.0);
  CHECK(report.nlpd >= 0.0);
  CHECK(report.ece >= 0.0);
  CHECK(report.ece <= 1.0);
  CHECK(report.n == 300);
}

TEST_CASE("scatter export rows and summary") {
  Matrix exit1(2, 4);
  exit1 << 1.0, 0.0, 0.0, 0.0,       // confident and correct
      0.25, 0.25, 0.25, 0.25;        // uniform, wrong-ish
  const std::vector<int> labels = {0, 1};
  const ScatterSummary summary = scatter_export({exit1}, labels);
  REQUIRE(summary.rows.size() == 2);
  CHECK(summary.rows[0].entropy_nats == doctest::Approx(0.0));
  CHECK(summary.rows[0].error == doctest::Approx(0.0));
  CHECK(summary.rows[0].correct);
  CHECK(summary.rows[1].entropy_nats ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(summary.rows[1].error == doctest::Approx(0.75).epsilon(1e-12));

  // Counting oracle for the error > 0.5 proportion.
  std::size_t high = 0;
  for (const ScatterRow& row : summary.rows) {
    if (row.error > 0.5) ++high;
  }
  CHECK(summary.high_error_fraction[0] ==
        doctest::Approx(static_cast<double>(high) / 2.0));
}
