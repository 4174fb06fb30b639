#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace exitcal {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// A ProbVector is a Vector whose entries are nonnegative and sum to one
// within 1e-9. Producers (softmax, samplers, ensembling) guarantee this;
// consumers may check with is_prob_vector.
using ProbVector = Eigen::VectorXd;

bool is_prob_vector(const Vector& p, double tol = 1e-9);

/// Thrown when a Cholesky factorization hits a non-positive pivot.
class DecompositionError : public std::runtime_error {
 public:
  DecompositionError(const std::string& what, Eigen::Index pivot)
      : std::runtime_error(what), pivot_(pivot) {}
  Eigen::Index pivot_index() const { return pivot_; }

 private:
  Eigen::Index pivot_;
};

template <typename Derived>
double log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  if (v.size() == 0) {
    throw std::invalid_argument("log_sum_exp: empty input");
  }
  const double shift = v.maxCoeff();
  return shift + std::log((v.derived().array() - shift).exp().sum());
}

/// softmax(v / T) with max-shift for stability. T > 0.
template <typename Derived>
ProbVector softmax(const Eigen::MatrixBase<Derived>& logits,
                   double temperature = 1.0) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("softmax: temperature must be positive");
  }
  const Eigen::ArrayXd scaled = logits.derived().array() / temperature;
  const double shift = scaled.maxCoeff();
  Eigen::ArrayXd ex = (scaled - shift).exp();
  return ex / ex.sum();
}

/// Shannon entropy in nats, with the 0 log 0 := 0 convention.
template <typename Derived>
double entropy(const Eigen::MatrixBase<Derived>& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs.derived()(i);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Lower-triangular L with L L^T = A. The input must be symmetric within
/// `symmetry_tol`; it is symmetrized as (A + A^T)/2 before factorization.
/// A non-positive pivot throws DecompositionError naming its index.
Matrix cholesky(const Matrix& a, double symmetry_tol = 1e-10);

/// Inverse of a symmetric positive-definite matrix via its Cholesky
/// factor; the result is symmetrized to absorb round-off.
Matrix spd_inverse(const Matrix& a);

// ---------------------------------------------------------------------------
// Deterministic counter-based Gaussian stream.
//
// Every draw is a pure function of (seed, sample, exit, draw, lane), so the
// same key always yields the same value regardless of thread schedule or
// call order.
// ---------------------------------------------------------------------------

struct GaussianStream {
  std::uint64_t seed = 0;
  std::uint64_t sample = 0;  // sample index
  std::uint64_t exit = 0;    // exit index
  std::uint64_t draw = 0;    // Monte-Carlo draw index

  GaussianStream with_draw(std::uint64_t d) const {
    GaussianStream s = *this;
    s.draw = d;
    return s;
  }
  GaussianStream with_sample(std::uint64_t i) const {
    GaussianStream s = *this;
    s.sample = i;
    return s;
  }
};

/// Sentinel sample index marking draws shared across samples.
inline constexpr std::uint64_t kSharedDrawSample = ~std::uint64_t{0};

/// n independent standard-normal values for the stream's key.
Vector draw_gaussian(const GaussianStream& stream, Eigen::Index n);

/// Single keyed standard-normal value (lane = element index).
double normal_at(const GaussianStream& stream, std::uint64_t lane);

/// Keyed 64-bit value; used for shuffles and other non-Gaussian choices.
std::uint64_t keyed_u64(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                        std::uint64_t c, std::uint64_t d);

/// Stable sub-seed derivation from a component name, so one master seed
/// drives every stage without cross-talk.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component);

}  // namespace exitcal
