#pragma once

#include "exitcal/numerics.hpp"

#include <cstdint>

namespace exitcal {

/// Last-layer Laplace posterior of one exit in Kronecker-factored form.
/// The bias is absorbed as the last row of the augmented weight matrix,
/// which acts on phi_hat = (phi^T, 1)^T.
struct KfacPosterior {
  Matrix map_weights;       // (p+1) x c, bias in the last row
  Matrix feature_cov;       // (p+1) x (p+1), feature-side covariance factor
  Matrix output_cov;        // c x c, output-side covariance factor
  Matrix output_cov_chol;   // lower Cholesky factor of output_cov
  double prior_sigma = 2.0;
  double temperature = 1.0;

  Eigen::Index feature_dim() const { return map_weights.rows() - 1; }
  Eigen::Index num_classes() const { return map_weights.cols(); }
};

/// Output-side Gauss-Newton factor of a softmax likelihood at one sample:
/// diag(p) - p p^T.
Matrix softmax_ggn_factor(const ProbVector& probs);

/// Fits the Kronecker-factored posterior from augmented training features
/// (n x (p+1), last column all ones) and the MAP softmax outputs on the
/// same rows. The prior precision 1/sigma^2 is split as (1/sigma) I added
/// to each precision factor before inversion.
KfacPosterior fit_kfac(const Matrix& aug_features, const Matrix& map_probs,
                       const Matrix& map_weights, const Vector& map_bias,
                       double sigma);

/// Per-sample pre-softmax Gaussian: mean and the scalar feature variance
/// phi_hat^T SigmaV phi_hat, sharing the posterior's Cholesky factor.
struct PredictiveGaussian {
  Vector mean;                   // c
  double feature_variance = 0;   // s >= 0
  const KfacPosterior* posterior = nullptr;  // must outlive this value
};

/// Projects the posterior to the pre-softmax output Gaussian for one
/// feature vector (length p, not augmented).
PredictiveGaussian predictive(const KfacPosterior& post, const Vector& features);

/// Monte-Carlo predictive via the precomputed Cholesky factor:
/// mean of softmax((mu + sqrt(s) L g) / T) over keyed draws.
ProbVector sample_efficient(const PredictiveGaussian& pred, int n_mc,
                            const GaussianStream& stream);

/// Same, with caller-provided pre-multiplied draws: column l is L g_l.
ProbVector sample_efficient(const PredictiveGaussian& pred,
                            const Matrix& premultiplied_draws);

/// Monte-Carlo predictive materializing the full covariance s * SigmaU and
/// factorizing it per sample; consumes the same keyed draws as the
/// efficient path, so the two agree up to factorization round-off.
ProbVector sample_naive(const PredictiveGaussian& pred, int n_mc,
                        const GaussianStream& stream);

/// Deterministic prediction softmax((W^T phi + b) / T).
ProbVector map_predict(const Matrix& weights, const Vector& bias,
                       const Vector& features, double temperature = 1.0);

/// Raw pre-softmax draws z = mu + sqrt(s) L g as columns; test support.
Matrix sample_presoftmax_draws(const PredictiveGaussian& pred, int n_mc,
                               const GaussianStream& stream);

/// Pre-multiplied shared draws L g_l for one exit, keyed independently of
/// any sample (sample key = kSharedDrawSample).
Matrix premultiply_draws(const KfacPosterior& post, int n_mc,
                         std::uint64_t seed, std::uint64_t exit_index);

}  // namespace exitcal
