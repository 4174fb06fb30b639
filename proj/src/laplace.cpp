#include "exitcal/laplace.hpp"

#include "exitcal/flops.hpp"

#include <cmath>
#include <stdexcept>

namespace exitcal {

namespace {

// z = mean + factor * g for a lower-triangular factor, with operation
// accounting that matches the closed-form cost model.
Vector shift_scale_draw(const Vector& mean, const Matrix& factor,
                        const Vector& g) {
  const Eigen::Index c = mean.size();
  Vector z = mean + factor.triangularView<Eigen::Lower>() * g;
  count_fma(c * (c + 1) / 2);
  count_add(c);
  return z;
}

}  // namespace

Matrix softmax_ggn_factor(const ProbVector& probs) {
  Matrix f = -probs * probs.transpose();
  f.diagonal() += probs;
  return f;
}

KfacPosterior fit_kfac(const Matrix& aug_features, const Matrix& map_probs,
                       const Matrix& map_weights, const Vector& map_bias,
                       double sigma) {
  const Eigen::Index n = aug_features.rows();
  const Eigen::Index p_aug = aug_features.cols();
  const Eigen::Index c = map_probs.cols();
  if (n < 1) throw std::invalid_argument("fit_kfac: no samples");
  if (map_probs.rows() != n) {
    throw std::invalid_argument("fit_kfac: features/probs misaligned");
  }
  if (map_weights.rows() != p_aug - 1 || map_weights.cols() != c ||
      map_bias.size() != c) {
    throw std::invalid_argument("fit_kfac: MAP parameter shapes mismatch");
  }
  if (!(sigma > 0.0)) {
    throw std::invalid_argument("fit_kfac: sigma must be positive");
  }
  if (((aug_features.col(p_aug - 1).array() - 1.0).abs() > 1e-9).any()) {
    throw std::invalid_argument(
        "fit_kfac: last feature column must be the bias constant 1");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!is_prob_vector(map_probs.row(i).transpose(), 1e-6)) {
      throw std::invalid_argument("fit_kfac: map_probs row is not a ProbVector");
    }
  }

  const double damping = 1.0 / sigma;
  Matrix a = (aug_features.transpose() * aug_features) /
             static_cast<double>(n);
  a.diagonal().array() += damping;

  Matrix g = Matrix::Zero(c, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    g += softmax_ggn_factor(map_probs.row(i).transpose());
  }
  g /= static_cast<double>(n);
  g.diagonal().array() += damping;

  KfacPosterior post;
  try {
    post.feature_cov = spd_inverse(a);
    post.output_cov = spd_inverse(g);
    post.output_cov_chol = cholesky(post.output_cov);
  } catch (const DecompositionError& e) {
    throw std::runtime_error(std::string("fit_kfac: factor not invertible "
                                         "after damping (") +
                             e.what() + ")");
  }
  post.map_weights.resize(p_aug, c);
  post.map_weights.topRows(p_aug - 1) = map_weights;
  post.map_weights.row(p_aug - 1) = map_bias.transpose();
  post.prior_sigma = sigma;
  return post;
}

PredictiveGaussian predictive(const KfacPosterior& post,
                              const Vector& features) {
  const Eigen::Index p = post.feature_dim();
  const Eigen::Index c = post.num_classes();
  if (features.size() != p) {
    throw std::invalid_argument("predictive: feature dimension mismatch");
  }

  PredictiveGaussian pred;
  pred.posterior = &post;
  // Per-class dots so the mean matches the plain W^T phi + b path exactly.
  pred.mean.resize(c);
  for (Eigen::Index j = 0; j < c; ++j) {
    pred.mean(j) =
        post.map_weights.col(j).head(p).dot(features) + post.map_weights(p, j);
  }

  Vector aug(p + 1);
  aug.head(p) = features;
  aug(p) = 1.0;
  const Vector v = post.feature_cov * aug;
  count_fma((p + 1) * (p + 1));
  double s = aug.dot(v);
  count_fma(p + 1);
  if (s < -1e-12) {
    throw std::runtime_error(
        "predictive: negative feature variance; covariance factor not PSD");
  }
  pred.feature_variance = std::max(s, 0.0);
  return pred;
}

ProbVector sample_efficient(const PredictiveGaussian& pred, int n_mc,
                            const GaussianStream& stream) {
  if (n_mc < 1) throw std::invalid_argument("sample_efficient: n_mc < 1");
  const KfacPosterior& post = *pred.posterior;
  const double t = post.temperature;
  if (pred.feature_variance == 0.0) return softmax(pred.mean, t);

  const Eigen::Index c = pred.mean.size();
  const double scale = std::sqrt(pred.feature_variance);
  Matrix scaled_chol = scale * post.output_cov_chol;
  count_mul(c * (c + 1) / 2);

  Vector total = Vector::Zero(c);
  for (int l = 0; l < n_mc; ++l) {
    const Vector g = draw_gaussian(
        stream.with_draw(static_cast<std::uint64_t>(l)), c);
    total += softmax(shift_scale_draw(pred.mean, scaled_chol, g), t);
  }
  return total / static_cast<double>(n_mc);
}

ProbVector sample_efficient(const PredictiveGaussian& pred,
                            const Matrix& premultiplied_draws) {
  const KfacPosterior& post = *pred.posterior;
  const double t = post.temperature;
  if (premultiplied_draws.cols() < 1) {
    throw std::invalid_argument("sample_efficient: no draws");
  }
  if (pred.feature_variance == 0.0) return softmax(pred.mean, t);
  const Eigen::Index c = pred.mean.size();
  if (premultiplied_draws.rows() != c) {
    throw std::invalid_argument("sample_efficient: draw dimension mismatch");
  }
  const double scale = std::sqrt(pred.feature_variance);
  Vector total = Vector::Zero(c);
  for (Eigen::Index l = 0; l < premultiplied_draws.cols(); ++l) {
    const Vector z = pred.mean + scale * premultiplied_draws.col(l);
    count_fma(c);
    total += softmax(z, t);
  }
  return total / static_cast<double>(premultiplied_draws.cols());
}

ProbVector sample_naive(const PredictiveGaussian& pred, int n_mc,
                        const GaussianStream& stream) {
  if (n_mc < 1) throw std::invalid_argument("sample_naive: n_mc < 1");
  const KfacPosterior& post = *pred.posterior;
  const double t = post.temperature;
  if (pred.feature_variance == 0.0) return softmax(pred.mean, t);

  const Eigen::Index c = pred.mean.size();
  const Matrix covariance = pred.feature_variance * post.output_cov;
  count_mul(c * c);
  const Matrix chol = cholesky(covariance);

  Vector total = Vector::Zero(c);
  for (int l = 0; l < n_mc; ++l) {
    const Vector g = draw_gaussian(
        stream.with_draw(static_cast<std::uint64_t>(l)), c);
    total += softmax(shift_scale_draw(pred.mean, chol, g), t);
  }
  return total / static_cast<double>(n_mc);
}

ProbVector map_predict(const Matrix& weights, const Vector& bias,
                       const Vector& features, double temperature) {
  if (weights.rows() != features.size() || weights.cols() != bias.size()) {
    throw std::invalid_argument("map_predict: shape mismatch");
  }
  Vector z(bias.size());
  for (Eigen::Index j = 0; j < bias.size(); ++j) {
    z(j) = weights.col(j).dot(features) + bias(j);
  }
  return softmax(z, temperature);
}

Matrix sample_presoftmax_draws(const PredictiveGaussian& pred, int n_mc,
                               const GaussianStream& stream) {
  const KfacPosterior& post = *pred.posterior;
  const Eigen::Index c = pred.mean.size();
  const double scale = std::sqrt(pred.feature_variance);
  const Matrix scaled_chol = scale * post.output_cov_chol;
  Matrix draws(c, n_mc);
  for (int l = 0; l < n_mc; ++l) {
    const Vector g = draw_gaussian(
        stream.with_draw(static_cast<std::uint64_t>(l)), c);
    draws.col(l) =
        pred.mean + scaled_chol.triangularView<Eigen::Lower>() * g;
  }
  return draws;
}

Matrix premultiply_draws(const KfacPosterior& post, int n_mc,
                         std::uint64_t seed, std::uint64_t exit_index) {
  const Eigen::Index c = post.num_classes();
  Matrix out(c, n_mc);
  for (int l = 0; l < n_mc; ++l) {
    const GaussianStream s{seed, kSharedDrawSample, exit_index,
                           static_cast<std::uint64_t>(l)};
    out.col(l) =
        post.output_cov_chol.triangularView<Eigen::Lower>() * draw_gaussian(s, c);
  }
  return out;
}

}  // namespace exitcal
