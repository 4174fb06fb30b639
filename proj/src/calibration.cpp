#include "exitcal/calibration.hpp"

#include "exitcal/metrics.hpp"
#include "exitcal/parallel.hpp"

#include <algorithm>
#include <stdexcept>

namespace exitcal {

HyperGrid HyperGrid::defaults() {
  return HyperGrid{
      {0.3, 0.5, 0.7, 1.0, 1.3, 1.5, 1.7, 2.0, 2.5, 3.0},
      {0.5, 0.7, 1.0, 1.3, 1.5, 1.7, 2.0, 2.5, 3.0, 4.0},
  };
}

void HyperGrid::validate() const {
  auto check = [](const std::vector<double>& values, const char* name) {
    if (values.empty()) {
      throw std::invalid_argument(std::string("grid: empty ") + name);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!(values[i] > 0.0)) {
        throw std::invalid_argument(std::string("grid: non-positive ") + name);
      }
      if (i > 0 && !(values[i] > values[i - 1])) {
        throw std::invalid_argument(std::string("grid: ") + name +
                                    " not strictly increasing");
      }
    }
  };
  check(temperatures, "temperatures");
  check(sigmas, "sigmas");
}

std::string to_string(SearchMode mode) {
  switch (mode) {
    case SearchMode::independent: return "independent";
    case SearchMode::sequential_mie: return "sequential-mie";
    case SearchMode::temperature_only: return "T-only";
    case SearchMode::sigma_only: return "sigma-only";
    case SearchMode::vanilla_temperature: return "vanilla-T";
  }
  return "unknown";
}

namespace {

Matrix augmented_rows(const FeatureBundle::Exit& exit,
                      const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), exit.features.cols() + 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)).head(exit.features.cols()) =
        exit.features.row(static_cast<Eigen::Index>(rows[i]));
    out(static_cast<Eigen::Index>(i), exit.features.cols()) = 1.0;
  }
  return out;
}

std::vector<int> labels_at(const FeatureBundle& bundle,
                           const std::vector<std::size_t>& rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = bundle.labels[rows[i]];
  return out;
}

}  // namespace

LaplaceContext::LaplaceContext(const FeatureBundle& bundle, int n_mc,
                               std::uint64_t seed, bool shared_draws)
    : bundle_(&bundle), n_mc_(n_mc), seed_(seed), shared_draws_(shared_draws) {
  if (n_mc < 1) throw std::invalid_argument("LaplaceContext: n_mc < 1");
  bundle.validate();
  const std::vector<std::size_t> train = bundle.split_indices(SplitTag::train);
  if (train.empty()) {
    throw std::invalid_argument("LaplaceContext: empty training split");
  }
  const double inv_n = 1.0 / static_cast<double>(train.size());
  for (int k = 0; k < bundle.n_exits(); ++k) {
    const FeatureBundle::Exit& exit = bundle.exits[static_cast<std::size_t>(k)];
    const Matrix aug = augmented_rows(exit, train);
    feature_moment_.push_back(inv_n * (aug.transpose() * aug));

    Matrix g = Matrix::Zero(bundle.num_classes, bundle.num_classes);
    for (const std::size_t row : train) {
      g += softmax_ggn_factor(map_predict(
          exit.weights, exit.bias,
          exit.features.row(static_cast<Eigen::Index>(row)).transpose(), 1.0));
    }
    output_moment_.push_back(inv_n * g);
  }
}

KfacPosterior LaplaceContext::fit(int k, double sigma,
                                  double temperature) const {
  if (!(sigma > 0.0) || !(temperature > 0.0)) {
    throw std::invalid_argument("fit: hyperparameters must be positive");
  }
  const FeatureBundle::Exit& exit = bundle_->exits[static_cast<std::size_t>(k)];
  const double damping = 1.0 / sigma;

  Matrix a = feature_moment_[static_cast<std::size_t>(k)];
  a.diagonal().array() += damping;
  Matrix g = output_moment_[static_cast<std::size_t>(k)];
  g.diagonal().array() += damping;

  KfacPosterior post;
  post.feature_cov = spd_inverse(a);
  post.output_cov = spd_inverse(g);
  post.output_cov_chol = cholesky(post.output_cov);

  post.map_weights.resize(exit.weights.rows() + 1, exit.weights.cols());
  post.map_weights.topRows(exit.weights.rows()) = exit.weights;
  post.map_weights.bottomRows(1) = exit.bias.transpose();
  post.prior_sigma = sigma;
  post.temperature = temperature;
  return post;
}

Matrix LaplaceContext::laplace_probs(int k, const KfacPosterior& post,
                                     const std::vector<std::size_t>& rows) const {
  const FeatureBundle::Exit& exit = bundle_->exits[static_cast<std::size_t>(k)];
  Matrix probs(static_cast<Eigen::Index>(rows.size()), bundle_->num_classes);
  Matrix shared;
  if (shared_draws_) {
    shared = premultiply_draws(post, n_mc_, seed_, static_cast<std::uint64_t>(k));
  }
  parallel_for(rows.size(), [&](std::size_t i) {
    const Vector phi =
        exit.features.row(static_cast<Eigen::Index>(rows[i])).transpose();
    const PredictiveGaussian pred = predictive(post, phi);
    if (shared_draws_) {
      probs.row(static_cast<Eigen::Index>(i)) =
          sample_efficient(pred, shared).transpose();
    } else {
      const GaussianStream stream{seed_, static_cast<std::uint64_t>(rows[i]),
                                  static_cast<std::uint64_t>(k), 0};
      probs.row(static_cast<Eigen::Index>(i)) =
          sample_efficient(pred, n_mc_, stream).transpose();
    }
  });
  return probs;
}

Matrix LaplaceContext::vanilla_probs(int k, const std::vector<std::size_t>& rows,
                                     double temperature) const {
  const FeatureBundle::Exit& exit = bundle_->exits[static_cast<std::size_t>(k)];
  Matrix probs(static_cast<Eigen::Index>(rows.size()), bundle_->num_classes);
  parallel_for(rows.size(), [&](std::size_t i) {
    probs.row(static_cast<Eigen::Index>(i)) =
        map_predict(exit.weights, exit.bias,
                    exit.features.row(static_cast<Eigen::Index>(rows[i]))
                        .transpose(),
                    temperature)
            .transpose();
  });
  return probs;
}

namespace {

struct Candidate {
  double temperature;
  double sigma;
};

std::vector<Candidate> candidates_for(const HyperGrid& grid, SearchMode mode) {
  std::vector<Candidate> out;
  switch (mode) {
    case SearchMode::independent:
    case SearchMode::sequential_mie:
      for (const double t : grid.temperatures) {
        for (const double s : grid.sigmas) out.push_back({t, s});
      }
      break;
    case SearchMode::temperature_only:
    case SearchMode::vanilla_temperature:
      for (const double t : grid.temperatures) {
        out.push_back({t, kDefaultSigma});
      }
      break;
    case SearchMode::sigma_only:
      for (const double s : grid.sigmas) {
        out.push_back({kDefaultTemperature, s});
      }
      break;
  }
  return out;
}

// Candidates are generated in (T ascending, sigma ascending) order, so a
// strict improvement scan realizes the smaller-T-then-smaller-sigma
// tie-break.
ExitChoice argmin_choice(const std::vector<Candidate>& candidates,
                         const std::vector<double>& objective) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (objective[i] < objective[best]) best = i;
  }
  return ExitChoice{candidates[best].temperature, candidates[best].sigma,
                    objective[best]};
}

}  // namespace

ExitChoice grid_search_exit(const LaplaceContext& ctx, int k,
                            const HyperGrid& grid, SearchMode mode) {
  grid.validate();
  if (mode == SearchMode::sequential_mie) {
    throw std::invalid_argument(
        "grid_search_exit: use grid_search_sequential_mie for the ensemble "
        "objective");
  }
  const std::vector<std::size_t> val =
      ctx.bundle().split_indices(SplitTag::val);
  if (val.empty()) {
    throw std::invalid_argument("grid_search_exit: empty validation split");
  }
  const std::vector<int> labels = labels_at(ctx.bundle(), val);
  const std::vector<Candidate> candidates = candidates_for(grid, mode);

  std::vector<double> objective(candidates.size(), 0.0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Candidate& cand = candidates[i];
    Matrix probs;
    if (mode == SearchMode::vanilla_temperature) {
      probs = ctx.vanilla_probs(k, val, cand.temperature);
    } else {
      const KfacPosterior post = ctx.fit(k, cand.sigma, cand.temperature);
      probs = ctx.laplace_probs(k, post, val);
    }
    objective[i] = nlpd(probs, labels);
  }
  return argmin_choice(candidates, objective);
}

CalibrationResult grid_search_sequential_mie(const LaplaceContext& ctx,
                                             const HyperGrid& grid) {
  grid.validate();
  const FeatureBundle& bundle = ctx.bundle();
  const std::vector<std::size_t> val = bundle.split_indices(SplitTag::val);
  if (val.empty()) {
    throw std::invalid_argument(
        "grid_search_sequential_mie: empty validation split");
  }
  const std::vector<int> labels = labels_at(bundle, val);
  const std::vector<Candidate> candidates =
      candidates_for(grid, SearchMode::sequential_mie);

  CalibrationResult result;
  result.mode = SearchMode::sequential_mie;

  Matrix frozen_sum = Matrix::Zero(static_cast<Eigen::Index>(val.size()),
                                   bundle.num_classes);
  double frozen_weight = 0.0;

  for (int k = 0; k < bundle.n_exits(); ++k) {
    const double w =
        static_cast<double>(bundle.exits[static_cast<std::size_t>(k)].cum_flops);
    std::vector<double> objective(candidates.size(), 0.0);
    std::vector<Matrix> member(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const Candidate& cand = candidates[i];
      const KfacPosterior post = ctx.fit(k, cand.sigma, cand.temperature);
      member[i] = ctx.laplace_probs(k, post, val);
      const Matrix ensemble =
          (frozen_sum + w * member[i]) / (frozen_weight + w);
      objective[i] = nlpd(ensemble, labels);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
      if (objective[i] < objective[best]) best = i;
    }
    result.exits.push_back(ExitChoice{candidates[best].temperature,
                                      candidates[best].sigma,
                                      objective[best]});
    frozen_sum += w * member[best];
    frozen_weight += w;
  }
  return result;
}

ExitChoice temperature_only(const LaplaceContext& ctx, int k,
                            const HyperGrid& grid, bool vanilla) {
  return grid_search_exit(ctx, k, grid,
                          vanilla ? SearchMode::vanilla_temperature
                                  : SearchMode::temperature_only);
}

CalibrationResult calibrate_independent(const LaplaceContext& ctx,
                                        const HyperGrid& grid,
                                        SearchMode mode) {
  CalibrationResult result;
  result.mode = mode;
  for (int k = 0; k < ctx.bundle().n_exits(); ++k) {
    result.exits.push_back(grid_search_exit(ctx, k, grid, mode));
  }
  return result;
}

}  // namespace exitcal
