#pragma once

#include "exitcal/bundle.hpp"
#include "exitcal/laplace.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace exitcal {

struct HyperGrid {
  std::vector<double> temperatures;
  std::vector<double> sigmas;

  // Grids used across all models when searching.
  static HyperGrid defaults();
  void validate() const;
};

inline constexpr double kDefaultTemperature = 1.0;
inline constexpr double kDefaultSigma = 2.0;

enum class SearchMode {
  independent,     // (T, sigma) jointly, one exit at a time
  sequential_mie,  // (T, sigma) per exit on the ensemble objective
  temperature_only,
  sigma_only,
  vanilla_temperature,  // temperature on the plain softmax predictor
};

std::string to_string(SearchMode mode);

struct ExitChoice {
  double temperature = kDefaultTemperature;
  double sigma = kDefaultSigma;
  double val_nlpd = 0.0;
};

struct CalibrationResult {
  SearchMode mode = SearchMode::independent;
  std::vector<ExitChoice> exits;
};

/// Cached per-exit sufficient statistics so sigma refits only swap the
/// damping before re-inverting the factors.
class LaplaceContext {
 public:
  /// shared_draws: reuse one pre-multiplied draw set per exit across all
  /// samples instead of per-sample keyed draws.
  LaplaceContext(const FeatureBundle& bundle, int n_mc, std::uint64_t seed,
                 bool shared_draws = false);

  const FeatureBundle& bundle() const { return *bundle_; }
  int n_mc() const { return n_mc_; }
  std::uint64_t seed() const { return seed_; }
  bool shared_draws() const { return shared_draws_; }

  /// Posterior of exit k (0-based) at the given hyperparameters.
  KfacPosterior fit(int k, double sigma, double temperature) const;

  /// Per-sample Laplace probabilities at exit k for the given dataset
  /// rows, keyed by global sample index.
  Matrix laplace_probs(int k, const KfacPosterior& post,
                       const std::vector<std::size_t>& rows) const;

  /// Plain softmax probabilities at exit k.
  Matrix vanilla_probs(int k, const std::vector<std::size_t>& rows,
                       double temperature) const;

 private:
  const FeatureBundle* bundle_;
  int n_mc_;
  std::uint64_t seed_;
  bool shared_draws_;
  std::vector<Matrix> feature_moment_;  // per exit: (1/n) Phi^T Phi, augmented
  std::vector<Matrix> output_moment_;   // per exit: (1/n) sum GGN factors
};

/// Exhaustive search over the grid for one exit, minimizing validation
/// NLPD; ties break toward smaller T, then smaller sigma.
ExitChoice grid_search_exit(const LaplaceContext& ctx, int k,
                            const HyperGrid& grid,
                            SearchMode mode = SearchMode::independent);

/// Sequential per-exit search on the ensemble objective: earlier exits'
/// choices stay frozen while exit k's pair is optimized.
CalibrationResult grid_search_sequential_mie(const LaplaceContext& ctx,
                                             const HyperGrid& grid);

/// Temperature-only search; vanilla = true searches the plain softmax
/// predictor, otherwise the Laplace predictor with sigma pinned to 2.0.
ExitChoice temperature_only(const LaplaceContext& ctx, int k,
                            const HyperGrid& grid, bool vanilla = false);

/// Independent search over all exits with the given mode.
CalibrationResult calibrate_independent(const LaplaceContext& ctx,
                                        const HyperGrid& grid,
                                        SearchMode mode = SearchMode::independent);

}  // namespace exitcal
