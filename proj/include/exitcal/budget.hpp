#pragma once

#include "exitcal/calibration.hpp"
#include "exitcal/flops.hpp"
#include "exitcal/metrics.hpp"

#include <string>
#include <vector>

namespace exitcal {

enum class PredictorMode { vanilla, laplace, mie, mie_laplace };

std::string to_string(PredictorMode mode);
PredictorMode predictor_mode_from_string(const std::string& name);

/// Per-exit predictions of one mode over a fixed set of dataset rows.
/// For the ensembling modes, per_exit[k] holds the prefix-k ensemble.
struct PredictionSet {
  PredictorMode mode = PredictorMode::vanilla;
  std::vector<std::size_t> rows;
  std::vector<Matrix> per_exit;  // [k]: rows x c
};

/// Builds the per-exit predictions for a mode. Laplace-based modes take
/// their per-exit (T, sigma) from `calib`; vanilla modes ignore it.
PredictionSet build_predictions(const LaplaceContext& ctx, PredictorMode mode,
                                const std::vector<std::size_t>& rows,
                                const CalibrationResult* calib = nullptr);

struct BudgetPlan {
  PredictorMode mode = PredictorMode::vanilla;
  double budget = 0.0;                  // B, backbone FLOPs per sample
  std::vector<double> exit_fractions;   // q, sums to 1
  std::vector<double> thresholds;       // t_k; last entry 0
  double expected_val_cost = 0.0;       // mean backbone FLOPs on validation
  std::vector<std::string> warnings;
};

/// Target exit fractions for a budget: a geometric exit process with
/// stop probability rho per stage (all remaining mass on the last exit),
/// with rho bisected so the expected cost matches clamp(B, w_1, w_last).
std::vector<double> solve_exit_distribution(const std::vector<double>& w,
                                            double budget);

/// Sequential validation-quantile thresholds realizing the fractions q.
/// confidences(i, k) is validation sample i's confidence at exit k.
/// A zero fraction stores a just-above-one sentinel so nothing exits.
std::vector<double> compute_thresholds(const Matrix& confidences,
                                       const std::vector<double>& q,
                                       std::vector<std::string>* warnings = nullptr);

/// Thresholds plus realized validation cost for one mode and budget.
BudgetPlan make_plan(const PredictionSet& val_predictions,
                     const std::vector<double>& w, double budget);

struct RoutingSample {
  int exit = 0;  // 1-based exit taken
  double confidence = 0.0;
  Vector prediction;       // score-mode prediction at the exit taken
  double backbone_cost = 0.0;
  double charged_cost = 0.0;  // backbone + decide-mode overhead
};

struct RoutingTrace {
  PredictorMode decide_mode = PredictorMode::vanilla;
  PredictorMode score_mode = PredictorMode::vanilla;
  std::vector<RoutingSample> samples;
  double mean_backbone_cost = 0.0;
  double mean_charged_cost = 0.0;
};

/// Per-exit charged overhead of a decision mode under a convention.
std::vector<long long> mode_overheads(PredictorMode mode, int n_exits,
                                      const std::vector<long long>& feature_dims,
                                      int num_classes, int n_mc,
                                      FlopConvention conv);

/// Routes every row through the exits: leave at the first k with
/// confidence >= t_k, else at the last exit. `score` may present a second
/// prediction source (decide with one mode, report another); that
/// requires allow_cross unless the modes agree.
RoutingTrace route(const PredictionSet& decide, const BudgetPlan& plan,
                   const std::vector<double>& w,
                   const std::vector<long long>& overheads,
                   const PredictionSet* score = nullptr,
                   bool allow_cross = false);

struct CurveRecord {
  std::string mode_label;
  double budget = 0.0;
  double mean_cost = 0.0;  // charged FLOPs per routed test sample
  MetricsReport metrics;
};

/// One record per (mode, budget): plan on validation, route the test
/// split, evaluate. Laplace-based modes read their hyperparameters from
/// the matching CalibrationResult.
std::vector<CurveRecord> sweep_budgets(
    const LaplaceContext& ctx, const std::vector<PredictorMode>& modes,
    const std::vector<double>& budgets,
    const CalibrationResult* laplace_calib,
    const CalibrationResult* mie_laplace_calib);

/// Fig-style cross experiment: thresholds and exits from `decide_mode`,
/// metrics from `score_mode` predictions.
std::vector<CurveRecord> sweep_cross(const LaplaceContext& ctx,
                                     PredictorMode decide_mode,
                                     PredictorMode score_mode,
                                     const std::vector<double>& budgets,
                                     const CalibrationResult* laplace_calib,
                                     const CalibrationResult* mie_laplace_calib);

}  // namespace exitcal
