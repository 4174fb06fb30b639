#pragma once

#include "exitcal/backbone.hpp"
#include "exitcal/budget.hpp"
#include "exitcal/bundle_io.hpp"
#include "exitcal/calibration.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace exitcal {

struct RunConfig {
  std::filesystem::path out_dir;
  std::uint64_t seed = 1;
  int n_mc = 50;
  unsigned threads = 0;  // 0 = hardware default
  bool shared_draws = false;

  // Synthetic benchmark.
  int n_samples = 800;
  int input_dim = 16;
  int num_classes = 8;
  double cluster_spread = 1.0;
  ToyModelConfig toy;  // seed is overridden from `seed`

  HyperGrid grid = HyperGrid::defaults();
  std::vector<double> budgets;  // empty: 20 points spanning [w_1, w_last]
  std::vector<PredictorMode> sweep_modes = {
      PredictorMode::vanilla, PredictorMode::laplace, PredictorMode::mie,
      PredictorMode::mie_laplace};
  PredictorMode scatter_mode = PredictorMode::mie_laplace;

  // Optional cross experiment: decide with one mode, score with another.
  std::optional<PredictorMode> cross_decide;
  std::optional<PredictorMode> cross_score;
};

/// Evenly spaced budgets covering [w_1, w_last].
std::vector<double> default_budgets(const std::vector<long long>& cum_flops,
                                    int count = 20);

// CSV emission. Headers are part of the format contract:
//   budget_curves.csv   mode,budget_flops,mean_cost_flops,top1,top5,nlpd,ece
//   scatter.csv         sample_id,exit,entropy,error,correct
//   overhead_report.csv exit,p,c,backbone_flops,naive_overhead,
//                       efficient_overhead,naive_rel,efficient_rel
//   calibration.csv     mode,exit,T,sigma,val_nlpd
void write_budget_csv(const std::vector<CurveRecord>& records,
                      const std::filesystem::path& file);
void write_scatter_csv(const ScatterSummary& scatter,
                       const std::filesystem::path& file);
void write_overhead_csv(const std::vector<OverheadRow>& rows,
                        const std::filesystem::path& file);

struct DemoArtifacts {
  std::filesystem::path bundle_dir;
  std::filesystem::path posteriors_dir;
  std::filesystem::path calibration_csv;
  std::filesystem::path budget_csv;
  std::filesystem::path scatter_csv;
  std::filesystem::path overhead_csv;
};

/// End-to-end: generate, train, extract, fit, calibrate, sweep, export.
/// Deterministic in (config, seed) for any thread count.
DemoArtifacts run_demo(const RunConfig& config);

}  // namespace exitcal
