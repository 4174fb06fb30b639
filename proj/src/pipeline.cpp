#include "exitcal/pipeline.hpp"

#include "exitcal/flops.hpp"
#include "exitcal/parallel.hpp"

#include <cstdio>
#include <fstream>

namespace exitcal {

namespace fs = std::filesystem;

std::vector<double> default_budgets(const std::vector<long long>& cum_flops,
                                    int count) {
  if (cum_flops.empty() || count < 1) {
    throw std::invalid_argument("default_budgets: bad inputs");
  }
  const double lo = static_cast<double>(cum_flops.front());
  const double hi = static_cast<double>(cum_flops.back());
  std::vector<double> budgets;
  if (count == 1) {
    budgets.push_back(hi);
    return budgets;
  }
  for (int i = 0; i < count; ++i) {
    budgets.push_back(lo + (hi - lo) * static_cast<double>(i) /
                               static_cast<double>(count - 1));
  }
  return budgets;
}

namespace {

std::ofstream open_csv(const fs::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + file.string());
  return out;
}

template <typename Fn>
auto stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("stage ") + name + ": " + e.what());
  }
}

}  // namespace

void write_budget_csv(const std::vector<CurveRecord>& records,
                      const fs::path& file) {
  std::ofstream out = open_csv(file);
  out << "mode,budget_flops,mean_cost_flops,top1,top5,nlpd,ece\n";
  char line[256];
  for (const CurveRecord& r : records) {
    std::snprintf(line, sizeof(line), "%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  r.mode_label.c_str(), r.budget, r.mean_cost, r.metrics.top1,
                  r.metrics.top5, r.metrics.nlpd, r.metrics.ece);
    out << line;
  }
}

void write_scatter_csv(const ScatterSummary& scatter, const fs::path& file) {
  std::ofstream out = open_csv(file);
  out << "sample_id,exit,entropy,error,correct\n";
  char line[160];
  for (const ScatterRow& r : scatter.rows) {
    std::snprintf(line, sizeof(line), "%zu,%d,%.10g,%.10g,%d\n", r.sample,
                  r.exit, r.entropy_nats, r.error, r.correct ? 1 : 0);
    out << line;
  }
}

void write_overhead_csv(const std::vector<OverheadRow>& rows,
                        const fs::path& file) {
  std::ofstream out = open_csv(file);
  out << "exit,p,c,backbone_flops,naive_overhead,efficient_overhead,"
         "naive_rel,efficient_rel\n";
  char line[256];
  for (const OverheadRow& r : rows) {
    std::snprintf(line, sizeof(line), "%d,%lld,%lld,%lld,%lld,%lld,%.10g,%.10g\n",
                  r.exit, r.feature_dim, r.num_classes, r.backbone_flops,
                  r.naive_overhead, r.efficient_overhead, r.naive_rel,
                  r.efficient_rel);
    out << line;
  }
}

DemoArtifacts run_demo(const RunConfig& config) {
  if (config.out_dir.empty()) {
    throw std::invalid_argument("run_demo: output directory required");
  }
  set_default_threads(config.threads);
  fs::create_directories(config.out_dir);

  const FeatureBundle bundle = stage("backbone", [&] {
    const SyntheticDataset data =
        gen_synthetic(derive_seed(config.seed, "synthetic-data"),
                      config.n_samples, config.input_dim, config.num_classes,
                      config.cluster_spread);
    ToyModelConfig toy = config.toy;
    toy.input_dim = config.input_dim;
    toy.num_classes = config.num_classes;
    toy.seed = derive_seed(config.seed, "toy-training");
    return extract_features(train_toy(toy, data), data);
  });

  DemoArtifacts artifacts;
  artifacts.bundle_dir = config.out_dir / "bundle";
  stage("bundle-export", [&] { write_bundle(bundle, artifacts.bundle_dir); return 0; });

  const LaplaceContext ctx(bundle, config.n_mc,
                           derive_seed(config.seed, "mc-draws"),
                           config.shared_draws);
  const CalibrationResult laplace_calib = stage("calibrate", [&] {
    return calibrate_independent(ctx, config.grid, SearchMode::independent);
  });
  const CalibrationResult mie_laplace_calib = stage("calibrate", [&] {
    return grid_search_sequential_mie(ctx, config.grid);
  });

  artifacts.posteriors_dir = config.out_dir / "posteriors";
  artifacts.calibration_csv = config.out_dir / "calibration.csv";
  stage("posterior-export", [&] {
    for (int k = 0; k < bundle.n_exits(); ++k) {
      const ExitChoice& c = laplace_calib.exits[static_cast<std::size_t>(k)];
      write_posterior(ctx.fit(k, c.sigma, c.temperature),
                      artifacts.posteriors_dir /
                          ("exit_" + std::to_string(k + 1)));
    }
    write_calibration_csv({laplace_calib, mie_laplace_calib},
                          artifacts.calibration_csv);
    return 0;
  });

  artifacts.budget_csv = config.out_dir / "budget_curves.csv";
  stage("budget-sweep", [&] {
    std::vector<long long> cum_flops;
    for (const auto& exit : bundle.exits) cum_flops.push_back(exit.cum_flops);
    const std::vector<double> budgets =
        config.budgets.empty() ? default_budgets(cum_flops) : config.budgets;
    std::vector<CurveRecord> records = sweep_budgets(
        ctx, config.sweep_modes, budgets, &laplace_calib, &mie_laplace_calib);
    if (config.cross_decide && config.cross_score) {
      const std::vector<CurveRecord> cross =
          sweep_cross(ctx, *config.cross_decide, *config.cross_score, budgets,
                      &laplace_calib, &mie_laplace_calib);
      records.insert(records.end(), cross.begin(), cross.end());
    }
    write_budget_csv(records, artifacts.budget_csv);
    return 0;
  });

  artifacts.scatter_csv = config.out_dir / "scatter.csv";
  stage("scatter-export", [&] {
    const std::vector<std::size_t> test = bundle.split_indices(SplitTag::test);
    std::vector<int> test_labels;
    for (const std::size_t i : test) test_labels.push_back(bundle.labels[i]);
    const CalibrationResult* scatter_calib =
        config.scatter_mode == PredictorMode::laplace ? &laplace_calib
        : config.scatter_mode == PredictorMode::mie_laplace
            ? &mie_laplace_calib
            : nullptr;
    const PredictionSet scatter_preds =
        build_predictions(ctx, config.scatter_mode, test, scatter_calib);
    write_scatter_csv(scatter_export(scatter_preds.per_exit, test_labels),
                      artifacts.scatter_csv);
    return 0;
  });

  artifacts.overhead_csv = config.out_dir / "overhead_report.csv";
  stage("overhead-report", [&] {
    std::vector<ExitShape> arch;
    for (const auto& exit : bundle.exits) {
      arch.push_back(ExitShape{exit.features.cols(), bundle.num_classes,
                               exit.cum_flops});
    }
    write_overhead_csv(overhead_report(arch, config.n_mc),
                       artifacts.overhead_csv);
    return 0;
  });

  return artifacts;
}

}  // namespace exitcal
