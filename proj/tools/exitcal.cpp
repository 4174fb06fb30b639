#include <CLI11.hpp>

#include "exitcal/parallel.hpp"
#include "exitcal/pipeline.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace exitcal;

std::uint64_t seed_from_env() {
  if (const char* env = std::getenv("EXITCAL_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return 1;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    if (!field.empty()) out.push_back(std::stod(field));
  }
  return out;
}

const CalibrationResult* find_calibration(
    const std::vector<CalibrationResult>& results, SearchMode mode) {
  for (const CalibrationResult& r : results) {
    if (r.mode == mode) return &r;
  }
  return nullptr;
}

struct CommonToyOptions {
  int n_block = 4;
  std::string widths = "32,32,32,32";
  int hidden = 256;
  int epochs = 200;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;

  ToyModelConfig to_config() const {
    ToyModelConfig cfg;
    cfg.n_block = n_block;
    cfg.block_widths.clear();
    for (const double w : parse_double_list(widths)) {
      cfg.block_widths.push_back(static_cast<int>(w));
    }
    cfg.block_hidden = hidden;
    cfg.epochs = epochs;
    cfg.learning_rate = lr;
    cfg.momentum = momentum;
    cfg.weight_decay = weight_decay;
    cfg.batch_size = batch_size;
    return cfg;
  }
};

void add_toy_options(CLI::App* cmd, CommonToyOptions& toy) {
  cmd->add_option("--n-block", toy.n_block, "Number of trunk blocks / exits");
  cmd->add_option("--widths", toy.widths, "Comma list of exit feature widths");
  cmd->add_option("--hidden", toy.hidden, "Hidden width inside each block");
  cmd->add_option("--epochs", toy.epochs, "Training epochs");
  cmd->add_option("--lr", toy.lr, "Learning rate");
  cmd->add_option("--momentum", toy.momentum, "SGD momentum");
  cmd->add_option("--weight-decay", toy.weight_decay, "L2 coefficient");
  cmd->add_option("--batch-size", toy.batch_size, "Mini-batch size");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated early-exit classification toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = seed_from_env();
  unsigned threads = 0;
  app.add_option("--seed", seed, "Master seed (overrides EXITCAL_SEED)");
  app.add_option("--threads", threads,
                 "Worker threads (default: available parallelism)");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  int gen_n = 800, gen_d = 16, gen_c = 8;
  double gen_spread = 1.0;
  std::string gen_out;
  gen->add_option("--n", gen_n, "Sample count");
  gen->add_option("--dim", gen_d, "Input dimension");
  gen->add_option("--classes", gen_c, "Class count");
  gen->add_option("--spread", gen_spread, "Cluster spread (means ~ 1/spread)");
  gen->add_option("--out", gen_out, "Output dataset directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train the toy multi-exit model");
  std::string train_data, train_out;
  CommonToyOptions train_toy_opts;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output model directory")->required();
  add_toy_options(train, train_toy_opts);

  // extract
  auto* extract = app.add_subcommand("extract", "Extract a feature bundle");
  std::string extract_model, extract_data, extract_out;
  extract->add_option("--model", extract_model, "Model directory")->required();
  extract->add_option("--data", extract_data, "Dataset directory")->required();
  extract->add_option("--out", extract_out, "Output bundle directory")
      ->required();

  // fit
  auto* fit = app.add_subcommand("fit", "Fit per-exit Laplace posteriors");
  std::string fit_bundle, fit_out;
  double fit_sigma = kDefaultSigma, fit_temperature = kDefaultTemperature;
  fit->add_option("--bundle", fit_bundle, "Bundle directory")->required();
  fit->add_option("--sigma", fit_sigma, "Prior standard deviation");
  fit->add_option("--temperature", fit_temperature, "Temperature");
  fit->add_option("--out", fit_out, "Output posteriors directory")->required();

  // calibrate
  auto* calibrate =
      app.add_subcommand("calibrate", "Grid-search (T, sigma) per exit");
  std::string cal_bundle, cal_out, cal_t_grid, cal_sigma_grid;
  int cal_n_mc = 50;
  bool cal_shared = false;
  calibrate->add_option("--bundle", cal_bundle, "Bundle directory")->required();
  calibrate->add_option("--out", cal_out, "Output calibration CSV")->required();
  calibrate->add_option("--t-grid", cal_t_grid, "Comma list of temperatures");
  calibrate->add_option("--sigma-grid", cal_sigma_grid,
                        "Comma list of prior deviations");
  calibrate->add_option("--n-mc", cal_n_mc, "Monte-Carlo samples");
  calibrate->add_flag("--shared-draws", cal_shared,
                      "Share pre-multiplied draws across samples");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Budgeted batch classification");
  std::string sweep_bundle, sweep_cal, sweep_out, sweep_budget_list;
  std::string sweep_modes = "vanilla,laplace,mie,mie-laplace";
  std::string sweep_decide, sweep_score;
  int sweep_n_mc = 50, sweep_n_budgets = 20;
  bool sweep_shared = false;
  sweep->add_option("--bundle", sweep_bundle, "Bundle directory")->required();
  sweep->add_option("--calibration", sweep_cal, "Calibration CSV")->required();
  sweep->add_option("--out", sweep_out, "Output curves CSV")->required();
  sweep->add_option("--budgets", sweep_budget_list, "Comma list of budgets");
  sweep->add_option("--n-budgets", sweep_n_budgets,
                    "Evenly spaced budget count when --budgets is absent");
  sweep->add_option("--modes", sweep_modes, "Comma list of predictor modes");
  sweep->add_option("--n-mc", sweep_n_mc, "Monte-Carlo samples");
  sweep->add_option("--decide-mode", sweep_decide,
                    "Cross experiment: mode making exit decisions");
  sweep->add_option("--score-mode", sweep_score,
                    "Cross experiment: mode whose predictions are scored");
  sweep->add_flag("--shared-draws", sweep_shared,
                  "Share pre-multiplied draws across samples");

  // scatter
  auto* scatter = app.add_subcommand("scatter", "Per-exit uncertainty/error rows");
  std::string scatter_bundle, scatter_cal, scatter_out;
  std::string scatter_mode = "mie-laplace";
  int scatter_n_mc = 50;
  scatter->add_option("--bundle", scatter_bundle, "Bundle directory")->required();
  scatter->add_option("--calibration", scatter_cal, "Calibration CSV");
  scatter->add_option("--mode", scatter_mode, "Predictor mode");
  scatter->add_option("--n-mc", scatter_n_mc, "Monte-Carlo samples");
  scatter->add_option("--out", scatter_out, "Output CSV")->required();

  // flops-report
  auto* flops_cmd = app.add_subcommand("flops-report", "Sampling-cost report");
  std::string flops_bundle, flops_table, flops_out, flops_conv = "practical";
  int flops_n_mc = 50;
  flops_cmd->add_option("--bundle", flops_bundle, "Bundle directory");
  flops_cmd->add_option("--table", flops_table,
                        "CSV with p,c,backbone_flops rows (alternative input)");
  flops_cmd->add_option("--n-mc", flops_n_mc, "Monte-Carlo samples");
  flops_cmd->add_option("--convention", flops_conv, "raw or practical");
  flops_cmd->add_option("--out", flops_out, "Output CSV")->required();

  // demo
  auto* demo = app.add_subcommand("demo", "End-to-end synthetic benchmark");
  std::string demo_out = "demo-output";
  std::string demo_budget_list, demo_decide, demo_score;
  std::string demo_scatter_mode = "mie-laplace";
  int demo_n = 800, demo_d = 16, demo_c = 8, demo_n_mc = 50;
  double demo_spread = 1.0;
  bool demo_shared = false;
  CommonToyOptions demo_toy_opts;
  demo->add_option("--out", demo_out, "Output directory");
  demo->add_option("--n", demo_n, "Sample count");
  demo->add_option("--dim", demo_d, "Input dimension");
  demo->add_option("--classes", demo_c, "Class count");
  demo->add_option("--spread", demo_spread, "Cluster spread");
  demo->add_option("--n-mc", demo_n_mc, "Monte-Carlo samples");
  demo->add_option("--budgets", demo_budget_list, "Comma list of budgets");
  demo->add_option("--decide-mode", demo_decide, "Cross experiment decide mode");
  demo->add_option("--score-mode", demo_score, "Cross experiment score mode");
  demo->add_option("--scatter-mode", demo_scatter_mode, "Scatter export mode");
  demo->add_flag("--shared-draws", demo_shared,
                 "Share pre-multiplied draws across samples");
  add_toy_options(demo, demo_toy_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    exitcal::set_default_threads(threads);

    if (gen->parsed()) {
      const SyntheticDataset data =
          gen_synthetic(derive_seed(seed, "synthetic-data"), gen_n, gen_d,
                        gen_c, gen_spread);
      write_dataset(data, gen_out);
      std::printf("wrote dataset (%d samples, %d classes) to %s\n", gen_n,
                  gen_c, gen_out.c_str());
    } else if (train->parsed()) {
      const SyntheticDataset data = load_dataset(train_data);
      ToyModelConfig cfg = train_toy_opts.to_config();
      cfg.input_dim = static_cast<int>(data.dim());
      cfg.num_classes = data.num_classes;
      cfg.seed = derive_seed(seed, "toy-training");
      const ToyModel model = train_toy(cfg, data);
      write_model(model, train_out);
      std::printf("trained model (%zu parameters, best epoch %d) to %s\n",
                  model.parameter_count, model.best_epoch, train_out.c_str());
    } else if (extract->parsed()) {
      const ToyModel model = load_model(extract_model);
      const SyntheticDataset data = load_dataset(extract_data);
      const FeatureBundle bundle = extract_features(model, data);
      write_bundle(bundle, extract_out);
      std::printf("wrote bundle (%d exits) to %s\n", bundle.n_exits(),
                  extract_out.c_str());
    } else if (fit->parsed()) {
      const FeatureBundle bundle = load_bundle(fit_bundle);
      const LaplaceContext ctx(bundle, 1, seed);
      for (int k = 0; k < bundle.n_exits(); ++k) {
        write_posterior(
            ctx.fit(k, fit_sigma, fit_temperature),
            std::filesystem::path(fit_out) / ("exit_" + std::to_string(k + 1)));
      }
      std::printf("wrote %d posteriors to %s\n", bundle.n_exits(),
                  fit_out.c_str());
    } else if (calibrate->parsed()) {
      const FeatureBundle bundle = load_bundle(cal_bundle);
      HyperGrid grid = HyperGrid::defaults();
      if (!cal_t_grid.empty()) grid.temperatures = parse_double_list(cal_t_grid);
      if (!cal_sigma_grid.empty()) grid.sigmas = parse_double_list(cal_sigma_grid);
      const LaplaceContext ctx(bundle, cal_n_mc,
                               derive_seed(seed, "mc-draws"), cal_shared);
      const CalibrationResult independent =
          calibrate_independent(ctx, grid, SearchMode::independent);
      const CalibrationResult sequential = grid_search_sequential_mie(ctx, grid);
      write_calibration_csv({independent, sequential}, cal_out);
      std::printf("wrote calibration manifest to %s\n", cal_out.c_str());
    } else if (sweep->parsed()) {
      const FeatureBundle bundle = load_bundle(sweep_bundle);
      const std::vector<CalibrationResult> calib =
          load_calibration_csv(sweep_cal);
      const LaplaceContext ctx(bundle, sweep_n_mc,
                               derive_seed(seed, "mc-draws"), sweep_shared);
      std::vector<long long> cum;
      for (const auto& exit : bundle.exits) cum.push_back(exit.cum_flops);
      const std::vector<double> budgets =
          sweep_budget_list.empty()
              ? default_budgets(cum, sweep_n_budgets)
              : parse_double_list(sweep_budget_list);
      std::vector<PredictorMode> modes;
      std::stringstream ss(sweep_modes);
      std::string field;
      while (std::getline(ss, field, ',')) {
        if (!field.empty()) modes.push_back(predictor_mode_from_string(field));
      }
      const CalibrationResult* laplace_calib =
          find_calibration(calib, SearchMode::independent);
      const CalibrationResult* mie_calib =
          find_calibration(calib, SearchMode::sequential_mie);
      std::vector<CurveRecord> records =
          sweep_budgets(ctx, modes, budgets, laplace_calib, mie_calib);
      if (!sweep_decide.empty() || !sweep_score.empty()) {
        if (sweep_decide.empty() || sweep_score.empty()) {
          throw std::invalid_argument(
              "cross experiment needs both --decide-mode and --score-mode");
        }
        const std::vector<CurveRecord> cross = sweep_cross(
            ctx, predictor_mode_from_string(sweep_decide),
            predictor_mode_from_string(sweep_score), budgets, laplace_calib,
            mie_calib);
        records.insert(records.end(), cross.begin(), cross.end());
      }
      write_budget_csv(records, sweep_out);
      std::printf("wrote %zu curve records to %s\n", records.size(),
                  sweep_out.c_str());
    } else if (scatter->parsed()) {
      const FeatureBundle bundle = load_bundle(scatter_bundle);
      const PredictorMode mode = predictor_mode_from_string(scatter_mode);
      const LaplaceContext ctx(bundle, scatter_n_mc,
                               derive_seed(seed, "mc-draws"));
      const CalibrationResult* calib = nullptr;
      std::vector<CalibrationResult> loaded;
      if (!scatter_cal.empty()) {
        loaded = load_calibration_csv(scatter_cal);
        calib = find_calibration(loaded,
                                 mode == PredictorMode::mie_laplace
                                     ? SearchMode::sequential_mie
                                     : SearchMode::independent);
      }
      const std::vector<std::size_t> test =
          bundle.split_indices(SplitTag::test);
      std::vector<int> labels;
      for (const std::size_t i : test) labels.push_back(bundle.labels[i]);
      const PredictionSet preds = build_predictions(ctx, mode, test, calib);
      const ScatterSummary summary = scatter_export(preds.per_exit, labels);
      write_scatter_csv(summary, scatter_out);
      for (std::size_t k = 0; k < summary.high_error_fraction.size(); ++k) {
        std::printf("exit %zu: error>0.5 fraction %.4f\n", k + 1,
                    summary.high_error_fraction[k]);
      }
    } else if (flops_cmd->parsed()) {
      std::vector<ExitShape> arch;
      if (!flops_bundle.empty()) {
        const FeatureBundle bundle = load_bundle(flops_bundle);
        for (const auto& exit : bundle.exits) {
          arch.push_back(ExitShape{exit.features.cols(), bundle.num_classes,
                                   exit.cum_flops});
        }
      } else if (!flops_table.empty()) {
        std::ifstream in(flops_table);
        if (!in) throw std::invalid_argument("cannot read " + flops_table);
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty() || !(std::isdigit(line[0]))) continue;
          const std::vector<double> f = parse_double_list(line);
          if (f.size() != 3) {
            throw std::invalid_argument("table rows must be p,c,backbone_flops");
          }
          arch.push_back(ExitShape{static_cast<long long>(f[0]),
                                   static_cast<long long>(f[1]),
                                   static_cast<long long>(f[2])});
        }
      } else {
        throw std::invalid_argument("flops-report needs --bundle or --table");
      }
      const FlopConvention conv = flops_conv == "raw" ? FlopConvention::raw
                                                      : FlopConvention::practical;
      write_overhead_csv(overhead_report(arch, flops_n_mc, conv), flops_out);
      std::printf("wrote overhead report to %s\n", flops_out.c_str());
    } else if (demo->parsed()) {
      RunConfig config;
      config.out_dir = demo_out;
      config.seed = seed;
      config.n_mc = demo_n_mc;
      config.threads = threads;
      config.shared_draws = demo_shared;
      config.n_samples = demo_n;
      config.input_dim = demo_d;
      config.num_classes = demo_c;
      config.cluster_spread = demo_spread;
      config.toy = demo_toy_opts.to_config();
      if (!demo_budget_list.empty()) {
        config.budgets = parse_double_list(demo_budget_list);
      }
      config.scatter_mode = predictor_mode_from_string(demo_scatter_mode);
      if (!demo_decide.empty() || !demo_score.empty()) {
        if (demo_decide.empty() || demo_score.empty()) {
          throw std::invalid_argument(
              "cross experiment needs both --decide-mode and --score-mode");
        }
        config.cross_decide = predictor_mode_from_string(demo_decide);
        config.cross_score = predictor_mode_from_string(demo_score);
      }
      const DemoArtifacts artifacts = run_demo(config);
      std::printf("demo artifacts in %s\n", demo_out.c_str());
      std::printf("  %s\n", artifacts.budget_csv.string().c_str());
      std::printf("  %s\n", artifacts.scatter_csv.string().c_str());
      std::printf("  %s\n", artifacts.overhead_csv.string().c_str());
      std::printf("  %s\n", artifacts.calibration_csv.string().c_str());
    }
  } catch (const std::exception& e) {
    std::cerr << "exitcal " << (app.get_subcommands().empty()
                                    ? "?"
                                    : app.get_subcommands().front()->get_name())
              << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
