#include "exitcal/budget.hpp"

#include "exitcal/ensemble.hpp"
#include "exitcal/flops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace exitcal {

std::string to_string(PredictorMode mode) {
  switch (mode) {
    case PredictorMode::vanilla: return "vanilla";
    case PredictorMode::laplace: return "laplace";
    case PredictorMode::mie: return "mie";
    case PredictorMode::mie_laplace: return "mie-laplace";
  }
  return "unknown";
}

PredictorMode predictor_mode_from_string(const std::string& name) {
  if (name == "vanilla") return PredictorMode::vanilla;
  if (name == "laplace") return PredictorMode::laplace;
  if (name == "mie") return PredictorMode::mie;
  if (name == "mie-laplace") return PredictorMode::mie_laplace;
  throw std::invalid_argument("unknown predictor mode: " + name);
}

namespace {

bool is_laplace_based(PredictorMode mode) {
  return mode == PredictorMode::laplace || mode == PredictorMode::mie_laplace;
}

bool is_ensembled(PredictorMode mode) {
  return mode == PredictorMode::mie || mode == PredictorMode::mie_laplace;
}

ExitChoice choice_for(const CalibrationResult* calib, int k) {
  if (calib == nullptr) {
    return ExitChoice{kDefaultTemperature, kDefaultSigma, 0.0};
  }
  return calib->exits.at(static_cast<std::size_t>(k));
}

}  // namespace

PredictionSet build_predictions(const LaplaceContext& ctx, PredictorMode mode,
                                const std::vector<std::size_t>& rows,
                                const CalibrationResult* calib) {
  const FeatureBundle& bundle = ctx.bundle();
  PredictionSet set;
  set.mode = mode;
  set.rows = rows;
  set.per_exit.resize(static_cast<std::size_t>(bundle.n_exits()));

  std::vector<Matrix> member(static_cast<std::size_t>(bundle.n_exits()));
  for (int k = 0; k < bundle.n_exits(); ++k) {
    if (is_laplace_based(mode)) {
      const ExitChoice c = choice_for(calib, k);
      const KfacPosterior post = ctx.fit(k, c.sigma, c.temperature);
      member[static_cast<std::size_t>(k)] = ctx.laplace_probs(k, post, rows);
    } else {
      member[static_cast<std::size_t>(k)] = ctx.vanilla_probs(k, rows, 1.0);
    }
  }

  if (!is_ensembled(mode)) {
    set.per_exit = std::move(member);
    return set;
  }

  // Prefix ensembles, FLOPs-weighted.
  Matrix running = Matrix::Zero(static_cast<Eigen::Index>(rows.size()),
                                bundle.num_classes);
  double total_weight = 0.0;
  for (int k = 0; k < bundle.n_exits(); ++k) {
    const double w =
        static_cast<double>(bundle.exits[static_cast<std::size_t>(k)].cum_flops);
    running += w * member[static_cast<std::size_t>(k)];
    total_weight += w;
    set.per_exit[static_cast<std::size_t>(k)] = running / total_weight;
  }
  return set;
}

std::vector<double> solve_exit_distribution(const std::vector<double>& w,
                                            double budget) {
  const std::size_t n = w.size();
  if (n == 0) throw std::invalid_argument("solve_exit_distribution: empty w");
  for (std::size_t k = 1; k < n; ++k) {
    if (!(w[k] > w[k - 1])) {
      throw std::invalid_argument(
          "solve_exit_distribution: w must be strictly increasing");
    }
  }
  if (!(budget > 0.0)) {
    throw std::invalid_argument("solve_exit_distribution: budget must be > 0");
  }

  std::vector<double> q(n, 0.0);
  if (n == 1) {
    q[0] = 1.0;
    return q;
  }
  const double target = std::clamp(budget, w.front(), w.back());
  if (target <= w.front()) {
    q.front() = 1.0;
    return q;
  }
  if (target >= w.back()) {
    q.back() = 1.0;
    return q;
  }

  // Exit process: a surviving sample leaves at each stage with probability
  // rho; the last exit absorbs the remaining mass. Expected cost falls
  // monotonically in rho, so bisection applies.
  auto fractions = [&](double rho) {
    std::vector<double> f(n, 0.0);
    double survive = 1.0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      f[k] = rho * survive;
      survive *= (1.0 - rho);
    }
    f[n - 1] = survive;
    return f;
  };
  auto expected_cost = [&](const std::vector<double>& f) {
    double cost = 0.0;
    for (std::size_t k = 0; k < n; ++k) cost += f[k] * w[k];
    return cost;
  };

  double lo = 1e-6, hi = 1.0 - 1e-6;
  double mid = 0.5 * (lo + hi);
  for (int iter = 0; iter < 200; ++iter) {
    mid = 0.5 * (lo + hi);
    const double cost = expected_cost(fractions(mid));
    if (std::abs(cost - target) <= 1e-9 * target) break;
    if (cost > target) {
      lo = mid;  // cost falls as the stop probability grows
    } else {
      hi = mid;
    }
  }
  return fractions(mid);
}

std::vector<double> compute_thresholds(const Matrix& confidences,
                                       const std::vector<double>& q,
                                       std::vector<std::string>* warnings) {
  const std::size_t n_val = static_cast<std::size_t>(confidences.rows());
  const std::size_t n_exits = q.size();
  if (static_cast<std::size_t>(confidences.cols()) != n_exits) {
    throw std::invalid_argument("compute_thresholds: q/confidence mismatch");
  }
  if (n_val == 0) {
    throw std::invalid_argument("compute_thresholds: empty validation split");
  }

  const double sentinel = std::nextafter(1.0, 2.0);
  std::vector<double> t(n_exits, 0.0);
  std::vector<std::size_t> alive(n_val);
  for (std::size_t i = 0; i < n_val; ++i) alive[i] = i;

  for (std::size_t k = 0; k + 1 < n_exits; ++k) {
    const std::size_t target = static_cast<std::size_t>(
        std::ceil(q[k] * static_cast<double>(n_val)));
    if (target == 0) {
      t[k] = sentinel;
      continue;
    }
    if (alive.empty()) {
      t[k] = sentinel;
      if (warnings) {
        warnings->push_back("exit " + std::to_string(k + 1) +
                            ": no validation samples left");
      }
      continue;
    }
    std::vector<double> conf;
    conf.reserve(alive.size());
    for (const std::size_t i : alive) {
      conf.push_back(confidences(static_cast<Eigen::Index>(i),
                                 static_cast<Eigen::Index>(k)));
    }
    std::sort(conf.begin(), conf.end(), std::greater<double>());
    std::size_t effective = target;
    if (target > alive.size()) {
      effective = alive.size();
      if (warnings) {
        warnings->push_back("exit " + std::to_string(k + 1) +
                            ": fewer alive samples than target, exiting all");
      }
    }
    t[k] = conf[effective - 1];

    std::vector<std::size_t> next_alive;
    for (const std::size_t i : alive) {
      if (confidences(static_cast<Eigen::Index>(i),
                      static_cast<Eigen::Index>(k)) < t[k]) {
        next_alive.push_back(i);
      }
    }
    alive = std::move(next_alive);
  }
  t[n_exits - 1] = 0.0;
  return t;
}

BudgetPlan make_plan(const PredictionSet& val_predictions,
                     const std::vector<double>& w, double budget) {
  const std::size_t n_exits = val_predictions.per_exit.size();
  if (w.size() != n_exits) {
    throw std::invalid_argument("make_plan: weight/exit count mismatch");
  }
  BudgetPlan plan;
  plan.mode = val_predictions.mode;
  plan.budget = budget;
  plan.exit_fractions = solve_exit_distribution(w, budget);

  const std::size_t n_val = val_predictions.rows.size();
  Matrix conf(static_cast<Eigen::Index>(n_val),
              static_cast<Eigen::Index>(n_exits));
  for (std::size_t k = 0; k < n_exits; ++k) {
    const Matrix& probs = val_predictions.per_exit[k];
    for (std::size_t i = 0; i < n_val; ++i) {
      conf(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          probs.row(static_cast<Eigen::Index>(i)).maxCoeff();
    }
  }
  plan.thresholds = compute_thresholds(conf, plan.exit_fractions,
                                       &plan.warnings);

  double total = 0.0;
  for (std::size_t i = 0; i < n_val; ++i) {
    std::size_t taken = n_exits - 1;
    for (std::size_t k = 0; k + 1 < n_exits; ++k) {
      if (conf(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) >=
          plan.thresholds[k]) {
        taken = k;
        break;
      }
    }
    total += w[taken];
  }
  plan.expected_val_cost = total / static_cast<double>(n_val);
  return plan;
}

std::vector<long long> mode_overheads(PredictorMode mode, int n_exits,
                                      const std::vector<long long>& feature_dims,
                                      int num_classes, int n_mc,
                                      FlopConvention conv) {
  if (static_cast<int>(feature_dims.size()) != n_exits) {
    throw std::invalid_argument("mode_overheads: feature dim count mismatch");
  }
  std::vector<long long> out(static_cast<std::size_t>(n_exits), 0);
  long long laplace_cum = 0;
  for (int k = 0; k < n_exits; ++k) {
    long long overhead = 0;
    if (is_laplace_based(mode)) {
      laplace_cum += flops_efficient(feature_dims[static_cast<std::size_t>(k)],
                                     num_classes, n_mc, conv);
      overhead += laplace_cum;
    }
    if (is_ensembled(mode)) {
      long long mie = flops_mie(num_classes, k + 1);
      if (conv == FlopConvention::practical) mie = (mie + 1) / 2;
      overhead += mie;
    }
    out[static_cast<std::size_t>(k)] = overhead;
  }
  return out;
}

RoutingTrace route(const PredictionSet& decide, const BudgetPlan& plan,
                   const std::vector<double>& w,
                   const std::vector<long long>& overheads,
                   const PredictionSet* score, bool allow_cross) {
  if (plan.mode != decide.mode) {
    throw std::invalid_argument(
        "route: plan was built for a different predictor mode");
  }
  if (score == nullptr) score = &decide;
  if (score->mode != decide.mode && !allow_cross) {
    throw std::invalid_argument(
        "route: decide/score mode mismatch without the cross-mode flag");
  }
  if (score->rows != decide.rows) {
    throw std::invalid_argument("route: decide/score row sets differ");
  }
  const std::size_t n_exits = decide.per_exit.size();
  if (plan.thresholds.size() != n_exits || w.size() != n_exits ||
      overheads.size() != n_exits) {
    throw std::invalid_argument("route: exit count mismatch");
  }

  RoutingTrace trace;
  trace.decide_mode = decide.mode;
  trace.score_mode = score->mode;
  const std::size_t n = decide.rows.size();
  trace.samples.resize(n);
  double backbone_total = 0.0;
  double charged_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t taken = n_exits - 1;
    double conf = 0.0;
    for (std::size_t k = 0; k < n_exits; ++k) {
      conf = decide.per_exit[k]
                 .row(static_cast<Eigen::Index>(i))
                 .maxCoeff();
      if (conf >= plan.thresholds[k] || k + 1 == n_exits) {
        taken = k;
        break;
      }
    }
    RoutingSample& s = trace.samples[i];
    s.exit = static_cast<int>(taken + 1);
    s.confidence = conf;
    s.prediction =
        score->per_exit[taken].row(static_cast<Eigen::Index>(i)).transpose();
    s.backbone_cost = w[taken];
    s.charged_cost = w[taken] + static_cast<double>(overheads[taken]);
    backbone_total += s.backbone_cost;
    charged_total += s.charged_cost;
  }
  trace.mean_backbone_cost = backbone_total / static_cast<double>(n);
  trace.mean_charged_cost = charged_total / static_cast<double>(n);
  return trace;
}

namespace {

std::vector<long long> bundle_feature_dims(const FeatureBundle& bundle) {
  std::vector<long long> dims;
  for (const auto& exit : bundle.exits) dims.push_back(exit.features.cols());
  return dims;
}

std::vector<double> bundle_weights(const FeatureBundle& bundle) {
  std::vector<double> w;
  for (const auto& exit : bundle.exits) {
    w.push_back(static_cast<double>(exit.cum_flops));
  }
  return w;
}

const CalibrationResult* calib_for(PredictorMode mode,
                                   const CalibrationResult* laplace_calib,
                                   const CalibrationResult* mie_laplace_calib) {
  if (mode == PredictorMode::laplace) return laplace_calib;
  if (mode == PredictorMode::mie_laplace) return mie_laplace_calib;
  return nullptr;
}

CurveRecord record_from_trace(const RoutingTrace& trace,
                              const std::vector<int>& labels,
                              const std::string& label, double budget) {
  const std::size_t n = trace.samples.size();
  const Eigen::Index c = trace.samples.front().prediction.size();
  Matrix probs(static_cast<Eigen::Index>(n), c);
  for (std::size_t i = 0; i < n; ++i) {
    probs.row(static_cast<Eigen::Index>(i)) =
        trace.samples[i].prediction.transpose();
  }
  CurveRecord rec;
  rec.mode_label = label;
  rec.budget = budget;
  rec.mean_cost = trace.mean_charged_cost;
  rec.metrics = evaluate_metrics(probs, labels);
  return rec;
}

}  // namespace

std::vector<CurveRecord> sweep_budgets(
    const LaplaceContext& ctx, const std::vector<PredictorMode>& modes,
    const std::vector<double>& budgets,
    const CalibrationResult* laplace_calib,
    const CalibrationResult* mie_laplace_calib) {
  const FeatureBundle& bundle = ctx.bundle();
  const std::vector<std::size_t> val = bundle.split_indices(SplitTag::val);
  const std::vector<std::size_t> test = bundle.split_indices(SplitTag::test);
  std::vector<int> test_labels;
  for (const std::size_t i : test) test_labels.push_back(bundle.labels[i]);
  const std::vector<double> w = bundle_weights(bundle);
  const std::vector<long long> dims = bundle_feature_dims(bundle);

  std::vector<CurveRecord> records;
  for (const PredictorMode mode : modes) {
    const CalibrationResult* calib =
        calib_for(mode, laplace_calib, mie_laplace_calib);
    const PredictionSet val_preds = build_predictions(ctx, mode, val, calib);
    const PredictionSet test_preds = build_predictions(ctx, mode, test, calib);
    const std::vector<long long> overheads =
        mode_overheads(mode, bundle.n_exits(), dims, bundle.num_classes,
                       ctx.n_mc(), FlopConvention::practical);
    for (const double b : budgets) {
      const BudgetPlan plan = make_plan(val_preds, w, b);
      const RoutingTrace trace = route(test_preds, plan, w, overheads);
      records.push_back(
          record_from_trace(trace, test_labels, to_string(mode), b));
    }
  }
  return records;
}

std::vector<CurveRecord> sweep_cross(const LaplaceContext& ctx,
                                     PredictorMode decide_mode,
                                     PredictorMode score_mode,
                                     const std::vector<double>& budgets,
                                     const CalibrationResult* laplace_calib,
                                     const CalibrationResult* mie_laplace_calib) {
  const FeatureBundle& bundle = ctx.bundle();
  const std::vector<std::size_t> val = bundle.split_indices(SplitTag::val);
  const std::vector<std::size_t> test = bundle.split_indices(SplitTag::test);
  std::vector<int> test_labels;
  for (const std::size_t i : test) test_labels.push_back(bundle.labels[i]);
  const std::vector<double> w = bundle_weights(bundle);
  const std::vector<long long> dims = bundle_feature_dims(bundle);

  const PredictionSet val_decide = build_predictions(
      ctx, decide_mode, val,
      calib_for(decide_mode, laplace_calib, mie_laplace_calib));
  const PredictionSet test_decide = build_predictions(
      ctx, decide_mode, test,
      calib_for(decide_mode, laplace_calib, mie_laplace_calib));
  const PredictionSet test_score = build_predictions(
      ctx, score_mode, test,
      calib_for(score_mode, laplace_calib, mie_laplace_calib));
  const std::vector<long long> overheads =
      mode_overheads(decide_mode, bundle.n_exits(), dims, bundle.num_classes,
                     ctx.n_mc(), FlopConvention::practical);

  const std::string label =
      "decide-" + to_string(decide_mode) + "-score-" + to_string(score_mode);
  std::vector<CurveRecord> records;
  for (const double b : budgets) {
    const BudgetPlan plan = make_plan(val_decide, w, b);
    const RoutingTrace trace =
        route(test_decide, plan, w, overheads, &test_score, true);
    records.push_back(record_from_trace(trace, test_labels, label, b));
  }
  return records;
}

}  // namespace exitcal
