#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitcal/backbone.hpp"
#include "test_support.hpp"

#include <cmath>
#include <set>

using namespace exitcal;

namespace {

double param_norm(const ToyModel& model) {
  double total = 0.0;
  for (const ToyBlock& b : model.blocks) {
    total += b.expand.weights.squaredNorm() + b.expand.bias.squaredNorm();
    total += b.project.weights.squaredNorm() + b.project.bias.squaredNorm();
  }
  for (const DenseLayer& h : model.exit_heads) {
    total += h.weights.squaredNorm() + h.bias.squaredNorm();
  }
  return std::sqrt(total);
}

double split_top1(const ToyModel& model, const SyntheticDataset& data,
                  SplitTag tag, int exit_index) {
  const std::vector<std::size_t> rows = data.split_indices(tag);
  std::size_t hits = 0;
  for (const std::size_t i : rows) {
    const ProbVector p = model.predict_exit(
        exit_index, data.inputs.row(static_cast<Eigen::Index>(i)).transpose());
    Eigen::Index arg = 0;
    p.maxCoeff(&arg);
    if (arg == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

}  // namespace

TEST_CASE("synthetic split arithmetic and coverage") {
  const SyntheticDataset data = gen_synthetic(1, 800, 16, 8, 1.0);
  CHECK(data.n() == 800);
  CHECK(data.split_indices(SplitTag::train).size() == 640);
  CHECK(data.split_indices(SplitTag::val).size() == 80);
  CHECK(data.split_indices(SplitTag::test).size() == 80);
  for (const SplitTag tag :
       {SplitTag::train, SplitTag::val, SplitTag::test}) {
    std::set<int> classes;
    for (const std::size_t i : data.split_indices(tag)) {
      classes.insert(data.labels[i]);
    }
    CHECK(classes.size() == 8);
  }
}

TEST_CASE("synthetic generation is deterministic") {
  const SyntheticDataset a = gen_synthetic(3, 160, 8, 4, 1.0);
  const SyntheticDataset b = gen_synthetic(3, 160, 8, 4, 1.0);
  CHECK((a.inputs.array() == b.inputs.array()).all());
  CHECK(a.labels == b.labels);
  CHECK(a.split == b.split);
  const SyntheticDataset c = gen_synthetic(4, 160, 8, 4, 1.0);
  CHECK((a.inputs.array() != c.inputs.array()).any());
}

TEST_CASE("synthetic argument validation") {
  CHECK_THROWS_AS(gen_synthetic(1, 30, 8, 4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(gen_synthetic(1, 100, 8, 4, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(gen_synthetic(1, 100, 1, 4, 1.0), std::invalid_argument);
}

TEST_CASE("vanishing spread makes the clusters trivially separable") {
  const SyntheticDataset data = gen_synthetic(2, 200, 8, 4, 1e-3);
  // Nearest-class-mean classifier on the training split.
  Matrix means = Matrix::Zero(4, 8);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(4);
  const std::vector<std::size_t> train = data.split_indices(SplitTag::train);
  for (const std::size_t i : train) {
    means.row(data.labels[i]) += data.inputs.row(static_cast<Eigen::Index>(i));
    counts(data.labels[i]) += 1.0;
  }
  for (int j = 0; j < 4; ++j) means.row(j) /= counts(j);
  std::size_t hits = 0;
  for (const std::size_t i : train) {
    Eigen::Index best = 0;
    (means.rowwise() - data.inputs.row(static_cast<Eigen::Index>(i)))
        .rowwise()
        .squaredNorm()
        .minCoeff(&best);
    if (best == data.labels[i]) ++hits;
  }
  CHECK(hits == train.size());
}

TEST_CASE("training reaches 100% on separable data") {
  SyntheticDataset data = gen_synthetic(5, 150, 6, 3, 1e-3);
  ToyModelConfig cfg = testing::tiny_config();
  cfg.epochs = 50;
  const ToyModel model = train_toy(cfg, data);
  CHECK(split_top1(model, data, SplitTag::val, cfg.n_block - 1) ==
        doctest::Approx(1.0));
}

TEST_CASE("weight decay shrinks the parameter norm") {
  const SyntheticDataset data = testing::tiny_dataset();
  ToyModelConfig cfg = testing::tiny_config();
  cfg.weight_decay = 0.0;
  const ToyModel loose = train_toy(cfg, data);
  cfg.weight_decay = 0.1;
  const ToyModel tight = train_toy(cfg, data);
  CHECK(param_norm(tight) < param_norm(loose));
}

TEST_CASE("training descends and is deterministic") {
  const SyntheticDataset data = testing::tiny_dataset();
  const ToyModelConfig cfg = testing::tiny_config();
  const ToyModel a = train_toy(cfg, data);
  CHECK(a.epoch_train_loss.back() < a.epoch_train_loss.front());

  const ToyModel b = train_toy(cfg, data);
  for (std::size_t k = 0; k < a.blocks.size(); ++k) {
    CHECK((a.blocks[k].expand.weights.array() ==
           b.blocks[k].expand.weights.array())
              .all());
    CHECK((a.exit_heads[k].weights.array() ==
           b.exit_heads[k].weights.array())
              .all());
  }
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(a.parameter_count == b.parameter_count);
  CHECK(a.parameter_count > 0);
}

TEST_CASE("divergent training reports the epoch") {
  const SyntheticDataset data = testing::tiny_dataset();
  ToyModelConfig cfg = testing::tiny_config();
  cfg.learning_rate = 1e8;
  cfg.weight_decay = 0.1;
  cfg.epochs = 40;
  CHECK_THROWS_AS(train_toy(cfg, data), TrainingError);
}

TEST_CASE("per-sample loss decomposes into per-exit cross-entropies") {
  const SyntheticDataset data = testing::tiny_dataset();
  const ToyModel model = train_toy(testing::tiny_config(), data);
  double sq = 0.0;
  for (const ToyBlock& b : model.blocks) {
    sq += b.expand.weights.squaredNorm() + b.expand.bias.squaredNorm();
    sq += b.project.weights.squaredNorm() + b.project.bias.squaredNorm();
  }
  for (const DenseLayer& h : model.exit_heads) {
    sq += h.weights.squaredNorm() + h.bias.squaredNorm();
  }
  for (int i = 0; i < 10; ++i) {
    const Vector x = data.inputs.row(i).transpose();
    const int y = data.labels[static_cast<std::size_t>(i)];
    double expected = model.config.weight_decay * sq;
    for (int k = 0; k < model.config.n_block; ++k) {
      expected += -std::log(model.predict_exit(k, x)(y));
    }
    CHECK(sample_loss(model, x, y) ==
          doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("bundle reproduces the model's own predictions") {
  const SyntheticDataset data = testing::tiny_dataset();
  const ToyModel model = train_toy(testing::tiny_config(), data);
  const FeatureBundle bundle = extract_features(model, data);

  long long prev = 0;
  for (const auto& exit : bundle.exits) {
    CHECK(exit.cum_flops > prev);
    prev = exit.cum_flops;
  }

  for (int i = 0; i < 20; ++i) {
    const Vector x = data.inputs.row(i).transpose();
    for (int k = 0; k < bundle.n_exits(); ++k) {
      const FeatureBundle::Exit& exit = bundle.exits[static_cast<std::size_t>(k)];
      const ProbVector from_bundle = map_predict(
          exit.weights, exit.bias, exit.features.row(i).transpose(), 1.0);
      const ProbVector from_model = model.predict_exit(k, x);
      CHECK((from_bundle - from_model).cwiseAbs().maxCoeff() < 1e-13);
    }
  }
}

TEST_CASE("gradient check against central differences") {
  const SyntheticDataset data = testing::tiny_dataset();
  ToyModelConfig cfg = testing::tiny_config();
  cfg.epochs = 1;  // near-random parameters
  const ToyModel model = train_toy(cfg, data);
  for (int i = 0; i < 3; ++i) {
    const double err =
        grad_check(model, data.inputs.row(i).transpose(),
                   data.labels[static_cast<std::size_t>(i)], 1e-5);
    CHECK(err < 1e-4);
  }

  // Zero input still exercises every parameter, bias paths included.
  const Vector zero = Vector::Zero(cfg.input_dim);
  CHECK(grad_check(model, zero, 1, 1e-5) < 1e-4);

  // The 2*lambda*theta term participates.
  ToyModelConfig heavy = cfg;
  heavy.weight_decay = 0.1;
  const ToyModel reg = train_toy(heavy, data);
  CHECK(grad_check(reg, data.inputs.row(0).transpose(),
                   data.labels[0], 1e-5) < 1e-4);

  CHECK_THROWS_AS(grad_check(model, zero, 0, 1e-7), std::invalid_argument);
}

TEST_CASE("later exits dominate on the default benchmark seed") {
  const SyntheticDataset data = gen_synthetic(1, 800, 16, 8, 1.0);
  ToyModelConfig cfg;  // defaults: the shipped benchmark
  cfg.seed = 1;
  const ToyModel model = train_toy(cfg, data);
  const double first = split_top1(model, data, SplitTag::val, 0);
  const double last = split_top1(model, data, SplitTag::val, cfg.n_block - 1);
  CHECK(last >= first);
}
