#include "exitcal/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace exitcal {

namespace {

struct ModelGrads {
  std::vector<ToyBlock> blocks;
  std::vector<DenseLayer> exit_heads;
};

ModelGrads zero_grads(const ToyModel& model) {
  ModelGrads g;
  g.blocks.reserve(model.blocks.size());
  for (const ToyBlock& b : model.blocks) {
    ToyBlock z;
    z.expand.weights = Matrix::Zero(b.expand.weights.rows(), b.expand.weights.cols());
    z.expand.bias = Vector::Zero(b.expand.bias.size());
    z.project.weights =
        Matrix::Zero(b.project.weights.rows(), b.project.weights.cols());
    z.project.bias = Vector::Zero(b.project.bias.size());
    g.blocks.push_back(std::move(z));
  }
  for (const DenseLayer& h : model.exit_heads) {
    DenseLayer z;
    z.weights = Matrix::Zero(h.weights.rows(), h.weights.cols());
    z.bias = Vector::Zero(h.bias.size());
    g.exit_heads.push_back(std::move(z));
  }
  return g;
}

// Parameter traversal in a fixed order, shared by the update rule and the
// finite-difference loop.
template <typename Model, typename Fn>
void for_each_param(Model& model, Fn&& fn) {
  for (auto& block : model.blocks) {
    fn(block.expand.weights);
    fn(block.expand.bias);
    fn(block.project.weights);
    fn(block.project.bias);
  }
  for (auto& head : model.exit_heads) {
    fn(head.weights);
    fn(head.bias);
  }
}

double squared_param_norm(const ToyModel& model) {
  double total = 0.0;
  for_each_param(const_cast<ToyModel&>(model),
                 [&](const auto& p) { total += p.squaredNorm(); });
  return total;
}

struct ForwardCache {
  std::vector<Matrix> hidden;       // per block, n x hidden
  std::vector<Matrix> activations;  // per block, n x p_k
  std::vector<Matrix> logits;       // per exit, n x c
};

ForwardCache forward(const ToyModel& model, const Matrix& inputs) {
  ForwardCache cache;
  const std::size_t n_block = model.blocks.size();
  cache.hidden.resize(n_block);
  cache.activations.resize(n_block);
  cache.logits.resize(n_block);
  const Matrix* current = &inputs;
  for (std::size_t k = 0; k < n_block; ++k) {
    const ToyBlock& block = model.blocks[k];
    cache.hidden[k] = ((*current * block.expand.weights).rowwise() +
                       block.expand.bias.transpose())
                          .array()
                          .tanh();
    cache.activations[k] = ((cache.hidden[k] * block.project.weights).rowwise() +
                            block.project.bias.transpose())
                               .array()
                               .tanh();
    cache.logits[k] = (cache.activations[k] * model.exit_heads[k].weights)
                          .rowwise() +
                      model.exit_heads[k].bias.transpose();
    current = &cache.activations[k];
  }
  return cache;
}

// Cross-entropy data term summed over exits, averaged over rows; the L2
// term is not included here.
double data_loss(const ForwardCache& cache, const std::vector<int>& labels) {
  double total = 0.0;
  for (const Matrix& logits : cache.logits) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const auto row = logits.row(i);
      const double lse = row.maxCoeff() +
                         std::log((row.array() - row.maxCoeff()).exp().sum());
      total += lse - row(labels[static_cast<std::size_t>(i)]);
    }
  }
  return total / static_cast<double>(cache.logits.front().rows());
}

// Mean-over-batch gradients of the data term plus the 2*lambda*theta term.
ModelGrads backward(const ToyModel& model, const Matrix& inputs,
                    const std::vector<int>& labels,
                    const ForwardCache& cache) {
  const Eigen::Index n = inputs.rows();
  const std::size_t n_block = model.blocks.size();
  ModelGrads grads = zero_grads(model);

  Matrix upstream;  // gradient flowing into the next-lower block's output
  for (std::size_t k = n_block; k-- > 0;) {
    // Exit-head gradient at this block.
    Matrix dz(n, model.config.num_classes);
    for (Eigen::Index i = 0; i < n; ++i) {
      dz.row(i) = softmax(cache.logits[k].row(i).transpose()).transpose();
      dz(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    grads.exit_heads[k].weights = cache.activations[k].transpose() * dz;
    grads.exit_heads[k].bias = dz.colwise().sum().transpose();

    Matrix da = dz * model.exit_heads[k].weights.transpose();
    if (k + 1 < n_block) da += upstream;

    const Matrix dpre2 =
        da.array() * (1.0 - cache.activations[k].array().square());
    grads.blocks[k].project.weights = cache.hidden[k].transpose() * dpre2;
    grads.blocks[k].project.bias = dpre2.colwise().sum().transpose();

    const Matrix dh = dpre2 * model.blocks[k].project.weights.transpose();
    const Matrix dpre1 = dh.array() * (1.0 - cache.hidden[k].array().square());
    const Matrix& below = (k == 0) ? inputs : cache.activations[k - 1];
    grads.blocks[k].expand.weights = below.transpose() * dpre1;
    grads.blocks[k].expand.bias = dpre1.colwise().sum().transpose();
    upstream = dpre1 * model.blocks[k].expand.weights.transpose();
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  const double lambda = model.config.weight_decay;
  for (std::size_t k = 0; k < n_block; ++k) {
    grads.blocks[k].expand.weights =
        inv_n * grads.blocks[k].expand.weights +
        2.0 * lambda * model.blocks[k].expand.weights;
    grads.blocks[k].expand.bias = inv_n * grads.blocks[k].expand.bias +
                                  2.0 * lambda * model.blocks[k].expand.bias;
    grads.blocks[k].project.weights =
        inv_n * grads.blocks[k].project.weights +
        2.0 * lambda * model.blocks[k].project.weights;
    grads.blocks[k].project.bias = inv_n * grads.blocks[k].project.bias +
                                   2.0 * lambda * model.blocks[k].project.bias;
    grads.exit_heads[k].weights = inv_n * grads.exit_heads[k].weights +
                                  2.0 * lambda * model.exit_heads[k].weights;
    grads.exit_heads[k].bias = inv_n * grads.exit_heads[k].bias +
                               2.0 * lambda * model.exit_heads[k].bias;
  }
  return grads;
}

DenseLayer init_layer(Eigen::Index in, Eigen::Index out, GaussianStream stream) {
  DenseLayer layer;
  layer.weights.resize(in, out);
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  std::uint64_t lane = 0;
  for (Eigen::Index j = 0; j < out; ++j) {
    for (Eigen::Index i = 0; i < in; ++i) {
      layer.weights(i, j) = scale * normal_at(stream, lane++);
    }
  }
  layer.bias = Vector::Zero(out);
  return layer;
}

double last_exit_val_top1(const ToyModel& model, const SyntheticDataset& data,
                          const std::vector<std::size_t>& val_idx) {
  Matrix inputs(static_cast<Eigen::Index>(val_idx.size()), data.dim());
  for (std::size_t i = 0; i < val_idx.size(); ++i) {
    inputs.row(static_cast<Eigen::Index>(i)) =
        data.inputs.row(static_cast<Eigen::Index>(val_idx[i]));
  }
  const std::vector<Matrix> feats = model.trunk_features(inputs);
  const Matrix logits =
      model.exit_logits(static_cast<int>(model.blocks.size()) - 1, feats.back());
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index argmax = 0;
    logits.row(i).maxCoeff(&argmax);
    if (argmax == data.labels[val_idx[static_cast<std::size_t>(i)]]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(val_idx.size());
}

}  // namespace

std::vector<std::size_t> SyntheticDataset::split_indices(SplitTag tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == tag) out.push_back(i);
  }
  return out;
}

void ToyModelConfig::validate() const {
  if (input_dim < 2) throw std::invalid_argument("config: input_dim < 2");
  if (num_classes < 2) throw std::invalid_argument("config: num_classes < 2");
  if (n_block < 2) throw std::invalid_argument("config: n_block < 2");
  if (static_cast<int>(block_widths.size()) != n_block) {
    throw std::invalid_argument("config: block_widths size != n_block");
  }
  for (const int w : block_widths) {
    if (w < num_classes) {
      throw std::invalid_argument("config: block width below class count");
    }
  }
  if (block_hidden < 1) throw std::invalid_argument("config: block_hidden < 1");
  if (epochs < 1 || batch_size < 1) {
    throw std::invalid_argument("config: epochs and batch_size must be >= 1");
  }
  if (!(learning_rate > 0.0) || momentum < 0.0 || weight_decay < 0.0) {
    throw std::invalid_argument("config: bad optimizer settings");
  }
}

std::vector<Matrix> ToyModel::trunk_features(const Matrix& inputs) const {
  return forward(*this, inputs).activations;
}

Matrix ToyModel::exit_logits(int k, const Matrix& features_k) const {
  const DenseLayer& head = exit_heads[static_cast<std::size_t>(k)];
  return (features_k * head.weights).rowwise() + head.bias.transpose();
}

ProbVector ToyModel::predict_exit(int k, const Vector& input) const {
  const ForwardCache cache = forward(*this, input.transpose());
  return softmax(cache.logits[static_cast<std::size_t>(k)].row(0).transpose());
}

SyntheticDataset gen_synthetic(std::uint64_t seed, int n, int d, int c,
                               double cluster_spread) {
  if (c < 2 || d < 2) {
    throw std::invalid_argument("gen_synthetic: need d >= 2 and c >= 2");
  }
  if (n < 10 * c) {
    throw std::invalid_argument("gen_synthetic: need n >= 10c");
  }
  if (!(cluster_spread > 0.0)) {
    throw std::invalid_argument("gen_synthetic: cluster_spread must be > 0");
  }

  const std::uint64_t mean_seed = derive_seed(seed, "cluster-means");
  const std::uint64_t noise_seed = derive_seed(seed, "cluster-noise");
  const std::uint64_t split_seed = derive_seed(seed, "split-shuffle");

  Matrix means(c, d);
  for (int j = 0; j < c; ++j) {
    GaussianStream s{mean_seed, static_cast<std::uint64_t>(j), 0, 0};
    Vector v = draw_gaussian(s, d);
    means.row(j) = (v / v.norm() / cluster_spread).transpose();
  }

  SyntheticDataset data;
  data.num_classes = c;
  data.inputs.resize(n, d);
  data.labels.resize(static_cast<std::size_t>(n));
  data.split.resize(static_cast<std::size_t>(n));

  // Class sizes as even as possible; leftover goes to the lowest classes.
  std::vector<int> class_size(static_cast<std::size_t>(c), n / c);
  for (int j = 0; j < n % c; ++j) ++class_size[static_cast<std::size_t>(j)];

  int row = 0;
  for (int j = 0; j < c; ++j) {
    const int nc = class_size[static_cast<std::size_t>(j)];
    std::vector<int> local(static_cast<std::size_t>(nc));
    std::iota(local.begin(), local.end(), 0);
    // Deterministic Fisher-Yates keyed on (class, position).
    for (int i = nc - 1; i > 0; --i) {
      const std::uint64_t r =
          keyed_u64(split_seed, static_cast<std::uint64_t>(j),
                    static_cast<std::uint64_t>(i), 0, 0);
      std::swap(local[static_cast<std::size_t>(i)],
                local[static_cast<std::size_t>(r % static_cast<std::uint64_t>(i + 1))]);
    }
    const int n_val = std::max(1, nc / 10);
    const int n_test = std::max(1, nc / 10);
    for (int i = 0; i < nc; ++i) {
      const std::size_t idx = static_cast<std::size_t>(row);
      GaussianStream s{noise_seed, static_cast<std::uint64_t>(row), 0, 0};
      data.inputs.row(row) =
          means.row(j) + draw_gaussian(s, d).transpose();
      data.labels[idx] = j;
      const int pos = local[static_cast<std::size_t>(i)];
      if (pos < n_val) {
        data.split[idx] = SplitTag::val;
      } else if (pos < n_val + n_test) {
        data.split[idx] = SplitTag::test;
      } else {
        data.split[idx] = SplitTag::train;
      }
      ++row;
    }
  }
  return data;
}

ToyModel train_toy(const ToyModelConfig& cfg, const SyntheticDataset& data) {
  cfg.validate();
  if (data.n() < 1 || data.dim() != cfg.input_dim ||
      data.num_classes != cfg.num_classes) {
    throw std::invalid_argument("train_toy: dataset does not match config");
  }
  for (const int y : data.labels) {
    if (y < 0 || y >= cfg.num_classes) {
      throw std::invalid_argument("train_toy: label out of range");
    }
  }

  const std::uint64_t init_seed = derive_seed(cfg.seed, "model-init");
  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, "epoch-shuffle");

  ToyModel model;
  model.config = cfg;
  std::uint64_t layer_id = 0;
  Eigen::Index in = cfg.input_dim;
  for (int k = 0; k < cfg.n_block; ++k) {
    ToyBlock block;
    block.expand = init_layer(in, cfg.block_hidden,
                              GaussianStream{init_seed, layer_id++, 0, 0});
    block.project =
        init_layer(cfg.block_hidden, cfg.block_widths[static_cast<std::size_t>(k)],
                   GaussianStream{init_seed, layer_id++, 0, 0});
    model.blocks.push_back(std::move(block));
    in = cfg.block_widths[static_cast<std::size_t>(k)];
    model.exit_heads.push_back(init_layer(
        in, cfg.num_classes, GaussianStream{init_seed, layer_id++, 0, 0}));
  }
  model.parameter_count = 0;
  for_each_param(model, [&](const auto& p) {
    model.parameter_count += static_cast<std::size_t>(p.size());
  });

  const std::vector<std::size_t> train_idx = data.split_indices(SplitTag::train);
  const std::vector<std::size_t> val_idx = data.split_indices(SplitTag::val);
  if (train_idx.empty() || val_idx.empty()) {
    throw std::invalid_argument("train_toy: empty train or validation split");
  }

  Matrix train_inputs(static_cast<Eigen::Index>(train_idx.size()), data.dim());
  std::vector<int> train_labels(train_idx.size());
  for (std::size_t i = 0; i < train_idx.size(); ++i) {
    train_inputs.row(static_cast<Eigen::Index>(i)) =
        data.inputs.row(static_cast<Eigen::Index>(train_idx[i]));
    train_labels[i] = data.labels[train_idx[i]];
  }

  {
    const ForwardCache cache = forward(model, train_inputs);
    model.epoch_train_loss.push_back(
        data_loss(cache, train_labels) +
        cfg.weight_decay * squared_param_norm(model));
  }

  ModelGrads velocity = zero_grads(model);
  // Candidates for the returned snapshot are the post-epoch states; the
  // first epoch always replaces the initialization.
  ToyModel best = model;
  double best_top1 = -1.0;
  int best_epoch = 0;

  std::vector<std::size_t> order(train_idx.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      const std::uint64_t r = keyed_u64(shuffle_seed,
                                        static_cast<std::uint64_t>(epoch), i, 0, 0);
      std::swap(order[i], order[r % (i + 1)]);
    }

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(
          order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const Eigen::Index bs = static_cast<Eigen::Index>(stop - start);
      Matrix batch(bs, data.dim());
      std::vector<int> batch_labels(static_cast<std::size_t>(bs));
      for (Eigen::Index i = 0; i < bs; ++i) {
        const std::size_t src = order[start + static_cast<std::size_t>(i)];
        batch.row(i) = train_inputs.row(static_cast<Eigen::Index>(src));
        batch_labels[static_cast<std::size_t>(i)] = train_labels[src];
      }

      const ForwardCache cache = forward(model, batch);
      const double loss = data_loss(cache, batch_labels) +
                          cfg.weight_decay * squared_param_norm(model);
      if (!std::isfinite(loss)) {
        throw TrainingError(
            "train_toy: loss diverged at epoch " + std::to_string(epoch),
            epoch);
      }
      epoch_loss += loss;
      ++batches;

      const ModelGrads grads = backward(model, batch, batch_labels, cache);
      for (std::size_t k = 0; k < model.blocks.size(); ++k) {
        auto step = [&](Matrix& v, Matrix& theta, const Matrix& g) {
          v = cfg.momentum * v - cfg.learning_rate * g;
          theta += v;
        };
        auto step_v = [&](Vector& v, Vector& theta, const Vector& g) {
          v = cfg.momentum * v - cfg.learning_rate * g;
          theta += v;
        };
        step(velocity.blocks[k].expand.weights, model.blocks[k].expand.weights,
             grads.blocks[k].expand.weights);
        step_v(velocity.blocks[k].expand.bias, model.blocks[k].expand.bias,
               grads.blocks[k].expand.bias);
        step(velocity.blocks[k].project.weights,
             model.blocks[k].project.weights, grads.blocks[k].project.weights);
        step_v(velocity.blocks[k].project.bias, model.blocks[k].project.bias,
               grads.blocks[k].project.bias);
        step(velocity.exit_heads[k].weights, model.exit_heads[k].weights,
             grads.exit_heads[k].weights);
        step_v(velocity.exit_heads[k].bias, model.exit_heads[k].bias,
               grads.exit_heads[k].bias);
      }
    }
    model.epoch_train_loss.push_back(epoch_loss /
                                     static_cast<double>(batches));

    const double top1 = last_exit_val_top1(model, data, val_idx);
    if (top1 > best_top1) {
      best_top1 = top1;
      best = model;
      best_epoch = epoch;
    }
  }

  best.epoch_train_loss = model.epoch_train_loss;
  best.best_epoch = best_epoch;
  return best;
}

std::vector<long long> backbone_cum_flops(const ToyModelConfig& cfg) {
  std::vector<long long> flops;
  long long total = 0;
  long long in = cfg.input_dim;
  for (int k = 0; k < cfg.n_block; ++k) {
    const long long out = cfg.block_widths[static_cast<std::size_t>(k)];
    total += in * cfg.block_hidden;       // expand layer MACs
    total += cfg.block_hidden * out;      // project layer MACs
    total += out * cfg.num_classes;       // exit head MACs
    flops.push_back(total);
    in = out;
  }
  return flops;
}

FeatureBundle extract_features(const ToyModel& model,
                               const SyntheticDataset& data) {
  if (data.dim() != model.config.input_dim ||
      data.num_classes != model.config.num_classes) {
    throw std::invalid_argument("extract_features: dataset/model mismatch");
  }
  const std::vector<Matrix> activations = model.trunk_features(data.inputs);
  const std::vector<long long> flops = backbone_cum_flops(model.config);

  FeatureBundle bundle;
  bundle.num_classes = model.config.num_classes;
  bundle.labels = data.labels;
  bundle.split = data.split;
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    FeatureBundle::Exit exit;
    exit.features = activations[k];
    exit.weights = model.exit_heads[k].weights;
    exit.bias = model.exit_heads[k].bias;
    exit.cum_flops = flops[k];
    bundle.exits.push_back(std::move(exit));
  }
  bundle.validate();
  return bundle;
}

double sample_loss(const ToyModel& model, const Vector& input, int label) {
  const ForwardCache cache = forward(model, input.transpose());
  return data_loss(cache, std::vector<int>{label}) +
         model.config.weight_decay * squared_param_norm(model);
}

double grad_check(const ToyModel& model, const Vector& input, int label,
                  double h) {
  if (h < 1e-6 || h > 1e-4) {
    throw std::invalid_argument("grad_check: h must be in [1e-6, 1e-4]");
  }
  const ForwardCache cache = forward(model, input.transpose());
  ModelGrads analytic =
      backward(model, input.transpose(), std::vector<int>{label}, cache);

  ToyModel probe = model;
  std::vector<double*> params;
  std::vector<const double*> grads;
  for_each_param(probe, [&](auto& p) {
    for (Eigen::Index i = 0; i < p.size(); ++i) params.push_back(p.data() + i);
  });
  for_each_param(analytic, [&](auto& p) {
    for (Eigen::Index i = 0; i < p.size(); ++i) grads.push_back(p.data() + i);
  });

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = *params[i];
    *params[i] = saved + h;
    const double up = sample_loss(probe, input, label);
    *params[i] = saved - h;
    const double down = sample_loss(probe, input, label);
    *params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = *grads[i];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace exitcal
