#pragma once

#include "exitcal/bundle.hpp"
#include "exitcal/numerics.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace exitcal {

struct SyntheticDataset {
  Matrix inputs;               // n x d
  std::vector<int> labels;     // n, values in [0, c)
  std::vector<SplitTag> split;  // n
  int num_classes = 0;

  Eigen::Index n() const { return inputs.rows(); }
  Eigen::Index dim() const { return inputs.cols(); }
  std::vector<std::size_t> split_indices(SplitTag tag) const;
};

struct ToyModelConfig {
  int input_dim = 16;
  int num_classes = 8;
  int n_block = 4;
  std::vector<int> block_widths = {32, 32, 32, 32};  // exit feature dims
  int block_hidden = 256;  // internal expansion width of each block
  int epochs = 200;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // lambda in the L2 term
  int batch_size = 64;
  std::uint64_t seed = 1;

  void validate() const;
};

struct DenseLayer {
  Matrix weights;  // in x out; y = x * weights + bias
  Vector bias;     // out
};

/// One trunk block: expand to the hidden width, project to the exit
/// feature width, tanh after both layers.
struct ToyBlock {
  DenseLayer expand;
  DenseLayer project;
};

struct ToyModel {
  ToyModelConfig config;
  std::vector<ToyBlock> blocks;
  std::vector<DenseLayer> exit_heads;  // one linear head per block
  std::size_t parameter_count = 0;
  std::vector<double> epoch_train_loss;  // [0] is the loss at init
  int best_epoch = -1;

  /// Post-activation trunk outputs after each block; result[k] is n x p_k.
  std::vector<Matrix> trunk_features(const Matrix& inputs) const;

  /// Pre-softmax outputs of exit k (0-based) for a feature matrix.
  Matrix exit_logits(int k, const Matrix& features_k) const;

  /// Softmax prediction of exit k for a single input row.
  ProbVector predict_exit(int k, const Vector& input) const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// c Gaussian clusters with unit-sphere means scaled by 1/cluster_spread,
/// unit noise, stratified 80/10/10 split. Requires n >= 10c.
SyntheticDataset gen_synthetic(std::uint64_t seed, int n, int d, int c,
                               double cluster_spread);

/// SGD with momentum on the sum of per-exit cross-entropies plus
/// lambda * ||theta||^2; returns the epoch snapshot with the best
/// last-exit validation Top-1 (ties keep the earlier epoch).
ToyModel train_toy(const ToyModelConfig& cfg, const SyntheticDataset& data);

/// Features at every exit for every sample plus cumulative practical
/// FLOPs per exit (dense layers count in*out; activations are free).
FeatureBundle extract_features(const ToyModel& model,
                               const SyntheticDataset& data);

/// Cumulative practical FLOPs of the backbone up to each exit.
std::vector<long long> backbone_cum_flops(const ToyModelConfig& cfg);

/// Per-sample loss sum_k CE_k + lambda * ||theta||^2 for one input.
double sample_loss(const ToyModel& model, const Vector& input, int label);

/// Max relative error between analytic gradients of the single-sample
/// loss and central finite differences over all parameters.
double grad_check(const ToyModel& model, const Vector& input, int label,
                  double h);

}  // namespace exitcal
