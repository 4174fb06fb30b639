#pragma once

#include "exitcal/backbone.hpp"
#include "exitcal/bundle.hpp"
#include "exitcal/calibration.hpp"
#include "exitcal/laplace.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace exitcal {

/// Structured failure while reading an interchange directory.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kBundleFormatVersion = 1;

// Bundle directory layout: manifest.json plus one little-endian raw array
// per file — float32 for features/weights/biases, uint32 for labels,
// uint8 for split tags. Values are widened to float64 on load.
void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& dir);
FeatureBundle load_bundle(const std::filesystem::path& dir);

// Synthetic dataset directory: same conventions as the bundle.
void write_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);
SyntheticDataset load_dataset(const std::filesystem::path& dir);

// Toy model directory: manifest.json plus float64 arrays per layer.
void write_model(const ToyModel& model, const std::filesystem::path& dir);
ToyModel load_model(const std::filesystem::path& dir);

// Posterior directory: manifest naming sigma, T and shapes, plus float64
// arrays for the augmented MAP weights and the covariance factors.
void write_posterior(const KfacPosterior& post, const std::filesystem::path& dir);
KfacPosterior load_posterior(const std::filesystem::path& dir);

// Calibration manifest CSV: header `mode,exit,T,sigma,val_nlpd`.
void write_calibration_csv(const std::vector<CalibrationResult>& results,
                           const std::filesystem::path& file);
std::vector<CalibrationResult> load_calibration_csv(
    const std::filesystem::path& file);

}  // namespace exitcal
