#include "exitcal/bundle_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace exitcal {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_bytes(const fs::path& file, const void* data, std::size_t bytes) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot open for writing: " + file.string());
  out.write(static_cast<const char*>(data),
            static_cast<std::streamsize>(bytes));
  if (!out) throw LoadError("short write: " + file.string());
}

std::vector<char> read_bytes(const fs::path& file, std::size_t expected) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("missing array file: " + file.string());
  std::vector<char> buffer((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  if (buffer.size() != expected) {
    throw LoadError("length mismatch in " + file.string() + ": expected " +
                    std::to_string(expected) + " bytes, found " +
                    std::to_string(buffer.size()));
  }
  return buffer;
}

void write_f32_matrix(const fs::path& file, const Matrix& m) {
  std::vector<float> data(static_cast<std::size_t>(m.size()));
  std::size_t idx = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      data[idx++] = static_cast<float>(m(i, j));
    }
  }
  write_bytes(file, data.data(), data.size() * sizeof(float));
}

Matrix load_f32_matrix(const fs::path& file, Eigen::Index rows,
                       Eigen::Index cols) {
  const std::size_t count = static_cast<std::size_t>(rows * cols);
  const std::vector<char> buffer = read_bytes(file, count * sizeof(float));
  Matrix m(rows, cols);
  const float* values = reinterpret_cast<const float*>(buffer.data());
  std::size_t idx = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      m(i, j) = static_cast<double>(values[idx++]);
    }
  }
  if (!m.allFinite()) {
    throw LoadError("non-finite values in " + file.string());
  }
  return m;
}

void write_f64_matrix(const fs::path& file, const Matrix& m) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  std::size_t idx = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data[idx++] = m(i, j);
  }
  write_bytes(file, data.data(), data.size() * sizeof(double));
}

Matrix load_f64_matrix(const fs::path& file, Eigen::Index rows,
                       Eigen::Index cols) {
  const std::size_t count = static_cast<std::size_t>(rows * cols);
  const std::vector<char> buffer = read_bytes(file, count * sizeof(double));
  Matrix m(rows, cols);
  const double* values = reinterpret_cast<const double*>(buffer.data());
  std::size_t idx = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = values[idx++];
  }
  if (!m.allFinite()) {
    throw LoadError("non-finite values in " + file.string());
  }
  return m;
}

void write_u32_array(const fs::path& file, const std::vector<int>& values) {
  std::vector<std::uint32_t> data(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    data[i] = static_cast<std::uint32_t>(values[i]);
  }
  write_bytes(file, data.data(), data.size() * sizeof(std::uint32_t));
}

std::vector<int> load_u32_array(const fs::path& file, std::size_t count) {
  const std::vector<char> buffer =
      read_bytes(file, count * sizeof(std::uint32_t));
  const std::uint32_t* values =
      reinterpret_cast<const std::uint32_t*>(buffer.data());
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<int>(values[i]);
  return out;
}

void write_split_array(const fs::path& file, const std::vector<SplitTag>& tags) {
  std::vector<std::uint8_t> data(tags.size());
  for (std::size_t i = 0; i < tags.size(); ++i) {
    data[i] = static_cast<std::uint8_t>(tags[i]);
  }
  write_bytes(file, data.data(), data.size());
}

std::vector<SplitTag> load_split_array(const fs::path& file, std::size_t count) {
  const std::vector<char> buffer = read_bytes(file, count);
  std::vector<SplitTag> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t v = static_cast<std::uint8_t>(buffer[i]);
    if (v > 2) throw LoadError("bad split tag in " + file.string());
    out[i] = static_cast<SplitTag>(v);
  }
  return out;
}

json load_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw LoadError("missing manifest: " + (dir / "manifest.json").string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw LoadError("bad manifest in " + dir.string() + ": " + e.what());
  }
  return manifest;
}

void write_manifest(const fs::path& dir, const json& manifest) {
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw LoadError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

std::uintmax_t array_bytes_f32(const Matrix& m) {
  return static_cast<std::uintmax_t>(m.size()) * sizeof(float);
}

}  // namespace

void write_bundle(const FeatureBundle& bundle, const fs::path& dir) {
  bundle.validate();
  fs::create_directories(dir);

  json manifest;
  manifest["format_version"] = kBundleFormatVersion;
  manifest["n_exits"] = bundle.n_exits();
  manifest["n_classes"] = bundle.num_classes;
  manifest["n_samples"] = bundle.labels.size();

  json exits = json::array();
  for (int k = 0; k < bundle.n_exits(); ++k) {
    const FeatureBundle::Exit& e = bundle.exits[static_cast<std::size_t>(k)];
    const std::string suffix = "_exit_" + std::to_string(k + 1) + ".f32";
    json entry;
    entry["feature_dim"] = e.features.cols();
    entry["cum_flops"] = e.cum_flops;
    entry["features_file"] = "features" + suffix;
    entry["features_bytes"] = array_bytes_f32(e.features);
    entry["weights_file"] = "weights" + suffix;
    entry["weights_bytes"] = array_bytes_f32(e.weights);
    entry["bias_file"] = "bias" + suffix;
    entry["bias_bytes"] =
        static_cast<std::uintmax_t>(e.bias.size()) * sizeof(float);
    exits.push_back(entry);

    write_f32_matrix(dir / ("features" + suffix), e.features);
    write_f32_matrix(dir / ("weights" + suffix), e.weights);
    write_f32_matrix(dir / ("bias" + suffix), e.bias);
  }
  manifest["exits"] = exits;

  int train = 0, val = 0, test = 0;
  for (const SplitTag t : bundle.split) {
    if (t == SplitTag::train) ++train;
    else if (t == SplitTag::val) ++val;
    else ++test;
  }
  manifest["split_counts"] = {{"train", train}, {"val", val}, {"test", test}};
  manifest["labels_file"] = "labels.u32";
  manifest["splits_file"] = "splits.u8";

  write_u32_array(dir / "labels.u32", bundle.labels);
  write_split_array(dir / "splits.u8", bundle.split);
  write_manifest(dir, manifest);
}

FeatureBundle load_bundle(const fs::path& dir) {
  const json manifest = load_manifest(dir);
  if (manifest.value("format_version", -1) != kBundleFormatVersion) {
    throw LoadError("bundle format version mismatch in " + dir.string());
  }
  FeatureBundle bundle;
  bundle.num_classes = manifest.at("n_classes").get<int>();
  const std::size_t n = manifest.at("n_samples").get<std::size_t>();
  const int n_exits = manifest.at("n_exits").get<int>();

  bundle.labels = load_u32_array(dir / manifest.at("labels_file").get<std::string>(), n);
  bundle.split = load_split_array(dir / manifest.at("splits_file").get<std::string>(), n);

  const json& exits = manifest.at("exits");
  if (static_cast<int>(exits.size()) != n_exits) {
    throw LoadError("bundle manifest exit count mismatch in " + dir.string());
  }
  long long prev_flops = 0;
  for (const json& entry : exits) {
    FeatureBundle::Exit exit;
    const Eigen::Index p = entry.at("feature_dim").get<Eigen::Index>();
    exit.cum_flops = entry.at("cum_flops").get<long long>();
    if (exit.cum_flops <= prev_flops) {
      throw LoadError("bundle manifest: cumulative FLOPs not increasing");
    }
    prev_flops = exit.cum_flops;
    exit.features = load_f32_matrix(
        dir / entry.at("features_file").get<std::string>(),
        static_cast<Eigen::Index>(n), p);
    exit.weights = load_f32_matrix(
        dir / entry.at("weights_file").get<std::string>(), p,
        bundle.num_classes);
    const Matrix bias = load_f32_matrix(
        dir / entry.at("bias_file").get<std::string>(), bundle.num_classes, 1);
    exit.bias = bias.col(0);
    bundle.exits.push_back(std::move(exit));
  }
  bundle.validate();
  return bundle;
}

void write_dataset(const SyntheticDataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kBundleFormatVersion;
  manifest["n_samples"] = data.n();
  manifest["input_dim"] = data.dim();
  manifest["n_classes"] = data.num_classes;
  manifest["inputs_file"] = "inputs.f32";
  manifest["labels_file"] = "labels.u32";
  manifest["splits_file"] = "splits.u8";
  write_f32_matrix(dir / "inputs.f32", data.inputs);
  write_u32_array(dir / "labels.u32", data.labels);
  write_split_array(dir / "splits.u8", data.split);
  write_manifest(dir, manifest);
}

SyntheticDataset load_dataset(const fs::path& dir) {
  const json manifest = load_manifest(dir);
  SyntheticDataset data;
  const Eigen::Index n = manifest.at("n_samples").get<Eigen::Index>();
  const Eigen::Index d = manifest.at("input_dim").get<Eigen::Index>();
  data.num_classes = manifest.at("n_classes").get<int>();
  if (data.num_classes < 2 || d < 2 || n < 1) {
    throw LoadError("dataset manifest has degenerate shapes in " + dir.string());
  }
  data.inputs = load_f32_matrix(dir / manifest.at("inputs_file").get<std::string>(), n, d);
  data.labels = load_u32_array(dir / manifest.at("labels_file").get<std::string>(),
                               static_cast<std::size_t>(n));
  data.split = load_split_array(dir / manifest.at("splits_file").get<std::string>(),
                                static_cast<std::size_t>(n));
  for (const int y : data.labels) {
    if (y < 0 || y >= data.num_classes) {
      throw LoadError("dataset label out of range in " + dir.string());
    }
  }
  return data;
}

void write_model(const ToyModel& model, const fs::path& dir) {
  fs::create_directories(dir);
  const ToyModelConfig& cfg = model.config;
  json manifest;
  manifest["format_version"] = kBundleFormatVersion;
  manifest["input_dim"] = cfg.input_dim;
  manifest["num_classes"] = cfg.num_classes;
  manifest["n_block"] = cfg.n_block;
  manifest["block_widths"] = cfg.block_widths;
  manifest["block_hidden"] = cfg.block_hidden;
  manifest["epochs"] = cfg.epochs;
  manifest["learning_rate"] = cfg.learning_rate;
  manifest["momentum"] = cfg.momentum;
  manifest["weight_decay"] = cfg.weight_decay;
  manifest["batch_size"] = cfg.batch_size;
  manifest["seed"] = cfg.seed;
  manifest["best_epoch"] = model.best_epoch;
  manifest["parameter_count"] = model.parameter_count;

  for (int k = 0; k < cfg.n_block; ++k) {
    const std::string tag = std::to_string(k + 1);
    const ToyBlock& b = model.blocks[static_cast<std::size_t>(k)];
    write_f64_matrix(dir / ("block_" + tag + "_expand_w.f64"), b.expand.weights);
    write_f64_matrix(dir / ("block_" + tag + "_expand_b.f64"), b.expand.bias);
    write_f64_matrix(dir / ("block_" + tag + "_project_w.f64"), b.project.weights);
    write_f64_matrix(dir / ("block_" + tag + "_project_b.f64"), b.project.bias);
    const DenseLayer& h = model.exit_heads[static_cast<std::size_t>(k)];
    write_f64_matrix(dir / ("exit_" + tag + "_w.f64"), h.weights);
    write_f64_matrix(dir / ("exit_" + tag + "_b.f64"), h.bias);
  }
  write_manifest(dir, manifest);
}

ToyModel load_model(const fs::path& dir) {
  const json manifest = load_manifest(dir);
  ToyModel model;
  ToyModelConfig& cfg = model.config;
  cfg.input_dim = manifest.at("input_dim").get<int>();
  cfg.num_classes = manifest.at("num_classes").get<int>();
  cfg.n_block = manifest.at("n_block").get<int>();
  cfg.block_widths = manifest.at("block_widths").get<std::vector<int>>();
  cfg.block_hidden = manifest.at("block_hidden").get<int>();
  cfg.epochs = manifest.at("epochs").get<int>();
  cfg.learning_rate = manifest.at("learning_rate").get<double>();
  cfg.momentum = manifest.at("momentum").get<double>();
  cfg.weight_decay = manifest.at("weight_decay").get<double>();
  cfg.batch_size = manifest.at("batch_size").get<int>();
  cfg.seed = manifest.at("seed").get<std::uint64_t>();
  model.best_epoch = manifest.at("best_epoch").get<int>();
  model.parameter_count = manifest.at("parameter_count").get<std::size_t>();

  Eigen::Index in = cfg.input_dim;
  for (int k = 0; k < cfg.n_block; ++k) {
    const std::string tag = std::to_string(k + 1);
    const Eigen::Index out = cfg.block_widths[static_cast<std::size_t>(k)];
    ToyBlock b;
    b.expand.weights =
        load_f64_matrix(dir / ("block_" + tag + "_expand_w.f64"), in,
                        cfg.block_hidden);
    b.expand.bias =
        load_f64_matrix(dir / ("block_" + tag + "_expand_b.f64"),
                        cfg.block_hidden, 1)
            .col(0);
    b.project.weights = load_f64_matrix(
        dir / ("block_" + tag + "_project_w.f64"), cfg.block_hidden, out);
    b.project.bias =
        load_f64_matrix(dir / ("block_" + tag + "_project_b.f64"), out, 1)
            .col(0);
    model.blocks.push_back(std::move(b));
    DenseLayer head;
    head.weights =
        load_f64_matrix(dir / ("exit_" + tag + "_w.f64"), out, cfg.num_classes);
    head.bias =
        load_f64_matrix(dir / ("exit_" + tag + "_b.f64"), cfg.num_classes, 1)
            .col(0);
    model.exit_heads.push_back(std::move(head));
    in = out;
  }
  return model;
}

void write_posterior(const KfacPosterior& post, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kBundleFormatVersion;
  manifest["feature_dim"] = post.feature_dim();
  manifest["num_classes"] = post.num_classes();
  manifest["sigma"] = post.prior_sigma;
  manifest["temperature"] = post.temperature;
  manifest["map_weights_file"] = "map_weights.f64";
  manifest["feature_cov_file"] = "feature_cov.f64";
  manifest["output_cov_file"] = "output_cov.f64";
  manifest["output_chol_file"] = "output_chol.f64";
  write_f64_matrix(dir / "map_weights.f64", post.map_weights);
  write_f64_matrix(dir / "feature_cov.f64", post.feature_cov);
  write_f64_matrix(dir / "output_cov.f64", post.output_cov);
  write_f64_matrix(dir / "output_chol.f64", post.output_cov_chol);
  write_manifest(dir, manifest);
}

KfacPosterior load_posterior(const fs::path& dir) {
  const json manifest = load_manifest(dir);
  const Eigen::Index p = manifest.at("feature_dim").get<Eigen::Index>();
  const Eigen::Index c = manifest.at("num_classes").get<Eigen::Index>();
  KfacPosterior post;
  post.prior_sigma = manifest.at("sigma").get<double>();
  post.temperature = manifest.at("temperature").get<double>();
  post.map_weights = load_f64_matrix(
      dir / manifest.at("map_weights_file").get<std::string>(), p + 1, c);
  post.feature_cov = load_f64_matrix(
      dir / manifest.at("feature_cov_file").get<std::string>(), p + 1, p + 1);
  post.output_cov = load_f64_matrix(
      dir / manifest.at("output_cov_file").get<std::string>(), c, c);
  post.output_cov_chol = load_f64_matrix(
      dir / manifest.at("output_chol_file").get<std::string>(), c, c);
  if ((post.output_cov_chol * post.output_cov_chol.transpose() -
       post.output_cov)
          .cwiseAbs()
          .maxCoeff() > 1e-8 * std::max(1.0, post.output_cov.cwiseAbs().maxCoeff())) {
    throw LoadError("posterior: Cholesky factor does not match covariance");
  }
  return post;
}

void write_calibration_csv(const std::vector<CalibrationResult>& results,
                           const fs::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + file.string());
  out << "mode,exit,T,sigma,val_nlpd\n";
  char line[160];
  for (const CalibrationResult& result : results) {
    for (std::size_t k = 0; k < result.exits.size(); ++k) {
      const ExitChoice& c = result.exits[k];
      std::snprintf(line, sizeof(line), "%s,%zu,%.10g,%.10g,%.10g\n",
                    to_string(result.mode).c_str(), k + 1, c.temperature,
                    c.sigma, c.val_nlpd);
      out << line;
    }
  }
}

std::vector<CalibrationResult> load_calibration_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot read " + file.string());
  std::string header;
  std::getline(in, header);
  if (header != "mode,exit,T,sigma,val_nlpd") {
    throw LoadError("unexpected calibration header in " + file.string());
  }
  std::vector<CalibrationResult> results;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string mode_name, field;
    std::getline(ss, mode_name, ',');
    ExitChoice choice;
    std::size_t exit_index = 0;
    std::getline(ss, field, ',');
    exit_index = static_cast<std::size_t>(std::stoul(field));
    std::getline(ss, field, ',');
    choice.temperature = std::stod(field);
    std::getline(ss, field, ',');
    choice.sigma = std::stod(field);
    std::getline(ss, field, ',');
    choice.val_nlpd = std::stod(field);

    SearchMode mode;
    if (mode_name == "independent") mode = SearchMode::independent;
    else if (mode_name == "sequential-mie") mode = SearchMode::sequential_mie;
    else if (mode_name == "T-only") mode = SearchMode::temperature_only;
    else if (mode_name == "sigma-only") mode = SearchMode::sigma_only;
    else if (mode_name == "vanilla-T") mode = SearchMode::vanilla_temperature;
    else throw LoadError("unknown calibration mode: " + mode_name);

    auto it = std::find_if(results.begin(), results.end(),
                           [&](const CalibrationResult& r) {
                             return r.mode == mode;
                           });
    if (it == results.end()) {
      results.push_back(CalibrationResult{mode, {}});
      it = results.end() - 1;
    }
    if (it->exits.size() + 1 != exit_index) {
      throw LoadError("calibration rows out of order in " + file.string());
    }
    it->exits.push_back(choice);
  }
  return results;
}

}  // namespace exitcal
