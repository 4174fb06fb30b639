#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "exitcal/pipeline.hpp"
#include "test_support.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace exitcal;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("exitcal_pipe_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::string first_line(const fs::path& file) {
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  return line;
}

RunConfig small_config(const fs::path& out) {
  RunConfig config;
  config.out_dir = out;
  config.seed = 3;
  config.n_mc = 12;
  config.n_samples = 200;
  config.input_dim = 8;
  config.num_classes = 4;
  config.cluster_spread = 0.8;
  config.toy = testing::tiny_config();
  config.toy.input_dim = 8;
  config.toy.num_classes = 4;
  config.toy.n_block = 3;
  config.toy.block_widths = {8, 8, 8};
  config.toy.block_hidden = 24;
  config.toy.epochs = 25;
  config.grid = HyperGrid{{0.7, 1.0, 1.5}, {1.0, 2.0}};
  config.budgets = {};  // default span
  return config;
}

}  // namespace

TEST_CASE("demo produces all artifacts with the documented headers") {
  const fs::path out = fresh_dir("demo");
  const DemoArtifacts artifacts = run_demo(small_config(out));

  CHECK(fs::exists(artifacts.bundle_dir / "manifest.json"));
  CHECK(fs::exists(artifacts.posteriors_dir / "exit_1" / "manifest.json"));
  CHECK(first_line(artifacts.budget_csv) ==
        "mode,budget_flops,mean_cost_flops,top1,top5,nlpd,ece");
  CHECK(first_line(artifacts.scatter_csv) ==
        "sample_id,exit,entropy,error,correct");
  CHECK(first_line(artifacts.overhead_csv) ==
        "exit,p,c,backbone_flops,naive_overhead,efficient_overhead,"
        "naive_rel,efficient_rel");
  CHECK(first_line(artifacts.calibration_csv) == "mode,exit,T,sigma,val_nlpd");

  // 4 modes x 20 default budgets, plus the header.
  std::ifstream curves(artifacts.budget_csv);
  std::string line;
  int rows = 0;
  while (std::getline(curves, line)) ++rows;
  CHECK(rows == 1 + 4 * 20);
}

TEST_CASE("demo is deterministic across runs and thread counts") {
  const fs::path out1 = fresh_dir("det1");
  const fs::path out2 = fresh_dir("det2");
  const fs::path out4 = fresh_dir("det4");

  RunConfig c1 = small_config(out1);
  c1.threads = 1;
  RunConfig c2 = small_config(out2);
  c2.threads = 1;
  RunConfig c4 = small_config(out4);
  c4.threads = 4;

  const DemoArtifacts a1 = run_demo(c1);
  const DemoArtifacts a2 = run_demo(c2);
  const DemoArtifacts a4 = run_demo(c4);

  CHECK(slurp(a1.budget_csv) == slurp(a2.budget_csv));
  CHECK(slurp(a1.scatter_csv) == slurp(a2.scatter_csv));
  CHECK(slurp(a1.overhead_csv) == slurp(a2.overhead_csv));
  CHECK(slurp(a1.calibration_csv) == slurp(a2.calibration_csv));

  CHECK(slurp(a1.budget_csv) == slurp(a4.budget_csv));
  CHECK(slurp(a1.scatter_csv) == slurp(a4.scatter_csv));
  CHECK(slurp(a1.calibration_csv) == slurp(a4.calibration_csv));
}

TEST_CASE("cross-decision mode emits an extra distinct curve") {
  const fs::path out = fresh_dir("cross");
  RunConfig config = small_config(out);
  config.cross_decide = PredictorMode::mie_laplace;
  config.cross_score = PredictorMode::vanilla;
  const DemoArtifacts artifacts = run_demo(config);

  std::ifstream curves(artifacts.budget_csv);
  std::string line;
  bool has_cross = false;
  int rows = 0;
  while (std::getline(curves, line)) {
    ++rows;
    if (line.rfind("decide-mie-laplace-score-vanilla,", 0) == 0) {
      has_cross = true;
    }
  }
  CHECK(has_cross);
  CHECK(rows == 1 + 5 * 20);

  // The cross curve differs from both pure curves somewhere.
  const std::string text = slurp(artifacts.budget_csv);
  std::map<std::string, std::vector<std::string>> by_mode;
  std::stringstream ss(text);
  std::getline(ss, line);  // header
  while (std::getline(ss, line)) {
    const std::string mode = line.substr(0, line.find(','));
    by_mode[mode].push_back(line.substr(line.find(',')));
  }
  const auto strip_cost = [](const std::vector<std::string>& rows_in) {
    // Drop the mean-cost column so only predictions are compared.
    std::vector<std::string> out;
    for (const std::string& r : rows_in) {
      std::stringstream rs(r);
      std::string field, rebuilt;
      int idx = 0;
      while (std::getline(rs, field, ',')) {
        if (idx != 2) rebuilt += field + ",";
        ++idx;
      }
      out.push_back(rebuilt);
    }
    return out;
  };
  CHECK(strip_cost(by_mode["decide-mie-laplace-score-vanilla"]) !=
        strip_cost(by_mode["vanilla"]));
  CHECK(strip_cost(by_mode["decide-mie-laplace-score-vanilla"]) !=
        strip_cost(by_mode["mie-laplace"]));
}
