#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crae/runner.hpp"

using namespace crae;
namespace fs = std::filesystem;

namespace {

ExperimentSpec small_spec(const std::string& out_dir) {
  ExperimentSpec spec;
  spec.methods = {Method::kLabeledOnly, Method::kCrae};
  spec.seeds = {1, 2};
  spec.num_classes = 2;
  spec.height = 8;
  spec.width = 8;
  spec.n_per_class = 30;
  spec.n_labeled = 8;
  spec.n_test = 10;
  spec.noise_rate = 0.02;
  spec.max_jitter = 1;
  spec.backbone_widths = {16, 8};
  spec.proj_dim = 4;
  spec.head_hidden = 6;
  spec.train.batch_size = 8;
  spec.train.epochs = 2;
  spec.out_dir = out_dir;
  return spec;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> csv_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

double last_field(const std::string& line, int index) {
  std::stringstream ss(line);
  std::string field;
  for (int i = 0; i <= index; ++i) REQUIRE(std::getline(ss, field, ','));
  return std::strtod(field.c_str(), nullptr);
}

}  // namespace

TEST_CASE("run writes per-run files plus a summary and is bit-deterministic") {
  const fs::path base = fs::temp_directory_path() / "crae_runner_test";
  fs::remove_all(base);
  const ExperimentSpec spec_a = small_spec((base / "a").string());
  const ExperimentSpec spec_b = small_spec((base / "b").string());

  std::ostringstream sink;
  REQUIRE(run(spec_a, sink) == 0);
  REQUIRE(run(spec_b, sink) == 0);

  // 2 methods x 2 seeds -> 8 per-run files + summary.csv.
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(base / "a"))
    names.push_back(entry.path().filename().string());
  CHECK(names.size() == 9);

  for (Method m : spec_a.methods)
    for (std::uint64_t seed : spec_a.seeds) {
      const std::string stem = method_name(m) + "_" + std::to_string(seed);
      CHECK(fs::exists(base / "a" / (stem + "_metrics.csv")));
      CHECK(fs::exists(base / "a" / (stem + "_confusion.csv")));
    }

  // Bit-identical reruns.
  for (const std::string& name : names)
    CHECK(slurp((base / "a" / name).string()) == slurp((base / "b" / name).string()));

  // Summary has one row per method and its means match the per-run finals.
  const auto summary = csv_lines((base / "a" / "summary.csv").string());
  REQUIRE(summary.size() == 3);
  CHECK(summary[0] == "method,mean_test_error,std_test_error");
  for (std::size_t m = 0; m < spec_a.methods.size(); ++m) {
    double mean = 0.0;
    for (std::uint64_t seed : spec_a.seeds) {
      const std::string stem = method_name(spec_a.methods[m]) + "_" + std::to_string(seed);
      const auto lines = csv_lines((base / "a" / (stem + "_metrics.csv")).string());
      REQUIRE(lines.size() == 3);  // header + 2 epochs
      mean += last_field(lines.back(), 6);
    }
    mean /= static_cast<double>(spec_a.seeds.size());
    CHECK(last_field(summary[m + 1], 1) == doctest::Approx(mean).epsilon(1e-15));
    CHECK(summary[m + 1].substr(0, method_name(spec_a.methods[m]).size()) ==
          method_name(spec_a.methods[m]));
  }

  fs::remove_all(base);
}

TEST_CASE("run reports failure as a nonzero exit code") {
  ExperimentSpec spec = small_spec("/nonexistent-root-dir/crae");
  std::ostringstream sink;
  // create_directories under a nonexistent root on a read-only parent fails;
  // if the sandbox allows it, fall back to an invalid spec instead.
  spec.n_labeled = 7;  // not divisible by 2 classes -> validation error
  CHECK(run(spec, sink) == 1);
  CHECK(sink.str().find("error") != std::string::npos);
}

TEST_CASE("build_split honors the spec sizes") {
  const ExperimentSpec spec = small_spec("unused");
  const Split split = build_split(spec, 5);
  CHECK(split.labeled.size() == 8);
  CHECK(split.test.size() == 10);
  CHECK(split.unlabeled.size() == 60 - 8 - 10);
}
