#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crae/methods.hpp"
#include "crae/model.hpp"

namespace crae {

/// One experiment or a method x seed sweep over the synthetic benchmark.
/// Data regenerates per run from the run seed, so methods compared at equal
/// seed share identical splits.
struct ExperimentSpec {
  std::vector<Method> methods = {Method::kCrae};
  std::vector<std::uint64_t> seeds = {0};

  // data parameters
  int num_classes = 4;
  int height = 16;
  int width = 16;
  int n_per_class = 1260;
  int n_labeled = 40;
  int n_test = 1000;
  double noise_rate = 0.05;
  int max_jitter = 2;

  // model parameters
  std::vector<int> backbone_widths = {256, 128, 64};
  int proj_dim = 16;
  int head_hidden = 32;

  TrainConfig train;
  std::string out_dir = "out";

  ModelConfig model_config() const;
  void validate() const;
};

/// Command-line overrides; applied on top of file values.
struct CliOverrides {
  std::optional<std::string> methods;  // comma-separated method names
  std::optional<std::string> seeds;    // comma-separated integers
  std::optional<int> n_labeled;
  std::optional<int> epochs;
  std::optional<std::string> out_dir;
  std::optional<double> eta;
  std::optional<double> eta1;
  std::optional<double> eta2;
  std::optional<double> temperature;
  std::optional<int> proj_dim;
  bool no_aux = false;
};

/// Parses flat `key = value` text with `#` comments. Unknown keys and
/// unparsable or out-of-range values are errors naming the key. Absent keys
/// keep their defaults; overrides win over file values.
ExperimentSpec parse_config_text(const std::string& text, const CliOverrides& overrides);
ExperimentSpec parse_config(const std::string& path, const CliOverrides& overrides);

/// The recognized config keys, for documentation and error messages.
std::vector<std::string> config_keys();

}  // namespace crae
