#include "crae/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace crae {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& why) {
  throw std::invalid_argument("config: key \"" + key + "\": " + why);
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) bad_value(key, "unparsable real \"" + value + "\"");
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, "unparsable real \"" + value + "\"");
  } catch (const std::out_of_range&) {
    bad_value(key, "real out of range \"" + value + "\"");
  }
}

long long parse_int(const std::string& key, const std::string& value) {
  long long v = 0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) bad_value(key, "unparsable integer \"" + value + "\"");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) bad_value(key, "unparsable seed \"" + value + "\"");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, "expected true/false");
}

void apply_key(ExperimentSpec& spec, const std::string& key, const std::string& value) {
  if (key == "method") {
    spec.methods.clear();
    for (const std::string& name : split_commas(value)) {
      try {
        spec.methods.push_back(method_from_name(name));
      } catch (const std::invalid_argument&) {
        bad_value(key, "unknown method \"" + name + "\"");
      }
    }
    if (spec.methods.empty()) bad_value(key, "empty method list");
  } else if (key == "seed") {
    spec.seeds.clear();
    for (const std::string& s : split_commas(value)) spec.seeds.push_back(parse_u64(key, s));
    if (spec.seeds.empty()) bad_value(key, "empty seed list");
  } else if (key == "classes") {
    spec.num_classes = static_cast<int>(parse_int(key, value));
    if (spec.num_classes < 2) bad_value(key, "need at least 2 classes");
  } else if (key == "height") {
    spec.height = static_cast<int>(parse_int(key, value));
  } else if (key == "width") {
    spec.width = static_cast<int>(parse_int(key, value));
  } else if (key == "n_per_class") {
    spec.n_per_class = static_cast<int>(parse_int(key, value));
  } else if (key == "n_labeled") {
    spec.n_labeled = static_cast<int>(parse_int(key, value));
  } else if (key == "n_test") {
    spec.n_test = static_cast<int>(parse_int(key, value));
  } else if (key == "noise_rate") {
    spec.noise_rate = parse_real(key, value);
    if (!(spec.noise_rate >= 0.0 && spec.noise_rate <= 0.2))
      bad_value(key, "must be in [0, 0.2]");
  } else if (key == "jitter") {
    spec.max_jitter = static_cast<int>(parse_int(key, value));
    if (spec.max_jitter < 0 || spec.max_jitter > 3) bad_value(key, "must be in [0, 3]");
  } else if (key == "backbone_widths") {
    spec.backbone_widths.clear();
    for (const std::string& s : split_commas(value)) {
      const int w = static_cast<int>(parse_int(key, s));
      if (w <= 0) bad_value(key, "widths must be positive");
      spec.backbone_widths.push_back(w);
    }
    if (spec.backbone_widths.empty()) bad_value(key, "empty width list");
  } else if (key == "proj_dim") {
    spec.proj_dim = static_cast<int>(parse_int(key, value));
    if (spec.proj_dim <= 0) bad_value(key, "must be positive");
  } else if (key == "head_hidden") {
    spec.head_hidden = static_cast<int>(parse_int(key, value));
    if (spec.head_hidden <= 0) bad_value(key, "must be positive");
  } else if (key == "eta") {
    spec.train.eta = parse_real(key, value);
    if (spec.train.eta < 0.0) bad_value(key, "must be nonnegative");
  } else if (key == "eta1") {
    spec.train.eta1 = parse_real(key, value);
    if (spec.train.eta1 < 0.0) bad_value(key, "must be nonnegative");
  } else if (key == "eta2") {
    spec.train.eta2 = parse_real(key, value);
    if (spec.train.eta2 < 0.0) bad_value(key, "must be nonnegative");
  } else if (key == "ramp_fraction") {
    spec.train.ramp_fraction = parse_real(key, value);
    if (!(spec.train.ramp_fraction >= 0.0 && spec.train.ramp_fraction <= 1.0))
      bad_value(key, "must be in [0, 1]");
  } else if (key == "temp") {
    spec.train.temperature = parse_real(key, value);
    if (!(spec.train.temperature > 0.0 && spec.train.temperature <= 1.0))
      bad_value(key, "must be in (0, 1]");
  } else if (key == "alpha_min") {
    spec.train.alpha_min = parse_real(key, value);
    if (!(spec.train.alpha_min >= 0.5 && spec.train.alpha_min <= 1.0))
      bad_value(key, "must be in [0.5, 1]");
  } else if (key == "alpha_max") {
    spec.train.alpha_max = parse_real(key, value);
    if (!(spec.train.alpha_max >= 0.5 && spec.train.alpha_max <= 1.0))
      bad_value(key, "must be in [0.5, 1]");
  } else if (key == "lr") {
    spec.train.learning_rate = parse_real(key, value);
    if (!(spec.train.learning_rate > 0.0)) bad_value(key, "must be positive");
  } else if (key == "momentum") {
    spec.train.momentum = parse_real(key, value);
    if (!(spec.train.momentum >= 0.0 && spec.train.momentum < 1.0))
      bad_value(key, "must be in [0, 1)");
  } else if (key == "batch") {
    spec.train.batch_size = static_cast<int>(parse_int(key, value));
    if (spec.train.batch_size <= 0) bad_value(key, "must be positive");
  } else if (key == "epochs") {
    spec.train.epochs = static_cast<int>(parse_int(key, value));
    if (spec.train.epochs < 0) bad_value(key, "must be nonnegative");
  } else if (key == "use_aux") {
    spec.train.use_aux = parse_bool(key, value);
  } else if (key == "out") {
    spec.out_dir = value;
    if (spec.out_dir.empty()) bad_value(key, "empty output directory");
  } else {
    throw std::invalid_argument("config: unknown key \"" + key + "\"");
  }
}

}  // namespace

std::vector<std::string> config_keys() {
  return {"method",     "seed",        "classes",    "height",     "width",
          "n_per_class", "n_labeled",  "n_test",     "noise_rate", "jitter",
          "backbone_widths", "proj_dim", "head_hidden", "eta",      "eta1",
          "eta2",       "ramp_fraction", "temp",     "alpha_min",  "alpha_max",
          "lr",         "momentum",    "batch",      "epochs",     "use_aux",
          "out"};
}

ModelConfig ExperimentSpec::model_config() const {
  ModelConfig mc;
  mc.input_dim = height * width;
  mc.backbone_widths = backbone_widths;
  mc.num_classes = num_classes;
  mc.proj_dim = proj_dim;
  mc.head_hidden = head_hidden;
  return mc;
}

void ExperimentSpec::validate() const {
  if (methods.empty()) throw std::invalid_argument("spec: empty method list");
  if (seeds.empty()) throw std::invalid_argument("spec: empty seed list");
  if (height < 8 || width < 8) throw std::invalid_argument("spec: image side must be at least 8");
  if (height != width) throw std::invalid_argument("spec: images must be square");
  if (n_per_class <= 0) throw std::invalid_argument("spec: n_per_class must be positive");
  if (n_labeled <= 0 || n_labeled % num_classes != 0)
    throw std::invalid_argument("spec: n_labeled must be a positive multiple of the class count");
  const long total = static_cast<long>(n_per_class) * num_classes;
  if (n_labeled + n_test >= total)
    throw std::invalid_argument("spec: n_labeled + n_test must be below the dataset size");
  model_config().validate();
  train.validate();
}

ExperimentSpec parse_config_text(const std::string& text, const CliOverrides& overrides) {
  ExperimentSpec spec;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  " is not a key = value pair");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config: empty key on line " +
                                                 std::to_string(line_no));
    apply_key(spec, key, value);
  }

  if (overrides.methods) apply_key(spec, "method", *overrides.methods);
  if (overrides.seeds) apply_key(spec, "seed", *overrides.seeds);
  if (overrides.n_labeled) apply_key(spec, "n_labeled", std::to_string(*overrides.n_labeled));
  if (overrides.epochs) apply_key(spec, "epochs", std::to_string(*overrides.epochs));
  if (overrides.out_dir) apply_key(spec, "out", *overrides.out_dir);
  auto real_override = [&spec](const char* key, const std::optional<double>& v) {
    if (v) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", *v);
      apply_key(spec, key, buf);
    }
  };
  real_override("eta", overrides.eta);
  real_override("eta1", overrides.eta1);
  real_override("eta2", overrides.eta2);
  real_override("temp", overrides.temperature);
  if (overrides.proj_dim) apply_key(spec, "proj_dim", std::to_string(*overrides.proj_dim));
  if (overrides.no_aux) apply_key(spec, "use_aux", "false");

  spec.validate();
  return spec;
}

ExperimentSpec parse_config(const std::string& path, const CliOverrides& overrides) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str(), overrides);
}

}  // namespace crae
