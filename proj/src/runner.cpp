#include "crae/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "crae/diagnostics.hpp"

namespace crae {

namespace {

std::string run_stem(const ExperimentSpec& spec, Method method, std::uint64_t seed) {
  return spec.out_dir + "/" + method_name(method) + "_" + std::to_string(seed);
}

void write_summary(const std::string& path, const std::vector<Method>& methods,
                   const std::vector<std::vector<double>>& errors_per_method) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("run: cannot open " + path);
  out << "method,mean_test_error,std_test_error\n";
  char buf[40];
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const std::vector<double>& errs = errors_per_method[m];
    double mean = 0.0;
    for (double e : errs) mean += e;
    mean /= static_cast<double>(errs.size());
    double var = 0.0;
    if (errs.size() > 1) {
      for (double e : errs) var += (e - mean) * (e - mean);
      var /= static_cast<double>(errs.size() - 1);
    }
    out << method_name(methods[m]) << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", mean);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", std::sqrt(var));
    out << buf << '\n';
  }
  if (!out) throw std::runtime_error("run: write failed for " + path);
}

}  // namespace

Split build_split(const ExperimentSpec& spec, std::uint64_t seed) {
  const std::vector<GlyphTemplate> templates =
      make_templates(spec.num_classes, spec.height, spec.width, seed);
  const std::vector<Example> examples =
      generate_dataset(templates, spec.n_per_class, spec.noise_rate, spec.max_jitter, seed);
  return split_dataset(examples, spec.n_labeled, spec.n_test, seed);
}

int run(const ExperimentSpec& spec, std::ostream& log) {
  try {
    spec.validate();
    std::filesystem::create_directories(spec.out_dir);
    const ModelConfig model_config = spec.model_config();

    std::vector<std::vector<double>> final_errors(spec.methods.size());
    for (std::size_t m = 0; m < spec.methods.size(); ++m) {
      const Method method = spec.methods[m];
      for (std::uint64_t seed : spec.seeds) {
        const auto started = std::chrono::steady_clock::now();
        const Split split = build_split(spec, seed);
        TrainConfig train_config = spec.train;
        train_config.seed = seed;
        TrainResult result = train(method, split, model_config, train_config);

        const std::string stem = run_stem(spec, method, seed);
        write_metrics(result.metrics, stem + "_metrics.csv");
        write_confusion(head_confusion(result.params,
                                       training_confusion_set(split, spec.num_classes, seed)),
                        stem + "_confusion.csv");

        const double final_error =
            result.metrics.empty()
                ? evaluate_error(result.params, split.test,
                                 method_uses_aux(method, train_config))
                : result.metrics.back().test_error;
        final_errors[m].push_back(final_error);

        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        log << "[" << method_name(method) << " seed=" << seed << "] final test error "
            << final_error << " (" << seconds << " s)\n";
        log.flush();
      }
    }
    write_summary(spec.out_dir + "/summary.csv", spec.methods, final_errors);
    return 0;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(const ExperimentSpec& spec) { return run(spec, std::cout); }

}  // namespace crae
