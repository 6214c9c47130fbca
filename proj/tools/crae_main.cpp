#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "crae/config.hpp"
#include "crae/runner.hpp"

namespace {

// Debug utility: PGM dumps of the labeled split for the first run seed.
int dump_images(const crae::ExperimentSpec& spec, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const crae::Split split = crae::build_split(spec, spec.seeds.front());
  int index = 0;
  for (const crae::Example& e : split.labeled) {
    char name[64];
    std::snprintf(name, sizeof(name), "class%d_%03d.pgm", e.label, index++);
    crae::write_pgm(e.image, dir + "/" + name);
  }
  std::cout << "wrote " << index << " labeled examples to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised learning lab: conditional rotation angle estimation "
               "and its baselines on a synthetic glyph benchmark"};

  std::string config_path;
  std::string dump_dir;
  crae::CliOverrides overrides;
  std::string methods, seeds, out_dir;
  int labels = 0, epochs = 0, proj_dim = 0;
  double eta = 0, eta1 = 0, eta2 = 0, temperature = 0;

  app.add_option("--config", config_path, "Flat key = value configuration file");
  auto* method_opt = app.add_option("--method", methods, "Comma-separated method names");
  auto* seed_opt = app.add_option("--seed", seeds, "Comma-separated run seeds");
  auto* labels_opt = app.add_option("--labels", labels, "Number of labeled examples");
  auto* epochs_opt = app.add_option("--epochs", epochs, "Training epochs");
  auto* out_opt = app.add_option("--out", out_dir, "Output directory");
  auto* eta_opt = app.add_option("--eta", eta, "Rotation-loss weight");
  auto* eta1_opt = app.add_option("--eta1", eta1, "Mixed-rotation weight");
  auto* eta2_opt = app.add_option("--eta2", eta2, "Sharpen-loss weight");
  auto* temp_opt = app.add_option("--temp", temperature, "Sharpening temperature in (0, 1]");
  auto* proj_opt = app.add_option("--proj-dim", proj_dim, "Rotation-branch input width");
  auto* no_aux_flag = app.add_flag("--no-aux", "Disable the auxiliary classifier");
  app.add_option("--dump-images", dump_dir,
                 "Write the labeled split as PGM files to this directory and exit");

  CLI11_PARSE(app, argc, argv);

  if (method_opt->count() > 0) overrides.methods = methods;
  if (seed_opt->count() > 0) overrides.seeds = seeds;
  if (labels_opt->count() > 0) overrides.n_labeled = labels;
  if (epochs_opt->count() > 0) overrides.epochs = epochs;
  if (out_opt->count() > 0) overrides.out_dir = out_dir;
  if (eta_opt->count() > 0) overrides.eta = eta;
  if (eta1_opt->count() > 0) overrides.eta1 = eta1;
  if (eta2_opt->count() > 0) overrides.eta2 = eta2;
  if (temp_opt->count() > 0) overrides.temperature = temperature;
  if (proj_opt->count() > 0) overrides.proj_dim = proj_dim;
  if (no_aux_flag->count() > 0) overrides.no_aux = true;

  try {
    const crae::ExperimentSpec spec =
        config_path.empty() ? crae::parse_config_text("", overrides)
                            : crae::parse_config(config_path, overrides);
    if (!dump_dir.empty()) return dump_images(spec, dump_dir);
    return crae::run(spec);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
