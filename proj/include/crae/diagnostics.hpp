#pragma once

#include <string>
#include <vector>

#include "crae/data.hpp"
#include "crae/model.hpp"
#include "crae/rng.hpp"

namespace crae {

/// entries[i*C + j] is the fraction of rotated copies of class-i images whose
/// best-scoring rotation head is j. Rows sum to 1.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<double> entries;

  double at(int i, int j) const { return entries[static_cast<std::size_t>(i) * num_classes + j]; }
};

struct MetricsRecord {
  int epoch = 0;
  double supervised_ce = 0.0;
  double rotation_ce = 0.0;
  double sharpen_ce = 0.0;
  double aux_ce = 0.0;
  double total = 0.0;
  double test_error = 0.0;
  double diagonality = 0.0;
};

/// Fraction of test examples misclassified by test_predict.
double evaluate_error(const ModelParameters& params, const std::vector<Example>& test_set,
                      bool use_aux);

/// Counting core behind head_confusion: per rotated copy, `head_scores[r][j]`
/// is head j's probability on the copy's true angle; the best head is the
/// argmax with ties broken toward the lowest index. Throws if some class in
/// [0, C) never appears.
ConfusionMatrix confusion_from_scores(const std::vector<int>& true_classes,
                                      const std::vector<std::vector<double>>& head_scores,
                                      int num_classes);

/// Specialization matrix over all four rotations of every evaluation example.
ConfusionMatrix head_confusion(const ModelParameters& params,
                               const std::vector<Example>& eval_set);

/// Fixed random subsample used for the per-epoch confusion measurement.
std::vector<Example> confusion_eval_subset(const std::vector<Example>& pool, int max_count,
                                           Rng& rng);

/// trace(m) / C; 1 for perfectly specialized heads, 1/C for indifferent ones.
double diagonality(const ConfusionMatrix& m);

/// CSV with header epoch,supervised_ce,rotation_ce,sharpen_ce,aux_ce,total,
/// test_error,diagonality; reals at 17 significant digits (bit-exact on
/// round trip).
void write_metrics(const std::vector<MetricsRecord>& records, const std::string& path);

/// C lines of C comma-separated reals, 17 significant digits.
void write_confusion(const ConfusionMatrix& matrix, const std::string& path);

}  // namespace crae
