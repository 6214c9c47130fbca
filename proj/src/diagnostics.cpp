#include "crae/diagnostics.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace crae {

double evaluate_error(const ModelParameters& params, const std::vector<Example>& test_set,
                      bool use_aux) {
  if (test_set.empty()) throw std::invalid_argument("evaluate_error: empty test set");
  std::vector<Image> images;
  images.reserve(test_set.size());
  for (const Example& e : test_set) images.push_back(e.image);
  const std::vector<int> pred = test_predict(params, images, use_aux);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < test_set.size(); ++i)
    if (pred[i] != test_set[i].label) ++wrong;
  return static_cast<double>(wrong) / static_cast<double>(test_set.size());
}

ConfusionMatrix confusion_from_scores(const std::vector<int>& true_classes,
                                      const std::vector<std::vector<double>>& head_scores,
                                      int num_classes) {
  if (true_classes.size() != head_scores.size())
    throw std::invalid_argument("confusion_from_scores: size mismatch");
  std::vector<double> counts(static_cast<std::size_t>(num_classes) * num_classes, 0.0);
  std::vector<double> row_totals(num_classes, 0.0);
  for (std::size_t r = 0; r < true_classes.size(); ++r) {
    const int y = true_classes[r];
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("confusion_from_scores: class id out of range");
    const std::vector<double>& scores = head_scores[r];
    if (static_cast<int>(scores.size()) != num_classes)
      throw std::invalid_argument("confusion_from_scores: wrong score count");
    int best = 0;
    for (int j = 1; j < num_classes; ++j)
      if (scores[j] > scores[best]) best = j;
    counts[static_cast<std::size_t>(y) * num_classes + best] += 1.0;
    row_totals[y] += 1.0;
  }
  for (int i = 0; i < num_classes; ++i) {
    if (row_totals[i] == 0.0)
      throw std::invalid_argument("confusion_from_scores: class " + std::to_string(i) +
                                  " has no examples");
    for (int j = 0; j < num_classes; ++j)
      counts[static_cast<std::size_t>(i) * num_classes + j] /= row_totals[i];
  }
  return ConfusionMatrix{num_classes, std::move(counts)};
}

ConfusionMatrix head_confusion(const ModelParameters& params,
                               const std::vector<Example>& eval_set) {
  if (eval_set.empty()) throw std::invalid_argument("head_confusion: empty evaluation set");
  const int C = params.config.num_classes;
  const int K = params.config.num_angles;

  std::vector<Image> images;
  std::vector<int> true_classes;
  std::vector<int> true_angles;
  images.reserve(eval_set.size() * 4);
  for (const Example& e : eval_set) {
    for (const RotatedExample& rot : rotation_quadruple(e)) {
      images.push_back(rot.image);
      true_classes.push_back(e.label);
      true_angles.push_back(rot.angle_index);
    }
  }

  ForwardOutput out = forward(params, images_to_tensor(images));
  std::vector<std::vector<double>> head_scores(images.size(), std::vector<double>(C));
  for (std::size_t r = 0; r < images.size(); ++r)
    for (int j = 0; j < C; ++j)
      head_scores[r][j] = out.head_dists[j].values()[r * K + true_angles[r]];
  return confusion_from_scores(true_classes, head_scores, C);
}

std::vector<Example> confusion_eval_subset(const std::vector<Example>& pool, int max_count,
                                           Rng& rng) {
  std::vector<int> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const std::size_t n = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(max_count));
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool[order[i]]);
  return out;
}

double diagonality(const ConfusionMatrix& m) {
  double trace = 0.0;
  for (int i = 0; i < m.num_classes; ++i) trace += m.at(i, i);
  return trace / static_cast<double>(m.num_classes);
}

namespace {

void print_real(std::ofstream& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out << buf;
}

}  // namespace

void write_metrics(const std::vector<MetricsRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_metrics: cannot open " + path);
  out << "epoch,supervised_ce,rotation_ce,sharpen_ce,aux_ce,total,test_error,diagonality\n";
  for (const MetricsRecord& r : records) {
    out << r.epoch << ',';
    print_real(out, r.supervised_ce);
    out << ',';
    print_real(out, r.rotation_ce);
    out << ',';
    print_real(out, r.sharpen_ce);
    out << ',';
    print_real(out, r.aux_ce);
    out << ',';
    print_real(out, r.total);
    out << ',';
    print_real(out, r.test_error);
    out << ',';
    print_real(out, r.diagonality);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_metrics: write failed for " + path);
}

void write_confusion(const ConfusionMatrix& matrix, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_confusion: cannot open " + path);
  for (int i = 0; i < matrix.num_classes; ++i) {
    for (int j = 0; j < matrix.num_classes; ++j) {
      print_real(out, matrix.at(i, j));
      out << (j + 1 == matrix.num_classes ? '\n' : ',');
    }
  }
  if (!out) throw std::runtime_error("write_confusion: write failed for " + path);
}

}  // namespace crae
