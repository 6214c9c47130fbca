#include "crae/methods.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace crae {

namespace {

constexpr std::uint64_t kTagInit = 0x6d6431u;
constexpr std::uint64_t kTagMethodNoise = 0x6d6432u;
constexpr std::uint64_t kTagConfusionSubset = 0x6d6433u;
constexpr std::uint64_t kTagFineTuneHead = 0x6d6434u;

constexpr int kConfusionSubsetSize = 512;

Tensor one_hot(const std::vector<int>& ids, int width) {
  std::vector<double> v(ids.size() * static_cast<std::size_t>(width), 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= width)
      throw std::invalid_argument("one_hot: id " + std::to_string(ids[i]) +
                                  " out of range [0, " + std::to_string(width) + ")");
    v[i * width + ids[i]] = 1.0;
  }
  return Tensor({ids.size(), static_cast<std::size_t>(width)}, std::move(v));
}

struct RotBatch {
  std::vector<Image> images;
  std::vector<int> angles;
  std::vector<int> labels;
};

// Every example expanded into its four rotated copies, source-major, angle
// order z = 0..3 within each source.
RotBatch expand_rotations(const std::vector<Example>& batch) {
  RotBatch out;
  out.images.reserve(batch.size() * 4);
  out.angles.reserve(batch.size() * 4);
  out.labels.reserve(batch.size() * 4);
  for (const Example& e : batch) {
    for (RotatedExample& rot : rotation_quadruple(e)) {
      out.images.push_back(std::move(rot.image));
      out.angles.push_back(rot.angle_index);
      out.labels.push_back(e.label);
    }
  }
  return out;
}

std::vector<Image> images_of(const std::vector<Example>& batch) {
  std::vector<Image> out;
  out.reserve(batch.size());
  for (const Example& e : batch) out.push_back(e.image);
  return out;
}

std::vector<int> labels_of(const std::vector<Example>& batch) {
  std::vector<int> out;
  out.reserve(batch.size());
  for (const Example& e : batch) out.push_back(e.label);
  return out;
}

// Rotation loss of the unweighted head ensemble: mean over heads of the
// cross-entropy against the true angle.
Tensor heads_mean_ce(const std::vector<Tensor>& heads, const Tensor& angle_targets) {
  Tensor acc = cross_entropy(heads[0], angle_targets);
  for (std::size_t k = 1; k < heads.size(); ++k)
    acc = add(acc, cross_entropy(heads[k], angle_targets));
  return scale(acc, 1.0 / static_cast<double>(heads.size()));
}

// Combines the labeled and unlabeled group means into the mean over all rows.
Tensor row_weighted_pair(const Tensor& labeled_ce, std::size_t n_labeled,
                         const Tensor& unlabeled_ce, std::size_t n_unlabeled) {
  const double total = static_cast<double>(n_labeled + n_unlabeled);
  return add(scale(labeled_ce, static_cast<double>(n_labeled) / total),
             scale(unlabeled_ce, static_cast<double>(n_unlabeled) / total));
}

Tensor uncond_rotation_ce(const ModelParameters& params, const RotBatch& batch) {
  ForwardOutput fwd = forward(params, images_to_tensor(batch.images));
  return cross_entropy(uncond_rotation_dist(params, fwd.features),
                       one_hot(batch.angles, params.config.num_angles));
}

// Mixed copies for the crae_plus rotation task. Per rotated row, in row
// order: distractor index, distractor angle, mixing coefficient.
std::vector<Image> mix_rotated_batch(const RotBatch& rotated, const std::vector<Example>& source,
                                     const TrainConfig& config, Rng& rng) {
  std::vector<Image> out;
  out.reserve(rotated.images.size());
  for (const Image& img : rotated.images) {
    const int j = rng.uniform_int(static_cast<int>(source.size()));
    const int k = rng.uniform_int(4);
    const double alpha = rng.uniform(config.alpha_min, config.alpha_max);
    out.push_back(mix_images(img, rotate90(source[j].image, k), alpha));
  }
  return out;
}

// Sharpened targets for every rotated copy, grouped by source image; the
// four rows of one source share its target. Constant (gradient-stopped).
Tensor sharpen_target_rows(const Tensor& p_y_rotated, std::size_t n_sources, double temperature) {
  const std::size_t c = p_y_rotated.cols();
  std::vector<double> rows;
  rows.reserve(p_y_rotated.numel());
  for (std::size_t i = 0; i < n_sources; ++i) {
    std::vector<std::vector<double>> quad(4, std::vector<double>(c));
    for (int z = 0; z < 4; ++z)
      for (std::size_t j = 0; j < c; ++j)
        quad[z][j] = p_y_rotated.values()[(i * 4 + z) * c + j];
    const std::vector<double> target = sharpen_target(quad, temperature);
    for (int z = 0; z < 4; ++z) rows.insert(rows.end(), target.begin(), target.end());
  }
  return Tensor({n_sources * 4, c}, std::move(rows));
}

void check_labeled_batch(const std::vector<Example>& labeled, const char* where) {
  if (labeled.empty())
    throw std::invalid_argument(std::string(where) + ": empty labeled batch");
}

BatchLoss finish(Tensor total, LossBreakdown parts) {
  parts.total = total.scalar();
  return BatchLoss{std::move(total), parts};
}

// ---------------------------------------------------------------------------
// Per-method batch losses
// ---------------------------------------------------------------------------

BatchLoss labeled_only_losses(const ModelParameters& params, const std::vector<Example>& labeled) {
  check_labeled_batch(labeled, "labeled_only");
  ForwardOutput fwd = forward(params, images_to_tensor(images_of(labeled)));
  Tensor targets = one_hot(labels_of(labeled), params.config.num_classes);
  Tensor sup = cross_entropy(fwd.p_y, targets);
  LossBreakdown parts;
  parts.supervised_ce = sup.scalar();
  return finish(std::move(sup), parts);
}

BatchLoss rotaug_losses(const ModelParameters& params, const std::vector<Example>& labeled) {
  check_labeled_batch(labeled, "rot_aug_supervised");
  RotBatch rot = expand_rotations(labeled);
  ForwardOutput fwd = forward(params, images_to_tensor(rot.images));
  Tensor targets = one_hot(rot.labels, params.config.num_classes);
  Tensor sup = cross_entropy(fwd.p_y, targets);
  LossBreakdown parts;
  parts.supervised_ce = sup.scalar();
  return finish(std::move(sup), parts);
}

BatchLoss sharpen_only_losses(const ModelParameters& params, const std::vector<Example>& labeled,
                              const std::vector<Example>& unlabeled, const TrainConfig& config,
                              double sharpen_ramp) {
  check_labeled_batch(labeled, "sharpen_only");
  const bool aux_on = method_uses_aux(Method::kSharpenOnly, config);
  RotBatch lrot = expand_rotations(labeled);
  ForwardOutput fwd = forward(params, images_to_tensor(lrot.images));
  Tensor class_targets = one_hot(lrot.labels, params.config.num_classes);
  Tensor sup = cross_entropy(fwd.p_y, class_targets);
  LossBreakdown parts;
  parts.supervised_ce = sup.scalar();
  Tensor total = sup;
  if (!unlabeled.empty()) {
    RotBatch urot = expand_rotations(unlabeled);
    ForwardOutput fwd_u = forward(params, images_to_tensor(urot.images));
    Tensor targets = sharpen_target_rows(fwd_u.p_y, unlabeled.size(), config.temperature);
    Tensor sharpen_ce = cross_entropy(fwd_u.p_y, targets);
    parts.sharpen_ce = sharpen_ce.scalar();
    total = add(total, scale(sharpen_ce, sharpen_ramp * config.eta2));
  }
  if (aux_on) {
    Tensor aux = cross_entropy(fwd.p_aux, class_targets);
    parts.aux_ce = aux.scalar();
    total = add(total, aux);
  }
  return finish(std::move(total), parts);
}

BatchLoss finetune_pretext_losses(const ModelParameters& params,
                                  const std::vector<Example>& labeled,
                                  const std::vector<Example>& unlabeled) {
  check_labeled_batch(labeled, "fine_tune");
  RotBatch lrot = expand_rotations(labeled);
  Tensor ce_l = uncond_rotation_ce(params, lrot);
  Tensor rot = ce_l;
  if (!unlabeled.empty()) {
    RotBatch urot = expand_rotations(unlabeled);
    Tensor ce_u = uncond_rotation_ce(params, urot);
    rot = row_weighted_pair(ce_l, lrot.images.size(), ce_u, urot.images.size());
  }
  LossBreakdown parts;
  parts.rotation_ce = rot.scalar();
  return finish(std::move(rot), parts);
}

BatchLoss s4l_losses(const ModelParameters& params, const std::vector<Example>& labeled,
                     const std::vector<Example>& unlabeled, const TrainConfig& config) {
  check_labeled_batch(labeled, "s4l");
  const bool aux_on = method_uses_aux(Method::kS4L, config);
  ForwardOutput fwd0 = forward(params, images_to_tensor(images_of(labeled)));
  Tensor targets = one_hot(labels_of(labeled), params.config.num_classes);
  Tensor sup = cross_entropy(fwd0.p_y, targets);

  RotBatch lrot = expand_rotations(labeled);
  Tensor ce_l = uncond_rotation_ce(params, lrot);
  Tensor rot = ce_l;
  if (!unlabeled.empty()) {
    RotBatch urot = expand_rotations(unlabeled);
    Tensor ce_u = uncond_rotation_ce(params, urot);
    rot = row_weighted_pair(ce_l, lrot.images.size(), ce_u, urot.images.size());
  }

  LossBreakdown parts;
  parts.supervised_ce = sup.scalar();
  parts.rotation_ce = rot.scalar();
  Tensor total = add(sup, scale(rot, config.eta));
  if (aux_on) {
    Tensor aux = cross_entropy(fwd0.p_aux, targets);
    parts.aux_ce = aux.scalar();
    total = add(total, aux);
  }
  return finish(std::move(total), parts);
}

// crae and the baselines that keep its structure but change the unlabeled
// mixture weights (ensemble_random, ensemble_independent, crae_detach).
BatchLoss crae_family_losses(Method method, const ModelParameters& params,
                             const std::vector<Example>& labeled,
                             const std::vector<Example>& unlabeled, const TrainConfig& config,
                             Rng& rng) {
  check_labeled_batch(labeled, "crae");
  const int C = params.config.num_classes;
  const int K = params.config.num_angles;
  const bool aux_on = method_uses_aux(method, config);

  ForwardOutput fwd0 = forward(params, images_to_tensor(images_of(labeled)));
  Tensor class_targets = one_hot(labels_of(labeled), C);
  Tensor sup = cross_entropy(fwd0.p_y, class_targets);

  RotBatch lrot = expand_rotations(labeled);
  ForwardOutput fwd_l = forward(params, images_to_tensor(lrot.images));
  Tensor angle_targets_l = one_hot(lrot.angles, K);
  // Ground-truth labels select the matching head exactly; only
  // ensemble_independent ignores them and trains every head on every row.
  Tensor ce_l = method == Method::kEnsembleIndependent
                    ? heads_mean_ce(fwd_l.head_dists, angle_targets_l)
                    : cross_entropy(marginalize(fwd_l.head_dists, one_hot(lrot.labels, C)),
                                    angle_targets_l);

  Tensor rot = ce_l;
  if (!unlabeled.empty()) {
    RotBatch urot = expand_rotations(unlabeled);
    ForwardOutput fwd_u = forward(params, images_to_tensor(urot.images));
    Tensor angle_targets_u = one_hot(urot.angles, K);
    std::optional<Tensor> weights = baseline_weights(method, fwd_u.p_y, rng);
    Tensor ce_u = weights ? cross_entropy(marginalize(fwd_u.head_dists, *weights), angle_targets_u)
                          : heads_mean_ce(fwd_u.head_dists, angle_targets_u);
    rot = row_weighted_pair(ce_l, lrot.images.size(), ce_u, urot.images.size());
  }

  LossBreakdown parts;
  parts.supervised_ce = sup.scalar();
  parts.rotation_ce = rot.scalar();
  Tensor total = add(sup, scale(rot, config.eta));
  if (aux_on) {
    Tensor aux = cross_entropy(fwd0.p_aux, class_targets);
    parts.aux_ce = aux.scalar();
    total = add(total, aux);
  }
  return finish(std::move(total), parts);
}

}  // namespace

// ---------------------------------------------------------------------------
// Public surface
// ---------------------------------------------------------------------------

std::string method_name(Method method) {
  switch (method) {
    case Method::kLabeledOnly: return "labeled_only";
    case Method::kRotAugSupervised: return "rot_aug_supervised";
    case Method::kSharpenOnly: return "sharpen_only";
    case Method::kFineTune: return "fine_tune";
    case Method::kS4L: return "s4l";
    case Method::kCrae: return "crae";
    case Method::kCraePlus: return "crae_plus";
    case Method::kEnsembleRandom: return "ensemble_random";
    case Method::kEnsembleIndependent: return "ensemble_independent";
    case Method::kCraeDetach: return "crae_detach";
  }
  throw std::invalid_argument("method_name: unknown method");
}

Method method_from_name(const std::string& name) {
  for (Method m : kAllMethods)
    if (method_name(m) == name) return m;
  throw std::invalid_argument("unknown method \"" + name + "\"");
}

void TrainConfig::validate() const {
  if (!(temperature > 0.0 && temperature <= 1.0))
    throw std::invalid_argument("TrainConfig: temperature must be in (0, 1]");
  if (eta < 0.0 || eta1 < 0.0 || eta2 < 0.0)
    throw std::invalid_argument("TrainConfig: loss weights must be nonnegative");
  if (!(ramp_fraction >= 0.0 && ramp_fraction <= 1.0))
    throw std::invalid_argument("TrainConfig: ramp_fraction must be in [0, 1]");
  if (!(alpha_min >= 0.5 && alpha_min <= alpha_max && alpha_max <= 1.0))
    throw std::invalid_argument("TrainConfig: alpha range must satisfy 0.5 <= min <= max <= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  if (batch_size <= 0) throw std::invalid_argument("TrainConfig: batch size must be > 0");
  if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
}

bool method_uses_aux(Method method, const TrainConfig& config) {
  if (!config.use_aux) return false;
  switch (method) {
    case Method::kLabeledOnly:
    case Method::kRotAugSupervised:
    case Method::kFineTune:
      return false;
    default:
      return true;
  }
}

Tensor marginalize(const std::vector<Tensor>& head_dists, const Tensor& weights) {
  if (head_dists.empty()) throw std::invalid_argument("marginalize: no heads");
  if (weights.shape().size() != 2)
    throw std::invalid_argument("marginalize: weights must be a b x C matrix");
  const std::size_t b = weights.shape()[0];
  const std::size_t c = weights.shape()[1];
  if (c != head_dists.size())
    throw std::invalid_argument("marginalize: weight width does not match the head count");
  const std::size_t k = head_dists.front().cols();
  for (const Tensor& h : head_dists)
    if (h.shape().size() != 2 || h.shape()[0] != b || h.shape()[1] != k)
      throw std::invalid_argument("marginalize: inconsistent head shapes");

  auto check_rows = [](const Tensor& t, const char* what) {
    const std::size_t cols = t.shape()[1];
    const std::size_t rows = t.shape()[0];
    for (std::size_t i = 0; i < rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        const double v = t.values()[i * cols + j];
        if (!(v >= 0.0))
          throw std::invalid_argument(std::string("marginalize: negative entry in ") + what);
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-6)
        throw std::invalid_argument(std::string("marginalize: ") + what +
                                    " row does not sum to 1");
    }
  };
  check_rows(weights, "weights");
  for (const Tensor& h : head_dists) check_rows(h, "head distribution");

  std::vector<double> out(b * k, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t kk = 0; kk < c; ++kk) {
      const double w = weights.values()[i * c + kk];
      const double* src = head_dists[kk].values().data() + i * k;
      double* dst = out.data() + i * k;
      for (std::size_t j = 0; j < k; ++j) dst[j] += w * src[j];
    }

  std::vector<Tensor> inputs(head_dists.begin(), head_dists.end());
  inputs.push_back(weights);
  return make_op(
      {b, k}, std::move(out), std::move(inputs),
      [b, c, k](const std::vector<double>& g, std::vector<Tensor>& ins) {
        Tensor& w = ins[c];
        for (std::size_t kk = 0; kk < c; ++kk) {
          Tensor& h = ins[kk];
          if (!h.requires_grad()) continue;
          auto& dh = h.grad_buffer();
          for (std::size_t i = 0; i < b; ++i) {
            const double wv = w.values()[i * c + kk];
            if (wv == 0.0) continue;
            for (std::size_t j = 0; j < k; ++j) dh[i * k + j] += g[i * k + j] * wv;
          }
        }
        if (w.requires_grad()) {
          auto& dw = w.grad_buffer();
          for (std::size_t kk = 0; kk < c; ++kk) {
            const auto& hv = ins[kk].values();
            for (std::size_t i = 0; i < b; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < k; ++j) acc += g[i * k + j] * hv[i * k + j];
              dw[i * c + kk] += acc;
            }
          }
        }
      });
}

std::vector<double> sharpen(const std::vector<double>& p_bar, double temperature) {
  if (!(temperature > 0.0 && temperature <= 1.0))
    throw std::invalid_argument("sharpen: temperature must be in (0, 1]");
  if (p_bar.empty()) throw std::invalid_argument("sharpen: empty distribution");
  double sum = 0.0, mx = 0.0;
  for (double v : p_bar) {
    if (!(v >= 0.0)) throw std::invalid_argument("sharpen: negative probability");
    sum += v;
    mx = std::max(mx, v);
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("sharpen: input does not sum to 1");
  // Normalizing by the max first keeps the powers away from underflow.
  const double exponent = 1.0 / temperature;
  std::vector<double> out(p_bar.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < p_bar.size(); ++i) {
    out[i] = std::pow(p_bar[i] / mx, exponent);
    norm += out[i];
  }
  for (double& v : out) v /= norm;
  return out;
}

std::vector<double> sharpen_target(const std::vector<std::vector<double>>& rotated_predictions,
                                   double temperature) {
  if (rotated_predictions.size() != 4)
    throw std::invalid_argument("sharpen_target: expected the four rotated copies' predictions");
  const std::size_t c = rotated_predictions.front().size();
  std::vector<double> mean(c, 0.0);
  for (const std::vector<double>& row : rotated_predictions) {
    if (row.size() != c) throw std::invalid_argument("sharpen_target: inconsistent widths");
    for (std::size_t j = 0; j < c; ++j) mean[j] += 0.25 * row[j];
  }
  return sharpen(mean, temperature);
}

std::optional<Tensor> baseline_weights(Method method, const Tensor& p_y, Rng& rng) {
  switch (method) {
    case Method::kCrae:
    case Method::kCraePlus:
      return p_y;
    case Method::kCraeDetach:
      return p_y.detach();
    case Method::kEnsembleRandom: {
      const std::size_t c = p_y.cols();
      std::vector<int> picks(p_y.rows());
      for (int& v : picks) v = rng.uniform_int(static_cast<int>(c));
      return one_hot(picks, static_cast<int>(c));
    }
    case Method::kEnsembleIndependent:
      return std::nullopt;
    default:
      throw std::invalid_argument("baseline_weights: " + method_name(method) +
                                  " has no rotation mixture weighting");
  }
}

BatchLoss crae_batch_losses(const ModelParameters& params, const std::vector<Example>& labeled,
                            const std::vector<Example>& unlabeled, const TrainConfig& config) {
  Rng unused(0);
  return crae_family_losses(Method::kCrae, params, labeled, unlabeled, config, unused);
}

BatchLoss craeplus_batch_losses(const ModelParameters& params, const std::vector<Example>& labeled,
                                const std::vector<Example>& unlabeled, const TrainConfig& config,
                                Rng& rng, double sharpen_ramp) {
  check_labeled_batch(labeled, "crae_plus");
  const int C = params.config.num_classes;
  const int K = params.config.num_angles;
  const bool aux_on = method_uses_aux(Method::kCraePlus, config);

  ForwardOutput fwd0 = forward(params, images_to_tensor(images_of(labeled)));
  Tensor class_targets = one_hot(labels_of(labeled), C);
  Tensor sup = cross_entropy(fwd0.p_y, class_targets);

  // Labeled rotated copies, mixed with distractors from the labeled batch.
  RotBatch lrot = expand_rotations(labeled);
  std::vector<Image> lmix = mix_rotated_batch(lrot, labeled, config, rng);
  ForwardOutput fwd_lm = forward(params, images_to_tensor(lmix));
  Tensor ce_l = cross_entropy(marginalize(fwd_lm.head_dists, one_hot(lrot.labels, C)),
                              one_hot(lrot.angles, K));

  LossBreakdown parts;
  Tensor rot = ce_l;
  Tensor sharpen_ce;
  if (!unlabeled.empty()) {
    // One unmixed forward per rotated copy supplies both extension signals:
    // the sharpened targets and the mixture weights for the mixed rotation
    // task ("the class prediction is calculated from the unmixed version").
    RotBatch urot = expand_rotations(unlabeled);
    ForwardOutput fwd_u = forward(params, images_to_tensor(urot.images));
    Tensor sharp_targets = sharpen_target_rows(fwd_u.p_y, unlabeled.size(), config.temperature);
    sharpen_ce = cross_entropy(fwd_u.p_y, sharp_targets);
    parts.sharpen_ce = sharpen_ce.scalar();

    std::vector<Image> umix = mix_rotated_batch(urot, unlabeled, config, rng);
    ForwardOutput fwd_um = forward(params, images_to_tensor(umix));
    Tensor ce_u =
        cross_entropy(marginalize(fwd_um.head_dists, fwd_u.p_y), one_hot(urot.angles, K));
    rot = row_weighted_pair(ce_l, lrot.images.size(), ce_u, urot.images.size());
  }

  parts.supervised_ce = sup.scalar();
  parts.rotation_ce = rot.scalar();
  Tensor total = add(sup, scale(rot, config.eta1));
  if (sharpen_ce.defined()) total = add(total, scale(sharpen_ce, sharpen_ramp * config.eta2));
  if (aux_on) {
    Tensor aux = cross_entropy(fwd0.p_aux, class_targets);
    parts.aux_ce = aux.scalar();
    total = add(total, aux);
  }
  return finish(std::move(total), parts);
}

BatchLoss method_batch_losses(Method method, const ModelParameters& params,
                              const std::vector<Example>& labeled,
                              const std::vector<Example>& unlabeled, const TrainConfig& config,
                              Rng& rng, double sharpen_ramp, bool pretext_stage) {
  switch (method) {
    case Method::kLabeledOnly:
      return labeled_only_losses(params, labeled);
    case Method::kRotAugSupervised:
      return rotaug_losses(params, labeled);
    case Method::kSharpenOnly:
      return sharpen_only_losses(params, labeled, unlabeled, config, sharpen_ramp);
    case Method::kFineTune:
      return pretext_stage ? finetune_pretext_losses(params, labeled, unlabeled)
                           : labeled_only_losses(params, labeled);
    case Method::kS4L:
      return s4l_losses(params, labeled, unlabeled, config);
    case Method::kCrae:
    case Method::kEnsembleRandom:
    case Method::kEnsembleIndependent:
    case Method::kCraeDetach:
      return crae_family_losses(method, params, labeled, unlabeled, config, rng);
    case Method::kCraePlus:
      return craeplus_batch_losses(params, labeled, unlabeled, config, rng, sharpen_ramp);
  }
  throw std::invalid_argument("method_batch_losses: unknown method");
}

Tensor unlabeled_rotation_loss(Method method, const ModelParameters& params,
                               const std::vector<Example>& unlabeled, const TrainConfig& config,
                               Rng& rng) {
  if (unlabeled.empty())
    throw std::invalid_argument("unlabeled_rotation_loss: empty unlabeled batch");
  RotBatch urot = expand_rotations(unlabeled);
  Tensor angle_targets = one_hot(urot.angles, params.config.num_angles);
  switch (method) {
    case Method::kS4L:
    case Method::kFineTune:
      return uncond_rotation_ce(params, urot);
    case Method::kCrae:
    case Method::kEnsembleRandom:
    case Method::kEnsembleIndependent:
    case Method::kCraeDetach: {
      ForwardOutput fwd = forward(params, images_to_tensor(urot.images));
      std::optional<Tensor> weights = baseline_weights(method, fwd.p_y, rng);
      return weights ? cross_entropy(marginalize(fwd.head_dists, *weights), angle_targets)
                     : heads_mean_ce(fwd.head_dists, angle_targets);
    }
    case Method::kCraePlus: {
      ForwardOutput fwd_u = forward(params, images_to_tensor(urot.images));
      std::vector<Image> umix = mix_rotated_batch(urot, unlabeled, config, rng);
      ForwardOutput fwd_um = forward(params, images_to_tensor(umix));
      return cross_entropy(marginalize(fwd_um.head_dists, fwd_u.p_y), angle_targets);
    }
    default:
      throw std::invalid_argument("unlabeled_rotation_loss: " + method_name(method) +
                                  " has no unlabeled rotation term");
  }
}

namespace {

double sharpen_ramp_at(long step, long total_steps, const TrainConfig& config) {
  if (config.ramp_fraction <= 0.0 || total_steps <= 0) return 1.0;
  const double ramp_steps = config.ramp_fraction * static_cast<double>(total_steps);
  return std::min(1.0, static_cast<double>(step) / ramp_steps);
}

}  // namespace

// The unlabeled subsample covers every class only statistically, so fall
// back to the (balanced) labeled set in degenerate setups.
std::vector<Example> training_confusion_set(const Split& split, int num_classes,
                                            std::uint64_t seed) {
  if (!split.unlabeled.empty()) {
    Rng rng(mix_seed(seed, kTagConfusionSubset));
    std::vector<Example> subset =
        confusion_eval_subset(split.unlabeled, kConfusionSubsetSize, rng);
    std::vector<int> present(num_classes, 0);
    for (const Example& e : subset) present[e.label] = 1;
    if (std::all_of(present.begin(), present.end(), [](int v) { return v == 1; })) return subset;
  }
  return split.labeled;
}

TrainResult train(Method method, const Split& split, const ModelConfig& model_config,
                  const TrainConfig& train_config) {
  model_config.validate();
  train_config.validate();
  if (split.labeled.empty()) throw std::invalid_argument("train: split has no labeled examples");

  ModelParameters params = init_params(model_config, mix_seed(train_config.seed, kTagInit));
  SgdOptimizer optimizer(train_config.learning_rate, train_config.momentum);
  std::vector<Tensor> trainable = params.all_parameters();
  Rng method_rng(mix_seed(train_config.seed, kTagMethodNoise));
  const std::vector<Example> confusion_set =
      training_confusion_set(split, model_config.num_classes, train_config.seed);
  const bool aux_eval = method_uses_aux(method, train_config);

  const int pretext_epochs = method == Method::kFineTune ? train_config.epochs / 2 : 0;
  long total_steps = 0;
  if (train_config.epochs > 0)
    total_steps = static_cast<long>(BatchIterator(split, train_config.batch_size,
                                                  train_config.seed, 0)
                                        .steps()) *
                  train_config.epochs;

  std::vector<MetricsRecord> metrics;
  metrics.reserve(train_config.epochs);
  long global_step = 0;
  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    if (method == Method::kFineTune && epoch == pretext_epochs) {
      // Stage 2: drop the pretext head's influence and train a fresh
      // semantic head on the labeled data, fine-tuning the backbone.
      reinit_semantic_head(params, mix_seed(train_config.seed, kTagFineTuneHead));
      optimizer = SgdOptimizer(train_config.learning_rate, train_config.momentum);
      trainable = params.all_parameters();
    }
    const bool pretext_stage = method == Method::kFineTune && epoch < pretext_epochs;

    BatchIterator batches(split, train_config.batch_size, train_config.seed, epoch);
    LossBreakdown sums;
    int steps = 0;
    std::vector<Example> labeled_batch, unlabeled_batch;
    while (batches.next(labeled_batch, unlabeled_batch)) {
      const double ramp = sharpen_ramp_at(global_step, total_steps, train_config);
      Tape tape;
      BatchLoss loss = method_batch_losses(method, params, labeled_batch, unlabeled_batch,
                                           train_config, method_rng, ramp, pretext_stage);
      tape.backward(loss.total);
      optimizer.step(trainable);
      zero_grads(trainable);
      sums.supervised_ce += loss.parts.supervised_ce;
      sums.rotation_ce += loss.parts.rotation_ce;
      sums.sharpen_ce += loss.parts.sharpen_ce;
      sums.aux_ce += loss.parts.aux_ce;
      sums.total += loss.parts.total;
      ++steps;
      ++global_step;
    }

    MetricsRecord record;
    record.epoch = epoch + 1;
    const double inv = steps > 0 ? 1.0 / static_cast<double>(steps) : 0.0;
    record.supervised_ce = sums.supervised_ce * inv;
    record.rotation_ce = sums.rotation_ce * inv;
    record.sharpen_ce = sums.sharpen_ce * inv;
    record.aux_ce = sums.aux_ce * inv;
    record.total = sums.total * inv;
    record.test_error = evaluate_error(params, split.test, aux_eval);
    record.diagonality = diagonality(head_confusion(params, confusion_set));
    metrics.push_back(record);
  }
  return TrainResult{std::move(params), std::move(metrics)};
}

}  // namespace crae
