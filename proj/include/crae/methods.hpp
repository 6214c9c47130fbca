#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crae/data.hpp"
#include "crae/diagnostics.hpp"
#include "crae/model.hpp"
#include "crae/rng.hpp"
#include "crae/tensor.hpp"

namespace crae {

/// The trainable variants. crae couples the rotation pretext to the class
/// posterior through marginalization; crae_plus adds target sharpening and
/// mixed-image rotation prediction; the rest are the reference baselines.
enum class Method {
  kLabeledOnly,
  kRotAugSupervised,
  kSharpenOnly,
  kFineTune,
  kS4L,
  kCrae,
  kCraePlus,
  kEnsembleRandom,
  kEnsembleIndependent,
  kCraeDetach,
};

constexpr std::array<Method, 10> kAllMethods = {
    Method::kLabeledOnly,    Method::kRotAugSupervised,    Method::kSharpenOnly,
    Method::kFineTune,       Method::kS4L,                 Method::kCrae,
    Method::kCraePlus,       Method::kEnsembleRandom,      Method::kEnsembleIndependent,
    Method::kCraeDetach,
};

std::string method_name(Method method);
Method method_from_name(const std::string& name);

struct TrainConfig {
  double eta = 1.0;            // rotation-loss weight (crae, s4l)
  double eta1 = 1.0;           // mixed-rotation weight (crae_plus)
  double eta2 = 1.0;           // sharpen-loss weight (crae_plus, sharpen_only)
  double ramp_fraction = 0.25; // fraction of steps over which eta2 ramps in
  double temperature = 0.5;    // sharpening temperature, in (0, 1]
  double alpha_min = 0.5;      // mixing coefficient range for crae_plus
  double alpha_max = 1.0;
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  bool use_aux = true;

  void validate() const;
};

/// Per-batch loss values. `total` always equals the active method's
/// documented weighted combination of the parts:
///   labeled_only / rot_aug:  total = supervised_ce
///   sharpen_only:            total = supervised_ce + ramp*eta2*sharpen_ce + aux_ce
///   fine_tune:               total = rotation_ce (pretext stage), then supervised_ce
///   s4l:                     total = supervised_ce + eta*rotation_ce + aux_ce
///   crae & ensemble/detach:  total = supervised_ce + eta*rotation_ce + aux_ce
///   crae_plus:               total = supervised_ce + eta1*rotation_ce
///                                    + ramp*eta2*sharpen_ce + aux_ce
/// (aux_ce only where the variant uses the auxiliary classifier.)
struct LossBreakdown {
  double supervised_ce = 0.0;
  double rotation_ce = 0.0;
  double sharpen_ce = 0.0;
  double aux_ce = 0.0;
  double total = 0.0;
};

struct BatchLoss {
  Tensor total;  // differentiable
  LossBreakdown parts;
};

/// Whether the variant trains the auxiliary classifier and reads it at test
/// time. Pure supervised variants (labeled_only, rot_aug_supervised,
/// fine_tune) never do: their only training signal is the labeled
/// cross-entropy, so an extra head would duplicate the classifier.
bool method_uses_aux(Method method, const TrainConfig& config);

/// out[i] = sum_k weights[i,k] * head_dists[k][i,.]. Differentiable w.r.t.
/// both arguments; that coupling is what lets the unlabeled rotation loss
/// update the class posterior. With a one-hot weight row the output row
/// equals the selected head's row exactly.
Tensor marginalize(const std::vector<Tensor>& head_dists, const Tensor& weights);

/// p_hat_i = p_i^(1/T) / sum_j p_j^(1/T).
std::vector<double> sharpen(const std::vector<double>& p_bar, double temperature);

/// Average of the four rotated copies' class distributions, sharpened.
/// Plain values: the result is a constant target, never a gradient path.
std::vector<double> sharpen_target(const std::vector<std::vector<double>>& rotated_predictions,
                                   double temperature);

/// Mixture weights for the unlabeled rotation loss. Returns the weight matrix
/// for the marginalization, or nullopt for ensemble_independent, whose
/// rotation loss is the unweighted mean of every head's cross-entropy.
std::optional<Tensor> baseline_weights(Method method, const Tensor& p_y, Rng& rng);

BatchLoss crae_batch_losses(const ModelParameters& params, const std::vector<Example>& labeled,
                            const std::vector<Example>& unlabeled, const TrainConfig& config);

BatchLoss craeplus_batch_losses(const ModelParameters& params, const std::vector<Example>& labeled,
                                const std::vector<Example>& unlabeled, const TrainConfig& config,
                                Rng& rng, double sharpen_ramp);

/// Dispatch used by the training loop. `sharpen_ramp` scales eta2;
/// `pretext_stage` selects fine_tune's first stage.
BatchLoss method_batch_losses(Method method, const ModelParameters& params,
                              const std::vector<Example>& labeled,
                              const std::vector<Example>& unlabeled, const TrainConfig& config,
                              Rng& rng, double sharpen_ramp, bool pretext_stage = false);

/// Just the rotation term over an unlabeled batch, for gradient-flow
/// inspection: under s4l and crae_detach it must leave the semantic head's
/// gradient at exactly zero, under crae it must not.
Tensor unlabeled_rotation_loss(Method method, const ModelParameters& params,
                               const std::vector<Example>& unlabeled, const TrainConfig& config,
                               Rng& rng);

struct TrainResult {
  ModelParameters params;
  std::vector<MetricsRecord> metrics;  // one record per epoch
};

/// The fixed evaluation subset (up to 512 unlabeled examples, labels visible
/// to diagnostics only) behind every per-epoch confusion measurement. Falls
/// back to the balanced labeled set when the subsample misses a class.
std::vector<Example> training_confusion_set(const Split& split, int num_classes,
                                            std::uint64_t seed);

/// Runs `epochs` epochs of the batch iterator with one SGD step per batch.
/// Deterministic in config.seed. fine_tune splits the epoch budget halfway:
/// rotation pretext first, then a fresh semantic head trained on labels.
TrainResult train(Method method, const Split& split, const ModelConfig& model_config,
                  const TrainConfig& train_config);

}  // namespace crae
