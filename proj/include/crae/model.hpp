#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crae/data.hpp"
#include "crae/tensor.hpp"

namespace crae {

struct ModelConfig {
  int input_dim = 256;  // H*W
  std::vector<int> backbone_widths = {256, 128, 64};
  int num_classes = 4;  // C
  int num_angles = 4;   // K, fixed by the 90-degree rotation group
  int proj_dim = 16;    // width of the rotation-branch input after projection
  int head_hidden = 32;

  int feature_dim() const { return backbone_widths.back(); }
  void validate() const;
};

struct AffineLayer {
  Tensor weight;  // out_dim x in_dim
  Tensor bias;    // out_dim
};

struct RotationHead {
  AffineLayer hidden;
  AffineLayer output;
};

/// All trainable state. The backbone is an affine+relu stack shared by every
/// head; the C rotation heads consume a dimension-reduced projection of the
/// features. The auxiliary semantic head sees only labeled-data loss and is
/// the test-time classifier for variants that enable it. The unconditional
/// rotation head serves the baselines that predict the angle without class
/// conditioning.
struct ModelParameters {
  ModelConfig config;
  std::vector<AffineLayer> backbone;
  AffineLayer semantic_head;
  AffineLayer aux_head;
  AffineLayer projection;
  std::vector<RotationHead> rotation_heads;
  RotationHead uncond_rot_head;

  std::vector<Tensor> all_parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

struct ForwardOutput {
  Tensor features;                 // b x feature_dim
  Tensor p_y;                      // b x C, rows sum to 1
  Tensor p_aux;                    // b x C
  std::vector<Tensor> head_dists;  // C tensors of b x K; head_dists[k] is R_k
};

/// Glorot-uniform weights, zero biases; deterministic in seed.
ModelParameters init_params(const ModelConfig& config, std::uint64_t seed);

/// Flattens images row-major into a b x (H*W) constant tensor.
Tensor images_to_tensor(const std::vector<Image>& images);

ForwardOutput forward(const ModelParameters& params, const Tensor& images);

/// Angle distribution of the unconditional rotation head on given features.
Tensor uncond_rotation_dist(const ModelParameters& params, const Tensor& features);

/// Argmax class decision; reads the auxiliary classifier when use_aux, the
/// semantic head otherwise. Rotation heads are never consulted. Ties break
/// toward the lowest class id.
std::vector<int> test_predict(const ModelParameters& params, const std::vector<Image>& images,
                              bool use_aux);

/// Replaces the semantic head with a fresh initialization (fine-tune stage 2).
void reinit_semantic_head(ModelParameters& params, std::uint64_t seed);

/// Plain-text checkpoint: one line per parameter tensor with name, shape and
/// values at 17 significant digits, so a round trip is bit exact.
void save_params(const ModelParameters& params, const std::string& path);
ModelParameters load_params(const std::string& path);

}  // namespace crae
