#include "crae/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "crae/rng.hpp"

namespace crae {

namespace {

constexpr std::uint64_t kTagModelInit = 0x6d31u;

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

AffineLayer glorot_affine(int out_dim, int in_dim, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  std::vector<double> w(static_cast<std::size_t>(out_dim) * in_dim);
  for (double& v : w) v = rng.uniform(-limit, limit);
  return AffineLayer{
      Tensor({static_cast<std::size_t>(out_dim), static_cast<std::size_t>(in_dim)}, std::move(w),
             /*requires_grad=*/true),
      Tensor::zeros({static_cast<std::size_t>(out_dim)}, /*requires_grad=*/true)};
}

RotationHead glorot_head(int in_dim, int hidden, int out_dim, Rng& rng) {
  RotationHead head;
  head.hidden = glorot_affine(hidden, in_dim, rng);
  head.output = glorot_affine(out_dim, hidden, rng);
  return head;
}

}  // namespace

void ModelConfig::validate() const {
  require(input_dim > 0, "ModelConfig: input_dim must be positive");
  require(!backbone_widths.empty(), "ModelConfig: backbone_widths must be nonempty");
  for (int w : backbone_widths) require(w > 0, "ModelConfig: backbone widths must be positive");
  require(num_classes >= 2, "ModelConfig: need at least 2 classes");
  require(num_angles == 4, "ModelConfig: the rotation group has exactly 4 angles");
  require(proj_dim > 0, "ModelConfig: proj_dim must be positive");
  require(proj_dim <= backbone_widths.back(),
          "ModelConfig: proj_dim must not exceed the feature width");
  require(head_hidden > 0, "ModelConfig: head_hidden must be positive");
}

std::vector<Tensor> ModelParameters::all_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, tensor] : named_parameters()) out.push_back(tensor);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParameters::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    out.emplace_back("backbone." + std::to_string(i) + ".weight", backbone[i].weight);
    out.emplace_back("backbone." + std::to_string(i) + ".bias", backbone[i].bias);
  }
  out.emplace_back("semantic_head.weight", semantic_head.weight);
  out.emplace_back("semantic_head.bias", semantic_head.bias);
  out.emplace_back("aux_head.weight", aux_head.weight);
  out.emplace_back("aux_head.bias", aux_head.bias);
  out.emplace_back("projection.weight", projection.weight);
  out.emplace_back("projection.bias", projection.bias);
  for (std::size_t k = 0; k < rotation_heads.size(); ++k) {
    const std::string prefix = "rotation_head." + std::to_string(k) + ".";
    out.emplace_back(prefix + "hidden.weight", rotation_heads[k].hidden.weight);
    out.emplace_back(prefix + "hidden.bias", rotation_heads[k].hidden.bias);
    out.emplace_back(prefix + "output.weight", rotation_heads[k].output.weight);
    out.emplace_back(prefix + "output.bias", rotation_heads[k].output.bias);
  }
  out.emplace_back("uncond_head.hidden.weight", uncond_rot_head.hidden.weight);
  out.emplace_back("uncond_head.hidden.bias", uncond_rot_head.hidden.bias);
  out.emplace_back("uncond_head.output.weight", uncond_rot_head.output.weight);
  out.emplace_back("uncond_head.output.bias", uncond_rot_head.output.bias);
  return out;
}

ModelParameters init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, kTagModelInit));
  ModelParameters p;
  p.config = config;
  int in_dim = config.input_dim;
  for (int width : config.backbone_widths) {
    p.backbone.push_back(glorot_affine(width, in_dim, rng));
    in_dim = width;
  }
  p.semantic_head = glorot_affine(config.num_classes, config.feature_dim(), rng);
  p.aux_head = glorot_affine(config.num_classes, config.feature_dim(), rng);
  p.projection = glorot_affine(config.proj_dim, config.feature_dim(), rng);
  for (int k = 0; k < config.num_classes; ++k)
    p.rotation_heads.push_back(
        glorot_head(config.proj_dim, config.head_hidden, config.num_angles, rng));
  p.uncond_rot_head =
      glorot_head(config.feature_dim(), config.head_hidden, config.num_angles, rng);
  return p;
}

Tensor images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const std::size_t dim = images.front().pixels.size();
  std::vector<double> flat;
  flat.reserve(images.size() * dim);
  for (const Image& img : images) {
    if (img.pixels.size() != dim)
      throw std::invalid_argument("images_to_tensor: inconsistent image sizes");
    flat.insert(flat.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor({images.size(), dim}, std::move(flat));
}

ForwardOutput forward(const ModelParameters& params, const Tensor& images) {
  if (images.shape().size() != 2 ||
      images.shape()[1] != static_cast<std::size_t>(params.config.input_dim))
    throw std::invalid_argument("forward: expected a batch of width " +
                                std::to_string(params.config.input_dim));
  ForwardOutput out;
  Tensor h = images;
  for (const AffineLayer& layer : params.backbone) h = relu(affine(layer.weight, h, layer.bias));
  out.features = h;
  out.p_y = softmax(affine(params.semantic_head.weight, h, params.semantic_head.bias));
  out.p_aux = softmax(affine(params.aux_head.weight, h, params.aux_head.bias));
  Tensor proj = affine(params.projection.weight, h, params.projection.bias);
  out.head_dists.reserve(params.rotation_heads.size());
  for (const RotationHead& head : params.rotation_heads) {
    Tensor hidden = relu(affine(head.hidden.weight, proj, head.hidden.bias));
    out.head_dists.push_back(softmax(affine(head.output.weight, hidden, head.output.bias)));
  }
  return out;
}

Tensor uncond_rotation_dist(const ModelParameters& params, const Tensor& features) {
  Tensor hidden = relu(
      affine(params.uncond_rot_head.hidden.weight, features, params.uncond_rot_head.hidden.bias));
  return softmax(
      affine(params.uncond_rot_head.output.weight, hidden, params.uncond_rot_head.output.bias));
}

std::vector<int> test_predict(const ModelParameters& params, const std::vector<Image>& images,
                              bool use_aux) {
  ForwardOutput out = forward(params, images_to_tensor(images));
  const Tensor& dist = use_aux ? out.p_aux : out.p_y;
  const std::size_t c = dist.cols();
  std::vector<int> pred(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double* row = dist.values().data() + i * c;
    int best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    pred[i] = best;
  }
  return pred;
}

void reinit_semantic_head(ModelParameters& params, std::uint64_t seed) {
  Rng rng(mix_seed(seed, kTagModelInit));
  params.semantic_head =
      glorot_affine(params.config.num_classes, params.config.feature_dim(), rng);
}

void save_params(const ModelParameters& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_params: cannot open " + path);
  char buf[40];
  for (const auto& [name, tensor] : params.named_parameters()) {
    out << name << ' ' << tensor.shape().size();
    for (std::size_t d : tensor.shape()) out << ' ' << d;
    for (double v : tensor.values()) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << ' ' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("save_params: write failed for " + path);
}

namespace {

struct SavedTensor {
  Shape shape;
  std::vector<double> values;
};

SavedTensor take(std::map<std::string, SavedTensor>& entries, const std::string& name) {
  auto it = entries.find(name);
  if (it == entries.end())
    throw std::runtime_error("load_params: missing tensor \"" + name + "\"");
  SavedTensor t = std::move(it->second);
  entries.erase(it);
  return t;
}

AffineLayer take_affine(std::map<std::string, SavedTensor>& entries, const std::string& prefix) {
  SavedTensor w = take(entries, prefix + ".weight");
  SavedTensor b = take(entries, prefix + ".bias");
  if (w.shape.size() != 2 || b.shape.size() != 1 || w.shape[0] != b.shape[0])
    throw std::runtime_error("load_params: inconsistent shapes for \"" + prefix + "\"");
  return AffineLayer{Tensor(w.shape, std::move(w.values), /*requires_grad=*/true),
                     Tensor(b.shape, std::move(b.values), /*requires_grad=*/true)};
}

RotationHead take_head(std::map<std::string, SavedTensor>& entries, const std::string& prefix) {
  RotationHead head;
  head.hidden = take_affine(entries, prefix + ".hidden");
  head.output = take_affine(entries, prefix + ".output");
  return head;
}

}  // namespace

ModelParameters load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_params: cannot open " + path);
  std::map<std::string, SavedTensor> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    std::size_t ndim = 0;
    if (!(ls >> name >> ndim)) throw std::runtime_error("load_params: malformed line in " + path);
    SavedTensor t;
    t.shape.resize(ndim);
    std::size_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
      if (!(ls >> t.shape[i])) throw std::runtime_error("load_params: malformed shape for " + name);
      count *= t.shape[i];
    }
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i)
      if (!(ls >> t.values[i]))
        throw std::runtime_error("load_params: malformed values for " + name);
    entries[name] = std::move(t);
  }

  ModelParameters p;
  int layer = 0;
  while (entries.count("backbone." + std::to_string(layer) + ".weight") != 0) {
    p.backbone.push_back(take_affine(entries, "backbone." + std::to_string(layer)));
    ++layer;
  }
  if (p.backbone.empty()) throw std::runtime_error("load_params: no backbone layers in " + path);
  p.semantic_head = take_affine(entries, "semantic_head");
  p.aux_head = take_affine(entries, "aux_head");
  p.projection = take_affine(entries, "projection");
  int head = 0;
  while (entries.count("rotation_head." + std::to_string(head) + ".hidden.weight") != 0) {
    p.rotation_heads.push_back(take_head(entries, "rotation_head." + std::to_string(head)));
    ++head;
  }
  p.uncond_rot_head = take_head(entries, "uncond_head");
  if (!entries.empty())
    throw std::runtime_error("load_params: unrecognized tensor \"" + entries.begin()->first +
                             "\" in " + path);

  p.config.input_dim = static_cast<int>(p.backbone.front().weight.shape()[1]);
  p.config.backbone_widths.clear();
  for (const AffineLayer& l : p.backbone)
    p.config.backbone_widths.push_back(static_cast<int>(l.weight.shape()[0]));
  p.config.num_classes = static_cast<int>(p.semantic_head.weight.shape()[0]);
  p.config.proj_dim = static_cast<int>(p.projection.weight.shape()[0]);
  if (p.rotation_heads.empty())
    throw std::runtime_error("load_params: no rotation heads in " + path);
  p.config.head_hidden = static_cast<int>(p.rotation_heads.front().hidden.weight.shape()[0]);
  p.config.num_angles = static_cast<int>(p.rotation_heads.front().output.weight.shape()[0]);
  if (static_cast<int>(p.rotation_heads.size()) != p.config.num_classes)
    throw std::runtime_error("load_params: rotation head count does not match the class count");
  p.config.validate();
  return p;
}

}  // namespace crae
