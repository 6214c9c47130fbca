#include "crae/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace crae {

namespace {

constexpr std::uint64_t kTagTemplates = 0x7431u;
constexpr std::uint64_t kTagDataset = 0x7432u;
constexpr std::uint64_t kTagSplit = 0x7433u;
constexpr std::uint64_t kTagBatchUnlabeled = 0x7434u;
constexpr std::uint64_t kTagBatchLabeled = 0x7435u;

// Index map of one 90-degree CCW rotation: out[r][c] = in[c][W-1-r].
template <typename T>
std::vector<T> rotate_grid_once(const std::vector<T>& in, int n) {
  std::vector<T> out(in.size());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) out[r * n + c] = in[c * n + (n - 1 - r)];
  return out;
}

template <typename T>
std::vector<T> rotate_grid(const std::vector<T>& in, int n, int k) {
  std::vector<T> out = in;
  for (int i = 0; i < k; ++i) out = rotate_grid_once(out, n);
  return out;
}

int mask_hamming(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] != b[i]) ? 1 : 0;
  return d;
}

struct MaskCanvas {
  int h, w;
  std::vector<std::uint8_t> m;

  MaskCanvas(int height, int width) : h(height), w(width), m(height * width, 0) {}

  void fill_rect(int r0, int c0, int r1, int c1) {
    r0 = std::max(r0, 0);
    c0 = std::max(c0, 0);
    r1 = std::min(r1, h - 1);
    c1 = std::min(c1, w - 1);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) m[r * w + c] = 1;
  }
};

// The glyph family is built as scaffold + feature. The scaffold is a stroke
// set unioned with its own three rotations, so it is exactly 4-fold
// symmetric: it anchors the figure but carries no angle information. The
// per-class corner feature is the only asymmetric part, so both the class
// identity and the rotation angle of a glyph have to be read off the same
// small stroke pair. That makes angle estimation class-dependent, which is
// the property the conditional-head benchmark needs, and it automatically
// localizes the Hamming checks on the feature strokes.

std::vector<std::uint8_t> symmetric_scaffold(int h, Rng& rng) {
  const int margin = std::max(1, h / 8);
  const int lo = margin, hi = h - 1 - margin;
  // Same stroke vocabulary as the class features: the scaffold acts as
  // camouflage clutter, so the discriminative strokes cannot be singled out
  // by coarse statistics alone.
  const int thickness = h >= 12 ? std::max(2, (h + 4) / 8) : 1;
  const int inner = hi - lo + 1;
  MaskCanvas base(h, h);
  const int strokes = h >= 12 ? 1 + rng.uniform_int(2) : rng.uniform_int(2);
  for (int s = 0; s < strokes; ++s) {
    const bool horizontal = rng.uniform_int(2) == 0;
    const int len = std::max(3, inner / 4) + rng.uniform_int(std::max(1, inner / 4));
    const int r = lo + rng.uniform_int(inner);
    const int c = lo + rng.uniform_int(inner);
    if (horizontal)
      base.fill_rect(r, c, r + thickness - 1, std::min(hi, c + len));
    else
      base.fill_rect(r, c, std::min(hi, r + len), c + thickness - 1);
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * h, 0);
  for (int k = 0; k < 4; ++k) {
    const auto rot = rotate_grid(base.m, h, k);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] |= rot[i];
  }
  return out;
}

// Two perpendicular arms meeting at a random anchor plus a stub at one arm's
// free end (Z/U/T-like); the class- and angle-bearing strokes.
std::vector<std::uint8_t> corner_feature(int h, Rng& rng) {
  const int margin = std::max(1, h / 8);
  const int lo = margin, hi = h - 1 - margin;
  const int thickness = h >= 12 ? std::max(2, (h + 4) / 8) : 1;
  const int inner = hi - lo + 1;
  MaskCanvas canvas(h, h);
  const int r = lo + rng.uniform_int(inner);
  const int c = lo + rng.uniform_int(inner);
  const int len_v = std::max(3, inner * 2 / 3) + rng.uniform_int(std::max(1, inner / 4));
  const int len_h = std::max(3, inner * 2 / 3) + rng.uniform_int(std::max(1, inner / 4));
  const int r2 = std::clamp(rng.uniform_int(2) == 0 ? r + len_v : r - len_v, lo, hi);
  const int c2 = std::clamp(rng.uniform_int(2) == 0 ? c + len_h : c - len_h, lo, hi);
  canvas.fill_rect(std::min(r, r2), c, std::max(r, r2) + thickness - 1, c + thickness - 1);
  canvas.fill_rect(r, std::min(c, c2), r + thickness - 1, std::max(c, c2) + thickness - 1);

  // Stubs at both free ends (E/Z/U-like figures).
  const int stub = std::max(2, inner / 2);
  {
    // Horizontal stub at the vertical arm's free end (r2, c).
    const int sc = std::clamp(rng.uniform_int(2) == 0 ? c + stub : c - stub, lo, hi);
    canvas.fill_rect(r2, std::min(c, sc), r2 + thickness - 1, std::max(c, sc) + thickness - 1);
  }
  {
    // Vertical stub at the horizontal arm's free end (r, c2).
    const int sr = std::clamp(rng.uniform_int(2) == 0 ? r + stub : r - stub, lo, hi);
    canvas.fill_rect(std::min(r, sr), c2, std::max(r, sr) + thickness - 1, c2 + thickness - 1);
  }
  return canvas.m;
}

// Smallest Hamming distance between the mask and its nontrivial rotations.
int min_self_rotation_distance(const std::vector<std::uint8_t>& mask, int n) {
  int best = std::numeric_limits<int>::max();
  for (int k = 1; k <= 3; ++k)
    best = std::min(best, mask_hamming(mask, rotate_grid(mask, n, k)));
  return best;
}

// Smallest distance to another template under the best of 4 relative
// rotations.
int min_pair_distance(const std::vector<std::uint8_t>& mask, int n,
                      const GlyphTemplate& other) {
  int best = std::numeric_limits<int>::max();
  for (int k = 0; k <= 3; ++k)
    best = std::min(best, mask_hamming(rotate_grid(mask, n, k), other.mask));
  return best;
}

}  // namespace

std::vector<GlyphTemplate> make_templates(int num_classes, int height, int width,
                                          std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("make_templates: need at least 2 classes");
  if (height < 8 || width < 8)
    throw std::invalid_argument("make_templates: image side must be at least 8");
  if (height != width)
    throw std::invalid_argument("make_templates: templates must be square for 90-degree rotation");

  const int threshold =
      static_cast<int>(kTemplateDistinctness * static_cast<double>(height * width));
  // Distances are additionally kept NEAR the floor: every class must have a
  // rotation near-twin of itself and (past the first class) of some other
  // class. The invariants keep the benchmark solvable; the ceiling keeps it
  // hard, so neither the class nor the angle can be read off coarse cues.
  const int ceiling = threshold + std::max(8, height * width / 16);
  constexpr int kScaffoldAttempts = 60;
  constexpr int kFeatureAttempts = 3000;

  Rng rng(mix_seed(seed, kTagTemplates));
  for (int sa = 0; sa < kScaffoldAttempts; ++sa) {
    const auto scaffold = symmetric_scaffold(height, rng);
    const int scaffold_on =
        static_cast<int>(std::count(scaffold.begin(), scaffold.end(), std::uint8_t{1}));
    // Enough clutter to hide the feature strokes, enough gaps to place them.
    if (height >= 12 && (scaffold_on < height * width / 12 || scaffold_on > height * width / 5))
      continue;

    std::vector<GlyphTemplate> out;
    out.reserve(num_classes);
    bool all_ok = true;
    for (int c = 0; c < num_classes && all_ok; ++c) {
      bool accepted = false;
      for (int attempt = 0; attempt < kFeatureAttempts && !accepted; ++attempt) {
        const auto feature = corner_feature(height, rng);
        std::vector<std::uint8_t> mask(scaffold.size());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = scaffold[i] | feature[i];

        const int self = min_self_rotation_distance(mask, height);
        if (self < threshold || self > ceiling) continue;
        int closest_pair = std::numeric_limits<int>::max();
        bool far_enough = true;
        for (const GlyphTemplate& prev : out) {
          const int d = min_pair_distance(mask, height, prev);
          far_enough = far_enough && d >= threshold;
          closest_pair = std::min(closest_pair, d);
        }
        if (!far_enough) continue;
        if (!out.empty() && closest_pair > ceiling) continue;

        out.push_back(GlyphTemplate{c, height, width, std::move(mask)});
        accepted = true;
      }
      all_ok = accepted;
    }
    if (all_ok) return out;
  }
  throw std::runtime_error(
      "make_templates: no scaffold admits " + std::to_string(num_classes) +
      " templates meeting the distance requirements at size " + std::to_string(height) + "x" +
      std::to_string(width) + "; the requirements look unsatisfiable at this size");
}

std::vector<Example> generate_dataset(const std::vector<GlyphTemplate>& templates, int n_per_class,
                                      double noise_rate, int max_jitter, std::uint64_t seed) {
  if (templates.empty()) throw std::invalid_argument("generate_dataset: no templates");
  if (!(noise_rate >= 0.0 && noise_rate <= 0.2))
    throw std::invalid_argument("generate_dataset: noise_rate must be in [0, 0.2]");
  if (max_jitter < 0 || max_jitter > 3)
    throw std::invalid_argument("generate_dataset: max_jitter must be in [0, 3]");
  if (n_per_class <= 0) throw std::invalid_argument("generate_dataset: n_per_class must be > 0");

  Rng rng(mix_seed(seed, kTagDataset));
  std::vector<Example> out;
  out.reserve(templates.size() * static_cast<std::size_t>(n_per_class));
  for (const GlyphTemplate& t : templates) {
    for (int i = 0; i < n_per_class; ++i) {
      const double intensity = rng.uniform(0.7, 1.0);
      const int dy = rng.uniform_int(2 * max_jitter + 1) - max_jitter;
      const int dx = rng.uniform_int(2 * max_jitter + 1) - max_jitter;
      Image img{t.height, t.width, std::vector<double>(t.mask.size(), 0.0)};
      for (int r = 0; r < t.height; ++r) {
        for (int c = 0; c < t.width; ++c) {
          const int sr = r - dy, sc = c - dx;
          if (sr >= 0 && sr < t.height && sc >= 0 && sc < t.width && t.mask[sr * t.width + sc])
            img.pixels[r * t.width + c] = intensity;
        }
      }
      for (double& p : img.pixels) {
        // Both draws happen unconditionally so the noise pattern and the
        // later examples' jitter/intensity draws are stable across
        // noise_rate settings under one seed.
        const double gate = rng.uniform();
        const double replacement = rng.uniform();
        if (gate < noise_rate) p = replacement;
      }
      out.push_back(Example{std::move(img), t.class_id});
    }
  }
  return out;
}

Split split_dataset(const std::vector<Example>& examples, int n_labeled, int n_test,
                    std::uint64_t seed) {
  if (examples.empty()) throw std::invalid_argument("split_dataset: empty dataset");
  int num_classes = 0;
  for (const Example& e : examples) num_classes = std::max(num_classes, e.label + 1);
  if (n_labeled <= 0 || n_labeled % num_classes != 0)
    throw std::invalid_argument("split_dataset: n_labeled must be a positive multiple of the " +
                                std::to_string(num_classes) + " class count");
  if (n_test < 0 || static_cast<std::size_t>(n_labeled) + static_cast<std::size_t>(n_test) >=
                        examples.size())
    throw std::invalid_argument("split_dataset: n_labeled + n_test must be below the dataset size");

  std::vector<int> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, kTagSplit));
  rng.shuffle(order);

  const int per_class = n_labeled / num_classes;
  std::vector<int> quota(num_classes, per_class);
  std::vector<char> taken(examples.size(), 0);
  Split split;
  split.labeled.reserve(n_labeled);
  for (int idx : order) {
    const int y = examples[idx].label;
    if (quota[y] > 0) {
      --quota[y];
      taken[idx] = 1;
      split.labeled.push_back(examples[idx]);
      if (static_cast<int>(split.labeled.size()) == n_labeled) break;
    }
  }
  if (static_cast<int>(split.labeled.size()) != n_labeled)
    throw std::invalid_argument("split_dataset: a class has too few examples for a balanced "
                                "labeled set");

  int test_left = n_test;
  for (int idx : order) {
    if (taken[idx]) continue;
    if (test_left > 0) {
      --test_left;
      split.test.push_back(examples[idx]);
    } else {
      split.unlabeled.push_back(examples[idx]);
    }
  }
  return split;
}

Image rotate90(const Image& image, int k) {
  if (image.height != image.width)
    throw std::invalid_argument("rotate90: image must be square");
  if (k < 0 || k > 3) throw std::invalid_argument("rotate90: k must be in 0..3");
  Image out{image.height, image.width, rotate_grid(image.pixels, image.height, k)};
  return out;
}

std::array<RotatedExample, 4> rotation_quadruple(const Example& example) {
  std::array<RotatedExample, 4> out;
  for (int z = 0; z < 4; ++z) out[z] = RotatedExample{rotate90(example.image, z), z};
  return out;
}

Image mix_images(const Image& target, const Image& other, double alpha) {
  if (!(alpha >= 0.5 && alpha <= 1.0))
    throw std::invalid_argument("mix_images: alpha must lie in [0.5, 1]");
  if (target.height != other.height || target.width != other.width)
    throw std::invalid_argument("mix_images: shape mismatch");
  Image out{target.height, target.width, std::vector<double>(target.pixels.size())};
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = alpha * target.pixels[i] + (1.0 - alpha) * other.pixels[i];
  return out;
}

BatchIterator::BatchIterator(const Split& split, int batch_size, std::uint64_t seed, int epoch)
    : split_(&split),
      batch_size_(batch_size),
      labeled_rng_(mix_seed(seed, kTagBatchLabeled, static_cast<std::uint64_t>(epoch))) {
  if (batch_size <= 0) throw std::invalid_argument("BatchIterator: batch size must be > 0");
  if (split.labeled.empty())
    throw std::invalid_argument("BatchIterator: split has no labeled examples");

  const int unlabeled_batches = static_cast<int>(split.unlabeled.size()) / batch_size;
  total_steps_ = unlabeled_batches > 0
                     ? unlabeled_batches
                     : std::max(1, static_cast<int>(split.labeled.size()) / batch_size);

  unlabeled_order_.resize(split.unlabeled.size());
  std::iota(unlabeled_order_.begin(), unlabeled_order_.end(), 0);
  Rng urng(mix_seed(seed, kTagBatchUnlabeled, static_cast<std::uint64_t>(epoch)));
  urng.shuffle(unlabeled_order_);

  labeled_order_.resize(split.labeled.size());
  std::iota(labeled_order_.begin(), labeled_order_.end(), 0);
  labeled_rng_.shuffle(labeled_order_);
}

bool BatchIterator::next(std::vector<Example>& labeled, std::vector<Example>& unlabeled) {
  if (step_ >= total_steps_) return false;

  labeled.clear();
  labeled.reserve(batch_size_);
  for (int i = 0; i < batch_size_; ++i) {
    if (labeled_pos_ == labeled_order_.size()) {
      labeled_rng_.shuffle(labeled_order_);
      labeled_pos_ = 0;
    }
    labeled.push_back(split_->labeled[labeled_order_[labeled_pos_++]]);
  }

  unlabeled.clear();
  const std::size_t offset = static_cast<std::size_t>(step_) * batch_size_;
  if (offset + batch_size_ <= unlabeled_order_.size()) {
    unlabeled.reserve(batch_size_);
    for (int i = 0; i < batch_size_; ++i)
      unlabeled.push_back(split_->unlabeled[unlabeled_order_[offset + i]]);
  }

  ++step_;
  return true;
}

void write_pgm(const Image& image, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P2\n" << image.width << " " << image.height << "\n255\n";
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const double v = std::clamp(image.pixels[r * image.width + c], 0.0, 1.0);
      out << static_cast<int>(v * 255.0 + 0.5);
      out << (c + 1 == image.width ? '\n' : ' ');
    }
  }
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

}  // namespace crae
