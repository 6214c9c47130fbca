#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crae/rng.hpp"

namespace crae {

/// Row-major grayscale image with pixels in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;
};

/// Binary stroke figure for one class. Generated templates satisfy two
/// Hamming-distance requirements (threshold 0.15*H*W):
///  - distance to each of their own nontrivial 90-degree rotations, so the
///    rotation angle is learnable for every class;
///  - distance to every other template under the best of the 4 relative
///    rotations, so classes stay distinguishable.
struct GlyphTemplate {
  int class_id = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;
};

struct Example {
  Image image;
  int label = 0;  // hidden from training for the unlabeled split
};

struct RotatedExample {
  Image image;
  int angle_index = 0;  // z in {0,1,2,3} meaning {0, 90, 180, 270} degrees CCW
};

struct Split {
  std::vector<Example> labeled;
  std::vector<Example> unlabeled;
  std::vector<Example> test;
};

/// Minimum Hamming distance, as a fraction of the pixel count, required
/// between a template and its rotations and between template pairs.
constexpr double kTemplateDistinctness = 0.15;

/// Draws `num_classes` stroke-figure templates. Deterministic in seed;
/// retries internally until the distance requirements hold and throws
/// std::runtime_error with a diagnostic if they cannot be met.
std::vector<GlyphTemplate> make_templates(int num_classes, int height, int width,
                                          std::uint64_t seed);

/// Renders examples: per class `n_per_class` copies of its template,
/// translated by integer offsets uniform in [-max_jitter, max_jitter]^2
/// (zero padded), foreground intensity uniform in [0.7, 1.0], then each pixel
/// replaced by uniform noise in [0, 1] with probability noise_rate.
std::vector<Example> generate_dataset(const std::vector<GlyphTemplate>& templates, int n_per_class,
                                      double noise_rate, int max_jitter, std::uint64_t seed);

/// Class-balanced labeled set of n_labeled, a test set of n_test, everything
/// else unlabeled. n_labeled must be divisible by the class count.
Split split_dataset(const std::vector<Example>& examples, int n_labeled, int n_test,
                    std::uint64_t seed);

/// Exact pixel permutation; k=1 is 90 degrees counter-clockwise,
/// out[r][c] = in[c][W-1-r]. Requires a square image and k in 0..3.
Image rotate90(const Image& image, int k);

/// The four rotated copies of an example, in angle order z = 0..3.
std::array<RotatedExample, 4> rotation_quadruple(const Example& example);

/// x_mix = alpha*target + (1-alpha)*other. alpha must lie in [0.5, 1] so the
/// target image dominates the mixture.
Image mix_images(const Image& target, const Image& other, double alpha);

/// Streams per-step (labeled, unlabeled) batch pairs for one epoch.
/// The unlabeled pool is shuffled once per epoch and consumed in order with
/// the trailing partial batch dropped; the labeled pool cycles with a
/// reshuffle at every cycle boundary. Deterministic in (seed, epoch).
/// When the unlabeled pool has no full batch the iterator still yields
/// labeled batches (with empty unlabeled ones) so label-only training works.
class BatchIterator {
 public:
  BatchIterator(const Split& split, int batch_size, std::uint64_t seed, int epoch);

  int steps() const { return total_steps_; }
  bool next(std::vector<Example>& labeled, std::vector<Example>& unlabeled);

 private:
  const Split* split_;
  int batch_size_;
  int total_steps_;
  int step_ = 0;
  std::vector<int> unlabeled_order_;
  std::vector<int> labeled_order_;
  std::size_t labeled_pos_ = 0;
  Rng labeled_rng_;
};

/// Plain-text portable graymap (P2) dump for visual inspection.
void write_pgm(const Image& image, const std::string& path);

}  // namespace crae
