#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace crae {

inline std::uint64_t split_mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a purpose tag.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return split_mix64(seed ^ split_mix64(tag));
}
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t extra) {
  return mix_seed(mix_seed(seed, tag), extra);
}

/// Seeded pseudo-random stream. The engine is mt19937_64 (bit-exact per the
/// standard); the distribution helpers are hand-rolled because the std::
/// distributions are implementation-defined and would break reproducibility
/// across standard libraries. Copyable, so a stream state can be snapshotted
/// and replayed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(split_mix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    const unsigned __int128 wide =
        static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<int>(wide >> 64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace crae
