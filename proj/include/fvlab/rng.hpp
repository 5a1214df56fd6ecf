// Deterministic random number utilities.
//
// Everything downstream (dataset generation, shuffles, noise backgrounds,
// weight init, visualization jitter) must be bit-reproducible from a 64-bit
// seed, so no std::*_distribution is used anywhere: those are
// implementation-defined. The primitives here are fully pinned:
//
//   mix64      splitmix64 finalizer (Steele/Lea/Flood)
//   hash_at    k-th output of the splitmix64 stream started at `seed`,
//              computable as a pure function of (seed, k) -- this makes
//              stream-based and counter-based draws interchangeable
//   normals    Box-Muller on two 53-bit uniforms
//
// Sub-seeds for pipeline stages come from derive_seed(master, stage, index);
// inserting a new stage never shifts the seeds of existing ones.
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace fvlab {

inline constexpr std::uint64_t kSplitMixGamma = 0x9e3779b97f4a7c15ull;

inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

// k-th element of the splitmix64 sequence seeded with `seed`.
inline constexpr std::uint64_t hash_at(std::uint64_t seed, std::uint64_t k) {
  return mix64(seed + (k + 1) * kSplitMixGamma);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Stage-addressed sub-seed derivation: mix64(mix64(master ^ fnv1a(stage)) + index).
inline constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view stage,
                                           std::uint64_t index = 0) {
  return mix64(mix64(master ^ fnv1a64(stage)) + index);
}

// 53-bit uniform in [0,1).
inline double to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// One Gaussian draw as a pure function of (seed, counter); Box-Muller with
// u1 mapped into (0,1] so the log never sees zero.
inline double gaussian_at(std::uint64_t seed, std::uint64_t counter) {
  const double u1 = 1.0 - to_unit(hash_at(seed, 2 * counter));
  const double u2 = to_unit(hash_at(seed, 2 * counter + 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Sequential stream view over the same sequence hash_at() indexes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64() { return hash_at(seed_, n_++); }

  double next_double() { return to_unit(next_u64()); }  // [0,1)

  float next_float() { return static_cast<float>(next_double()); }

  // Uniform integer in [lo, hi], inclusive. Rejection sampling keeps the
  // result exactly uniform; the loop is deterministic given the stream.
  std::int64_t next_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % range);
  }

  double next_normal() {
    const double u1 = 1.0 - to_unit(next_u64());
    const double u2 = to_unit(next_u64());
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Fisher-Yates; consumes n-1 draws.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(next_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t n_ = 0;
};

}  // namespace fvlab
