#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace vivi {

// splitmix64; used to derive independent stream seeds from a root seed so
// that toggling one consumer does not perturb the randomness of another.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t root, uint64_t tag) {
  return mix64(mix64(root) ^ mix64(tag ^ 0xa5a5a5a5a5a5a5a5ULL));
}

inline uint64_t derive_seed(uint64_t root, uint64_t tag, uint64_t index) {
  return mix64(derive_seed(root, tag) ^ mix64(index + 1));
}

// Stream tags. Per-step streams are derived as (root, tag, step) so a
// checkpoint resume regenerates the exact randomness of the original run
// without serializing engine state for every consumer.
enum class StreamTag : uint64_t {
  init = 1,
  sample = 2,
  augment = 3,
  order_reverse = 4,
  corpus = 5,
  downstream = 6,
  transfer = 7,
};

inline std::mt19937_64 make_rng(uint64_t root, StreamTag tag) {
  return std::mt19937_64(derive_seed(root, static_cast<uint64_t>(tag)));
}

inline std::mt19937_64 make_rng(uint64_t root, StreamTag tag, uint64_t index) {
  return std::mt19937_64(derive_seed(root, static_cast<uint64_t>(tag), index));
}

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(g);
}

inline int64_t uniform_int(std::mt19937_64& g, int64_t lo, int64_t hi_inclusive) {
  std::uniform_int_distribution<int64_t> d(lo, hi_inclusive);
  return d(g);
}

}  // namespace vivi
