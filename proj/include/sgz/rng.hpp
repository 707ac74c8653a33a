#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace sgz {

// splitmix64 step; used to derive independent seeds from (seed, stream id).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(a ^ mix_seed(b));
}

// Deterministic random source. All draws are derived from the raw mt19937_64
// sequence (which the standard pins bit-exactly) instead of the library
// distributions, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 24 bits of mantissa.
  float next_unit() {
    return static_cast<float>(gen_() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + next_unit() * (hi - lo); }

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(gen_() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(float p) { return next_unit() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = uniform_index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace sgz
