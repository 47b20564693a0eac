#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace cwm {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xCBF29CE484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Deterministic random stream. std::mt19937_64 output is specified by the
// standard; the distributions here are hand-rolled so that identical seeds
// give identical streams on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(splitmix64(seed)), root_(splitmix64(seed)) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) {
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return static_cast<int>(v % un);
  }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  float normal_f() { return static_cast<float>(normal()); }

  // Independent child stream; derivation is counter-based so module-level
  // reproducibility survives call reordering.
  Rng fork(uint64_t stream) const {
    return Rng(splitmix64(root_ ^ splitmix64(stream + 0x632BE59BD9B4E019ULL)));
  }

  static Rng for_module(uint64_t global_seed, std::string_view module_name) {
    return Rng(splitmix64(global_seed ^ fnv1a64(module_name)));
  }

 private:
  std::mt19937_64 gen_;
  uint64_t root_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace cwm
