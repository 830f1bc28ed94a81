#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace consert {

/// Seeded generator plus the handful of draws the library needs.
///
/// Every random decision in a run is made through an Rng obtained from
/// `substream(root_seed, name, indices...)`, so a single root seed fixes the
/// whole computation and independent consumers never share state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
  }

  /// Uniform double in [0, 1).
  double uniform() {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    return dist(engine_);
  }

  float normal(float mean, float stddev) {
    std::normal_distribution<float> dist(mean, stddev);
    return dist(engine_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename... Indices>
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                                    Indices... indices) {
  std::uint64_t s = mix64(root ^ mix64(hash_name(name)));
  ((s = mix64(s ^ static_cast<std::uint64_t>(indices))), ...);
  return s;
}

template <typename... Indices>
Rng substream(std::uint64_t root, std::string_view name, Indices... indices) {
  return Rng(derive_seed(root, name, indices...));
}

}  // namespace consert
