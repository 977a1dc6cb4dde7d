#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace gspt {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a over a purpose string; used to derive named sub-seeds.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Folds a sequence of words into one stream key. Order matters.
inline std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

inline std::uint64_t derive_key(std::uint64_t seed, std::string_view purpose) noexcept {
  return derive_key({seed, hash_string(purpose)});
}

/// Independent random stream for one key. All sampling in the library goes
/// through this type so that a stream is fully determined by its key.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : engine_(mix64(key)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  /// Uniform double in [0, 1).
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() { return normal_(engine_); }

  /// Normal(0, std) truncated to two standard deviations by resampling.
  double truncated_normal(double std) {
    for (;;) {
      double z = normal_(engine_);
      if (z >= -2.0 && z <= 2.0) return z * std;
    }
  }

  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace gspt
