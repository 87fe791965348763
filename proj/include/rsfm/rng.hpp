#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>
#include <type_traits>
#include <vector>

namespace rsfm {

// Seed derivation. Every random stream in the project is keyed by
// (global seed, purpose tag, ids...) so results never depend on worker
// identity or scheduling order.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t hash_string(std::string_view s);

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, Rest... rest) {
  std::uint64_t h = splitmix64(base);
  auto fold = [&h](auto v) {
    if constexpr (std::is_convertible_v<decltype(v), std::string_view>) {
      h = splitmix64(h ^ hash_string(std::string_view(v)));
    } else {
      h = splitmix64(h ^ static_cast<std::uint64_t>(v));
    }
  };
  (fold(rest), ...);
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Normal(0, stddev) resampled until inside [-2 stddev, 2 stddev].
  double truncated_normal(double stddev) {
    for (;;) {
      double v = normal(0.0, stddev);
      if (v >= -2.0 * stddev && v <= 2.0 * stddev) return v;
    }
  }
  std::int64_t randint(std::int64_t lo, std::int64_t hi_inclusive) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi_inclusive)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  template <typename It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, engine_);
  }

  // k distinct indices from [0, n), sorted ascending.
  std::vector<std::int64_t> choose(std::int64_t n, std::int64_t k);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace rsfm
