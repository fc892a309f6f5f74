#pragma once

// Deterministic random primitives. std::mt19937_64 has a standardized bit
// stream; the distribution transforms below replace the implementation-defined
// std:: distributions so that (seed -> samples) is stable across platforms.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace upliftlab {

// splitmix64 finalizer, used to decorrelate seeds and derive child streams.
inline std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) noexcept {
  return mix64(seed ^ mix64(tag));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  Rng child(std::uint64_t tag) const { return Rng(derive_seed(seed_, tag)); }

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Box-Muller; one spare value cached between calls.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stdev) { return mean + stdev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // n distinct indices drawn uniformly from [0, pool); order randomized.
  std::vector<std::size_t> sample_without_replacement(std::size_t pool, std::size_t n) {
    if (n > pool) throw std::invalid_argument("sample_without_replacement: n exceeds pool");
    std::vector<std::size_t> idx(pool);
    for (std::size_t i = 0; i < pool; ++i) idx[i] = i;
    // Partial Fisher-Yates: the first n slots are a uniform sample.
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_index(pool - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace upliftlab
