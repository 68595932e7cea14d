#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace abnn {

/// splitmix64-style mixer; used to derive independent stream seeds so that
/// per-task / per-layer draws do not depend on evaluation order.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 0x632be59bd9b4e019ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform() { return uniform_(gen_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Inclusive integer range.
  long uniform_int(long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi)(gen_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  std::vector<double> normals(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = normal();
    return out;
  }

  std::uint64_t next_seed() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Noise provider for reparameterised weight sampling. Draws are keyed by
/// (layer, unit) so results are independent of evaluation order; that is what
/// makes permutation-invariance of amortised posteriors testable.
class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual std::vector<double> draw(int layer, int unit, std::size_t n) const = 0;
};

class GaussianNoise final : public NoiseSource {
 public:
  explicit GaussianNoise(std::uint64_t seed) : seed_(seed) {}
  std::vector<double> draw(int layer, int unit, std::size_t n) const override {
    Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(layer) + 1,
                     static_cast<std::uint64_t>(unit) + 1));
    return rng.normals(n);
  }

 private:
  std::uint64_t seed_;
};

class ZeroNoise final : public NoiseSource {
 public:
  std::vector<double> draw(int, int, std::size_t n) const override {
    return std::vector<double>(n, 0.0);
  }
};

}  // namespace abnn
