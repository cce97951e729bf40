#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace mprvit {

// Deterministic, implementation-pinned random generator (splitmix64 core).
// std::mt19937 distributions are avoided on purpose: the distribution
// algorithms are library-defined, and reproducibility across toolchains is
// part of the artifact contract. All draws below are fixed arithmetic.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (no caching; two draws per value).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [0, n). Modulo bias is < 2^-53 for any realistic n.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Independent substream derived from this generator's seed and a label.
  Rng fork(std::uint64_t stream) const {
    Rng child(state_ ^ (0x8e9b3f0a5c7d1e2bULL * (stream + 1)));
    child.next_u64();
    return child;
  }

  // Fisher-Yates shuffle with fixed draw order.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace mprvit
