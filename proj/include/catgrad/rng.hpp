#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace catgrad {

// Deterministic random source. Every stochastic operation in the library
// takes one of these explicitly; independent streams are derived with
// split() so that results are reproducible regardless of evaluation order
// or thread count. The underlying engine (mt19937_64) and all draw
// constructions below are fully specified, so sequences are identical
// across platforms and compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : tag_(seed), engine_(mix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Standard Gumbel draw, -log(-log u), with u clamped away from {0, 1}.
  double gumbel() {
    double u = uniform();
    if (u < 1e-12) u = 1e-12;
    if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
    return -std::log(-std::log(u));
  }

  // Integer in [0, n).
  std::int64_t below(std::int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::below requires n > 0");
    return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Inverse-CDF draw from a probability vector: the first category whose
  // cumulative mass strictly exceeds the uniform draw.
  int categorical(const Eigen::Ref<const Eigen::VectorXd>& probs) {
    const double u = uniform();
    double cum = 0.0;
    for (int k = 0; k < probs.size(); ++k) {
      cum += probs[k];
      if (cum > u) return k;
    }
    return static_cast<int>(probs.size()) - 1;
  }

  // Independent stream derived from this source's seed tag. Distinct
  // `stream` values give statistically independent sequences; the parent's
  // draw position does not affect the child.
  Rng split(std::uint64_t stream) const {
    return Rng(mix64(tag_ + 0x9e3779b97f4a7c15ull * (stream + 1)));
  }

  std::uint64_t seed_tag() const { return tag_; }

 private:
  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t tag_;
  std::mt19937_64 engine_;
};

}  // namespace catgrad
