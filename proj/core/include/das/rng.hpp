#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace das {

/// Seeded random source with explicitly specified value mappings.
///
/// std::mt19937_64 is a standardized generator, but the standard
/// distributions are implementation-defined; every mapping from raw bits to
/// values is spelled out here so that a seed pins down the exact stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1).
  double uniform();

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller.
  double gaussian();

  /// Uniform integer in [0, n), rejection-sampled (n > 0).
  std::size_t uniform_index(std::size_t n);

  /// Uniform m-subset of [0, n) via partial Fisher-Yates; returned sorted.
  std::vector<std::size_t> sample_subset(std::size_t n, std::size_t m);

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent stream derived from this rng's seed and a tag. Derivation
  /// is pure (does not consume from this stream), so call order elsewhere
  /// cannot perturb the child.
  Rng child(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer, used for seed derivation.
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace das
