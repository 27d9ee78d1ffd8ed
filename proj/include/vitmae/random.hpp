#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vitmae {

/// Mixes (seed, component, counter) into an independent 64-bit stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view component, std::uint64_t counter = 0);

/// Deterministic random stream. Every random draw in the library goes through
/// one of these, keyed by `derive_seed`, so results never depend on thread
/// scheduling or call order across components.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view component, std::uint64_t counter = 0)
      : engine_(derive_seed(seed, component, counter)) {}

  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Normal resampled until it falls within ±2 standard deviations.
  double truncated_normal(double stddev);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vitmae
