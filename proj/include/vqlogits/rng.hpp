#pragma once

#include <cstdint>
#include <random>

namespace vqlogits {

// Explicit, splittable random source. Nothing in the library draws from
// ambient global state; every consumer receives an Rng (or a split of one).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Child generator whose stream is a deterministic function of this
  // generator's state. Advances the parent.
  Rng split() {
    std::seed_seq seq{engine_(), engine_()};
    std::mt19937_64 child(seq);
    return Rng(child);
  }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  explicit Rng(std::mt19937_64 engine) : engine_(engine) {}
  std::mt19937_64 engine_;
};

}  // namespace vqlogits
