#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace aligndistill {

// SplitMix64 finalizer; mixes a base seed with a stream id so derived seeds
// do not depend on the order in which they are requested.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Seeded generator with a platform-independent stream. std::mt19937_64 is
// fully specified by the standard; the distributions are written out here
// because the standard library's are not.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller (cached spare).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n). n must be > 0.
  std::size_t below(std::size_t n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace aligndistill
