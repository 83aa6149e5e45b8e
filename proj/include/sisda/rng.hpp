#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sisda {

std::uint64_t splitmix64(std::uint64_t x);

// Fans a global seed out to an independent per-component seed.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view component);

// mt19937_64 output is pinned by the standard; the distributions below are
// written out by hand so results do not depend on the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t below(std::uint64_t n);  // uniform in [0, n)
  std::int64_t between(std::int64_t lo, std::int64_t hi);  // inclusive

 private:
  std::mt19937_64 engine_;
};

}  // namespace sisda
