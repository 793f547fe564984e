#pragma once

#include <cstdint>
#include <random>

namespace idam {

// Deterministic RNG used wherever the library needs randomness. The raw
// engine output is converted by hand so that a given seed yields the same
// sequence on every platform and standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  int uniform_int(int n);

  // Standard normal via Box-Muller.
  double normal();

  // N(0, sigma^2) clamped to [-clip, clip].
  double clipped_normal(double sigma, double clip);

  // Stable per-stream seed derivation (splitmix64 finalizer).
  static uint64_t derive_seed(uint64_t base, uint64_t stream);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace idam
