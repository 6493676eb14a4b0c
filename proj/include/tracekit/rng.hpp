#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tracekit {

// All stochastic components share this generator so runs are reproducible
// from a single seed. mt19937_64 has a standard-specified sequence;
// distributions are hand-rolled below because std::*_distribution output is
// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // Rejection-free modulo is fine here; n is tiny relative to 2^64 in all
    // call sites, so the bias is far below observable levels.
    return engine_() % n;
  }

  // Standard normal via Box-Muller on explicit uniforms.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Derive an independent child stream (e.g. one per iteration).
  Rng fork() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tracekit
