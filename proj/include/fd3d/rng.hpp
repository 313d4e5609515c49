#pragma once

#include <cmath>
#include <cstdint>

namespace fd3d {

// Counter-based pseudo-random generator ("sm64ctr").
//
// Output i of a stream with key K is splitmix64_mix(K + (i+1)*GOLDEN), i.e.
// the SplitMix64 sequence seeded at K, evaluated by counter. Streams are
// derived rather than advanced: split(tag) yields an independent child stream
// whose key mixes the parent key with the tag. All stochastic operations in
// this project take an explicit Rng or seed, so every result is reproducible
// from (seed, call structure) alone.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5851F42D4C957F2Dull)), ctr_(0) {}

  // Independent child stream, deterministic in (parent key, tag).
  Rng split(std::uint64_t tag) const {
    Rng child;
    child.key_ = mix(key_ ^ mix(tag + 0x9E3779B97F4A7C15ull));
    child.ctr_ = 0;
    return child;
  }

  std::uint64_t next_u64() { return mix(key_ + (++ctr_) * 0x9E3779B97F4A7C15ull); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float next_float() { return static_cast<float>((next_u64() >> 40) * 0x1.0p-24); }

  // Uniform integer in [0, n); rejection sampling avoids modulo bias.
  std::uint64_t next_below(std::uint64_t n) {
    if (n < 2) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller (cosine branch), two uniforms per draw.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return ctr_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t ctr_;
};

}  // namespace fd3d
