#pragma once

#include <cstdint>

namespace mkis {

// splitmix64: tiny, seedable, identical on every platform. We use it for all
// stochastic streams (weight init, shuffling, dropout masks, gain draws) so
// runs reproduce bit-for-bit from a single seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // [0, n)
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

 private:
  uint64_t state_;
};

// Derives an independent stream seed from a base seed and a stream index,
// e.g. per-epoch shuffles or per-step dropout masks.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  Rng r(base ^ (0x6a09e667f3bcc909ULL + stream * 0x9e3779b97f4a7c15ULL));
  return r.next_u64();
}

}  // namespace mkis
