#pragma once

#include <cstdint>

namespace cgraph {

// splitmix64: the seed mixer behind every derived stream. All randomness in
// the project is a pure function of (master seed, counter), so resampling,
// parallel evaluation and re-runs stay reproducible.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derive a sub-seed from a master seed and a counter index.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t counter) {
  return splitmix64(master ^ (0x9e3779b97f4a7c15ull * (counter + 1)));
}

// Small deterministic PRNG (xorshift-multiply over a splitmix-seeded state).
// Identical output on every platform; no dependence on libstdc++
// distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {
    if (state_ == 0) state_ = 0x6a09e667f3bcc909ull;
  }

  std::uint64_t next_u64() {
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

 private:
  std::uint64_t state_;
};

}  // namespace cgraph
