#pragma once

#include <cstdint>

namespace cqs {

// Deterministic generator (splitmix64) with hand-rolled uniform/normal draws,
// so seeded runs produce identical streams regardless of the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Marsaglia polar method
  double normal();

  // integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Mixes two values into a derived seed (for per-observation generators).
std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b);

}  // namespace cqs
