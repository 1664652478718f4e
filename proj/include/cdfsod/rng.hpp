#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace cdfsod {

// Deterministic, platform-independent random stream (splitmix64 core).
// Every source of randomness in the project flows from one master seed
// through named sub-streams, so runs are reproducible bit-for-bit.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Derives an independent stream from (master, tag). Different tags on the
  // same master never share lineage.
  static Rng stream(uint64_t master, std::string_view tag) {
    return Rng(mix(master ^ fnv1a(tag)));
  }

  static uint64_t derive(uint64_t master, std::string_view tag) {
    return mix(master ^ fnv1a(tag));
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive on both ends.
  int uniform_int(int lo, int hi) {
    uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int(next_u64() % span);
  }

  bool coin(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  static uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
      h ^= uint64_t(uint8_t(c));
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdull;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ull;
    return z ^ (z >> 33);
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cdfsod
