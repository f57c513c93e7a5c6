#pragma once

#include <cstdint>
#include <initializer_list>

namespace fcbfuse {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Counter-based generator. Streams derived from (root seed, path) are
// independent: identical (seed, path) always replays the same draws, which
// is what makes per-(epoch, sample) augmentation reproducible regardless of
// execution order.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed)) {}

  static Rng stream(uint64_t root, std::initializer_list<uint64_t> path) {
    uint64_t s = splitmix64(root);
    for (uint64_t p : path) s = splitmix64(s ^ splitmix64(p));
    Rng r(0);
    r.state_ = s;
    return r;
  }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }  // [0,1)
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }

  // inclusive range, rejection sampling keeps it unbiased
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
  }

  template <typename It>
  void shuffle(It first, It last) {
    int64_t n = last - first;
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = uniform_int(0, i);
      std::swap(first[i], first[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace fcbfuse
