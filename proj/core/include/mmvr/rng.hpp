#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace mmvr {

// splitmix64 finalizer; used for stable id hashing (corpus splits) as well as
// seed expansion below.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// xoshiro256** with Box-Muller normals. Hand-rolled instead of <random> so
// that the full generator state is four u64 words that serialize into
// checkpoints and restore bit-exactly, independent of the C++ stdlib's
// distribution implementations.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed) {
    // splitmix64 expansion of the seed into the full state
    std::uint64_t x = seed;
    for (auto& word : state_) {
      word = mix64(x);
      x += 0x9e3779b97f4a7c15ULL;
    }
    if (state_[0] == 0 && state_[1] == 0 && state_[2] == 0 && state_[3] == 0) {
      state_[0] = 1;
    }
  }

  static Rng from_state(const State& s) {
    Rng r(0);
    r.state_ = s;
    return r;
  }

  State state() const { return state_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform double in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n), rejection-sampled to avoid modulo bias
  std::uint64_t bounded(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // standard normal via Box-Muller; two u64 draws per call, no cached spare
  double normal() {
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  // Derived independent stream; does not advance this generator.
  Rng fork(std::uint64_t stream) const {
    std::uint64_t h = state_[0] ^ rotl(state_[2], 17) ^ (stream + 1) * 0x9e3779b97f4a7c15ULL;
    return Rng(h);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  State state_{};
};

// k sorted distinct indices uniform over [0, n), via partial Fisher-Yates.
inline std::vector<int> sample_indices_sorted(int n, int k, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace mmvr
