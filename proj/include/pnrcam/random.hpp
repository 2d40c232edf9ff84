#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace pnrcam {

/// SplitMix64 finalizer; used to expand and decorrelate seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Child seed for a named sub-stream of `seed`. Streams with different tags are
/// independent; the mapping is pure, so derivation order never matters.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(seed ^ mix64(tag + 0x632be59bd9b4e019ULL));
}

/// xoshiro256** generator. Cheap to construct, so every frame gets its own.
class Engine {
 public:
  using result_type = std::uint64_t;

  explicit Engine(std::uint64_t seed = 0) {
    std::uint64_t z = seed;
    for (auto& w : s_) {
      w = mix64(z);
      z += 0x9e3779b97f4a7c15ULL;
    }
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    const std::uint64_t out = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return out;
  }

  bool operator==(const Engine&) const = default;

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<std::uint64_t, 4> s_{};
};

/// Engine for item `index` of stream `seed`. Frame generators call this once per
/// frame so the output is independent of evaluation order and worker count.
inline Engine make_engine(std::uint64_t seed, std::uint64_t index = 0) { return Engine(derive_seed(seed, index)); }

}  // namespace pnrcam
