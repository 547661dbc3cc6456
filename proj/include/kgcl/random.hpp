#pragma once

// Seeded random streams.
//
// Every experiment has one master seed. Independent substreams (init,
// shuffling, negatives, partitioning, replay, Fisher) are derived as
//
//   stream_seed = splitmix64(splitmix64(master) ^ fnv1a64(name) ^ index * 0x9E3779B97F4A7C15)
//
// and each substream drives its own std::mt19937_64. Bounded integers and
// shuffles are implemented here rather than through <random> distributions so
// the sequences are identical across standard library implementations.

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace kgcl {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, n). Lemire's multiply-shift with rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n <= 1) return 0;
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      using std::swap;
      swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

inline Rng derive_stream(std::uint64_t master, std::string_view name, std::uint64_t index = 0) {
  return Rng(splitmix64(splitmix64(master) ^ fnv1a64(name) ^ (index * 0x9E3779B97F4A7C15ULL)));
}

}  // namespace kgcl
