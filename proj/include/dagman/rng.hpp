#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

namespace dagman {

// splitmix64 finalizer; used to turn (seed, counter...) tuples into
// well-mixed engine seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based stream key: the result depends only on the arguments, never on
// how many draws happened elsewhere, so any (seed, step, item, ...) tuple
// reproduces the same stream regardless of iteration order.
inline std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> counters) {
  std::uint64_t h = mix64(seed);
  for (auto c : counters) h = mix64(h ^ mix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed, std::initializer_list<std::uint64_t> counters = {}) {
  return Engine(stream_key(seed, counters));
}

// Exactly k distinct indices from [0, n), uniformly, in ascending order.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Engine& eng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> out;
  out.reserve(k);
  std::sample(all.begin(), all.end(), std::back_inserter(out), k, eng);
  return out;
}

}  // namespace dagman
