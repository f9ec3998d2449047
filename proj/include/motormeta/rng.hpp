#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>
#include <algorithm>

namespace motormeta {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent stream seeds from a base seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt) {
  std::uint64_t s = mix_seed(base);
  for (auto v : salt) s = mix_seed(s ^ mix_seed(v + 0x51ED270B2A3C4D5EULL));
  return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> salt = {}) {
  return Rng(derive_seed(base, salt));
}

}  // namespace motormeta

namespace motormeta {

/// Unbiased integer in [0, n) drawn straight from the engine, so sequences do not depend on the
/// standard library's distribution implementation.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - (Rng::max() % n);
  std::uint64_t v;
  do v = rng(); while (v >= limit);
  return v % n;
}

/// k distinct values from [0, n) in draw order (partial Fisher-Yates).
inline std::vector<std::size_t> pick_without_replacement(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k && i < n; ++i) std::swap(pool[i], pool[i + uniform_index(rng, n - i)]);
  pool.resize(std::min(k, n));
  return pool;
}

}  // namespace motormeta
