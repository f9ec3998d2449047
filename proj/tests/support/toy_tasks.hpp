#pragma once
// Small synthetic tasks whose classes differ in the frequency of a noisy sinusoid.

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "motormeta/episodes.hpp"

namespace motormeta::oracle {

inline TaskDataset toy_sine_task(std::string id, int n, const std::vector<FaultClass>& classes, std::size_t per_class,
                                 std::uint64_t seed, double noise = 0.3) {
  TaskDataset t;
  t.id = std::move(id);
  t.n = n;
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> nd(0.0, noise);
  const std::size_t len = static_cast<std::size_t>(n) * n;
  std::vector<double> seg(len);
  for (std::size_t i = 0; i < per_class; ++i)
    for (auto c : classes) {
      const double cycles = 2.0 + 3.0 * static_cast<double>(static_cast<int>(c));
      const double ph = phase(g);
      for (std::size_t k = 0; k < len; ++k)
        seg[k] = std::sin(2.0 * std::numbers::pi * cycles * static_cast<double>(k) / static_cast<double>(len) + ph) + nd(g);
      t.push_back(seg, c, static_cast<int>(i % 5));
    }
  return t;
}

inline std::vector<FaultClass> first_classes(int k) {
  std::vector<FaultClass> out;
  for (int i = 0; i < k; ++i) out.push_back(fault_class_from_index(i));
  return out;
}

}  // namespace motormeta::oracle
