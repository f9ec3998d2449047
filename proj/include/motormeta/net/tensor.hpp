#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "motormeta/error.hpp"

namespace motormeta::net {

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Dense row-major tensor.
template <typename Scalar>
struct Tensor {
  Shape shape;
  std::vector<Scalar> data;

  Tensor() = default;
  explicit Tensor(Shape s, Scalar fill = Scalar(0)) : shape(std::move(s)), data(shape_size(shape), fill) {}

  std::size_t size() const { return data.size(); }
  std::span<Scalar> span() { return data; }
  std::span<const Scalar> span() const { return data; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](Scalar v) { return std::isfinite(v); });
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.shape = shape;
    t.data.assign(data.begin(), data.end());
    return t;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// FNV-1a over raw bytes; identifies a parameter state for cache checks.
template <typename Scalar>
std::uint64_t hash_values(std::uint64_t h, std::span<const Scalar> values) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ULL;

}  // namespace motormeta::net
