#pragma once
// Central finite-difference check of backbone gradients, shared by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "motormeta/net/backbone.hpp"

namespace motormeta::oracle {

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  double rel_error = 0.0;  // ||g_analytic - g_fd|| / max(||g_analytic|| + ||g_fd||, tiny) over checked entries
};

// Loss is <R, f(x)> for a fixed random R. At most `per_tensor` entries per tensor are perturbed
// (all of them when the tensor is smaller).
template <typename Scalar>
std::vector<TensorCheck> finite_difference_check(const net::BackboneSpec& spec, int batch, std::uint64_t seed,
                                                 double h, std::size_t per_tensor) {
  using M = net::MatrixR<Scalar>;
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);

  auto params = net::EmbeddingParams<double>::init(spec, seed).template cast<Scalar>();
  for (auto t : params.tensors())
    for (auto& v : t) v = static_cast<Scalar>(v + 0.1 * nd(g));  // move gamma/beta off their init values
  M x(batch, spec.input_side * spec.input_side);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<Scalar>(u(g));
  M R(batch, spec.embedding_dim());
  for (Eigen::Index i = 0; i < R.size(); ++i) R.data()[i] = static_cast<Scalar>(nd(g));

  auto loss = [&](const net::EmbeddingParams<Scalar>& p) {
    const M e = net::embed(p, x);
    double s = 0.0;
    for (Eigen::Index i = 0; i < e.size(); ++i) s += static_cast<double>(e.data()[i]) * static_cast<double>(R.data()[i]);
    return s;
  };

  auto fr = net::forward(params, x);
  const auto grads = net::backward(params, fr.cache, R);
  const auto gspans = grads.tensors();
  const auto names = params.tensor_names();

  std::vector<TensorCheck> out;
  for (std::size_t t = 0; t < names.size(); ++t) {
    const std::size_t size = params.tensors()[t].size();
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), g);
    idx.resize(std::min(size, per_tensor));
    double diff = 0.0, na = 0.0, nf = 0.0;
    for (auto i : idx) {
      auto p = params;
      auto span = p.tensors()[t];
      const Scalar orig = span[i];
      span[i] = static_cast<Scalar>(orig + h);
      const double lp = loss(p);
      span[i] = static_cast<Scalar>(orig - h);
      const double lm = loss(p);
      const double fd = (lp - lm) / (2.0 * h);
      const double an = static_cast<double>(gspans[t][i]);
      diff += (an - fd) * (an - fd);
      na += an * an;
      nf += fd * fd;
    }
    out.push_back({names[t], idx.size(), std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nf), 1e-300)});
  }
  return out;
}

}  // namespace motormeta::oracle
