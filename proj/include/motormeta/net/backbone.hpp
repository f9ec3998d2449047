#pragma once
// Convolutional embedding network: `blocks` x {3x3 conv (same padding), per-channel instance
// normalization with affine gamma/beta, ReLU, 2x2 max-pool}, then flatten.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "motormeta/error.hpp"
#include "motormeta/imaging.hpp"
#include "motormeta/net/tensor.hpp"
#include "motormeta/rng.hpp"

namespace motormeta::net {

inline constexpr double kNormEpsilon = 1e-5;

struct BackboneSpec {
  int input_side = 64;
  int channels = 32;
  int blocks = 4;

  int output_side() const { return input_side >> blocks; }
  int embedding_dim() const { return channels * output_side() * output_side(); }

  void validate() const {
    require(blocks >= 1 && channels >= 1, "backbone needs at least one block and one channel");
    require(input_side >= (1 << blocks) && input_side % (1 << blocks) == 0,
            "input side " + std::to_string(input_side) + " must be divisible by 2^blocks");
  }

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

/// All weights of the embedding network. Tensor order is fixed: conv_i, gamma_i, beta_i per block.
template <typename Scalar>
struct EmbeddingParams {
  BackboneSpec spec;
  std::vector<Tensor<Scalar>> conv;   // [C_out, C_in, 3, 3]
  std::vector<Tensor<Scalar>> gamma;  // [C]
  std::vector<Tensor<Scalar>> beta;   // [C]

  static EmbeddingParams zeros(const BackboneSpec& spec) {
    spec.validate();
    EmbeddingParams p;
    p.spec = spec;
    for (int b = 0; b < spec.blocks; ++b) {
      const std::size_t cin = b == 0 ? 1 : static_cast<std::size_t>(spec.channels);
      const auto c = static_cast<std::size_t>(spec.channels);
      p.conv.emplace_back(Shape{c, cin, 3, 3});
      p.gamma.emplace_back(Shape{c});
      p.beta.emplace_back(Shape{c});
    }
    return p;
  }

  /// Fan-in scaled uniform conv weights, unit gamma, zero beta.
  static EmbeddingParams init(const BackboneSpec& spec, std::uint64_t seed) {
    auto p = zeros(spec);
    Rng rng = make_rng(seed, {0xBAC4B0u});
    for (int b = 0; b < spec.blocks; ++b) {
      const double fan_in = static_cast<double>(p.conv[b].shape[1] * 9);
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& w : p.conv[b].data) w = static_cast<Scalar>(u(rng));
      std::fill(p.gamma[b].data.begin(), p.gamma[b].data.end(), Scalar(1));
    }
    return p;
  }

  std::vector<std::span<Scalar>> tensors() {
    std::vector<std::span<Scalar>> out;
    for (int b = 0; b < spec.blocks; ++b) {
      out.push_back(conv[b].span());
      out.push_back(gamma[b].span());
      out.push_back(beta[b].span());
    }
    return out;
  }

  std::vector<std::span<const Scalar>> tensors() const {
    std::vector<std::span<const Scalar>> out;
    for (int b = 0; b < spec.blocks; ++b) {
      out.push_back(conv[b].span());
      out.push_back(gamma[b].span());
      out.push_back(beta[b].span());
    }
    return out;
  }

  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out;
    for (int b = 0; b < spec.blocks; ++b) {
      const auto p = "block" + std::to_string(b) + ".";
      out.push_back(p + "conv");
      out.push_back(p + "gamma");
      out.push_back(p + "beta");
    }
    return out;
  }

  std::vector<Shape> tensor_shapes() const {
    std::vector<Shape> out;
    for (int b = 0; b < spec.blocks; ++b) {
      out.push_back(conv[b].shape);
      out.push_back(gamma[b].shape);
      out.push_back(beta[b].shape);
    }
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = kFnvOffset;
    for (auto t : tensors()) h = hash_values<Scalar>(h, t);
    return h;
  }

  bool all_finite() const {
    for (auto t : tensors())
      if (!std::all_of(t.begin(), t.end(), [](Scalar v) { return std::isfinite(v); })) return false;
    return true;
  }

  template <typename Other>
  EmbeddingParams<Other> cast() const {
    EmbeddingParams<Other> p;
    p.spec = spec;
    for (int b = 0; b < spec.blocks; ++b) {
      p.conv.push_back(conv[b].template cast<Other>());
      p.gamma.push_back(gamma[b].template cast<Other>());
      p.beta.push_back(beta[b].template cast<Other>());
    }
    return p;
  }

  friend bool operator==(const EmbeddingParams&, const EmbeddingParams&) = default;
};

/// Images stacked as rows of an (B x n*n) matrix.
template <typename Scalar>
MatrixR<Scalar> to_batch(std::span<const GrayImage> images) {
  require(!images.empty(), "empty image batch");
  const int n = images.front().n;
  MatrixR<Scalar> m(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(n) * n);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].n == n, "image batch mixes sizes");
    for (std::size_t j = 0; j < images[i].pixels.size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<Scalar>(images[i].pixels[j]);
  }
  return m;
}

namespace detail {

template <typename Scalar>
using MapR = Eigen::Map<MatrixR<Scalar>>;
template <typename Scalar>
using CMapR = Eigen::Map<const MatrixR<Scalar>>;

// cols[(ci*9 + ky*3 + kx), y*side + x] = in[ci, y+ky-1, x+kx-1] (zero outside).
template <typename Scalar>
void im2col(const Scalar* in, int cin, int side, Scalar* cols) {
  const int hw = side * side;
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        Scalar* row = cols + static_cast<std::size_t>((ci * 9 + ky * 3 + kx)) * hw;
        const Scalar* plane = in + static_cast<std::size_t>(ci) * hw;
        // valid output columns are [x0, x1), reading src[x + kx - 1]
        const int x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? side - 1 : side;
        for (int y = 0; y < side; ++y) {
          const int sy = y + ky - 1;
          Scalar* dst = row + static_cast<std::size_t>(y) * side;
          if (sy < 0 || sy >= side) {
            std::fill(dst, dst + side, Scalar(0));
            continue;
          }
          const Scalar* src = plane + static_cast<std::size_t>(sy) * side + (kx - 1);
          if (x0 > 0) dst[0] = Scalar(0);
          std::copy(src + x0, src + x1, dst + x0);
          if (x1 < side) dst[side - 1] = Scalar(0);
        }
      }
}

// Sum of f(0..n-1) in double over 8 interleaved lanes; fixed order, so results are reproducible.
template <typename F>
double lane_sum(int n, F f) {
  double acc[8] = {};
  int j = 0;
  for (; j + 8 <= n; j += 8)
    for (int l = 0; l < 8; ++l) acc[l] += f(j + l);
  for (int l = 0; j < n; ++j, ++l) acc[l] += f(j);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename Scalar>
void col2im_add(const Scalar* cols, int cin, int side, Scalar* din) {
  const int hw = side * side;
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Scalar* row = cols + static_cast<std::size_t>((ci * 9 + ky * 3 + kx)) * hw;
        Scalar* plane = din + static_cast<std::size_t>(ci) * hw;
        const int x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? side - 1 : side;
        for (int y = 0; y < side; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= side) continue;
          const Scalar* src = row + static_cast<std::size_t>(y) * side;
          Scalar* dst = plane + static_cast<std::size_t>(sy) * side + (kx - 1);
          for (int x = x0; x < x1; ++x) dst[x] += src[x];
        }
      }
}

}  // namespace detail

/// Per-image intermediates needed by backward().
template <typename Scalar>
struct BlockCache {
  std::vector<Scalar> input;   // C_in x side x side
  std::vector<Scalar> xhat;    // C x side x side, normalized conv output
  std::vector<std::uint8_t> active;  // relu input was positive
  std::vector<double> inv_std;  // per channel
  std::vector<std::uint8_t> pool_arg;  // C x (side/2)^2, which of the 4 inputs won
};

template <typename Scalar>
struct ForwardCache {
  std::uint64_t params_hash = 0;
  BackboneSpec spec;
  std::vector<std::vector<BlockCache<Scalar>>> images;  // [image][block]
};

template <typename Scalar>
struct ForwardResult {
  MatrixR<Scalar> embeddings;  // B x d
  ForwardCache<Scalar> cache;
};

/// Runs the backbone over a batch. With keep_cache=false only embeddings are produced.
/// `recycled` donates the buffers of an old cache, which saves reallocating them every step.
template <typename Scalar>
ForwardResult<Scalar> forward(const EmbeddingParams<Scalar>& params, const MatrixR<Scalar>& batch,
                              bool keep_cache = true, ForwardCache<Scalar>&& recycled = {}) {
  const auto& spec = params.spec;
  spec.validate();
  const int n_in = spec.input_side;
  require(batch.cols() == static_cast<Eigen::Index>(n_in) * n_in,
          "forward: batch images have " + std::to_string(batch.cols()) + " pixels, backbone expects " +
              std::to_string(n_in * n_in));
  const auto B = static_cast<std::size_t>(batch.rows());
  const int C = spec.channels;

  ForwardResult<Scalar> res;
  res.embeddings.resize(batch.rows(), spec.embedding_dim());
  if (keep_cache) {
    res.cache = std::move(recycled);
    res.cache.params_hash = params.hash();
    res.cache.spec = spec;
    res.cache.images.resize(B);
  }

  std::vector<Scalar> act, cols, conv_out, pooled;
  for (std::size_t i = 0; i < B; ++i) {
    act.assign(batch.row(static_cast<Eigen::Index>(i)).data(),
               batch.row(static_cast<Eigen::Index>(i)).data() + batch.cols());
    int side = n_in;
    int cin = 1;
    if (keep_cache) res.cache.images[i].resize(static_cast<std::size_t>(spec.blocks));
    for (int b = 0; b < spec.blocks; ++b) {
      const int hw = side * side;
      cols.resize(static_cast<std::size_t>(cin) * 9 * hw);
      detail::im2col(act.data(), cin, side, cols.data());
      conv_out.resize(static_cast<std::size_t>(C) * hw);
      detail::CMapR<Scalar> W(params.conv[b].data.data(), C, cin * 9);
      detail::CMapR<Scalar> X(cols.data(), cin * 9, hw);
      detail::MapR<Scalar>(conv_out.data(), C, hw).noalias() = W * X;

      BlockCache<Scalar>* bc = keep_cache ? &res.cache.images[i][b] : nullptr;
      if (bc) {
        bc->input = act;
        bc->xhat.resize(conv_out.size());
        bc->active.resize(conv_out.size());
        bc->inv_std.resize(static_cast<std::size_t>(C));
      }
      // instance norm + affine + relu, in place in conv_out
      for (int c = 0; c < C; ++c) {
        Scalar* x = conv_out.data() + static_cast<std::size_t>(c) * hw;
        const double mean = detail::lane_sum(hw, [x](int j) { return static_cast<double>(x[j]); }) / hw;
        const double var = detail::lane_sum(hw, [x, mean](int j) {
                             const double d = x[j] - mean;
                             return d * d;
                           }) / hw;
        const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
        const Scalar g = params.gamma[b].data[c], be = params.beta[b].data[c];
        if (bc) {
          Scalar* xhat = bc->xhat.data() + static_cast<std::size_t>(c) * hw;
          std::uint8_t* active = bc->active.data() + static_cast<std::size_t>(c) * hw;
          for (int j = 0; j < hw; ++j) {
            const auto xh = static_cast<Scalar>((x[j] - mean) * inv);
            const Scalar y = g * xh + be;
            xhat[j] = xh;
            active[j] = y > Scalar(0);
            x[j] = y > Scalar(0) ? y : Scalar(0);
          }
          bc->inv_std[c] = inv;
        } else {
          for (int j = 0; j < hw; ++j) {
            const Scalar y = g * static_cast<Scalar>((x[j] - mean) * inv) + be;
            x[j] = y > Scalar(0) ? y : Scalar(0);
          }
        }
      }
      // 2x2 max-pool
      const int half = side / 2;
      pooled.resize(static_cast<std::size_t>(C) * half * half);
      if (bc) bc->pool_arg.resize(pooled.size());
      for (int c = 0; c < C; ++c) {
        const Scalar* x = conv_out.data() + static_cast<std::size_t>(c) * hw;
        for (int py = 0; py < half; ++py)
          for (int px = 0; px < half; ++px) {
            const Scalar* base = x + static_cast<std::size_t>(2 * py) * side + 2 * px;
            // first maximum wins; bit masks instead of branches, which mispredict on real activations
            Scalar m = base[0];
            unsigned arg = 0;
            const Scalar v[3] = {base[1], base[side], base[side + 1]};
            for (unsigned k = 0; k < 3; ++k) {
              const unsigned mask = -static_cast<unsigned>(v[k] > m);
              arg = (arg & ~mask) | ((k + 1) & mask);
              m = std::max(m, v[k]);
            }
            const std::size_t o = static_cast<std::size_t>(c) * half * half + static_cast<std::size_t>(py) * half + px;
            pooled[o] = m;
            if (bc) bc->pool_arg[o] = static_cast<std::uint8_t>(arg);
          }
      }
      act.swap(pooled);
      side = half;
      cin = C;
    }
    std::copy(act.begin(), act.end(), res.embeddings.row(static_cast<Eigen::Index>(i)).data());
  }
  return res;
}

template <typename Scalar>
MatrixR<Scalar> embed(const EmbeddingParams<Scalar>& params, const MatrixR<Scalar>& batch) {
  return forward(params, batch, /*keep_cache=*/false).embeddings;
}

/// Exact gradients of a scalar loss w.r.t. every backbone tensor, given dL/d(embeddings).
template <typename Scalar>
EmbeddingParams<Scalar> backward(const EmbeddingParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                                 const MatrixR<Scalar>& dembeddings) {
  const auto& spec = params.spec;
  require(cache.spec == spec && !cache.images.empty(), "backward: cache does not belong to these parameters");
  require(cache.params_hash == params.hash(), "backward: stale forward cache (parameters changed since forward)");
  require(dembeddings.rows() == static_cast<Eigen::Index>(cache.images.size()) &&
              dembeddings.cols() == spec.embedding_dim(),
          "backward: upstream gradient has wrong shape");

  auto grads = EmbeddingParams<Scalar>::zeros(spec);
  const int C = spec.channels;
  std::vector<Scalar> dact, dconv, cols, dcols, din;
  // Accumulate per-tensor gradients in double for reproducible reductions.
  std::vector<std::vector<double>> gconv(static_cast<std::size_t>(spec.blocks)),
      ggamma(static_cast<std::size_t>(spec.blocks)), gbeta(static_cast<std::size_t>(spec.blocks));
  for (int b = 0; b < spec.blocks; ++b) {
    gconv[b].assign(grads.conv[b].size(), 0.0);
    ggamma[b].assign(grads.gamma[b].size(), 0.0);
    gbeta[b].assign(grads.beta[b].size(), 0.0);
  }
  MatrixR<Scalar> dW;

  for (std::size_t i = 0; i < cache.images.size(); ++i) {
    const auto& blocks = cache.images[i];
    dact.assign(dembeddings.row(static_cast<Eigen::Index>(i)).data(),
                dembeddings.row(static_cast<Eigen::Index>(i)).data() + dembeddings.cols());
    for (int b = spec.blocks - 1; b >= 0; --b) {
      const auto& bc = blocks[b];
      const int side = spec.input_side >> b;
      const int hw = side * side;
      const int half = side / 2;
      const int cin = b == 0 ? 1 : C;

      // max-pool and relu
      dconv.assign(static_cast<std::size_t>(C) * hw, Scalar(0));
      for (int c = 0; c < C; ++c)
        for (int py = 0; py < half; ++py)
          for (int px = 0; px < half; ++px) {
            const std::size_t o = static_cast<std::size_t>(c) * half * half + static_cast<std::size_t>(py) * half + px;
            const std::uint8_t a = bc.pool_arg[o];
            const std::size_t src = static_cast<std::size_t>(c) * hw + static_cast<std::size_t>(2 * py + (a >> 1)) * side +
                                    (2 * px + (a & 1));
            dconv[src] = dact[o] * static_cast<Scalar>(bc.active[src]);  // windows are disjoint
          }
      // norm
      for (int c = 0; c < C; ++c) {
        Scalar* dy = dconv.data() + static_cast<std::size_t>(c) * hw;
        const Scalar* xh = bc.xhat.data() + static_cast<std::size_t>(c) * hw;
        const double sdy = detail::lane_sum(hw, [dy](int j) { return static_cast<double>(dy[j]); });
        const double sdyx = detail::lane_sum(hw, [dy, xh](int j) { return static_cast<double>(dy[j]) * xh[j]; });
        gbeta[b][c] += sdy;
        ggamma[b][c] += sdyx;
        const double g = params.gamma[b].data[c];
        const double m1 = g * sdy / hw, m2 = g * sdyx / hw;
        const double inv = bc.inv_std[c];
        for (int j = 0; j < hw; ++j) dy[j] = static_cast<Scalar>(inv * (g * dy[j] - m1 - xh[j] * m2));
      }
      // conv
      cols.resize(static_cast<std::size_t>(cin) * 9 * hw);
      detail::im2col(bc.input.data(), cin, side, cols.data());
      detail::CMapR<Scalar> dY(dconv.data(), C, hw);
      detail::CMapR<Scalar> X(cols.data(), cin * 9, hw);
      dW.noalias() = dY * X.transpose();
      for (Eigen::Index k = 0; k < dW.size(); ++k) gconv[b][static_cast<std::size_t>(k)] += dW.data()[k];
      if (b > 0) {
        dcols.resize(cols.size());
        detail::CMapR<Scalar> W(params.conv[b].data.data(), C, cin * 9);
        detail::MapR<Scalar>(dcols.data(), cin * 9, hw).noalias() = W.transpose() * dY;
        din.assign(static_cast<std::size_t>(cin) * hw, Scalar(0));
        detail::col2im_add(dcols.data(), cin, side, din.data());
        dact.swap(din);
      }
    }
  }
  for (int b = 0; b < spec.blocks; ++b) {
    std::transform(gconv[b].begin(), gconv[b].end(), grads.conv[b].data.begin(),
                   [](double v) { return static_cast<Scalar>(v); });
    std::transform(ggamma[b].begin(), ggamma[b].end(), grads.gamma[b].data.begin(),
                   [](double v) { return static_cast<Scalar>(v); });
    std::transform(gbeta[b].begin(), gbeta[b].end(), grads.beta[b].data.begin(),
                   [](double v) { return static_cast<Scalar>(v); });
  }
  return grads;
}

}  // namespace motormeta::net
