#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "motormeta/error.hpp"
#include "motormeta/net/tensor.hpp"

namespace motormeta::net {

/// Row-wise log-softmax in double. Rows containing +inf put all mass on those entries.
template <typename Derived>
std::vector<double> log_softmax_row(const Eigen::DenseBase<Derived>& row) {
  const auto C = static_cast<std::size_t>(row.size());
  std::vector<double> out(C);
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < C; ++c) m = std::max(m, static_cast<double>(row(static_cast<Eigen::Index>(c))));
  if (std::isinf(m) && m > 0) {
    std::size_t top = 0;
    for (std::size_t c = 0; c < C; ++c) top += std::isinf(static_cast<double>(row(static_cast<Eigen::Index>(c)))) &&
                                               row(static_cast<Eigen::Index>(c)) > 0;
    for (std::size_t c = 0; c < C; ++c) {
      const double v = static_cast<double>(row(static_cast<Eigen::Index>(c)));
      out[c] = (std::isinf(v) && v > 0) ? -std::log(static_cast<double>(top)) : -std::numeric_limits<double>::infinity();
    }
    return out;
  }
  double z = 0.0;
  for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row(static_cast<Eigen::Index>(c))) - m);
  const double lz = m + std::log(z);
  for (std::size_t c = 0; c < C; ++c) out[c] = static_cast<double>(row(static_cast<Eigen::Index>(c))) - lz;
  return out;
}

template <typename Scalar>
MatrixR<Scalar> softmax(const MatrixR<Scalar>& logits) {
  MatrixR<Scalar> p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto lp = log_softmax_row(logits.row(r));
    for (Eigen::Index c = 0; c < logits.cols(); ++c) p(r, c) = static_cast<Scalar>(std::exp(lp[static_cast<std::size_t>(c)]));
  }
  return p;
}

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  MatrixR<Scalar> grad;  // d loss / d logits
};

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const MatrixR<Scalar>& logits, std::span<const int> labels) {
  require(logits.rows() == static_cast<Eigen::Index>(labels.size()), "cross-entropy: label count != batch size");
  require(logits.rows() > 0, "cross-entropy: empty batch");
  const auto B = logits.rows();
  const auto C = logits.cols();
  LossResult<Scalar> r;
  r.grad.resize(B, C);
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < C, "cross-entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    const auto lp = log_softmax_row(logits.row(i));
    total -= lp[static_cast<std::size_t>(y)];
    for (Eigen::Index c = 0; c < C; ++c)
      r.grad(i, c) = static_cast<Scalar>((std::exp(lp[static_cast<std::size_t>(c)]) - (c == y ? 1.0 : 0.0)) / B);
  }
  r.loss = total / B;
  return r;
}

/// Mean over the batch of sum_c p_t (log p_t - log p_s). The teacher is a constant.
template <typename Scalar>
LossResult<Scalar> kl_divergence(const MatrixR<Scalar>& student_logits, const MatrixR<Scalar>& teacher_logits) {
  require(student_logits.rows() == teacher_logits.rows() && student_logits.cols() == teacher_logits.cols(),
          "kl_divergence: shape mismatch");
  require(student_logits.rows() > 0, "kl_divergence: empty batch");
  const auto B = student_logits.rows();
  const auto C = student_logits.cols();
  LossResult<Scalar> r;
  r.grad.resize(B, C);
  double total = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto ls = log_softmax_row(student_logits.row(i));
    const auto lt = log_softmax_row(teacher_logits.row(i));
    double row = 0.0;
    for (Eigen::Index c = 0; c < C; ++c) {
      const double pt = std::exp(lt[static_cast<std::size_t>(c)]);
      if (pt > 0.0) row += pt * (lt[static_cast<std::size_t>(c)] - ls[static_cast<std::size_t>(c)]);
      r.grad(i, c) = static_cast<Scalar>((std::exp(ls[static_cast<std::size_t>(c)]) - pt) / B);
    }
    total += row;
  }
  r.loss = total / B;
  return r;
}

template <typename Scalar>
int argmax_row(const MatrixR<Scalar>& m, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------

/// Fully connected classifier on embeddings: logits = E W^T + b.
template <typename Scalar>
struct Dense {
  Tensor<Scalar> weight;  // [classes, d]
  Tensor<Scalar> bias;    // [classes]

  static Dense zeros(int classes, int dim) {
    return Dense{Tensor<Scalar>({static_cast<std::size_t>(classes), static_cast<std::size_t>(dim)}),
                 Tensor<Scalar>({static_cast<std::size_t>(classes)})};
  }

  int classes() const { return static_cast<int>(weight.shape.at(0)); }
  int dim() const { return static_cast<int>(weight.shape.at(1)); }

  std::vector<std::span<Scalar>> tensors() { return {weight.span(), bias.span()}; }

  MatrixR<Scalar> logits(const MatrixR<Scalar>& emb) const {
    require(emb.cols() == dim(), "dense head: embedding dimension mismatch");
    Eigen::Map<const MatrixR<Scalar>> W(weight.data.data(), classes(), dim());
    Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.data.data(), classes());
    MatrixR<Scalar> out = emb * W.transpose();
    out.rowwise() += b;
    return out;
  }

  /// Returns gradients for (weight, bias) and writes dL/d(emb) into demb.
  Dense backward(const MatrixR<Scalar>& emb, const MatrixR<Scalar>& dlogits, MatrixR<Scalar>* demb) const {
    Dense g = zeros(classes(), dim());
    Eigen::Map<MatrixR<Scalar>>(g.weight.data.data(), classes(), dim()).noalias() = dlogits.transpose() * emb;
    for (Eigen::Index c = 0; c < dlogits.cols(); ++c) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < dlogits.rows(); ++i) s += dlogits(i, c);
      g.bias.data[static_cast<std::size_t>(c)] = static_cast<Scalar>(s);
    }
    if (demb) {
      Eigen::Map<const MatrixR<Scalar>> W(weight.data.data(), classes(), dim());
      demb->noalias() = dlogits * W;
    }
    return g;
  }

  friend bool operator==(const Dense&, const Dense&) = default;
};

}  // namespace motormeta::net
