#pragma once
// Per-task classifiers on frozen embeddings: an L2-regularized linear head fitted by full-batch
// gradient descent, and a cosine-attention classifier over the support set.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "motormeta/error.hpp"
#include "motormeta/net/loss.hpp"
#include "motormeta/net/tensor.hpp"

namespace motormeta {

using MatrixRd = net::MatrixR<double>;

struct LinearHead {
  MatrixRd W;         // n_way x d
  Eigen::VectorXd b;  // n_way
  double lambda = 0.0;

  int n_way() const { return static_cast<int>(W.rows()); }
  int dim() const { return static_cast<int>(W.cols()); }

  static LinearHead zeros(int n_way, int dim, double lambda = 0.0) {
    return LinearHead{MatrixRd::Zero(n_way, dim), Eigen::VectorXd::Zero(n_way), lambda};
  }

  MatrixRd logits(const MatrixRd& features) const {
    require(features.cols() == W.cols(), "linear head: feature dimension " + std::to_string(features.cols()) +
                                             " != head dimension " + std::to_string(W.cols()));
    MatrixRd out = features * W.transpose();
    out.rowwise() += b.transpose();
    return out;
  }
};

struct HeadFitOptions {
  double lambda = 0.01;
  int max_steps = 1000;
  double tolerance = 1e-6;  // stop once the gradient norm drops below this
  double lr = 0.0;          // 0 selects 1/L from a smoothness bound, which makes every step a descent step
};

/// Optional diagnostics of a fit.
struct FitTrace {
  std::vector<double> objective;  // before each step, plus the final value
  MatrixRd grad_w0;               // gradient w.r.t. W at the initial point
  Eigen::VectorXd grad_b0;
  int steps = 0;
};

/// L2-normalizes every row; zero rows are left as they are.
inline MatrixRd l2_normalize_rows(const MatrixRd& x) {
  MatrixRd out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

namespace detail {

struct Objective {
  double value;
  MatrixRd gw;
  Eigen::VectorXd gb;
};

// mean_t CE(W x_t + b, y_t) + lambda (|W|^2 + |b|^2) and its gradient.
inline Objective head_objective(const LinearHead& h, const MatrixRd& x, std::span<const int> y) {
  const auto ce = net::softmax_cross_entropy<double>(h.logits(x), y);
  Objective o;
  o.value = ce.loss + h.lambda * (h.W.squaredNorm() + h.b.squaredNorm());
  o.gw = ce.grad.transpose() * x + 2.0 * h.lambda * h.W;
  o.gb = ce.grad.colwise().sum().transpose() + 2.0 * h.lambda * h.b;
  return o;
}

}  // namespace detail

/// Fits theta = {W, b} on support features, starting from zero.
inline LinearHead fit_linear_head(const MatrixRd& features, std::span<const int> labels, int n_way,
                                  const HeadFitOptions& opt = {}, FitTrace* trace = nullptr) {
  require(opt.lambda >= 0.0, "fit_linear_head: lambda must be non-negative");
  require(features.rows() > 0 && features.rows() == static_cast<Eigen::Index>(labels.size()),
          "fit_linear_head: support set is empty or labels do not match");
  require(n_way >= 1, "fit_linear_head: n_way must be positive");
  require(features.allFinite(), "fit_linear_head: non-finite embeddings");

  LinearHead h = LinearHead::zeros(n_way, static_cast<int>(features.cols()), opt.lambda);
  double lr = opt.lr;
  if (lr <= 0.0) {
    // Softmax CE has curvature <= 1/2 (|x|^2 + 1) per sample.
    double max_sq = 0.0;
    for (Eigen::Index r = 0; r < features.rows(); ++r) max_sq = std::max(max_sq, features.row(r).squaredNorm());
    lr = 1.0 / (0.5 * (max_sq + 1.0) + 2.0 * opt.lambda);
  }

  int step = 0;
  for (;; ++step) {
    const auto o = detail::head_objective(h, features, labels);
    if (trace) {
      if (step == 0) {
        trace->grad_w0 = o.gw;
        trace->grad_b0 = o.gb;
      }
      trace->objective.push_back(o.value);
    }
    const double gnorm = std::sqrt(o.gw.squaredNorm() + o.gb.squaredNorm());
    if (step >= opt.max_steps || gnorm < opt.tolerance) break;
    h.W -= lr * o.gw;
    h.b -= lr * o.gb;
  }
  if (trace) trace->steps = step;
  return h;
}

struct Prediction {
  MatrixRd probs;           // rows sum to 1
  std::vector<int> labels;  // argmax, first index on ties
};

inline Prediction predict_linear(const LinearHead& head, const MatrixRd& features) {
  Prediction p;
  p.probs = net::softmax<double>(head.logits(features));
  for (Eigen::Index r = 0; r < p.probs.rows(); ++r) p.labels.push_back(net::argmax_row(p.probs, r));
  return p;
}

/// One plain SGD step of a dense head on support cross-entropy. Returns the loss before the step.
template <typename Scalar>
double sgd_head_step(net::Dense<Scalar>& head, const net::MatrixR<Scalar>& emb, std::span<const int> labels, double lr) {
  require(emb.rows() > 0, "head adaptation: empty support set");
  const auto ce = net::softmax_cross_entropy<Scalar>(head.logits(emb), labels);
  const auto g = head.backward(emb, ce.grad, nullptr);
  for (std::size_t i = 0; i < head.weight.data.size(); ++i)
    head.weight.data[i] = static_cast<Scalar>(head.weight.data[i] - lr * g.weight.data[i]);
  for (std::size_t i = 0; i < head.bias.data.size(); ++i)
    head.bias.data[i] = static_cast<Scalar>(head.bias.data[i] - lr * g.bias.data[i]);
  return ce.loss;
}

template <typename Scalar>
Prediction predict_dense(const net::Dense<Scalar>& head, const net::MatrixR<Scalar>& features) {
  Prediction p;
  p.probs = net::softmax<Scalar>(head.logits(features)).template cast<double>();
  for (Eigen::Index r = 0; r < p.probs.rows(); ++r) p.labels.push_back(net::argmax_row(p.probs, r));
  return p;
}

// ---------------------------------------------------------------------------

struct MetricConfig {
  double temperature = 10.0;

  void validate() const { require(temperature > 0.0, "metric classifier: temperature must be positive"); }
};

/// P(y | query, S) = sum_k a(query, x_k) onehot(y_k) with a = softmax_k(cos(query, x_k) / temperature).
inline Prediction predict_metric(const MatrixRd& query, const MatrixRd& support, std::span<const int> support_labels,
                                 int n_way, const MetricConfig& mc = {}) {
  mc.validate();
  require(support.rows() > 0 && support.rows() == static_cast<Eigen::Index>(support_labels.size()),
          "predict_metric: support set is empty or labels do not match");
  require(query.cols() == support.cols(), "predict_metric: dimension mismatch");
  auto unit = [](const MatrixRd& m) {
    MatrixRd u = m;
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
      const double n = u.row(r).norm();
      require(n > 0.0, "predict_metric: zero-norm embedding");
      u.row(r) /= n;
    }
    return u;
  };
  const MatrixRd qs = unit(query);
  const MatrixRd ss = unit(support);
  const MatrixRd cos = qs * ss.transpose();

  Prediction p;
  p.probs = MatrixRd::Zero(query.rows(), n_way);
  for (Eigen::Index r = 0; r < cos.rows(); ++r) {
    const auto logw = net::log_softmax_row((cos.row(r) / mc.temperature).eval());
    for (Eigen::Index k = 0; k < cos.cols(); ++k) {
      const int y = support_labels[static_cast<std::size_t>(k)];
      require(y >= 0 && y < n_way, "predict_metric: support label out of range");
      p.probs(r, y) += std::exp(logw[static_cast<std::size_t>(k)]);
    }
    p.labels.push_back(net::argmax_row(p.probs, r));
  }
  return p;
}

}  // namespace motormeta
