#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "motormeta/error.hpp"

namespace motormeta::net {

enum class OptimizerKind { sgd, rmsprop };

inline constexpr double kDefaultClipNorm = 5.62;

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::rmsprop;
  double learning_rate = 1e-3;
  double decay = 0.9;
  double epsilon = 1e-8;
  double clip_norm = kDefaultClipNorm;
  std::vector<std::vector<double>> accumulators;  // shaped on first step

  void validate() const {
    require(clip_norm > 0.0, "optimizer: clip_norm must be positive");
    require(learning_rate >= 0.0, "optimizer: learning rate must be non-negative");
    require(decay >= 0.0 && decay < 1.0, "optimizer: rmsprop decay must lie in [0, 1)");
  }
};

struct StepInfo {
  double grad_norm = 0.0;  // before clipping
  double scale = 1.0;      // factor applied to the gradient
  bool clipped = false;
};

template <typename Scalar>
double global_norm(const std::vector<std::span<const Scalar>>& grads) {
  double acc = 0.0;
  for (auto g : grads)
    for (Scalar v : g) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

/// Global-norm clip to opt.clip_norm, then one SGD or RMSprop update in place.
template <typename Scalar>
StepInfo clip_and_step(OptimizerState& opt, const std::vector<std::span<Scalar>>& params,
                       const std::vector<std::span<const Scalar>>& grads) {
  opt.validate();
  require(params.size() == grads.size(), "clip_and_step: parameter/gradient tensor count mismatch");
  for (std::size_t t = 0; t < params.size(); ++t)
    require(params[t].size() == grads[t].size(), "clip_and_step: tensor " + std::to_string(t) + " shape mismatch");

  StepInfo info;
  info.grad_norm = global_norm(grads);
  if (!std::isfinite(info.grad_norm)) throw RuntimeFailure("clip_and_step: non-finite gradient");
  if (info.grad_norm > opt.clip_norm) {
    info.scale = opt.clip_norm / info.grad_norm;
    info.clipped = true;
  }

  if (opt.kind == OptimizerKind::rmsprop && opt.accumulators.size() != params.size()) {
    opt.accumulators.clear();
    for (auto p : params) opt.accumulators.emplace_back(p.size(), 0.0);
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    auto g = grads[t];
    if (opt.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < p.size(); ++i)
        p[i] = static_cast<Scalar>(p[i] - opt.learning_rate * (info.scale * g[i]));
    } else {
      auto& acc = opt.accumulators[t];
      require(acc.size() == p.size(), "clip_and_step: accumulator shape mismatch");
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = info.scale * g[i];
        acc[i] = opt.decay * acc[i] + (1.0 - opt.decay) * gi * gi;
        p[i] = static_cast<Scalar>(p[i] - opt.learning_rate * gi / std::sqrt(acc[i] + opt.epsilon));
      }
    }
  }
  return info;
}

template <typename Scalar>
std::vector<std::span<const Scalar>> as_const(const std::vector<std::span<Scalar>>& v) {
  return {v.begin(), v.end()};
}

/// Linear learning-rate ramp from `start` at epoch 0 to `end` at `total_epochs`.
struct LrSchedule {
  double start = 1e-6;
  double end = 5e-5;
  int total_epochs = 500;

  void validate() const {
    require(start <= end, "lr schedule: start must not exceed end");
    require(total_epochs >= 1, "lr schedule: total_epochs must be >= 1");
  }
};

inline double lr_at(const LrSchedule& s, double epoch) {
  s.validate();
  if (epoch < 0.0 || epoch > s.total_epochs) {
    std::cerr << "warning: lr_at epoch " << epoch << " outside [0, " << s.total_epochs << "], clamping\n";
    epoch = std::clamp(epoch, 0.0, static_cast<double>(s.total_epochs));
  }
  return s.start + (s.end - s.start) * (epoch / s.total_epochs);
}

}  // namespace motormeta::net
