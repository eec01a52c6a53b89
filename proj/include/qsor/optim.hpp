// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "qsor/layers.hpp"
#include "qsor/tensor.hpp"

namespace qsor::nn {

/// Cosine decay from base_lr to min_lr within each period; the period length
/// is multiplied by `multiplier` after every restart.
struct WarmRestartSchedule {
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  double period = 50;
  double multiplier = 2;

  double lr(std::size_t step) const {
    if (period <= 0 || multiplier < 1) throw std::invalid_argument("schedule needs period > 0 and multiplier >= 1");
    double t = static_cast<double>(step), p = period;
    while (t >= p) {
      t -= p;
      p *= multiplier;
    }
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t / p));
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamHyper hyper;
  WarmRestartSchedule schedule;
  std::size_t step = 0;
  std::vector<Tensor> m;  // indexed like the parameter store
  std::vector<Tensor> v;
};

/// One Adam update with bias correction at learning rate `lr`. Non-trainable
/// entries and entries without a gradient are skipped.
inline void adam_step(ParameterStore& store, OptimizerState& state, double lr) {
  auto& params = store.all();
  if (state.m.size() != params.size()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  }
  ++state.step;
  const auto& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable || p.grad.empty()) continue;
    if (!p.grad.same_shape(p.value)) throw ShapeError("adam: gradient shape differs from parameter " + p.name);
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.empty()) m = Tensor(p.value.rows, p.value.cols);
    if (v.empty()) v = Tensor(p.value.rows, p.value.cols);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad.data[k];
      m.data[k] = h.beta1 * m.data[k] + (1 - h.beta1) * g;
      v.data[k] = h.beta2 * v.data[k] + (1 - h.beta2) * g * g;
      p.value.data[k] -= lr * (m.data[k] / c1) / (std::sqrt(v.data[k] / c2) + h.epsilon);
    }
  }
}

/// Per-label positive weight n / n_pos, clipped to [lo, hi]; labels with no
/// positives get hi. `labels` is n x T with 0/1 entries.
inline Tensor inverse_frequency_weights(const Tensor& labels, double lo = 1.0, double hi = 50.0) {
  Tensor w(1, labels.cols);
  for (std::size_t j = 0; j < labels.cols; ++j) {
    double pos = 0;
    for (std::size_t i = 0; i < labels.rows; ++i) pos += labels(i, j) > 0.5 ? 1 : 0;
    w.data[j] = pos == 0 ? hi : std::clamp(static_cast<double>(labels.rows) / pos, lo, hi);
  }
  return w;
}

}  // namespace qsor::nn
