// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsor/hash.hpp"
#include "qsor/tensor.hpp"

namespace qsor::nn {

/// Named parameters and buffers in creation order.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value, bool trainable = true) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    }
    params_.push_back({std::move(name), std::move(value), {}, trainable});
    return params_.size() - 1;
  }

  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  std::size_t size() const { return params_.size(); }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  Parameter* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t trainable_scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (p.trainable) n += p.value.size();
    }
    return n;
  }

 private:
  std::vector<Parameter> params_;
};

/// Fan-in scaled uniform init, U(-sqrt(3/fan_in), sqrt(3/fan_in)).
inline Tensor fan_in_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, std::uint64_t seed) {
  Tensor t(rows, cols);
  const double limit = std::sqrt(3.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = (2.0 * counter_uniform({seed, i}) - 1.0) * limit;
  return t;
}

enum class LayerKind { dense, relu, selu, sigmoid, softmax, batchnorm, dropout, gru_cell };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::selu: return "selu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::dropout: return "dropout";
    case LayerKind::gru_cell: return "gru_cell";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;  ///< equals in_dim for shape-preserving kinds
  double dropout_rate = 0.0;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  double l1 = 0.0;  ///< penalty on dense weights
  double l2 = 0.0;
};

enum class Mode { train, infer };

/// Per-forward settings: mode plus the counters that key dropout masks.
struct RunContext {
  Mode mode = Mode::infer;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  bool freeze_batchnorm = false;  ///< use running statistics even in train mode
};

class Layer {
 public:
  Layer() = default;

  Layer(const LayerSpec& spec, const std::string& name, ParameterStore& store, std::uint64_t seed)
      : spec_(spec), key_(hash_values({seed, std::hash<std::string>{}(name)})) {
    const auto in = spec.in_dim, out = spec.out_dim;
    switch (spec.kind) {
      case LayerKind::dense:
        params_.push_back(store.add(name + ".weight", fan_in_uniform(in, out, in, derive_seed(seed, key_, 0))));
        params_.push_back(store.add(name + ".bias", Tensor(1, out)));
        break;
      case LayerKind::batchnorm:
        if (in != out) throw ShapeError("batchnorm must preserve width");
        params_.push_back(store.add(name + ".gamma", Tensor(1, in, 1.0)));
        params_.push_back(store.add(name + ".beta", Tensor(1, in)));
        params_.push_back(store.add(name + ".running_mean", Tensor(1, in), false));
        params_.push_back(store.add(name + ".running_var", Tensor(1, in, 1.0), false));
        break;
      case LayerKind::gru_cell: {
        // in: input width, out: hidden width
        const char* gates[] = {"z", "r", "n"};
        for (std::size_t g = 0; g < 3; ++g) {
          const std::string gate = gates[g];
          params_.push_back(store.add(name + ".w_" + gate, fan_in_uniform(in, out, in, derive_seed(seed, key_, 10 + g))));
          params_.push_back(store.add(name + ".u_" + gate, fan_in_uniform(out, out, out, derive_seed(seed, key_, 20 + g))));
          params_.push_back(store.add(name + ".b_" + gate, Tensor(1, out)));
        }
        break;
      }
      case LayerKind::dropout:
        if (spec.dropout_rate < 0 || spec.dropout_rate >= 1) throw std::invalid_argument("dropout rate must be in [0, 1)");
        [[fallthrough]];
      default:
        if (in != out) throw ShapeError(to_string(spec.kind) + " must preserve width");
    }
  }

  const LayerSpec& spec() const { return spec_; }
  std::span<const std::size_t> parameter_indices() const { return params_; }

  Var forward(Tape& tape, ParameterStore& store, Var x, const RunContext& ctx) const {
    const Tensor& xv = x.value();
    if (xv.cols != spec_.in_dim)
      throw ShapeError(to_string(spec_.kind) + ": expected width " + std::to_string(spec_.in_dim) + ", got " +
                       shape_string(xv));
    switch (spec_.kind) {
      case LayerKind::dense:
        return add_row(matmul(x, tape.parameter(store[params_[0]])), tape.parameter(store[params_[1]]));
      case LayerKind::relu: return relu(x);
      case LayerKind::selu: return selu(x);
      case LayerKind::sigmoid: return sigmoid(x);
      case LayerKind::softmax: return softmax_rows(x);
      case LayerKind::dropout:
        if (ctx.mode == Mode::infer) return x;
        return dropout(x, spec_.dropout_rate, hash_values({ctx.seed, ctx.epoch, ctx.step, key_}));
      case LayerKind::batchnorm: {
        Var gamma = tape.parameter(store[params_[0]]);
        Var beta = tape.parameter(store[params_[1]]);
        auto& running_mean = store[params_[2]].value;
        auto& running_var = store[params_[3]].value;
        if (ctx.mode == Mode::infer || ctx.freeze_batchnorm)
          return batchnorm_fixed(x, gamma, beta, running_mean, running_var, spec_.bn_epsilon);
        std::vector<double> mean, var;
        Var out = batchnorm_train(x, gamma, beta, spec_.bn_epsilon, &mean, &var);
        const double m = spec_.bn_momentum;
        for (std::size_t j = 0; j < mean.size(); ++j) {
          running_mean.data[j] = m * running_mean.data[j] + (1 - m) * mean[j];
          running_var.data[j] = m * running_var.data[j] + (1 - m) * var[j];
        }
        return out;
      }
      case LayerKind::gru_cell: throw std::logic_error("gru_cell needs forward_gru(input, hidden)");
    }
    throw std::logic_error("unhandled layer kind");
  }

  /// GRU update: z = s(xWz + hUz + bz), r = s(xWr + hUr + br),
  /// n = tanh(xWn + r*(hUn) + bn), h' = n + z*(h - n).
  Var forward_gru(Tape& tape, ParameterStore& store, Var input, Var hidden) const {
    if (spec_.kind != LayerKind::gru_cell) throw std::logic_error("forward_gru on a non-GRU layer");
    if (input.value().cols != spec_.in_dim || hidden.value().cols != spec_.out_dim ||
        input.value().rows != hidden.value().rows)
      throw ShapeError("gru_cell: input/hidden shape mismatch");
    auto p = [&](std::size_t i) { return tape.parameter(store[params_[i]]); };
    auto gate_pre = [&](std::size_t g) { return add_row(add(matmul(input, p(3 * g)), matmul(hidden, p(3 * g + 1))), p(3 * g + 2)); };
    Var z = sigmoid(gate_pre(0));
    Var r = sigmoid(gate_pre(1));
    Var n = tanh(add_row(add(matmul(input, p(6)), mul(r, matmul(hidden, p(7)))), p(8)));
    return add(n, mul(z, sub(hidden, n)));
  }

  /// l1 * sum|W| + l2 * sum W^2 over dense weights; nullopt when both are zero.
  std::optional<Var> regularization(Tape& tape, ParameterStore& store) const {
    if (spec_.kind != LayerKind::dense || (spec_.l1 == 0 && spec_.l2 == 0)) return std::nullopt;
    Var w = tape.parameter(store[params_[0]]);
    std::optional<Var> total;
    if (spec_.l1 != 0) total = scale(abs_sum(w), spec_.l1);
    if (spec_.l2 != 0) {
      Var l2 = scale(square_sum(w), spec_.l2);
      total = total ? add(*total, l2) : l2;
    }
    return total;
  }

 private:
  LayerSpec spec_;
  std::uint64_t key_ = 0;
  std::vector<std::size_t> params_;
};

}  // namespace qsor::nn
