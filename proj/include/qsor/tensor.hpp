// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense row-major f64 matrices with a reverse-mode tape. Everything is 2-D;
// vectors are 1 x n rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qsor/hash.hpp"

namespace qsor::nn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("tensor data length does not match shape");
  }

  static Tensor row(std::span<const double> v) { return {1, v.size(), std::vector<double>(v.begin(), v.end())}; }

  std::vector<std::size_t> shape() const { return {rows, cols}; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row_span(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row_span(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const {
    // x * 0 is 0 for finite x and NaN otherwise; a plain sum vectorizes.
    double probe[4] = {0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 4 <= data.size(); i += 4)
      for (std::size_t l = 0; l < 4; ++l) probe[l] += data[i + l] * 0.0;
    for (; i < data.size(); ++i) probe[0] += data[i] * 0.0;
    return probe[0] + probe[1] + probe[2] + probe[3] == 0.0;
  }
  bool operator==(const Tensor&) const = default;
};

inline std::string shape_string(const Tensor& t) {
  return "(" + std::to_string(t.rows) + "x" + std::to_string(t.cols) + ")";
}

/// Trainable weight (or non-trainable buffer such as batchnorm running stats).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor(value.rows, value.cols); }
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  const Tensor& value() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf bound to a parameter; repeated calls return the same node.
  /// The value is read in place, so the parameter must not change while the
  /// tape is in use.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    nodes_.push_back({{}, {}, p.trainable, &p, {}});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  /// Records an op result; `backward` receives the output gradient and calls
  /// accumulate() for each differentiable input.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    if (check_finite_ && !value.all_finite()) throw NonFiniteError("non-finite value produced on tape");
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : BackwardFn{});
  }
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    if (check_finite_ && !value.all_finite()) throw NonFiniteError("non-finite value produced on tape");
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id()).get(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient buffer of a node, allocated on first use; nullptr when the node
  /// does not need a gradient.
  Tensor* grad_buffer(Var v) {
    auto& node = nodes_.at(v.id());
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty() && !node.get().empty()) node.grad = Tensor(node.get().rows, node.get().cols);
    return &node.grad;
  }

  /// Reverse sweep from a scalar; parameter gradients are added to Parameter::grad.
  void backward(Var loss) {
    const auto& lv = value(loss);
    if (lv.rows != 1 || lv.cols != 1) throw ShapeError("backward needs a scalar loss, got " + shape_string(lv));
    if (check_finite_ && !lv.all_finite()) throw NonFiniteError("loss is not finite");
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Tensor(1, 1, 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty()) continue;
      if (node.backward) node.backward(*this, node.grad);
      if (node.param) {
        auto& pg = node.param->grad;
        if (pg.empty()) pg = Tensor(node.get().rows, node.get().cols);
        for (std::size_t k = 0; k < pg.size(); ++k) pg.data[k] += node.grad.data[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;

    const Tensor& get() const { return param ? param->value : value; }
  };

  Var push(Tensor value, bool requires_grad, Parameter* param, BackwardFn backward) {
    nodes_.push_back({std::move(value), {}, requires_grad, param, std::move(backward)});
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references across pushes
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool check_finite_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Ops

namespace detail {

inline void accumulate(Tape& tape, Var v, const Tensor& g) {
  if (Tensor* buf = tape.grad_buffer(v)) {
    for (std::size_t i = 0; i < g.size(); ++i) buf->data[i] += g.data[i];
  }
}

template <class F>
inline void accumulate_with(Tape& tape, Var v, F&& f) {
  if (Tensor* buf = tape.grad_buffer(v)) f(*buf);
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

// Sum of f(x) over four interleaved partial sums.
template <class F>
double lane_sum(const std::vector<double>& x, F f) {
  double acc[4] = {0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 4 <= x.size(); i += 4)
    for (std::size_t l = 0; l < 4; ++l) acc[l] += f(x[i + l]);
  for (; i < x.size(); ++i) acc[0] += f(x[i]);
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

// C += A * B  (A: n x k, B: k x m)
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* crow = c.data.data() + i * c.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.data[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C += A * B^T  (A: n x m, B: k x m) -> n x k
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    for (std::size_t k = 0; k < b.rows; ++k) {
      const double* brow = b.data.data() + k * b.cols;
      double s = 0;
      for (std::size_t j = 0; j < a.cols; ++j) s += arow[j] * brow[j];
      c.data[i * c.cols + k] += s;
    }
  }
}

// C += A^T * B  (A: n x k, B: n x m) -> k x m
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* brow = b.data.data() + i * b.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.data[i * a.cols + k];
      if (aik == 0.0) continue;
      double* crow = c.data.data() + k * c.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

template <class F, class DF>
Var unary(Var x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = f(xv.data[i]);
  return x.tape()->record(std::move(out), {x}, [x, df](Tape& t, const Tensor& g) {
    accumulate_with(t, x, [&](Tensor& buf) {
      const Tensor& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i] * df(xv.data[i]);
    });
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols != bv.rows) throw ShapeError("matmul: " + shape_string(av) + " x " + shape_string(bv));
  Tensor out(av.rows, bv.cols);
  detail::gemm_nn(av, bv, out);
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, a, [&](Tensor& buf) { detail::gemm_nt(g, b.value(), buf); });
    detail::accumulate_with(t, b, [&](Tensor& buf) { detail::gemm_tn(a.value(), g, buf); });
  });
}

inline Var add(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate(t, a, g);
    detail::accumulate_with(t, b, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] -= g.data[i];
    });
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, a, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i] * b.value().data[i];
    });
    detail::accumulate_with(t, b, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i] * a.value().data[i];
    });
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

/// Adds a 1 x m row to every row of an n x m matrix.
inline Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows != 1 || rv.cols != av.cols) throw ShapeError("add_row: " + shape_string(av) + " + " + shape_string(rv));
  Tensor out = av;
  for (std::size_t i = 0; i < av.rows; ++i)
    for (std::size_t j = 0; j < av.cols; ++j) out(i, j) += rv.data[j];
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Tensor& g) {
    detail::accumulate(t, a, g);
    detail::accumulate_with(t, row, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) buf.data[j] += g(i, j);
    });
  });
}

inline Var relu(Var x) {
  return detail::unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kSeluScale = 1.0507009873554804934193349852946;

inline Var selu(Var x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? kSeluScale * v : kSeluScale * kSeluAlpha * std::expm1(v); },
      [](double v) { return v > 0 ? kSeluScale : kSeluScale * kSeluAlpha * std::exp(v); });
}

inline double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  return detail::unary(x, stable_sigmoid, [](double v) {
    const double s = stable_sigmoid(v);
    return s * (1 - s);
  });
}

inline Var tanh(Var x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double v) {
    const double th = std::tanh(v);
    return 1 - th * th;
  });
}

/// Row-wise softmax.
inline Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.rows; ++i) {
    auto in = xv.row_span(i);
    auto o = out.row_span(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0;
    for (std::size_t j = 0; j < in.size(); ++j) z += (o[j] = std::exp(in[j] - mx));
    for (auto& v : o) v /= z;
  }
  Tensor saved = out;
  return x.tape()->record(std::move(out), {x}, [x, saved = std::move(saved)](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.rows; ++i) {
        auto s = saved.row_span(i);
        auto gi = g.row_span(i);
        double dot = 0;
        for (std::size_t j = 0; j < s.size(); ++j) dot += s[j] * gi[j];
        for (std::size_t j = 0; j < s.size(); ++j) buf(i, j) += s[j] * (gi[j] - dot);
      }
    });
  });
}

inline Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows != bv.rows) throw ShapeError("concat_cols: row mismatch");
  Tensor out(av.rows, av.cols + bv.cols);
  for (std::size_t i = 0; i < av.rows; ++i) {
    std::copy(av.row_span(i).begin(), av.row_span(i).end(), out.row_span(i).begin());
    std::copy(bv.row_span(i).begin(), bv.row_span(i).end(), out.row_span(i).begin() + static_cast<std::ptrdiff_t>(av.cols));
  }
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const std::size_t ac = a.value().cols;
    detail::accumulate_with(t, a, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < ac; ++j) buf(i, j) += g(i, j);
    });
    detail::accumulate_with(t, b, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < buf.cols; ++j) buf(i, j) += g(i, ac + j);
    });
  });
}

/// Column sums: n x m -> 1 x m.
inline Var sum_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out(1, xv.cols);
  for (std::size_t i = 0; i < xv.rows; ++i)
    for (std::size_t j = 0; j < xv.cols; ++j) out.data[j] += xv(i, j);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      for (std::size_t i = 0; i < buf.rows; ++i)
        for (std::size_t j = 0; j < buf.cols; ++j) buf(i, j) += g.data[j];
    });
  });
}

inline Var sum_all(Var x) {
  const Tensor& xv = x.value();
  double s = 0;
  for (double v : xv.data) s += v;
  return x.tape()->record(Tensor(1, 1, s), {x}, [x](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      for (auto& v : buf.data) v += g.data[0];
    });
  });
}

inline Var abs_sum(Var x) {
  const Tensor& xv = x.value();
  double s = detail::lane_sum(xv.data, [](double v) { return std::abs(v); });
  return x.tape()->record(Tensor(1, 1, s), {x}, [x](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      const Tensor& xv = x.value();
      for (std::size_t i = 0; i < buf.size(); ++i)
        buf.data[i] += g.data[0] * (xv.data[i] > 0 ? 1.0 : (xv.data[i] < 0 ? -1.0 : 0.0));
    });
  });
}

inline Var square_sum(Var x) {
  const Tensor& xv = x.value();
  double s = detail::lane_sum(xv.data, [](double v) { return v * v; });
  return x.tape()->record(Tensor(1, 1, s), {x}, [x](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      const Tensor& xv = x.value();
      for (std::size_t i = 0; i < buf.size(); ++i) buf.data[i] += 2.0 * g.data[0] * xv.data[i];
    });
  });
}

/// Stacks 1 x m rows into a k x m matrix.
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t m = rows.front().value().cols;
  Tensor out(rows.size(), m);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Tensor& r = rows[i].value();
    if (r.rows != 1 || r.cols != m) throw ShapeError("stack_rows: every input must be 1 x " + std::to_string(m));
    std::copy(r.data.begin(), r.data.end(), out.row_span(i).begin());
  }
  std::vector<Var> inputs(rows.begin(), rows.end());
  return rows.front().tape()->record(std::move(out), std::span<const Var>(inputs), [inputs](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      detail::accumulate_with(t, inputs[i], [&](Tensor& buf) {
        for (std::size_t j = 0; j < buf.cols; ++j) buf.data[j] += g(i, j);
      });
    }
  });
}

/// For each row v: elementwise max over rows listed in neighbors[v]; zero row
/// when the list is empty. Gradient flows to the first maximizing neighbor.
inline Var neighbor_max(Var h, std::vector<std::vector<std::size_t>> neighbors) {
  const Tensor& hv = h.value();
  if (neighbors.size() != hv.rows) throw ShapeError("neighbor_max: adjacency size mismatch");
  Tensor out(hv.rows, hv.cols);
  std::vector<std::size_t> argmax(hv.rows * hv.cols, SIZE_MAX);
  for (std::size_t v = 0; v < hv.rows; ++v) {
    if (neighbors[v].empty()) continue;
    for (std::size_t j = 0; j < hv.cols; ++j) {
      std::size_t best = neighbors[v].front();
      for (auto u : neighbors[v]) {
        if (hv(u, j) > hv(best, j)) best = u;
      }
      out(v, j) = hv(best, j);
      argmax[v * hv.cols + j] = best;
    }
  }
  return h.tape()->record(std::move(out), {h}, [h, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, h, [&](Tensor& buf) {
      for (std::size_t v = 0; v < g.rows; ++v)
        for (std::size_t j = 0; j < g.cols; ++j) {
          auto u = argmax[v * g.cols + j];
          if (u != SIZE_MAX) buf(u, j) += g(v, j);
        }
    });
  });
}

/// Edge-conditioned messages: m_v = sum over bonds (u,v) of A_e h_u, where row
/// e of `edge_matrices` holds A_e (d x d, row-major) for bond e.
inline Var edge_messages(Var h, Var edge_matrices, std::vector<std::pair<std::size_t, std::size_t>> bonds) {
  const Tensor& hv = h.value();
  const Tensor& av = edge_matrices.value();
  const std::size_t d = hv.cols;
  if (av.rows != bonds.size() || av.cols != d * d)
    throw ShapeError("edge_messages: edge matrices must be n_bonds x d*d, got " + shape_string(av));
  Tensor out(hv.rows, d);
  auto apply = [&](std::size_t e, std::size_t from, std::size_t to) {
    const double* a = av.data.data() + e * d * d;
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += a[i * d + j] * hv(from, j);
      out(to, i) += s;
    }
  };
  for (std::size_t e = 0; e < bonds.size(); ++e) {
    apply(e, bonds[e].first, bonds[e].second);
    apply(e, bonds[e].second, bonds[e].first);
  }
  return h.tape()->record(std::move(out), {h, edge_matrices},
                          [h, edge_matrices, bonds = std::move(bonds)](Tape& t, const Tensor& g) {
    const Tensor& hv = h.value();
    const Tensor& av = edge_matrices.value();
    const std::size_t d = hv.cols;
    detail::accumulate_with(t, h, [&](Tensor& buf) {
      auto back = [&](std::size_t e, std::size_t from, std::size_t to) {
        const double* a = av.data.data() + e * d * d;
        for (std::size_t i = 0; i < d; ++i) {
          const double gi = g(to, i);
          if (gi == 0.0) continue;
          for (std::size_t j = 0; j < d; ++j) buf(from, j) += a[i * d + j] * gi;
        }
      };
      for (std::size_t e = 0; e < bonds.size(); ++e) {
        back(e, bonds[e].first, bonds[e].second);
        back(e, bonds[e].second, bonds[e].first);
      }
    });
    detail::accumulate_with(t, edge_matrices, [&](Tensor& buf) {
      auto back = [&](std::size_t e, std::size_t from, std::size_t to) {
        double* a = buf.data.data() + e * d * d;
        for (std::size_t i = 0; i < d; ++i) {
          const double gi = g(to, i);
          for (std::size_t j = 0; j < d; ++j) a[i * d + j] += gi * hv(from, j);
        }
      };
      for (std::size_t e = 0; e < bonds.size(); ++e) {
        back(e, bonds[e].first, bonds[e].second);
        back(e, bonds[e].second, bonds[e].first);
      }
    });
  });
}

/// Batch normalization with batch statistics (biased variance). Returns the
/// output; `batch_mean`/`batch_var` receive the statistics used.
inline Var batchnorm_train(Var x, Var gamma, Var beta, double eps, std::vector<double>* batch_mean = nullptr,
                           std::vector<double>* batch_var = nullptr) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows, m = xv.cols;
  if (gamma.value().cols != m || beta.value().cols != m) throw ShapeError("batchnorm: parameter width mismatch");
  std::vector<double> mean(m, 0.0), var(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) mean[j] += xv(i, j);
  for (auto& v : mean) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) var[j] += (xv(i, j) - mean[j]) * (xv(i, j) - mean[j]);
  for (auto& v : var) v /= static_cast<double>(n);
  std::vector<double> inv_std(m);
  for (std::size_t j = 0; j < m; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  Tensor xhat(n, m), out(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      xhat(i, j) = (xv(i, j) - mean[j]) * inv_std[j];
      out(i, j) = gamma.value().data[j] * xhat(i, j) + beta.value().data[j];
    }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  return x.tape()->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
    const std::size_t n = g.rows, m = g.cols;
    detail::accumulate_with(t, gamma, [&](Tensor& buf) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) buf.data[j] += g(i, j) * xhat(i, j);
    });
    detail::accumulate_with(t, beta, [&](Tensor& buf) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) buf.data[j] += g(i, j);
    });
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      const Tensor& gv = gamma.value();
      for (std::size_t j = 0; j < m; ++j) {
        double sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < n; ++i) {
          sum_g += g(i, j);
          sum_gx += g(i, j) * xhat(i, j);
        }
        const double k = gv.data[j] * inv_std[j] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          buf(i, j) += k * (static_cast<double>(n) * g(i, j) - sum_g - xhat(i, j) * sum_gx);
      }
    });
  });
}

/// Batch normalization with fixed statistics.
inline Var batchnorm_fixed(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double eps) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.cols;
  if (mean.cols != m || var.cols != m) throw ShapeError("batchnorm: statistics width mismatch");
  std::vector<double> inv_std(m);
  for (std::size_t j = 0; j < m; ++j) inv_std[j] = 1.0 / std::sqrt(var.data[j] + eps);
  Tensor xhat(xv.rows, m), out(xv.rows, m);
  for (std::size_t i = 0; i < xv.rows; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      xhat(i, j) = (xv(i, j) - mean.data[j]) * inv_std[j];
      out(i, j) = gamma.value().data[j] * xhat(i, j) + beta.value().data[j];
    }
  return x.tape()->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, gamma, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) buf.data[j] += g(i, j) * xhat(i, j);
    });
    detail::accumulate_with(t, beta, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) buf.data[j] += g(i, j);
    });
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      const Tensor& gv = gamma.value();
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) buf(i, j) += g(i, j) * gv.data[j] * inv_std[j];
    });
  });
}

/// Inverted dropout with a counter-based mask keyed by `key`.
inline Var dropout(Var x, double rate, std::uint64_t key) {
  if (rate < 0 || rate >= 1) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (rate == 0) return x;
  const Tensor& xv = x.value();
  Tensor mask(xv.rows, xv.cols);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.data[i] = counter_uniform({key, i}) < rate ? 0.0 : keep_scale;
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask.data[i];
  return x.tape()->record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, x, [&](Tensor& buf) {
      for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i] * mask.data[i];
    });
  });
}

/// Mean over all entries of w*t*softplus(-z) + (1-t)*softplus(z), the stable
/// form of -[w t log s(z) + (1-t) log(1-s(z))]. `pos_weights` is 1 x n_tasks.
inline Var weighted_bce(Var logits, const Tensor& targets, const Tensor& pos_weights) {
  const Tensor& z = logits.value();
  detail::require_same(z, targets, "weighted_bce");
  if (pos_weights.rows != 1 || pos_weights.cols != z.cols) throw ShapeError("weighted_bce: weights must be 1 x n_tasks");
  auto softplus = [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); };
  double total = 0;
  for (std::size_t i = 0; i < z.rows; ++i)
    for (std::size_t j = 0; j < z.cols; ++j) {
      const double t = targets(i, j), w = pos_weights.data[j], v = z(i, j);
      total += w * t * softplus(-v) + (1 - t) * softplus(v);
    }
  const double count = static_cast<double>(z.size());
  return logits.tape()->record(Tensor(1, 1, total / count), {logits},
                               [logits, targets, pos_weights, count](Tape& t, const Tensor& g) {
    detail::accumulate_with(t, logits, [&](Tensor& buf) {
      const Tensor& z = logits.value();
      for (std::size_t i = 0; i < z.rows; ++i)
        for (std::size_t j = 0; j < z.cols; ++j) {
          const double tt = targets(i, j), w = pos_weights.data[j], v = z(i, j);
          const double d = -w * tt * stable_sigmoid(-v) + (1 - tt) * stable_sigmoid(v);
          buf(i, j) += g.data[0] * d / count;
        }
    });
  });
}

}  // namespace qsor::nn
