// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "qsor/optim.hpp"

using namespace qsor;
using namespace qsor::nn;
using test_data::all_coordinates;
using test_data::check_gradients;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Projects an output onto fixed random weights so every entry gets a distinct gradient.
Var project(Tape& tape, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum_all(mul(out, tape.constant(random_tensor(out.value().rows, out.value().cols, rng))));
}

constexpr double kLayerTol = 1e-5;

}  // namespace

TEST(Tensor, ShapeChecks) {
  Tape tape;
  auto a = tape.constant(Tensor(2, 3));
  auto b = tape.constant(Tensor(2, 2));
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(tape.backward(a), ShapeError);
}

TEST(Tensor, NonFiniteValuesRejected) {
  Tape tape;
  auto a = tape.constant(Tensor(1, 1, 1e308));
  EXPECT_THROW(scale(a, 10.0), NonFiniteError);
}

TEST(Backward, LinearCase) {
  // L = sum(x W): dL/dW[k][j] = sum_i x[i][k]
  ParameterStore store;
  auto w = store.add("w", Tensor(3, 2, std::vector<double>{1, 2, 3, 4, 5, 6}));
  Tensor x(2, 3, std::vector<double>{1, 2, 3, -1, 0, 4});
  store.zero_grad();
  Tape tape;
  tape.backward(sum_all(matmul(tape.constant(x), tape.parameter(store[w]))));
  const auto& g = store[w].grad;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(g(k, j), x(0, k) + x(1, k));
}

TEST(Backward, ConstantLossGivesZeroGradient) {
  ParameterStore store;
  auto w = store.add("w", Tensor(2, 2, 1.0));
  store.zero_grad();
  Tape tape;
  tape.parameter(store[w]);
  tape.backward(sum_all(tape.constant(Tensor(2, 2, 3.0))));
  for (double v : store[w].grad.data) EXPECT_EQ(v, 0.0);
}

TEST(Backward, ParameterUsedTwiceAccumulates) {
  ParameterStore store;
  auto w = store.add("w", Tensor(1, 1, 3.0));
  store.zero_grad();
  Tape tape;
  auto v = tape.parameter(store[w]);
  tape.backward(sum_all(mul(v, v)));
  EXPECT_DOUBLE_EQ(store[w].grad.data[0], 6.0);
}

TEST(GradCheck, ElementwiseOps) {
  std::mt19937_64 rng(1);
  ParameterStore store;
  auto a = store.add("a", random_tensor(3, 4, rng));
  auto b = store.add("b", random_tensor(3, 4, rng));
  auto r = store.add("r", random_tensor(1, 4, rng));
  using Fn = std::function<Var(Var, Var, Var)>;
  std::vector<std::pair<const char*, Fn>> ops = {
      {"add", [](Var x, Var y, Var) { return add(x, y); }},
      {"sub", [](Var x, Var y, Var) { return sub(x, y); }},
      {"mul", [](Var x, Var y, Var) { return mul(x, y); }},
      {"scale", [](Var x, Var, Var) { return scale(x, -2.5); }},
      {"add_row", [](Var x, Var, Var z) { return add_row(x, z); }},
      {"relu", [](Var x, Var, Var) { return relu(x); }},
      {"selu", [](Var x, Var, Var) { return selu(x); }},
      {"sigmoid", [](Var x, Var, Var) { return sigmoid(x); }},
      {"tanh", [](Var x, Var, Var) { return tanh(x); }},
      {"softmax", [](Var x, Var, Var) { return softmax_rows(x); }},
      {"concat", [](Var x, Var y, Var) { return concat_cols(x, y); }},
      {"sum_rows", [](Var x, Var, Var) { return sum_rows(x); }},
      {"abs_sum", [](Var x, Var, Var) { return abs_sum(x); }},
      {"square_sum", [](Var x, Var, Var) { return square_sum(x); }},
  };
  for (const auto& [name, op] : ops) {
    auto res = check_gradients(
        store, [&](Tape& t) { return project(t, op(t.parameter(store[a]), t.parameter(store[b]), t.parameter(store[r])), 9); },
        all_coordinates(store));
    EXPECT_LE(res.rel_error, kLayerTol) << name;
  }
}

TEST(GradCheck, MatmulAndStack) {
  std::mt19937_64 rng(2);
  ParameterStore store;
  auto a = store.add("a", random_tensor(3, 4, rng));
  auto b = store.add("b", random_tensor(4, 2, rng));
  auto res = check_gradients(
      store, [&](Tape& t) { return project(t, matmul(t.parameter(store[a]), t.parameter(store[b])), 3); },
      all_coordinates(store));
  EXPECT_LE(res.rel_error, kLayerTol);

  ParameterStore rows;
  std::vector<std::size_t> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(rows.add("r" + std::to_string(i), random_tensor(1, 5, rng)));
  res = check_gradients(
      rows,
      [&](Tape& t) {
        std::vector<Var> vs;
        for (auto id : ids) vs.push_back(t.parameter(rows[id]));
        return project(t, stack_rows(vs), 4);
      },
      all_coordinates(rows));
  EXPECT_LE(res.rel_error, kLayerTol);
}

TEST(GradCheck, GraphOps) {
  std::mt19937_64 rng(3);
  ParameterStore store;
  auto h = store.add("h", random_tensor(4, 3, rng));
  auto edges = store.add("a", random_tensor(3, 9, rng));
  std::vector<std::vector<std::size_t>> nbrs = {{1}, {0, 2, 3}, {1}, {1}, };
  auto res = check_gradients(
      store, [&](Tape& t) { return project(t, neighbor_max(t.parameter(store[h]), nbrs), 5); }, all_coordinates(store));
  EXPECT_LE(res.rel_error, kLayerTol);
  std::vector<std::pair<std::size_t, std::size_t>> bonds = {{0, 1}, {1, 2}, {1, 3}};
  res = check_gradients(
      store,
      [&](Tape& t) { return project(t, edge_messages(t.parameter(store[h]), t.parameter(store[edges]), bonds), 6); },
      all_coordinates(store));
  EXPECT_LE(res.rel_error, kLayerTol);
}

TEST(NeighborMax, IsolatedAtomGetsZeroAggregate) {
  Tape tape;
  auto h = tape.constant(Tensor(2, 2, std::vector<double>{1, -2, 3, 4}));
  auto m = neighbor_max(h, {{}, {0}});
  EXPECT_EQ(m.value()(0, 0), 0.0);
  EXPECT_EQ(m.value()(0, 1), 0.0);
  EXPECT_EQ(m.value()(1, 0), 1.0);
  EXPECT_EQ(m.value()(1, 1), -2.0);
}

TEST(GradCheck, EveryLayerKind) {
  std::mt19937_64 rng(4);
  for (auto kind : {LayerKind::dense, LayerKind::relu, LayerKind::selu, LayerKind::sigmoid, LayerKind::softmax,
                    LayerKind::batchnorm, LayerKind::dropout}) {
    for (auto mode : {Mode::train, Mode::infer}) {
      ParameterStore store;
      LayerSpec spec{kind, 4, kind == LayerKind::dense ? 3u : 4u, 0.3, 0.9, 1e-5, 0.01, 0.02};
      Layer layer(spec, "layer", store, 11);
      auto x = store.add("x", random_tensor(5, 4, rng));
      if (kind == LayerKind::batchnorm) {
        // non-trivial running statistics and affine params for the infer path
        store[0].value = random_tensor(1, 4, rng, 0.5, 1.5);
        store[1].value = random_tensor(1, 4, rng);
        store[2].value = random_tensor(1, 4, rng);
        store[3].value = random_tensor(1, 4, rng, 0.5, 2.0);
      }
      RunContext ctx{mode, 7, 1, 2, false};
      auto res = check_gradients(
          store,
          [&](Tape& t) {
            Var out = layer.forward(t, store, t.parameter(store[x]), ctx);
            Var loss = project(t, out, 8);
            if (auto reg = layer.regularization(t, store)) loss = add(loss, *reg);
            return loss;
          },
          all_coordinates(store));
      EXPECT_LE(res.rel_error, kLayerTol) << to_string(kind) << (mode == Mode::train ? " train" : " infer");
    }
  }
}

TEST(GradCheck, GruCell) {
  std::mt19937_64 rng(5);
  ParameterStore store;
  Layer gru({LayerKind::gru_cell, 3, 4}, "gru", store, 3);
  for (auto& p : store.all()) p.value = random_tensor(p.value.rows, p.value.cols, rng);
  auto x = store.add("x", random_tensor(2, 3, rng));
  auto h = store.add("h", random_tensor(2, 4, rng));
  auto res = check_gradients(
      store,
      [&](Tape& t) { return project(t, gru.forward_gru(t, store, t.parameter(store[x]), t.parameter(store[h])), 2); },
      all_coordinates(store));
  EXPECT_LE(res.rel_error, kLayerTol);
}

TEST(GruCell, MatchesHandComputation) {
  ParameterStore store;
  Layer gru({LayerKind::gru_cell, 1, 1}, "gru", store, 3);
  // order: w_z u_z b_z w_r u_r b_r w_n u_n b_n
  const double vals[] = {0.5, -0.3, 0.1, 0.2, 0.7, -0.1, 1.2, 0.4, 0.05};
  for (std::size_t i = 0; i < 9; ++i) store[i].value = Tensor(1, 1, vals[i]);
  Tape tape;
  const double x = 0.8, h = -0.6;
  auto out = gru.forward_gru(tape, store, tape.constant(Tensor(1, 1, x)), tape.constant(Tensor(1, 1, h)));
  auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  const double z = sig(0.5 * x - 0.3 * h + 0.1);
  const double r = sig(0.2 * x + 0.7 * h - 0.1);
  const double n = std::tanh(1.2 * x + r * (0.4 * h) + 0.05);
  EXPECT_NEAR(out.value().data[0], (1 - z) * n + z * h, 1e-15);
}

TEST(Layers, SpecExamples) {
  ParameterStore store;
  Layer dense({LayerKind::dense, 3, 3}, "d", store, 1);
  store[0].value = Tensor(3, 3, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x(2, 3, std::vector<double>{1, -2, 3, 0.5, 0, -7});
  Tape tape;
  EXPECT_EQ(dense.forward(tape, store, tape.constant(x), {}).value(), x);

  Layer r({LayerKind::relu, 3, 3}, "r", store, 1);
  Tensor neg(2, 3, -1.5);
  for (double v : r.forward(tape, store, tape.constant(neg), {}).value().data) EXPECT_EQ(v, 0.0);

  Layer drop({LayerKind::dropout, 3, 3, 0.0}, "drop", store, 1);
  for (auto mode : {Mode::train, Mode::infer})
    EXPECT_EQ(drop.forward(tape, store, tape.constant(x), {mode, 1, 2, 3}).value(), x);

  EXPECT_THROW(dense.forward(tape, store, tape.constant(Tensor(2, 4)), {}), ShapeError);
}

TEST(Layers, DropoutScalesAndIsDeterministic) {
  ParameterStore store;
  Layer drop({LayerKind::dropout, 200, 200, 0.25}, "drop", store, 1);
  Tensor x(5, 200, 1.0);
  Tape tape;
  RunContext ctx{Mode::train, 3, 0, 0};
  auto a = drop.forward(tape, store, tape.constant(x), ctx).value();
  auto b = drop.forward(tape, store, tape.constant(x), ctx).value();
  EXPECT_EQ(a, b);
  std::size_t zeros = 0;
  for (double v : a.data) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    zeros += v == 0.0;
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 1000.0, 0.25, 0.05);
  ctx.epoch = 1;
  EXPECT_NE(drop.forward(tape, store, tape.constant(x), ctx).value(), a);
  EXPECT_EQ(drop.forward(tape, store, tape.constant(x), {Mode::infer}).value(), x);
}

TEST(Layers, BatchnormTrainNormalizes) {
  std::mt19937_64 rng(6);
  ParameterStore store;
  Layer bn({LayerKind::batchnorm, 4, 4}, "bn", store, 1);
  Tensor x = random_tensor(50, 4, rng, -3, 10);
  Tape tape;
  auto out = bn.forward(tape, store, tape.constant(x), {Mode::train}).value();
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 50; ++i) mean += out(i, j) / 50;
    for (std::size_t i = 0; i < 50; ++i) var += (out(i, j) - mean) * (out(i, j) - mean) / 50;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
  // running statistics moved toward the batch statistics
  EXPECT_NE(store[2].value, Tensor(1, 4));
}

TEST(Regularization, MatchesDirectSum) {
  ParameterStore store;
  Layer dense({LayerKind::dense, 2, 2, 0, 0.9, 1e-5, 0.3, 0.05}, "d", store, 1);
  store[0].value = Tensor(2, 2, std::vector<double>{1, -2, 0.5, 0});
  Tape tape;
  auto reg = dense.regularization(tape, store);
  ASSERT_TRUE(reg.has_value());
  EXPECT_NEAR(reg->value().data[0], 0.3 * 3.5 + 0.05 * 5.25, 1e-15);
  Layer plain({LayerKind::dense, 2, 2}, "p", store, 1);
  EXPECT_FALSE(plain.regularization(tape, store).has_value());
}

TEST(WeightedBce, Examples) {
  Tape tape;
  auto loss = [&](double z, double t, double w) {
    return weighted_bce(tape.constant(Tensor(1, 1, z)), Tensor(1, 1, t), Tensor(1, 1, w)).value().data[0];
  };
  EXPECT_NEAR(loss(0, 1, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(loss(0, 0, 1), std::log(2.0), 1e-15);
  EXPECT_LT(loss(800, 1, 1), 1e-300);
  EXPECT_NEAR(loss(-800, 1, 1), 800, 1e-9);  // stable for extreme logits
  EXPECT_NEAR(loss(0.3, 1, 2), 2 * loss(0.3, 1, 1), 1e-15);

  std::mt19937_64 rng(7);
  ParameterStore store;
  auto z = store.add("z", random_tensor(3, 4, rng, -3, 3));
  Tensor t(3, 4, std::vector<double>{1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1});
  Tensor w(1, 4, std::vector<double>{1, 2.5, 4, 1.5});
  auto res = check_gradients(store, [&](Tape& tp) { return weighted_bce(tp.parameter(store[z]), t, w); },
                             all_coordinates(store));
  EXPECT_LE(res.rel_error, kLayerTol);
}

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
  ParameterStore store;
  store.add("w", Tensor(2, 2, 0.7));
  store.zero_grad();
  OptimizerState st;
  adam_step(store, st, 1e-2);
  EXPECT_EQ(store[0].value, Tensor(2, 2, 0.7));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepWithUnitGradient) {
  ParameterStore store;
  store.add("a", Tensor(1, 3, 1.0));
  store.add("b", Tensor(1, 3, 1.0));
  for (auto& p : store.all()) p.grad = Tensor(1, 3, 1.0);
  OptimizerState st;
  const double lr = 0.01;
  adam_step(store, st, lr);
  for (const auto& p : store.all())
    for (double v : p.value.data) EXPECT_NEAR(v, 1.0 - lr / (1.0 + st.hyper.epsilon), 1e-15);
  EXPECT_EQ(store[0].value, store[1].value);
}

TEST(Schedule, WarmRestarts) {
  WarmRestartSchedule s{1e-3, 1e-5, 10, 2};
  EXPECT_DOUBLE_EQ(s.lr(0), 1e-3);
  EXPECT_NEAR(s.lr(5), (1e-3 + 1e-5) / 2, 1e-15);
  EXPECT_DOUBLE_EQ(s.lr(10), 1e-3);
  EXPECT_NEAR(s.lr(20), (1e-3 + 1e-5) / 2, 1e-15);  // second period has length 20
  EXPECT_DOUBLE_EQ(s.lr(30), 1e-3);
  for (std::size_t i = 0; i < 29; ++i) {
    if (i != 9) {
      EXPECT_GE(s.lr(i), s.lr(i + 1));
    }
  }
}

TEST(PositiveWeights, InverseFrequencyClipped) {
  Tensor y(4, 3, std::vector<double>{1, 0, 1, 1, 0, 1, 1, 0, 1, 0, 0, 1});
  auto w = inverse_frequency_weights(y);
  EXPECT_DOUBLE_EQ(w.data[0], 4.0 / 3.0);
  EXPECT_DOUBLE_EQ(w.data[1], 50.0);
  EXPECT_DOUBLE_EQ(w.data[2], 1.0);
}
