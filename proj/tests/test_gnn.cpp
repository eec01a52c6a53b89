// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "corpus.hpp"
#include "gradcheck.hpp"
#include "qsor/gnn.hpp"

using namespace qsor;
using gnn::GnnConfig;
using gnn::GnnModel;
using gnn::GraphInput;
using nn::Tensor;
using nn::Var;

namespace {

GnnConfig small_config(gnn::Variant v) {
  GnnConfig c = v == gnn::Variant::gcn ? GnnConfig::gcn_default() : GnnConfig::mpnn_default();
  c.layer_dims = v == gnn::Variant::gcn ? std::vector<std::size_t>{4, 5} : std::vector<std::size_t>{4, 4};
  c.readout_dim = 6;
  c.head_dims = {5, 3};
  c.n_tasks = 3;
  c.dropout = 0.2;
  c.zero_init_output = false;
  c.seed = 17;
  return c;
}

// Graph with atoms renumbered by `perm` (new index of atom i is perm[i]).
mol::MolecularGraph permuted(const mol::MolecularGraph& g, const std::vector<std::size_t>& perm) {
  return mol::permute_atoms(g, perm);
}

std::vector<std::size_t> random_perm(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(AtomFeatures, ShapeAndBlocks) {
  gnn::AtomFeatureConfig cfg;
  auto f = gnn::atom_features(mol::parse_smiles("CCO"), cfg);
  EXPECT_EQ(f.rows, 3u);
  EXPECT_EQ(f.cols, cfg.width());
  auto c = gnn::atom_features(mol::parse_smiles("C"), cfg);
  auto n = gnn::atom_features(mol::parse_smiles("N"), cfg);
  // methane vs ammonia: same degree 0 but different H count, so compare
  // bracket atoms with equal hydrogens instead
  auto cb = gnn::atom_features(mol::parse_smiles("[CH3]"), cfg);
  auto nb = gnn::atom_features(mol::parse_smiles("[NH3]"), cfg);
  for (std::size_t j = 0; j < cfg.width(); ++j) {
    if (j < cfg.elements.size()) continue;
    EXPECT_EQ(cb(0, j), nb(0, j)) << j;
  }
  EXPECT_NE(cb, nb);
  EXPECT_NE(c, n);
  EXPECT_THROW(gnn::atom_features(mol::parse_smiles("[Li]C"), cfg), gnn::UnsupportedElementError);
}

TEST(AtomFeatures, RowPermutedUnderIsomorphism) {
  std::mt19937_64 rng(3);
  auto g = mol::parse_smiles("COc1cc(C=O)ccc1O");
  auto perm = random_perm(g.atom_count(), rng);
  auto f = gnn::atom_features(g, {});
  auto fp = gnn::atom_features(permuted(g, perm), {});
  for (std::size_t i = 0; i < g.atom_count(); ++i)
    for (std::size_t j = 0; j < f.cols; ++j) EXPECT_EQ(f(i, j), fp(perm[i], j));
}

TEST(Gcn, SingleAtomUsesZeroAggregate) {
  GnnModel model(small_config(gnn::Variant::gcn));
  auto in = gnn::prepare_graph(mol::parse_smiles("C"));
  nn::Tape tape;
  Var h = model.project_atoms(tape, in);
  Var out = model.message_layer(tape, in, h, 0);
  // manual: selu([h || 0] W + b)
  const auto& w = model.parameters().find("gcn.0.dense.weight")->value;
  const auto& b = model.parameters().find("gcn.0.dense.bias")->value;
  for (std::size_t j = 0; j < w.cols; ++j) {
    double z = b.data[j];
    for (std::size_t k = 0; k < h.value().cols; ++k) z += h.value()(0, k) * w(k, j);
    const double expect = z > 0 ? nn::kSeluScale * z : nn::kSeluScale * nn::kSeluAlpha * std::expm1(z);
    EXPECT_NEAR(out.value()(0, j), expect, 1e-14);
  }
}

TEST(Gcn, ThreeNodePathHandComputation) {
  auto c = small_config(gnn::Variant::gcn);
  c.layer_dims = {2};
  GnnModel model(c);
  auto in = gnn::prepare_graph(mol::parse_smiles("CCC"));
  // W maps [h (2) || m (2)] -> 2
  auto& w = model.parameters().find("gcn.0.dense.weight")->value;
  auto& b = model.parameters().find("gcn.0.dense.bias")->value;
  w = Tensor(4, 2, std::vector<double>{1, 0, 0, 1, 0.5, 0, 0, -1});
  b = Tensor(1, 2, std::vector<double>{0.1, 0});
  nn::Tape tape;
  Tensor hv(3, 2, std::vector<double>{1, 2, -1, 0.5, 3, -2});
  Var out = model.message_layer(tape, in, tape.constant(hv), 0);
  auto selu = [](double z) { return z > 0 ? nn::kSeluScale * z : nn::kSeluScale * nn::kSeluAlpha * std::expm1(z); };
  // neighbor maxima: atom0 <- h1 = (-1, .5); atom1 <- max(h0, h2) = (3, 2); atom2 <- h1
  const double m[3][2] = {{-1, 0.5}, {3, 2}, {-1, 0.5}};
  for (std::size_t v = 0; v < 3; ++v) {
    EXPECT_NEAR(out.value()(v, 0), selu(hv(v, 0) + 0.5 * m[v][0] + 0.1), 1e-14);
    EXPECT_NEAR(out.value()(v, 1), selu(hv(v, 1) - m[v][1]), 1e-14);
  }
}

TEST(Mpnn, ZeroEdgeNetworkReducesToGruWithZeroInput) {
  auto c = small_config(gnn::Variant::mpnn);
  GnnModel model(c);
  model.parameters().find("mpnn.0.edge.weight")->value.data.assign(5 * 16, 0.0);
  model.parameters().find("mpnn.0.edge.bias")->value.data.assign(16, 0.0);
  auto in = gnn::prepare_graph(mol::parse_smiles("CC(=O)N"));
  nn::ParameterStore ref_store;
  nn::Layer gru({nn::LayerKind::gru_cell, 4, 4}, "mpnn.0.gru", ref_store, c.seed);
  nn::Tape tape;
  Var h = model.project_atoms(tape, in);
  Var out = model.message_layer(tape, in, h, 0);
  Var expect = gru.forward_gru(tape, ref_store, tape.constant(Tensor(4, 4)), h);
  EXPECT_EQ(out.value(), expect.value());
}

TEST(Mpnn, TwoNodeHandSetEdgeMatrix) {
  auto c = small_config(gnn::Variant::mpnn);
  c.layer_dims = {2};
  GnnModel model(c);
  // single bond -> A = [[1, 2], [0, -1]]; other bond features contribute nothing
  auto& w = model.parameters().find("mpnn.0.edge.weight")->value;
  w = Tensor(5, 4);
  w(0, 0) = 1;
  w(0, 1) = 2;
  w(0, 3) = -1;
  model.parameters().find("mpnn.0.edge.bias")->value = Tensor(1, 4);
  auto in = gnn::prepare_graph(mol::parse_smiles("CO"));
  nn::ParameterStore ref_store;
  nn::Layer gru({nn::LayerKind::gru_cell, 2, 2}, "mpnn.0.gru", ref_store, c.seed);
  nn::Tape tape;
  Tensor hv(2, 2, std::vector<double>{0.5, -1, 2, 1});
  Var out = model.message_layer(tape, in, tape.constant(hv), 0);
  // m0 = A h1 = (2 + 2, -1), m1 = A h0 = (0.5 - 2, 1)
  Tensor m(2, 2, std::vector<double>{4, -1, -1.5, 1});
  Var expect = gru.forward_gru(tape, ref_store, tape.constant(m), tape.constant(hv));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.value().data[i], expect.value().data[i], 1e-14);
}

TEST(Readout, SoftmaxSums) {
  for (auto v : {gnn::Variant::gcn, gnn::Variant::mpnn}) {
    auto c = small_config(v);
    c.layer_dims = {4};
    GnnModel model(c);
    for (auto [smiles, atoms] : {std::pair{"C", 1.0}, std::pair{"CCOC(=O)C", 6.0}}) {
      auto in = gnn::prepare_graph(mol::parse_smiles(smiles));
      nn::Tape tape;
      Var h = model.message_layer(tape, in, model.project_atoms(tape, in), 0);
      std::vector<Var> states{h};
      auto r = model.readout(tape, states).value();
      EXPECT_NEAR(std::accumulate(r.data.begin(), r.data.end(), 0.0), atoms, 1e-12);
    }
  }
}

TEST(Gnn, LayerEquivarianceAndReadoutInvariance) {
  std::mt19937_64 rng(5);
  for (auto v : {gnn::Variant::gcn, gnn::Variant::mpnn}) {
    GnnModel model(small_config(v));
    for (auto smiles : test_data::odorant_corpus()) {
      auto g = mol::parse_smiles(smiles);
      auto perm = random_perm(g.atom_count(), rng);
      auto a = gnn::prepare_graph(g), b = gnn::prepare_graph(permuted(g, perm));
      nn::Tape tape;
      Var ha = model.project_atoms(tape, a), hb = model.project_atoms(tape, b);
      std::vector<Var> sa, sb;
      for (std::size_t l = 0; l < 2; ++l) {
        ha = model.message_layer(tape, a, ha, l);
        hb = model.message_layer(tape, b, hb, l);
        sa.push_back(ha);
        sb.push_back(hb);
        for (std::size_t i = 0; i < g.atom_count(); ++i)
          EXPECT_LE(max_abs_diff(ha.value().row_span(i), hb.value().row_span(perm[i])), 1e-12) << smiles;
      }
      EXPECT_LE(max_abs_diff(model.readout(tape, sa).value().data, model.readout(tape, sb).value().data), 1e-12);
    }
  }
}

TEST(Gnn, DefaultGcnShapesAndZeroHead) {
  GnnModel model(GnnConfig::gcn_default());
  auto p = model.predict(mol::parse_smiles("CC(C)=CCCC(C)(O)C=C"));
  EXPECT_EQ(p.embedding.size(), 63u);
  EXPECT_EQ(p.logits.size(), 138u);
  for (double z : p.logits) {
    EXPECT_EQ(z, 0.0);
    EXPECT_EQ(nn::stable_sigmoid(z), 0.5);
  }
  GnnModel mpnn(GnnConfig::mpnn_default());
  auto q = mpnn.predict(mol::parse_smiles("CCO"));
  EXPECT_EQ(q.embedding.size(), 392u);
  EXPECT_EQ(q.logits.size(), 138u);
}

TEST(Gnn, LogitsInvariantAcrossRespellings) {
  std::mt19937_64 rng(8);
  for (auto v : {gnn::Variant::gcn, gnn::Variant::mpnn}) {
    auto c = v == gnn::Variant::gcn ? GnnConfig::gcn_default() : GnnConfig::mpnn_default();
    c.zero_init_output = false;
    GnnModel model(c);
    for (auto smiles : {"COc1cc(C=O)ccc1O", "CC1=CCC(CC1)C(=C)C", "CC12CCC(CC1)C(C)(C)O2"}) {
      auto g = mol::parse_smiles(smiles);
      auto ref = model.predict(g);
      for (int i = 0; i < 20; ++i) {
        auto p = model.predict(mol::parse_smiles(mol::random_smiles(g, rng)));
        EXPECT_LE(max_abs_diff(p.logits, ref.logits), 1e-9);
        EXPECT_LE(max_abs_diff(p.embedding, ref.embedding), 1e-9);
      }
      EXPECT_EQ(model.embed(g), ref.embedding);
    }
  }
}

TEST(Gnn, EndToEndGradientCheck) {
  std::mt19937_64 rng(9);
  for (auto v : {gnn::Variant::gcn, gnn::Variant::mpnn}) {
    auto c = small_config(v);
    c.l1 = v == gnn::Variant::mpnn ? 1e-3 : 0.0;
    c.l2 = v == gnn::Variant::mpnn ? 1e-3 : 0.0;
    GnnModel model(c);
    std::vector<GraphInput> graphs = {gnn::prepare_graph(mol::parse_smiles("CC(=O)OCc1ccccc1")),
                                      gnn::prepare_graph(mol::parse_smiles("CC(C)CC(=O)O")),
                                      gnn::prepare_graph(mol::parse_smiles("c1ccc2[nH]ccc2c1"))};
    std::vector<const GraphInput*> batch = {&graphs[0], &graphs[1], &graphs[2]};
    Tensor targets(3, 3, std::vector<double>{1, 0, 1, 0, 1, 0, 1, 1, 0});
    Tensor w(1, 3, std::vector<double>{2, 1, 3});
    auto loss_fn = [&](nn::Tape& t) {
      auto out = model.forward(t, batch, {nn::Mode::train, 3, 0, 0});
      Var loss = nn::weighted_bce(out.logits, targets, w);
      if (auto reg = model.regularization(t)) loss = nn::add(loss, *reg);
      return loss;
    };
    auto coords = test_data::all_coordinates(model.parameters());
    auto res = test_data::check_gradients(model.parameters(), loss_fn, coords);
    EXPECT_LE(res.rel_error, 1e-5) << gnn::to_string(v);
  }
}

TEST(Gnn, ModesAgreeWithoutDropoutAndWithFrozenBatchnorm) {
  for (auto v : {gnn::Variant::gcn, gnn::Variant::mpnn}) {
    auto c = small_config(v);
    c.dropout = 0;
    GnnModel model(c);
    std::vector<GraphInput> graphs = {gnn::prepare_graph(mol::parse_smiles("CCO")),
                                      gnn::prepare_graph(mol::parse_smiles("c1ccoc1"))};
    std::vector<const GraphInput*> batch = {&graphs[0], &graphs[1]};
    nn::Tape tape;
    auto train = model.forward(tape, batch, {nn::Mode::train, 1, 0, 0, true});
    auto infer = model.forward(tape, batch, {nn::Mode::infer});
    EXPECT_LE(max_abs_diff(train.logits.value().data, infer.logits.value().data), 1e-12);
  }
}

TEST(Gnn, CheckpointRoundTripIsBitExact) {
  for (auto v : {gnn::Variant::gcn, gnn::Variant::mpnn}) {
    auto c = small_config(v);
    GnnModel model(c);
    std::vector<GraphInput> graphs;
    for (auto s : test_data::odorant_corpus()) graphs.push_back(gnn::prepare_graph(mol::parse_smiles(s)));
    Tensor labels(graphs.size(), 3);
    for (std::size_t i = 0; i < graphs.size(); ++i) labels(i, i % 3) = 1;
    std::vector<std::size_t> rows(graphs.size());
    std::iota(rows.begin(), rows.end(), 0);
    gnn::TrainOptions opts;
    opts.epochs = 2;
    gnn::train(model, graphs, labels, rows, {}, opts);

    auto path = std::filesystem::temp_directory_path() / ("qsor_ckpt_" + gnn::to_string(v) + ".json");
    gnn::save_checkpoint(model, path.string(), {"a", "b", "c"});
    auto loaded = gnn::load_checkpoint(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(loaded.vocabulary, (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(loaded.model.epochs_trained(), 2u);
    EXPECT_EQ(loaded.model.optimizer().step, model.optimizer().step);
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
      EXPECT_EQ(loaded.model.parameters()[i].value, model.parameters()[i].value);
    auto a = model.predict(graphs), b = loaded.model.predict(graphs);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].logits, b[i].logits);
      EXPECT_EQ(a[i].embedding, b[i].embedding);
    }
  }
}

TEST(Training, FirstEpochLossIsWeightedLn2) {
  auto c = small_config(gnn::Variant::gcn);
  c.zero_init_output = true;
  c.batch_size = 64;
  GnnModel model(c);
  std::vector<GraphInput> graphs;
  for (auto s : {"CCO", "CCN", "CCCl", "c1ccccc1", "CC=O"}) graphs.push_back(gnn::prepare_graph(mol::parse_smiles(s)));
  Tensor labels(5, 3, std::vector<double>{1, 0, 0, 1, 1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0});
  std::vector<std::size_t> rows = {0, 1, 2, 3, 4};
  Tensor w(1, 3, std::vector<double>{1.5, 2.5, 5});
  gnn::TrainOptions opts;
  opts.epochs = 1;
  opts.pos_weights = w;
  auto hist = gnn::train(model, graphs, labels, rows, {}, opts);
  double expect = 0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) expect += (labels(i, j) * w.data[j] + (1 - labels(i, j))) * std::log(2.0) / 15;
  EXPECT_NEAR(hist[0].train_loss, expect, 1e-12);
}

TEST(Training, DuplicatedFullBatchMatchesOriginal) {
  auto c = small_config(gnn::Variant::gcn);
  c.dropout = 0;
  c.batch_size = 100;
  std::vector<GraphInput> graphs;
  for (auto s : {"CCO", "CCN", "CCCl", "c1ccccc1", "CC=O", "OCC(O)CO"}) graphs.push_back(gnn::prepare_graph(mol::parse_smiles(s)));
  const std::size_t n = graphs.size();
  for (std::size_t i = 0; i < n; ++i) graphs.push_back(graphs[i]);
  Tensor labels(2 * n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    labels(i, i % 3) = labels(i + n, i % 3) = 1;
    labels(i, (i + 1) % 3) = labels(i + n, (i + 1) % 3) = i % 2;
  }
  std::vector<std::size_t> once(n), twice(2 * n);
  std::iota(once.begin(), once.end(), 0);
  std::iota(twice.begin(), twice.end(), 0);
  gnn::TrainOptions opts;
  opts.epochs = 5;
  opts.pos_weights = Tensor(1, 3, 2.0);
  GnnModel a(c), b(c);
  gnn::train(a, graphs, labels, once, {}, opts);
  gnn::train(b, graphs, labels, twice, {}, opts);
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    EXPECT_LE(max_abs_diff(a.parameters()[i].value.data, b.parameters()[i].value.data), 1e-9) << a.parameters()[i].name;
}

TEST(Training, DeterministicAndLearns) {
  auto c = small_config(gnn::Variant::gcn);
  c.batch_size = 8;
  c.schedule.base_lr = 1e-2;
  std::vector<GraphInput> graphs;
  std::vector<std::string_view> smiles = test_data::odorant_corpus();
  for (auto s : smiles) graphs.push_back(gnn::prepare_graph(mol::parse_smiles(s)));
  Tensor labels(graphs.size(), 3);
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    auto g = mol::parse_smiles(smiles[i]);
    bool aromatic = false, oxygen = false;
    for (const auto& a : g.atoms()) {
      aromatic = aromatic || a.aromatic;
      oxygen = oxygen || a.atomic_number == 8;
    }
    labels(i, 0) = aromatic;
    labels(i, 1) = oxygen;
    labels(i, 2) = g.atom_count() > 9;
  }
  std::vector<std::size_t> rows(graphs.size());
  std::iota(rows.begin(), rows.end(), 0);
  gnn::TrainOptions opts;
  opts.epochs = 150;
  GnnModel a(c), b(c);
  auto ha = gnn::train(a, graphs, labels, rows, {}, opts);
  auto hb = gnn::train(b, graphs, labels, rows, {}, opts);
  EXPECT_EQ(ha.back().train_loss, hb.back().train_loss);
  EXPECT_LT(ha.back().train_loss, ha.front().train_loss);
  EXPECT_GT(*gnn::mean_auroc(a, graphs, labels, rows), 0.9);
  EXPECT_THROW(gnn::train(a, graphs, labels, {}, {}, opts), std::invalid_argument);
}
