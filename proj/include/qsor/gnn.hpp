// SPDX-License-Identifier: Apache-2.0
#pragma once

// Graph convolution (self || max-of-neighbors) and edge-conditioned MPNN with
// GRU updates, softmax-sum readout and a dense multi-task head.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "qsor/hash.hpp"
#include "qsor/layers.hpp"
#include "qsor/metrics.hpp"
#include "qsor/molgraph.hpp"
#include "qsor/optim.hpp"
#include "qsor/tensor.hpp"

namespace qsor::gnn {

using nn::Tensor;
using nn::Var;

enum class Variant { gcn, mpnn };

inline std::string to_string(Variant v) { return v == Variant::gcn ? "gcn" : "mpnn"; }

inline Variant variant_from_string(const std::string& s) {
  if (s == "gcn") return Variant::gcn;
  if (s == "mpnn") return Variant::mpnn;
  throw std::invalid_argument("unknown gnn variant: " + s);
}

class UnsupportedElementError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One-hot blocks: element, degree 0..max_degree, charge {<0, 0, >0},
/// hydrogens 0..max_hydrogens; then aromatic and ring flags.
struct AtomFeatureConfig {
  std::vector<int> elements = {5, 6, 7, 8, 9, 14, 15, 16, 17, 34, 35, 53};
  int max_degree = 5;
  int max_hydrogens = 4;

  std::size_t width() const {
    return elements.size() + static_cast<std::size_t>(max_degree + 1) + 3 + static_cast<std::size_t>(max_hydrogens + 1) + 2;
  }
  bool operator==(const AtomFeatureConfig&) const = default;
};

/// Bond order one-hot (single, double, triple, aromatic) plus ring flag.
inline constexpr std::size_t kBondFeatureWidth = 5;

/// Graph in the form the network consumes.
struct GraphInput {
  Tensor atom_features;  // n_atoms x width
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<std::pair<std::size_t, std::size_t>> bonds;
  Tensor bond_features;  // n_bonds x kBondFeatureWidth
};

inline Tensor atom_features(const mol::MolecularGraph& g, const AtomFeatureConfig& cfg) {
  Tensor f(g.atom_count(), cfg.width());
  for (std::size_t i = 0; i < g.atom_count(); ++i) {
    const auto& a = g.atom(i);
    auto el = std::find(cfg.elements.begin(), cfg.elements.end(), a.atomic_number);
    if (el == cfg.elements.end())
      throw UnsupportedElementError("element " + std::string(mol::element_symbol(a.atomic_number)) +
                                    " is outside the featurized element set");
    std::size_t off = 0;
    f(i, static_cast<std::size_t>(el - cfg.elements.begin())) = 1;
    off += cfg.elements.size();
    f(i, off + static_cast<std::size_t>(std::min<int>(static_cast<int>(a.degree), cfg.max_degree))) = 1;
    off += static_cast<std::size_t>(cfg.max_degree + 1);
    f(i, off + (a.formal_charge < 0 ? 0 : (a.formal_charge == 0 ? 1 : 2))) = 1;
    off += 3;
    f(i, off + static_cast<std::size_t>(std::min<int>(static_cast<int>(a.total_h()), cfg.max_hydrogens))) = 1;
    off += static_cast<std::size_t>(cfg.max_hydrogens + 1);
    f(i, off) = a.aromatic ? 1 : 0;
    f(i, off + 1) = a.in_ring ? 1 : 0;
  }
  return f;
}

inline GraphInput prepare_graph(const mol::MolecularGraph& g, const AtomFeatureConfig& cfg = {}) {
  GraphInput in;
  in.atom_features = atom_features(g, cfg);
  in.neighbors.resize(g.atom_count());
  for (std::size_t i = 0; i < g.atom_count(); ++i) {
    for (const auto& nb : g.neighbors(i)) in.neighbors[i].push_back(nb.atom);
  }
  in.bond_features = Tensor(g.bond_count(), kBondFeatureWidth);
  for (std::size_t b = 0; b < g.bond_count(); ++b) {
    const auto& bond = g.bond(b);
    in.bonds.emplace_back(bond.begin, bond.end);
    in.bond_features(b, static_cast<std::size_t>(bond.order) - 1) = 1;
    in.bond_features(b, 4) = bond.in_ring ? 1 : 0;
  }
  return in;
}

struct GnnConfig {
  Variant variant = Variant::gcn;
  std::vector<std::size_t> layer_dims = {15, 20, 27, 36};
  std::size_t readout_dim = 175;
  std::vector<std::size_t> head_dims = {96, 63};
  double dropout = 0.47;
  std::size_t n_tasks = 138;
  double l1 = 0.0;  ///< applied to head dense weights
  double l2 = 0.0;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  std::size_t epochs = 300;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  nn::WarmRestartSchedule schedule{1e-3, 1e-5, 50, 2};
  nn::AdamHyper adam{};
  bool zero_init_output = true;  ///< output layer starts at zero: all logits 0
  AtomFeatureConfig atoms{};

  static GnnConfig gcn_default() { return {}; }

  static GnnConfig mpnn_default() {
    GnnConfig c;
    c.variant = Variant::mpnn;
    c.layer_dims.assign(5, 43);
    c.readout_dim = 197;
    c.head_dims.assign(3, 392);
    c.dropout = 0.12;
    c.l1 = 1e-5;
    c.l2 = 1e-5;
    return c;
  }

  void validate() const {
    if (layer_dims.empty()) throw std::invalid_argument("gnn: at least one message-passing layer required");
    if (head_dims.empty()) throw std::invalid_argument("gnn: at least one head layer required");
    for (auto d : layer_dims)
      if (d == 0) throw std::invalid_argument("gnn: layer dims must be positive");
    for (auto d : head_dims)
      if (d == 0) throw std::invalid_argument("gnn: head dims must be positive");
    if (readout_dim == 0) throw std::invalid_argument("gnn: readout dim must be positive");
    if (dropout < 0 || dropout >= 1) throw std::invalid_argument("gnn: dropout must be in [0, 1)");
    if (n_tasks < 1) throw std::invalid_argument("gnn: n_tasks must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("gnn: batch size must be >= 1");
    if (variant == Variant::mpnn &&
        std::any_of(layer_dims.begin(), layer_dims.end(), [&](auto d) { return d != layer_dims.front(); }))
      throw std::invalid_argument("gnn: mpnn layers share one hidden width");
  }
};

struct Prediction {
  std::vector<double> logits;
  std::vector<double> embedding;
};

class GnnModel {
 public:
  explicit GnnModel(GnnConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    optimizer_.hyper = cfg_.adam;
    optimizer_.schedule = cfg_.schedule;
  }

  const GnnConfig& config() const { return cfg_; }
  nn::ParameterStore& parameters() { return store_; }
  const nn::ParameterStore& parameters() const { return store_; }
  nn::OptimizerState& optimizer() { return optimizer_; }
  const nn::OptimizerState& optimizer() const { return optimizer_; }
  std::size_t epochs_trained() const { return epochs_trained_; }
  void set_epochs_trained(std::size_t e) { epochs_trained_ = e; }
  std::size_t embedding_dim() const { return cfg_.head_dims.back(); }

  /// Initial node state: linear projection of the atom features.
  Var project_atoms(nn::Tape& tape, const GraphInput& g) {
    return input_.forward(tape, store_, tape.constant(g.atom_features), {});
  }

  /// One message-passing layer.
  Var message_layer(nn::Tape& tape, const GraphInput& g, Var h, std::size_t layer) {
    if (cfg_.variant == Variant::gcn) {
      Var m = nn::neighbor_max(h, g.neighbors);
      return nn::selu(mp_[layer].forward(tape, store_, nn::concat_cols(h, m), {}));
    }
    Var a = edge_[layer].forward(tape, store_, tape.constant(g.bond_features), {});
    Var m = nn::edge_messages(h, a, g.bonds);
    return mp_[layer].forward_gru(tape, store_, m, h);
  }

  /// Per-layer softmax-projected atom contributions summed over atoms, then
  /// over layers (mpnn: r_l += r_{l-1} first).
  Var readout(nn::Tape& tape, std::span<const Var> states) {
    if (states.size() != mp_.size()) throw nn::ShapeError("readout: one state per message-passing layer expected");
    std::optional<Var> total, prev;
    for (std::size_t l = 0; l < states.size(); ++l) {
      Var r = nn::sum_rows(nn::softmax_rows(readout_[l].forward(tape, store_, states[l], {})));
      if (cfg_.variant == Variant::mpnn && prev) r = nn::add(r, *prev);
      prev = r;
      total = total ? nn::add(*total, r) : r;
    }
    return *total;
  }

  Var graph_vector(nn::Tape& tape, const GraphInput& g) {
    Var h = project_atoms(tape, g);
    std::vector<Var> states;
    for (std::size_t l = 0; l < mp_.size(); ++l) {
      h = message_layer(tape, g, h, l);
      states.push_back(h);
    }
    return readout(tape, states);
  }

  struct BatchOutput {
    Var logits;     // batch x n_tasks
    Var embedding;  // batch x head_dims.back()
  };

  BatchOutput forward(nn::Tape& tape, std::span<const GraphInput* const> batch, const nn::RunContext& ctx) {
    if (batch.empty()) throw std::invalid_argument("gnn forward: empty batch");
    std::vector<Var> rows;
    rows.reserve(batch.size());
    for (const auto* g : batch) rows.push_back(graph_vector(tape, *g));
    return head_forward(tape, nn::stack_rows(rows), ctx);
  }

  /// Dense head and output layer applied to stacked graph vectors.
  BatchOutput head_forward(nn::Tape& tape, Var x, const nn::RunContext& ctx) {
    Var embedding = x;
    for (std::size_t k = 0; k < head_.size(); ++k) {
      x = head_[k].forward(tape, store_, x, ctx);
      if (head_[k].spec().kind == nn::LayerKind::batchnorm && k + 2 == head_.size()) embedding = x;
    }
    return {output_.forward(tape, store_, x, ctx), embedding};
  }

  /// Sum of l1/l2 penalties over head dense layers; nullopt when disabled.
  std::optional<Var> regularization(nn::Tape& tape) {
    std::optional<Var> total;
    for (const auto& layer : head_) {
      if (auto r = layer.regularization(tape, store_)) total = total ? nn::add(*total, *r) : *r;
    }
    return total;
  }

  /// Infer-mode predictions; does not modify the model.
  std::vector<Prediction> predict(std::span<const GraphInput* const> graphs, std::size_t chunk = 64) const {
    auto& self = const_cast<GnnModel&>(*this);  // infer mode only reads parameters
    std::vector<Prediction> out;
    out.reserve(graphs.size());
    for (std::size_t start = 0; start < graphs.size(); start += chunk) {
      auto batch = graphs.subspan(start, std::min(chunk, graphs.size() - start));
      nn::Tape tape;
      auto res = self.forward(tape, batch, {nn::Mode::infer});
      const Tensor& lv = res.logits.value();
      const Tensor& ev = res.embedding.value();
      for (std::size_t i = 0; i < batch.size(); ++i) {
        out.push_back({{lv.row_span(i).begin(), lv.row_span(i).end()}, {ev.row_span(i).begin(), ev.row_span(i).end()}});
      }
    }
    return out;
  }

  std::vector<Prediction> predict(std::span<const GraphInput> graphs) const {
    std::vector<const GraphInput*> ptrs;
    for (const auto& g : graphs) ptrs.push_back(&g);
    return predict(ptrs);
  }

  Prediction predict(const GraphInput& g) const { return predict(std::span<const GraphInput>(&g, 1)).front(); }

  Prediction predict(const mol::MolecularGraph& g) const { return predict(prepare_graph(g, cfg_.atoms)); }

  std::vector<double> embed(const mol::MolecularGraph& g) const { return predict(g).embedding; }

  /// Zeroes the weights and bias of the output layer.
  void zero_output_layer() {
    for (auto i : output_.parameter_indices()) store_[i].value = Tensor(store_[i].value.rows, store_[i].value.cols);
  }

 private:
  void build() {
    const auto seed = cfg_.seed;
    const auto feat = cfg_.atoms.width();
    input_ = nn::Layer({nn::LayerKind::dense, feat, cfg_.layer_dims.front()}, "input", store_, seed);
    std::size_t prev = cfg_.layer_dims.front();
    for (std::size_t l = 0; l < cfg_.layer_dims.size(); ++l) {
      const auto d = cfg_.layer_dims[l];
      const std::string name = to_string(cfg_.variant) + "." + std::to_string(l);
      if (cfg_.variant == Variant::gcn) {
        mp_.emplace_back(nn::LayerSpec{nn::LayerKind::dense, 2 * prev, d}, name + ".dense", store_, seed);
      } else {
        edge_.emplace_back(nn::LayerSpec{nn::LayerKind::dense, kBondFeatureWidth, d * d}, name + ".edge", store_, seed);
        // fan-in of the message A(e) h is d, not the bond feature width
        auto w = edge_.back().parameter_indices()[0];
        store_[w].value = nn::fan_in_uniform(kBondFeatureWidth, d * d, 2 * d, derive_seed(seed, 0xed9e, l));
        mp_.emplace_back(nn::LayerSpec{nn::LayerKind::gru_cell, d, d}, name + ".gru", store_, seed);
      }
      readout_.emplace_back(nn::LayerSpec{nn::LayerKind::dense, d, cfg_.readout_dim}, "readout." + std::to_string(l),
                            store_, seed);
      prev = d;
    }
    prev = cfg_.readout_dim;
    for (std::size_t k = 0; k < cfg_.head_dims.size(); ++k) {
      const auto d = cfg_.head_dims[k];
      const std::string name = "head." + std::to_string(k);
      nn::LayerSpec dense{nn::LayerKind::dense, prev, d};
      dense.l1 = cfg_.l1;
      dense.l2 = cfg_.l2;
      head_.emplace_back(dense, name + ".dense", store_, seed);
      head_.emplace_back(nn::LayerSpec{nn::LayerKind::relu, d, d}, name + ".relu", store_, seed);
      head_.emplace_back(nn::LayerSpec{nn::LayerKind::batchnorm, d, d, 0, cfg_.bn_momentum, cfg_.bn_epsilon},
                         name + ".bn", store_, seed);
      head_.emplace_back(nn::LayerSpec{nn::LayerKind::dropout, d, d, cfg_.dropout}, name + ".dropout", store_, seed);
      prev = d;
    }
    output_ = nn::Layer({nn::LayerKind::dense, prev, cfg_.n_tasks}, "output", store_, seed);
    if (cfg_.zero_init_output) zero_output_layer();
  }

  GnnConfig cfg_;
  nn::ParameterStore store_;
  nn::OptimizerState optimizer_;
  std::size_t epochs_trained_ = 0;
  nn::Layer input_;
  std::vector<nn::Layer> mp_;
  std::vector<nn::Layer> edge_;
  std::vector<nn::Layer> readout_;
  std::vector<nn::Layer> head_;
  nn::Layer output_;
};

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  std::optional<double> val_mean_auroc;
};

struct TrainOptions {
  std::optional<Tensor> pos_weights;  ///< 1 x n_tasks; inverse frequency on the train rows when absent
  std::optional<std::size_t> epochs;  ///< overrides config.epochs
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Infer-mode logits for the given rows, n_rows x n_tasks.
inline Tensor predict_logits(const GnnModel& model, std::span<const GraphInput> graphs, std::span<const std::size_t> rows) {
  std::vector<const GraphInput*> subset;
  for (auto r : rows) subset.push_back(&graphs[r]);
  Tensor out(rows.size(), model.config().n_tasks);
  auto preds = model.predict(subset);
  for (std::size_t i = 0; i < preds.size(); ++i) std::copy(preds[i].logits.begin(), preds[i].logits.end(), out.row_span(i).begin());
  return out;
}

inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(m.row_span(rows[i]).begin(), m.row_span(rows[i]).end(), out.row_span(i).begin());
  return out;
}

/// Mean weighted BCE of infer-mode logits over `rows`.
inline double evaluate_loss(const GnnModel& model, std::span<const GraphInput> graphs, const Tensor& labels,
                            std::span<const std::size_t> rows, const Tensor& pos_weights) {
  nn::Tape tape;
  return nn::weighted_bce(tape.constant(predict_logits(model, graphs, rows)), gather_rows(labels, rows), pos_weights)
      .value()
      .data[0];
}

inline std::optional<double> mean_auroc(const GnnModel& model, std::span<const GraphInput> graphs, const Tensor& labels,
                                        std::span<const std::size_t> rows) {
  Tensor logits = predict_logits(model, graphs, rows);
  std::vector<int> y;
  for (auto r : rows)
    for (std::size_t t = 0; t < labels.cols; ++t) y.push_back(labels(r, t) > 0.5 ? 1 : 0);
  return metrics::mean_auroc({logits.data, y, labels.cols});
}

/// Mini-batch training on the given rows. Batches are reshuffled every epoch;
/// a trailing batch of one graph is merged into the previous batch so that
/// batch statistics stay defined.
inline std::vector<EpochRecord> train(GnnModel& model, std::span<const GraphInput> graphs, const Tensor& labels,
                                      std::span<const std::size_t> train_rows, std::span<const std::size_t> val_rows = {},
                                      const TrainOptions& opts = {}) {
  const auto& cfg = model.config();
  if (train_rows.empty()) throw std::invalid_argument("train: empty training split");
  if (labels.rows != graphs.size() || labels.cols != cfg.n_tasks)
    throw nn::ShapeError("train: label matrix must be n_graphs x n_tasks");
  for (auto r : val_rows) {
    if (std::find(train_rows.begin(), train_rows.end(), r) != train_rows.end())
      throw std::invalid_argument("train: train and validation rows overlap");
  }
  const Tensor weights =
      opts.pos_weights ? *opts.pos_weights : nn::inverse_frequency_weights(gather_rows(labels, train_rows));

  const std::size_t epochs = opts.epochs.value_or(cfg.epochs);
  auto& store = model.parameters();
  auto& opt = model.optimizer();
  std::vector<EpochRecord> history;
  std::vector<std::size_t> order(train_rows.begin(), train_rows.end());
  for (std::size_t e = 0; e < epochs; ++e) {
    const std::size_t epoch = model.epochs_trained();
    const double lr = opt.schedule.lr(epoch);
    std::sort(order.begin(), order.end());
    counter_shuffle(order, derive_seed(cfg.seed, 0x5b0f, epoch));
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) spans.emplace_back(s, std::min(order.size(), s + cfg.batch_size));
    if (spans.size() > 1 && spans.back().second - spans.back().first == 1) {
      spans[spans.size() - 2].second = spans.back().second;
      spans.pop_back();
    }
    double loss_sum = 0;
    for (const auto& [begin, end] : spans) {
      std::vector<const GraphInput*> batch;
      Tensor targets(end - begin, labels.cols);
      for (std::size_t i = begin; i < end; ++i) {
        batch.push_back(&graphs[order[i]]);
        std::copy(labels.row_span(order[i]).begin(), labels.row_span(order[i]).end(), targets.row_span(i - begin).begin());
      }
      store.zero_grad();
      nn::Tape tape;
      double bce = 0;
      try {
        auto out = model.forward(tape, batch, {nn::Mode::train, cfg.seed, epoch, opt.step});
        Var loss = nn::weighted_bce(out.logits, targets, weights);
        bce = loss.value().data[0];
        if (auto reg = model.regularization(tape)) loss = nn::add(loss, *reg);
        tape.backward(loss);
      } catch (const nn::NonFiniteError& err) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + err.what());
      }
      nn::adam_step(store, opt, lr);
      loss_sum += bce * static_cast<double>(end - begin);
    }
    model.set_epochs_trained(epoch + 1);
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(order.size()), std::nullopt, std::nullopt};
    if (!val_rows.empty()) {
      rec.val_loss = evaluate_loss(model, graphs, labels, val_rows, weights);
      rec.val_mean_auroc = mean_auroc(model, graphs, labels, val_rows);
    }
    history.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json tensor_json(const Tensor& t) { return {{"rows", t.rows}, {"cols", t.cols}, {"data", t.data}}; }

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), j.at("data").get<std::vector<double>>());
}

}  // namespace detail

inline nlohmann::json config_to_json(const GnnConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"layer_dims", c.layer_dims},
          {"readout_dim", c.readout_dim},
          {"head_dims", c.head_dims},
          {"dropout", c.dropout},
          {"n_tasks", c.n_tasks},
          {"l1", c.l1},
          {"l2", c.l2},
          {"bn_momentum", c.bn_momentum},
          {"bn_epsilon", c.bn_epsilon},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"schedule",
           {{"base_lr", c.schedule.base_lr},
            {"min_lr", c.schedule.min_lr},
            {"period", c.schedule.period},
            {"multiplier", c.schedule.multiplier}}},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
          {"zero_init_output", c.zero_init_output},
          {"atom_features",
           {{"elements", c.atoms.elements}, {"max_degree", c.atoms.max_degree}, {"max_hydrogens", c.atoms.max_hydrogens}}}};
}

inline GnnConfig config_from_json(const nlohmann::json& j) {
  GnnConfig c;
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
  c.readout_dim = j.at("readout_dim").get<std::size_t>();
  c.head_dims = j.at("head_dims").get<std::vector<std::size_t>>();
  c.dropout = j.at("dropout").get<double>();
  c.n_tasks = j.at("n_tasks").get<std::size_t>();
  c.l1 = j.at("l1").get<double>();
  c.l2 = j.at("l2").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.bn_epsilon = j.at("bn_epsilon").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& s = j.at("schedule");
  c.schedule = {s.at("base_lr").get<double>(), s.at("min_lr").get<double>(), s.at("period").get<double>(),
                s.at("multiplier").get<double>()};
  const auto& a = j.at("adam");
  c.adam = {a.at("beta1").get<double>(), a.at("beta2").get<double>(), a.at("epsilon").get<double>()};
  c.zero_init_output = j.at("zero_init_output").get<bool>();
  const auto& f = j.at("atom_features");
  c.atoms.elements = f.at("elements").get<std::vector<int>>();
  c.atoms.max_degree = f.at("max_degree").get<int>();
  c.atoms.max_hydrogens = f.at("max_hydrogens").get<int>();
  return c;
}

inline nlohmann::json checkpoint_json(const GnnModel& model, const std::vector<std::string>& vocabulary = {}) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.parameters().all()) {
    auto t = detail::tensor_json(p.value);
    t["name"] = p.name;
    t["trainable"] = p.trainable;
    params.push_back(std::move(t));
  }
  const auto& opt = model.optimizer();
  nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    m.push_back(detail::tensor_json(opt.m[i]));
    v.push_back(detail::tensor_json(opt.v[i]));
  }
  return {{"format_version", kCheckpointVersion},
          {"model", "gnn"},
          {"architecture", config_to_json(model.config())},
          {"seed", model.config().seed},
          {"epochs_trained", model.epochs_trained()},
          {"vocabulary", vocabulary},
          {"params", std::move(params)},
          {"optimizer", {{"step", opt.step}, {"m", std::move(m)}, {"v", std::move(v)}}}};
}

struct LoadedGnn {
  GnnModel model;
  std::vector<std::string> vocabulary;
};

inline LoadedGnn model_from_checkpoint(const nlohmann::json& j) {
  if (j.at("format_version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint format_version " + j.at("format_version").dump());
  if (j.at("model").get<std::string>() != "gnn") throw std::runtime_error("checkpoint does not hold a gnn model");
  LoadedGnn out{GnnModel(config_from_json(j.at("architecture"))), j.at("vocabulary").get<std::vector<std::string>>()};
  auto& store = out.model.parameters();
  const auto& params = j.at("params");
  if (params.size() != store.size()) throw std::runtime_error("checkpoint parameter count does not match architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = store[i];
    if (params[i].at("name").get<std::string>() != p.name)
      throw std::runtime_error("checkpoint parameter order mismatch at " + p.name);
    Tensor t = detail::tensor_from_json(params[i]);
    if (!t.same_shape(p.value)) throw std::runtime_error("checkpoint shape mismatch for " + p.name);
    p.value = std::move(t);
  }
  auto& opt = out.model.optimizer();
  const auto& oj = j.at("optimizer");
  opt.step = oj.at("step").get<std::size_t>();
  opt.m.clear();
  opt.v.clear();
  for (const auto& t : oj.at("m")) opt.m.push_back(detail::tensor_from_json(t));
  for (const auto& t : oj.at("v")) opt.v.push_back(detail::tensor_from_json(t));
  out.model.set_epochs_trained(j.at("epochs_trained").get<std::size_t>());
  return out;
}

inline void save_checkpoint(const GnnModel& model, const std::string& path, const std::vector<std::string>& vocabulary = {}) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os << checkpoint_json(model, vocabulary).dump() << '\n';
}

inline LoadedGnn load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path);
  return model_from_checkpoint(nlohmann::json::parse(is));
}

}  // namespace qsor::gnn
