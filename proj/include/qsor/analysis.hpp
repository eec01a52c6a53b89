// SPDX-License-Identifier: Apache-2.0
#pragma once

// Embedding-space analyses: PCA, KDE density grids, nearest-neighbour
// retrieval, label-distance vs embedding-distance correlation and the
// held-out label transfer experiment.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsor/baselines.hpp"
#include "qsor/dataset.hpp"
#include "qsor/fingerprint.hpp"
#include "qsor/gnn.hpp"
#include "qsor/metrics.hpp"

namespace qsor::analysis {

using nn::Tensor;
using baselines::Metric;

struct EmbeddingTable {
  std::vector<std::string> ids;
  Tensor vectors;  // one row per id
  std::string source = "gnn";

  void validate() const {
    if (ids.size() != vectors.rows) throw std::invalid_argument("embedding table: id count != row count");
    std::set<std::string> seen;
    for (const auto& id : ids)
      if (!seen.insert(id).second) throw std::invalid_argument("embedding table: duplicate id " + id);
  }

  std::optional<std::size_t> row_of(const std::string& id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
  }
};

/// GNN embeddings for the given dataset rows.
inline EmbeddingTable embed(const gnn::GnnModel& model, std::span<const gnn::GraphInput> graphs,
                            std::span<const std::string> ids) {
  if (graphs.size() != ids.size()) throw std::invalid_argument("embed: graph and id counts differ");
  auto preds = model.predict(graphs);
  EmbeddingTable t{{ids.begin(), ids.end()}, Tensor(graphs.size(), model.config().head_dims.back()), "gnn"};
  for (std::size_t i = 0; i < preds.size(); ++i) std::copy(preds[i].embedding.begin(), preds[i].embedding.end(), t.vectors.row_span(i).begin());
  return t;
}

// ---------------------------------------------------------------------------
// PCA

struct Pca {
  std::vector<double> mean;
  Tensor components;  ///< k x d, orthonormal rows
  std::vector<double> explained_variance;
  std::vector<double> explained_ratio;
  Tensor projected;  ///< n x k

  Tensor project(const Tensor& x) const {
    if (x.cols != mean.size()) throw std::invalid_argument("pca project: dimension mismatch");
    Tensor out(x.rows, components.rows);
    for (std::size_t r = 0; r < x.rows; ++r)
      for (std::size_t k = 0; k < components.rows; ++k) {
        double s = 0;
        for (std::size_t j = 0; j < x.cols; ++j) s += (x(r, j) - mean[j]) * components(k, j);
        out(r, k) = s;
      }
    return out;
  }
};

/// Top eigenvectors of the sample covariance. Each component is signed so its
/// largest-magnitude entry is positive (first such entry on ties).
inline Pca pca(const Tensor& x, std::size_t n_components) {
  if (x.rows < 2) throw std::invalid_argument("pca: needs at least two rows");
  if (n_components < 1 || n_components > std::min(x.rows, x.cols)) throw std::invalid_argument("pca: bad component count");
  const std::size_t n = x.rows, d = x.cols;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(x.data.data(),
                                                                                            static_cast<Eigen::Index>(n),
                                                                                            static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mu = m.colwise().mean();
  const Eigen::MatrixXd centered = m.rowwise() - mu;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  const double total = cov.trace();
  if (!(total > 0)) throw std::invalid_argument("pca: input has zero variance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");

  Pca out;
  out.mean.assign(mu.data(), mu.data() + d);
  out.components = Tensor(n_components, d);
  for (std::size_t k = 0; k < n_components; ++k) {
    const auto col = static_cast<Eigen::Index>(d - 1 - k);  // eigenvalues ascend
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (std::abs(v(i)) > std::abs(v(arg)) + 1e-12) arg = i;
    if (v(arg) < 0) v = -v;
    for (std::size_t j = 0; j < d; ++j) out.components(k, j) = v(static_cast<Eigen::Index>(j));
    const double ev = std::max(0.0, solver.eigenvalues()(col));
    out.explained_variance.push_back(ev);
    out.explained_ratio.push_back(ev / total);
  }
  out.projected = out.project(x);
  return out;
}

/// Rows whose projected coordinates all have |z| <= max_z.
inline std::vector<std::size_t> zscore_inliers(const Tensor& projected, double max_z) {
  std::vector<double> mu(projected.cols, 0), sd(projected.cols, 0);
  for (std::size_t r = 0; r < projected.rows; ++r)
    for (std::size_t c = 0; c < projected.cols; ++c) mu[c] += projected(r, c) / static_cast<double>(projected.rows);
  for (std::size_t r = 0; r < projected.rows; ++r)
    for (std::size_t c = 0; c < projected.cols; ++c) sd[c] += std::pow(projected(r, c) - mu[c], 2);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(std::max<std::size_t>(1, projected.rows - 1)));
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < projected.rows; ++r) {
    bool ok = true;
    for (std::size_t c = 0; c < projected.cols; ++c) ok = ok && (sd[c] == 0 || std::abs(projected(r, c) - mu[c]) / sd[c] <= max_z);
    if (ok) keep.push_back(r);
  }
  return keep;
}

// ---------------------------------------------------------------------------
// KDE

struct GridSpec {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  std::size_t nx = 100, ny = 100;

  double cell_x(std::size_t i) const { return x0 + (static_cast<double>(i) + 0.5) * (x1 - x0) / static_cast<double>(nx); }
  double cell_y(std::size_t j) const { return y0 + (static_cast<double>(j) + 0.5) * (y1 - y0) / static_cast<double>(ny); }
  double cell_area() const { return (x1 - x0) * (y1 - y0) / static_cast<double>(nx * ny); }
};

/// Data bounds padded by `pad` bandwidths on each side.
inline GridSpec grid_around(const Tensor& points, std::pair<double, double> bandwidth, std::size_t nx = 100, std::size_t ny = 100,
                            double pad = 3.0) {
  GridSpec g{1e300, -1e300, 1e300, -1e300, nx, ny};
  for (std::size_t r = 0; r < points.rows; ++r) {
    g.x0 = std::min(g.x0, points(r, 0));
    g.x1 = std::max(g.x1, points(r, 0));
    g.y0 = std::min(g.y0, points(r, 1));
    g.y1 = std::max(g.y1, points(r, 1));
  }
  g.x0 -= pad * bandwidth.first;
  g.x1 += pad * bandwidth.first;
  g.y0 -= pad * bandwidth.second;
  g.y1 += pad * bandwidth.second;
  return g;
}

/// Scott's rule in two dimensions: h = sigma * n^(-1/6) per axis.
inline std::pair<double, double> scott_bandwidth(const Tensor& points) {
  const auto n = static_cast<double>(points.rows);
  auto sd = [&](std::size_t c) {
    double m = 0, s = 0;
    for (std::size_t r = 0; r < points.rows; ++r) m += points(r, c) / n;
    for (std::size_t r = 0; r < points.rows; ++r) s += std::pow(points(r, c) - m, 2);
    return points.rows > 1 ? std::sqrt(s / (n - 1)) : 0.0;
  };
  const double f = std::pow(n, -1.0 / 6.0);
  double hx = sd(0) * f, hy = sd(1) * f;
  if (hx <= 0) hx = 1.0;
  if (hy <= 0) hy = 1.0;
  return {hx, hy};
}

struct DensityGrid {
  GridSpec grid;
  std::pair<double, double> bandwidth;
  std::vector<double> density;  ///< row-major ny x nx (y outer)
  std::string label;

  double at(std::size_t ix, std::size_t iy) const { return density[iy * grid.nx + ix]; }
};

/// Gaussian KDE on cell centres: sum_i w_i K_h(c - p_i) / n.
inline DensityGrid kde_grid(const Tensor& points, std::optional<std::pair<double, double>> bandwidth = {},
                            std::optional<GridSpec> spec = {}, std::span<const double> weights = {}, std::string label = {}) {
  if (points.rows == 0 || points.cols != 2) throw std::invalid_argument("kde: needs at least one 2-D point");
  if (!weights.empty() && weights.size() != points.rows) throw std::invalid_argument("kde: weight count mismatch");
  const auto h = bandwidth.value_or(scott_bandwidth(points));
  if (!(h.first > 0 && h.second > 0)) throw std::invalid_argument("kde: bandwidth must be positive");
  DensityGrid out{spec.value_or(grid_around(points, h)), h, {}, std::move(label)};
  const auto& g = out.grid;
  out.density.assign(g.nx * g.ny, 0.0);
  const double norm = 1.0 / (2 * M_PI * h.first * h.second * static_cast<double>(points.rows));
  for (std::size_t p = 0; p < points.rows; ++p) {
    const double w = weights.empty() ? 1.0 : weights[p];
    for (std::size_t iy = 0; iy < g.ny; ++iy) {
      const double dy = (g.cell_y(iy) - points(p, 1)) / h.second;
      for (std::size_t ix = 0; ix < g.nx; ++ix) {
        const double dx = (g.cell_x(ix) - points(p, 0)) / h.first;
        out.density[iy * g.nx + ix] += w * norm * std::exp(-0.5 * (dx * dx + dy * dy));
      }
    }
  }
  return out;
}

/// Density thresholds whose superlevel sets hold the given fractions of the
/// grid's total mass (25/50/75% by default).
inline std::vector<double> contour_levels(const DensityGrid& g, std::span<const double> masses = {}) {
  static constexpr double kDefault[] = {0.25, 0.5, 0.75};
  if (masses.empty()) masses = kDefault;
  std::vector<double> d = g.density;
  std::sort(d.begin(), d.end(), std::greater<>());
  const double total = std::accumulate(d.begin(), d.end(), 0.0);
  std::vector<double> out;
  for (double m : masses) {
    double acc = 0;
    double level = d.empty() ? 0.0 : d.back();
    for (double v : d) {
      acc += v;
      if (acc >= m * total) {
        level = v;
        break;
      }
    }
    out.push_back(level);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval

struct Neighbor {
  std::string id;
  double distance;
};

/// k closest rows to `query_id`, excluding the query; equal distances ordered by id.
inline std::vector<Neighbor> nearest_neighbors(const EmbeddingTable& t, const std::string& query_id, std::size_t k,
                                               Metric metric = Metric::cosine) {
  const auto q = t.row_of(query_id);
  if (!q) throw std::invalid_argument("nearest_neighbors: unknown id " + query_id);
  if (k >= t.ids.size()) throw std::invalid_argument("nearest_neighbors: k must be smaller than the table");
  std::vector<Neighbor> all;
  for (std::size_t r = 0; r < t.ids.size(); ++r)
    if (r != *q) all.push_back({t.ids[r], baselines::distance(metric, t.vectors.row_span(r), t.vectors.row_span(*q))});
  auto less = [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance || (a.distance == b.distance && a.id < b.id); };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), less);
  all.resize(k);
  return all;
}

// ---------------------------------------------------------------------------
// Label distance vs embedding distance

inline double label_jaccard_distance(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& l : a) inter += b.count(l);
  return 1.0 - static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

struct DistancePairs {
  std::vector<double> label;
  std::vector<double> embedding;
};

/// Every (train, test) pair: Jaccard distance between label sets and embedding distance.
inline DistancePairs train_test_distances(const data::LabeledDataset& ds, const EmbeddingTable& t,
                                          std::span<const std::size_t> train_rows, std::span<const std::size_t> test_rows,
                                          Metric metric) {
  t.validate();
  auto row = [&](std::size_t r) {
    auto i = t.row_of(ds.records.at(r).id);
    if (!i) throw std::invalid_argument("embedding table has no row for id " + ds.records[r].id);
    return *i;
  };
  DistancePairs out;
  for (auto a : train_rows) {
    const auto ea = row(a);
    for (auto b : test_rows) {
      out.label.push_back(label_jaccard_distance(ds.records[a].labels, ds.records[b].labels));
      out.embedding.push_back(baselines::distance(metric, t.vectors.row_span(ea), t.vectors.row_span(row(b))));
    }
  }
  return out;
}

inline double label_vs_embedding_tau(const data::LabeledDataset& ds, const EmbeddingTable& t, std::span<const std::size_t> train_rows,
                                     std::span<const std::size_t> test_rows, Metric metric = Metric::cosine) {
  auto p = train_test_distances(ds, t, train_rows, test_rows, metric);
  return metrics::kendall_tau(p.label, p.embedding);
}

// ---------------------------------------------------------------------------
// Embedding geometry vs label co-occurrence

struct CooccurrenceComparison {
  std::vector<std::string> labels;
  Tensor mean_distance;  ///< mean embedding distance between molecules carrying label i and label j
  double pearson = 0;    ///< r between normalized co-occurrence and -mean distance, off-diagonal upper triangle
};

inline CooccurrenceComparison compare_with_cooccurrence(const data::LabeledDataset& ds, const EmbeddingTable& t,
                                                        const data::CooccurrenceMatrix& c, Metric metric = Metric::cosine) {
  const std::size_t n = c.labels.size();
  std::vector<std::vector<std::size_t>> members(n);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    auto e = t.row_of(ds.records[r].id);
    if (!e) throw std::invalid_argument("embedding table has no row for id " + ds.records[r].id);
    for (std::size_t k = 0; k < n; ++k)
      if (ds.records[r].labels.count(c.labels[k])) members[k].push_back(*e);
  }
  CooccurrenceComparison out{c.labels, Tensor(n, n), 0};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0;
      std::size_t cnt = 0;
      for (auto a : members[i])
        for (auto b : members[j]) {
          if (a == b) continue;
          s += baselines::distance(metric, t.vectors.row_span(a), t.vectors.row_span(b));
          ++cnt;
        }
      out.mean_distance(i, j) = out.mean_distance(j, i) = cnt ? s / static_cast<double>(cnt) : 0.0;
    }
  std::vector<double> co, sim;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      co.push_back(c.normalized(i, j));
      sim.push_back(-out.mean_distance(i, j));
    }
  if (co.size() >= 2) out.pearson = metrics::pearson_r(co, sim);
  return out;
}

// ---------------------------------------------------------------------------
// Held-out label transfer

struct ScoreWithCi {
  double auroc = 0;
  metrics::BootstrapInterval ci;
};

struct TransferReport {
  std::string held_out;
  std::size_t training_labels = 0;  ///< vocabulary size seen by the ablated GNN
  ScoreWithCi embedding_rf;
  ScoreWithCi fingerprint_rf;
  ScoreWithCi full_gnn;
};

struct TransferInputs {
  std::span<const gnn::GraphInput> graphs;
  const Tensor* labels = nullptr;       ///< n x T, all labels
  const Tensor* fingerprints = nullptr;  ///< n x F count fingerprints
  std::vector<std::string> vocabulary;
  std::vector<std::size_t> train_rows, val_rows, test_rows;
};

inline Tensor drop_column(const Tensor& m, std::size_t col) {
  Tensor out(m.rows, m.cols - 1);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0, k = 0; c < m.cols; ++c)
      if (c != col) out(r, k++) = m(r, c);
  return out;
}

inline Tensor column_of(const Tensor& m, std::size_t col, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) out(i, 0) = m(rows[i], col);
  return out;
}

inline ScoreWithCi score_column(std::span<const double> scores, std::span<const int> y, std::size_t n_resamples,
                                std::uint64_t seed) {
  auto a = metrics::auroc(scores, y);
  if (!a) throw std::invalid_argument("transfer: held-out label has a single class in the test split");
  auto fn = [](std::span<const double> s, std::span<const int> l) { return metrics::auroc(s, l); };
  return {*a, metrics::bootstrap_ci(fn, scores, y, n_resamples, seed)};
}

/// Trains a GNN without `held_out`, fits random forests on its embeddings and
/// on count fingerprints to predict the held-out label, and scores both
/// against a GNN trained on every label. `full_model` may be supplied to reuse
/// an already trained all-label model.
inline TransferReport transfer_ablation(const TransferInputs& in, std::size_t held_out, gnn::GnnConfig gnn_cfg,
                                        const baselines::ForestConfig& rf_cfg, std::size_t n_resamples = 1000,
                                        std::uint64_t seed = 0, const gnn::GnnModel* full_model = nullptr) {
  const Tensor& y = *in.labels;
  if (held_out >= y.cols) throw std::invalid_argument("transfer: held-out label index out of range");
  if (in.vocabulary.size() != y.cols) throw std::invalid_argument("transfer: vocabulary does not match label columns");
  std::vector<int> y_test;
  for (auto r : in.test_rows) y_test.push_back(y(r, held_out) > 0.5);
  if (std::count(y_test.begin(), y_test.end(), 1) == 0 || std::count(y_test.begin(), y_test.end(), 0) == 0)
    throw std::invalid_argument("transfer: held-out label '" + in.vocabulary[held_out] + "' is single-class in the test split");

  TransferReport rep;
  rep.held_out = in.vocabulary[held_out];

  const Tensor ablated = drop_column(y, held_out);
  gnn_cfg.n_tasks = ablated.cols;
  rep.training_labels = ablated.cols;
  gnn::GnnModel model(gnn_cfg);
  gnn::train(model, in.graphs, ablated, in.train_rows, in.val_rows);

  auto preds = model.predict(in.graphs);
  Tensor emb(preds.size(), gnn_cfg.head_dims.back());
  for (std::size_t i = 0; i < preds.size(); ++i) std::copy(preds[i].embedding.begin(), preds[i].embedding.end(), emb.row_span(i).begin());

  auto rf_scores = [&](const Tensor& features) {
    auto forest = baselines::fit_random_forest(gnn::gather_rows(features, in.train_rows), column_of(y, held_out, in.train_rows), rf_cfg);
    auto p = baselines::rf_predict(forest, gnn::gather_rows(features, in.test_rows));
    return p.data;
  };
  rep.embedding_rf = score_column(rf_scores(emb), y_test, n_resamples, seed);
  rep.fingerprint_rf = score_column(rf_scores(*in.fingerprints), y_test, n_resamples, seed);

  std::optional<gnn::GnnModel> own;
  if (!full_model) {
    gnn_cfg.n_tasks = y.cols;
    own.emplace(gnn_cfg);
    gnn::train(*own, in.graphs, y, in.train_rows, in.val_rows);
    full_model = &*own;
  }
  Tensor logits = gnn::predict_logits(*full_model, in.graphs, in.test_rows);
  std::vector<double> held(logits.rows);
  for (std::size_t i = 0; i < logits.rows; ++i) held[i] = logits(i, held_out);
  rep.full_gnn = score_column(held, y_test, n_resamples, seed);
  return rep;
}

}  // namespace qsor::analysis
