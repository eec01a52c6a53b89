// SPDX-License-Identifier: Apache-2.0
#pragma once

// Fingerprint/embedding baselines: one-vs-rest random forests of CART trees
// and distance-weighted k-nearest neighbours.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsor/fingerprint.hpp"
#include "qsor/hash.hpp"
#include "qsor/tensor.hpp"

namespace qsor::baselines {

using nn::Tensor;

enum class TaskMode { classify, regress };

struct ForestConfig {
  std::size_t n_trees = 500;
  std::optional<std::size_t> max_depth = std::nullopt;
  std::size_t min_leaf = 1;
  double feature_fraction = 0.0;  // 0 selects sqrt(F) features per split
  bool bootstrap = true;
  std::uint64_t seed = 0;
  TaskMode mode = TaskMode::classify;

  void validate() const {
    if (n_trees < 1) throw std::invalid_argument("forest needs at least one tree");
    if (feature_fraction < 0.0 || feature_fraction > 1.0) throw std::invalid_argument("feature fraction must be in (0, 1]");
    if (min_leaf < 1) throw std::invalid_argument("min_leaf must be >= 1");
  }

  std::size_t features_per_split(std::size_t n_features) const {
    const double m = feature_fraction == 0.0 ? std::sqrt(static_cast<double>(n_features))
                                             : feature_fraction * static_cast<double>(n_features);
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::round(m)), 1, n_features);
  }
};

/// Flat node arrays; feature < 0 marks a leaf.
struct Tree {
  std::vector<int> feature;
  std::vector<double> threshold;
  std::vector<int> left;
  std::vector<int> right;
  std::vector<double> value;

  std::size_t size() const { return feature.size(); }

  double predict(std::span<const double> x) const {
    std::size_t i = 0;
    while (feature[i] >= 0) i = static_cast<std::size_t>(x[static_cast<std::size_t>(feature[i])] <= threshold[i] ? left[i] : right[i]);
    return value[i];
  }

  std::size_t depth() const {
    std::vector<std::size_t> d(size(), 0);
    std::size_t best = 0;
    for (std::size_t i = 0; i < size(); ++i) {
      best = std::max(best, d[i]);
      if (feature[i] >= 0) d[static_cast<std::size_t>(left[i])] = d[static_cast<std::size_t>(right[i])] = d[i] + 1;
    }
    return best;
  }
};

struct Forest {
  ForestConfig config;
  std::size_t n_features = 0;
  std::vector<std::vector<Tree>> trees;  // [label][tree]

  std::size_t n_labels() const { return trees.size(); }
};

namespace detail {

// Sum of squared deviations; for 0/1 targets this is n * gini / 2, so one
// criterion serves both classification (gini) and regression (variance).
inline double sse(double sum, double sumsq, double n) { return n > 0 ? sumsq - sum * sum / n : 0.0; }

struct Builder {
  const Tensor& x;
  std::span<const double> y;  // one target column for the sampled rows' source
  const ForestConfig& cfg;
  std::uint64_t seed;
  std::size_t mtry;
  Tree tree;
  std::vector<std::pair<double, double>> scratch;

  int leaf(std::span<const std::size_t> rows) {
    double s = 0;
    for (auto r : rows) s += y[r];
    tree.feature.push_back(-1);
    tree.threshold.push_back(0.0);
    tree.left.push_back(-1);
    tree.right.push_back(-1);
    tree.value.push_back(s / static_cast<double>(rows.size()));
    return static_cast<int>(tree.size() - 1);
  }

  int grow(std::vector<std::size_t>& rows, std::size_t depth) {
    const auto n = static_cast<double>(rows.size());
    double sum = 0, sumsq = 0;
    for (auto r : rows) {
      sum += y[r];
      sumsq += y[r] * y[r];
    }
    const double parent = sse(sum, sumsq, n);
    if (parent <= 1e-12 || rows.size() < 2 * cfg.min_leaf || (cfg.max_depth && depth >= *cfg.max_depth)) return leaf(rows);

    // Features drawn without replacement; constant ones do not count towards mtry.
    const std::size_t node_key = tree.size();
    std::vector<std::size_t> perm(x.cols);
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t evaluated = 0;
    int best_feature = -1;
    double best_threshold = 0, best_gain = 1e-12;
    for (std::size_t i = 0; i < x.cols && evaluated < mtry; ++i) {
      const std::size_t span = x.cols - i;
      auto j = i + std::min(span - 1, static_cast<std::size_t>(counter_uniform({seed, node_key, i}) * static_cast<double>(span)));
      std::swap(perm[i], perm[j]);
      const std::size_t f = perm[i];
      scratch.clear();
      for (auto r : rows) scratch.emplace_back(x(r, f), y[r]);
      auto [lo, hi] = std::minmax_element(scratch.begin(), scratch.end());
      if (lo->first == hi->first) continue;
      ++evaluated;
      std::sort(scratch.begin(), scratch.end());
      double ls = 0, lss = 0;
      for (std::size_t k = 0; k + 1 < scratch.size(); ++k) {
        ls += scratch[k].second;
        lss += scratch[k].second * scratch[k].second;
        if (scratch[k].first == scratch[k + 1].first) continue;
        const std::size_t nl = k + 1, nr = scratch.size() - nl;
        if (nl < cfg.min_leaf || nr < cfg.min_leaf) continue;
        const double gain = parent - sse(ls, lss, static_cast<double>(nl)) -
                            sse(sum - ls, sumsq - lss, static_cast<double>(nr));
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = static_cast<int>(f);
          best_threshold = 0.5 * (scratch[k].first + scratch[k + 1].first);
        }
      }
    }
    if (best_feature < 0) return leaf(rows);

    std::vector<std::size_t> lrows, rrows;
    for (auto r : rows) (x(r, static_cast<std::size_t>(best_feature)) <= best_threshold ? lrows : rrows).push_back(r);
    const int id = leaf(rows);
    rows.clear();
    rows.shrink_to_fit();
    tree.feature[static_cast<std::size_t>(id)] = best_feature;
    tree.threshold[static_cast<std::size_t>(id)] = best_threshold;
    const int l = grow(lrows, depth + 1);
    const int r = grow(rrows, depth + 1);
    tree.left[static_cast<std::size_t>(id)] = l;
    tree.right[static_cast<std::size_t>(id)] = r;
    return id;
  }
};

}  // namespace detail

inline Tree fit_tree(const Tensor& x, std::span<const double> y, const ForestConfig& cfg, std::uint64_t seed) {
  std::vector<std::size_t> rows(x.rows);
  if (cfg.bootstrap) {
    for (std::size_t i = 0; i < x.rows; ++i)
      rows[i] = std::min(x.rows - 1, static_cast<std::size_t>(counter_uniform({seed, 0xb007, i}) * static_cast<double>(x.rows)));
  } else {
    std::iota(rows.begin(), rows.end(), 0);
  }
  detail::Builder b{x, y, cfg, seed, cfg.features_per_split(x.cols), {}, {}};
  b.grow(rows, 0);
  return std::move(b.tree);
}

/// One ensemble per target column of `y` (n x T); tree seeds come from (seed, label, tree).
inline Forest fit_random_forest(const Tensor& x, const Tensor& y, const ForestConfig& cfg) {
  cfg.validate();
  if (x.rows == 0 || x.cols == 0) throw std::invalid_argument("random forest: empty data");
  if (x.rows != y.rows) throw std::invalid_argument("random forest: feature and label row counts differ");
  if (!x.all_finite() || !y.all_finite()) throw std::invalid_argument("random forest: non-finite input");
  Forest forest{cfg, x.cols, std::vector<std::vector<Tree>>(y.cols)};
  std::vector<double> column(y.rows);
  for (std::size_t l = 0; l < y.cols; ++l) {
    for (std::size_t r = 0; r < y.rows; ++r) column[r] = y(r, l);
    forest.trees[l].reserve(cfg.n_trees);
    for (std::size_t t = 0; t < cfg.n_trees; ++t) forest.trees[l].push_back(fit_tree(x, column, cfg, derive_seed(cfg.seed, l, t)));
  }
  return forest;
}

inline std::vector<double> rf_predict(const Forest& forest, std::span<const double> x) {
  if (x.size() != forest.n_features) throw std::invalid_argument("rf_predict: feature length mismatch");
  std::vector<double> out(forest.n_labels(), 0.0);
  for (std::size_t l = 0; l < forest.n_labels(); ++l) {
    double s = 0;
    for (const auto& t : forest.trees[l]) s += t.predict(x);
    out[l] = s / static_cast<double>(forest.trees[l].size());
  }
  return out;
}

inline Tensor rf_predict(const Forest& forest, const Tensor& x) {
  Tensor out(x.rows, forest.n_labels());
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto p = rf_predict(forest, x.row_span(r));
    std::copy(p.begin(), p.end(), out.row_span(r).begin());
  }
  return out;
}

inline constexpr int kForestFormatVersion = 1;

inline nlohmann::json forest_json(const Forest& f) {
  nlohmann::json cfg = {{"n_trees", f.config.n_trees},
                        {"min_leaf", f.config.min_leaf},
                        {"feature_fraction", f.config.feature_fraction},
                        {"bootstrap", f.config.bootstrap},
                        {"seed", f.config.seed},
                        {"mode", f.config.mode == TaskMode::classify ? "classify" : "regress"}};
  cfg["max_depth"] = f.config.max_depth ? nlohmann::json(*f.config.max_depth) : nlohmann::json(nullptr);
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& ts : f.trees) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : ts)
      arr.push_back({{"feature", t.feature},
                     {"threshold", t.threshold},
                     {"left", t.left},
                     {"right", t.right},
                     {"value", t.value}});
    labels.push_back(std::move(arr));
  }
  return {{"format_version", kForestFormatVersion}, {"model", "rf"}, {"config", cfg}, {"n_features", f.n_features},
          {"trees", labels}};
}

inline Forest forest_from_json(const nlohmann::json& j) {
  if (j.at("format_version").get<int>() != kForestFormatVersion || j.at("model") != "rf")
    throw std::invalid_argument("not a version-1 random forest checkpoint");
  Forest f;
  const auto& c = j.at("config");
  f.config.n_trees = c.at("n_trees");
  f.config.min_leaf = c.at("min_leaf");
  f.config.feature_fraction = c.at("feature_fraction");
  f.config.bootstrap = c.at("bootstrap");
  f.config.seed = c.at("seed");
  f.config.mode = c.at("mode") == "regress" ? TaskMode::regress : TaskMode::classify;
  if (!c.at("max_depth").is_null()) f.config.max_depth = c.at("max_depth").get<std::size_t>();
  f.n_features = j.at("n_features");
  for (const auto& ts : j.at("trees")) {
    auto& out = f.trees.emplace_back();
    for (const auto& t : ts) {
      Tree tree{t.at("feature"), t.at("threshold"), t.at("left"), t.at("right"), t.at("value")};
      for (std::size_t i = 0; i < tree.size(); ++i) {
        if (tree.feature[i] >= static_cast<int>(f.n_features)) throw std::invalid_argument("forest: feature index out of range");
        if (tree.feature[i] >= 0 && (tree.left[i] <= static_cast<int>(i) || tree.right[i] <= static_cast<int>(i) ||
                                     tree.right[i] >= static_cast<int>(tree.size()) || tree.left[i] >= static_cast<int>(tree.size())))
          throw std::invalid_argument("forest: malformed tree");
      }
      out.push_back(std::move(tree));
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// k-nearest neighbours

enum class Metric { jaccard, cosine, euclidean };

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::jaccard: return "jaccard";
    case Metric::cosine: return "cosine";
    case Metric::euclidean: return "euclidean";
  }
  return "?";
}

inline Metric metric_from_string(const std::string& s) {
  if (s == "jaccard") return Metric::jaccard;
  if (s == "cosine") return Metric::cosine;
  if (s == "euclidean") return Metric::euclidean;
  throw std::invalid_argument("unknown metric: " + s);
}

inline double distance(Metric m, std::span<const double> a, std::span<const double> b) {
  switch (m) {
    case Metric::jaccard: return 1.0 - fp::tanimoto<double>(a, b);
    case Metric::cosine: return fp::cosine_distance(a, b);
    case Metric::euclidean: return fp::euclidean_distance(a, b);
  }
  throw std::logic_error("bad metric");
}

inline constexpr double kDistanceFloor = 1e-9;

/// Indices of the k nearest rows, ties broken by lower index.
inline std::vector<std::pair<std::size_t, double>> nearest_rows(const Tensor& x, std::span<const double> query, std::size_t k,
                                                                Metric metric, std::optional<std::size_t> exclude = {}) {
  std::vector<std::pair<std::size_t, double>> d;
  d.reserve(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r)
    if (r != exclude) d.emplace_back(r, distance(metric, x.row_span(r), query));
  k = std::min(k, d.size());
  auto less = [](const auto& a, const auto& b) { return a.second < b.second || (a.second == b.second && a.first < b.first); };
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end(), less);
  d.resize(k);
  return d;
}

/// Distance-weighted label average over the k nearest training rows, w = 1/(d + 1e-9).
inline std::vector<double> knn_predict(const Tensor& train_x, const Tensor& train_y, std::span<const double> query, std::size_t k,
                                       Metric metric) {
  if (train_x.rows == 0) throw std::invalid_argument("knn: empty training set");
  if (train_x.rows != train_y.rows) throw std::invalid_argument("knn: feature and label row counts differ");
  if (k == 0 || k > train_x.rows) throw std::invalid_argument("knn: k must be in [1, training size]");
  std::vector<double> out(train_y.cols, 0.0);
  double wsum = 0;
  for (auto [r, d] : nearest_rows(train_x, query, k, metric)) {
    const double w = 1.0 / (d + kDistanceFloor);
    wsum += w;
    for (std::size_t l = 0; l < train_y.cols; ++l) out[l] += w * train_y(r, l);
  }
  for (auto& v : out) v /= wsum;
  return out;
}

inline Tensor knn_predict(const Tensor& train_x, const Tensor& train_y, const Tensor& query, std::size_t k, Metric metric) {
  Tensor out(query.rows, train_y.cols);
  for (std::size_t r = 0; r < query.rows; ++r) {
    auto p = knn_predict(train_x, train_y, query.row_span(r), k, metric);
    std::copy(p.begin(), p.end(), out.row_span(r).begin());
  }
  return out;
}

}  // namespace qsor::baselines
