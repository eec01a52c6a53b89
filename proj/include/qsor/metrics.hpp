// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsor/hash.hpp"

namespace qsor::metrics {

namespace detail {

inline void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": length mismatch");
}

// Indices sorted by descending score, ties by index.
inline std::vector<std::size_t> order_desc(std::span<const double> s) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return idx;
}

}  // namespace detail

/// Mann-Whitney AUROC with midranks. nullopt when only one class is present.
inline std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_lengths(scores.size(), labels.size(), "auroc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0, n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]]) {
        pos_rank_sum += midrank;
        n_pos += 1;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

/// Average precision: sum over distinct thresholds of (recall step) x precision.
/// nullopt without positives.
inline std::optional<double> auprc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_lengths(scores.size(), labels.size(), "auprc");
  const double n_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](int v) { return v != 0; }));
  if (n_pos == 0) return std::nullopt;
  auto idx = detail::order_desc(scores);
  double tp = 0, fp = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    const double recall = tp / n_pos;
    ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct PrecisionRecallF1 {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// Predictions are score >= threshold. Empty predictions have precision 0.
inline PrecisionRecallF1 prf1(std::span<const double> scores, std::span<const int> labels, double threshold) {
  detail::check_lengths(scores.size(), labels.size(), "prf1");
  if (!std::isfinite(threshold)) throw std::invalid_argument("prf1: threshold must be finite");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i]) tp += 1;
    else if (pred) fp += 1;
    else if (labels[i]) fn += 1;
  }
  PrecisionRecallF1 r;
  r.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

/// F1-maximizing threshold over a point below the minimum score and the
/// midpoints between consecutive distinct scores; ties go to the lower
/// threshold. Labels without positives get 0.5.
inline double optimize_threshold(std::span<const double> scores, std::span<const int> labels) {
  detail::check_lengths(scores.size(), labels.size(), "optimize_threshold");
  if (scores.empty() || std::none_of(labels.begin(), labels.end(), [](int v) { return v != 0; })) return 0.5;
  std::vector<double> distinct(scores.begin(), scores.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<double> candidates{distinct.front() - 1.0};
  for (std::size_t i = 0; i + 1 < distinct.size(); ++i) candidates.push_back(0.5 * (distinct[i] + distinct[i + 1]));
  double best = candidates.front(), best_f1 = -1;
  for (double c : candidates) {
    const double f = prf1(scores, labels, c).f1;
    if (f > best_f1) {
      best_f1 = f;
      best = c;
    }
  }
  return best;
}

inline double mean(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("mean of empty range");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double pearson_r(std::span<const double> x, std::span<const double> y) {
  detail::check_lengths(x.size(), y.size(), "pearson_r");
  if (x.size() < 2) throw std::invalid_argument("pearson_r needs at least 2 points");
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw std::invalid_argument("pearson_r: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1 - SS_res / SS_tot.
inline double r_squared(std::span<const double> pred, std::span<const double> actual) {
  detail::check_lengths(pred.size(), actual.size(), "r_squared");
  if (pred.size() < 2) throw std::invalid_argument("r_squared needs at least 2 points");
  const double m = mean(actual);
  double res = 0, tot = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    res += (actual[i] - pred[i]) * (actual[i] - pred[i]);
    tot += (actual[i] - m) * (actual[i] - m);
  }
  if (tot == 0) throw std::invalid_argument("r_squared: zero variance in targets");
  return 1.0 - res / tot;
}

namespace detail {

// Counts pairs i<j with v[i] > v[j] (merge sort); sorts v.
inline std::uint64_t count_inversions(std::vector<double>& v) {
  std::vector<double> buf(v.size());
  std::uint64_t swaps = 0;
  for (std::size_t width = 1; width < v.size(); width *= 2) {
    for (std::size_t lo = 0; lo < v.size(); lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, v.size()), hi = std::min(lo + 2 * width, v.size());
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[j] < v[i]) {
          swaps += mid - i;
          buf[k++] = v[j++];
        } else {
          buf[k++] = v[i++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
    }
    std::swap(v, buf);
  }
  return swaps;
}

// Sum over runs of equal values of t(t-1)/2; `v` must be sorted.
inline std::uint64_t tied_pairs(std::span<const double> v) {
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    const std::uint64_t t = j - i;
    total += t * (t - 1) / 2;
    i = j;
  }
  return total;
}

}  // namespace detail

/// Kendall tau-b in O(n log n) (Knight's algorithm).
inline double kendall_tau(std::span<const double> x, std::span<const double> y) {
  detail::check_lengths(x.size(), y.size(), "kendall_tau");
  const std::size_t n = x.size();
  if (n < 2) throw std::invalid_argument("kendall_tau needs at least 2 points");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return x[a] != x[b] ? x[a] < x[b] : y[a] < y[b];
  });
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[idx[i]];
    ys[i] = y[idx[i]];
  }
  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t n1 = detail::tied_pairs(xs);
  std::uint64_t n3 = 0;  // pairs tied in both
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && xs[j] == xs[i] && ys[j] == ys[i]) ++j;
    const std::uint64_t t = j - i;
    n3 += t * (t - 1) / 2;
    i = j;
  }
  const std::uint64_t swaps = detail::count_inversions(ys);
  const std::uint64_t n2 = detail::tied_pairs(ys);
  if (n0 == n1 || n0 == n2) throw std::invalid_argument("kendall_tau: zero variance");
  const double numer = static_cast<double>(n0) - static_cast<double>(n1) - static_cast<double>(n2) +
                       static_cast<double>(n3) - 2.0 * static_cast<double>(swaps);
  return numer / std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
}

/// Percentile with linear interpolation between order statistics; q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct BootstrapInterval {
  double lo = 0;
  double hi = 0;
  std::size_t resamples = 0;  ///< resamples with a defined metric
  std::size_t skipped = 0;    ///< resamples where the metric was undefined
};

/// Row-resampling bootstrap. `metric` sees the resampled row indices and
/// returns nullopt when undefined on that resample.
inline BootstrapInterval bootstrap_ci(std::size_t n_rows,
                                      const std::function<std::optional<double>(std::span<const std::size_t>)>& metric,
                                      std::size_t n_resamples = 1000, std::uint64_t seed = 0, double level = 95.0) {
  if (n_resamples < 1) throw std::invalid_argument("bootstrap needs at least one resample");
  if (n_rows == 0) throw std::invalid_argument("bootstrap over an empty set");
  std::vector<double> values;
  std::vector<std::size_t> rows(n_rows);
  BootstrapInterval out;
  for (std::size_t b = 0; b < n_resamples; ++b) {
    for (std::size_t i = 0; i < n_rows; ++i) {
      rows[i] = std::min(n_rows - 1, static_cast<std::size_t>(counter_uniform({seed, b, i}) * static_cast<double>(n_rows)));
    }
    if (auto v = metric(rows)) values.push_back(*v);
    else ++out.skipped;
  }
  if (values.empty()) throw std::runtime_error("bootstrap: metric undefined on every resample");
  const double tail = (100.0 - level) / 2;
  out.lo = percentile(values, tail);
  out.hi = percentile(values, 100.0 - tail);
  out.resamples = values.size();
  return out;
}

/// Convenience form for a single score/label column.
inline BootstrapInterval bootstrap_ci(
    const std::function<std::optional<double>(std::span<const double>, std::span<const int>)>& metric,
    std::span<const double> scores, std::span<const int> labels, std::size_t n_resamples = 1000, std::uint64_t seed = 0) {
  detail::check_lengths(scores.size(), labels.size(), "bootstrap_ci");
  std::vector<double> s;
  std::vector<int> l;
  return bootstrap_ci(
      scores.size(),
      [&](std::span<const std::size_t> rows) {
        s.clear();
        l.clear();
        for (auto r : rows) {
          s.push_back(scores[r]);
          l.push_back(labels[r]);
        }
        return metric(s, l);
      },
      n_resamples, seed);
}

// ---------------------------------------------------------------------------
// Multi-label helpers over row-major n x T matrices.

struct LabelMatrixView {
  std::span<const double> scores;  // n x T
  std::span<const int> labels;     // n x T
  std::size_t n_tasks;

  std::size_t rows() const { return n_tasks == 0 ? 0 : scores.size() / n_tasks; }
};

inline void column(const LabelMatrixView& m, std::size_t task, std::span<const std::size_t> rows, std::vector<double>& s,
                   std::vector<int>& l) {
  s.clear();
  l.clear();
  for (auto r : rows) {
    s.push_back(m.scores[r * m.n_tasks + task]);
    l.push_back(m.labels[r * m.n_tasks + task]);
  }
}

/// Unweighted mean AUROC over labels defined on the given rows.
inline std::optional<double> mean_auroc(const LabelMatrixView& m, std::span<const std::size_t> rows) {
  std::vector<double> s;
  std::vector<int> l;
  double total = 0;
  std::size_t defined = 0;
  for (std::size_t t = 0; t < m.n_tasks; ++t) {
    column(m, t, rows, s, l);
    if (auto a = auroc(s, l)) {
      total += *a;
      ++defined;
    }
  }
  if (defined == 0) return std::nullopt;
  return total / static_cast<double>(defined);
}

inline std::optional<double> mean_auroc(const LabelMatrixView& m) {
  std::vector<std::size_t> rows(m.rows());
  std::iota(rows.begin(), rows.end(), 0);
  return mean_auroc(m, rows);
}

struct LabelMetrics {
  std::string label;
  std::optional<double> auroc;
  std::optional<double> auprc;
  double threshold = 0.5;
  PrecisionRecallF1 prf;
};

struct MetricReport {
  std::vector<LabelMetrics> labels;
  std::optional<double> mean_auroc;
  std::optional<double> mean_auprc;
  double mean_precision = 0;
  double mean_recall = 0;
  double mean_f1 = 0;
  std::optional<BootstrapInterval> auroc_ci;
  std::size_t undefined_labels = 0;  ///< labels excluded from AUROC means
  std::size_t n_resamples = 0;
  std::uint64_t seed = 0;
};

/// Per-label report; thresholds default to 0.5 when `thresholds` is empty.
inline MetricReport evaluate(const LabelMatrixView& m, std::span<const std::string> names,
                             std::span<const double> thresholds = {}, std::size_t n_resamples = 1000,
                             std::uint64_t seed = 0) {
  if (names.size() != m.n_tasks) throw std::invalid_argument("evaluate: label name count mismatch");
  if (!thresholds.empty() && thresholds.size() != m.n_tasks) throw std::invalid_argument("evaluate: threshold count mismatch");
  MetricReport rep;
  rep.n_resamples = n_resamples;
  rep.seed = seed;
  std::vector<std::size_t> all(m.rows());
  std::iota(all.begin(), all.end(), 0);
  std::vector<double> s;
  std::vector<int> l;
  double sum_auroc = 0, sum_auprc = 0;
  std::size_t n_auroc = 0, n_auprc = 0;
  for (std::size_t t = 0; t < m.n_tasks; ++t) {
    column(m, t, all, s, l);
    LabelMetrics lm{names[t], auroc(s, l), auprc(s, l), thresholds.empty() ? 0.5 : thresholds[t], {}};
    lm.prf = prf1(s, l, lm.threshold);
    if (lm.auroc) {
      sum_auroc += *lm.auroc;
      ++n_auroc;
    } else {
      ++rep.undefined_labels;
    }
    if (lm.auprc) {
      sum_auprc += *lm.auprc;
      ++n_auprc;
    }
    rep.mean_precision += lm.prf.precision / static_cast<double>(m.n_tasks);
    rep.mean_recall += lm.prf.recall / static_cast<double>(m.n_tasks);
    rep.mean_f1 += lm.prf.f1 / static_cast<double>(m.n_tasks);
    rep.labels.push_back(std::move(lm));
  }
  if (n_auroc) rep.mean_auroc = sum_auroc / static_cast<double>(n_auroc);
  if (n_auprc) rep.mean_auprc = sum_auprc / static_cast<double>(n_auprc);
  if (n_resamples > 0 && n_auroc > 0 && !all.empty()) {
    try {
      rep.auroc_ci = bootstrap_ci(all.size(), [&](std::span<const std::size_t> rows) { return mean_auroc(m, rows); },
                                  n_resamples, seed);
    } catch (const std::runtime_error&) {
      rep.auroc_ci.reset();
    }
  }
  return rep;
}

}  // namespace qsor::metrics
