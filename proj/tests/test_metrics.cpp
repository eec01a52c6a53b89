// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qsor/metrics.hpp"

using namespace qsor::metrics;

namespace {

// Definitional O(n^2) implementations.
std::optional<double> auroc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      den += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  if (den == 0) return std::nullopt;
  return num / den;
}

// Sweep every distinct score as a threshold (score >= t), from high to low.
std::optional<double> auprc_sweep(const std::vector<double>& s, const std::vector<int>& y) {
  double n_pos = 0;
  for (int v : y) n_pos += v;
  if (n_pos == 0) return std::nullopt;
  std::vector<double> th = s;
  std::sort(th.rbegin(), th.rend());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  double ap = 0, prev_r = 0;
  for (double t : th) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    }
    const double r = tp / n_pos;
    ap += (r - prev_r) * tp / (tp + fp);
    prev_r = r;
  }
  return ap;
}

double tau_b_pairs(const std::vector<double>& x, const std::vector<double>& y) {
  double c = 0, d = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double a = x[i] - x[j], b = y[i] - y[j];
      if (a == 0 && b == 0) continue;
      if (a == 0) tx += 1;
      else if (b == 0) ty += 1;
      else if ((a > 0) == (b > 0)) c += 1;
      else d += 1;
    }
  return (c - d) / std::sqrt((c + d + tx) * (c + d + ty));
}

double pearson_def(const std::vector<double>& x, const std::vector<double>& y) {
  // mean of products of z-scores, population form
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += (x[i] - mx) * (x[i] - mx) / n;
    sy += (y[i] - my) * (y[i] - my) / n;
  }
  double r = 0;
  for (std::size_t i = 0; i < x.size(); ++i) r += (x[i] - mx) / std::sqrt(sx) * (y[i] - my) / std::sqrt(sy) / n;
  return r;
}

}  // namespace

TEST(Auroc, Examples) {
  std::vector<double> s = {0.9, 0.8, 0.1};
  std::vector<int> y = {1, 1, 0}, inv = {0, 0, 1};
  EXPECT_DOUBLE_EQ(*auroc(s, y), 1.0);
  EXPECT_DOUBLE_EQ(*auroc(s, inv), 0.0);
  std::vector<double> flat(3, 0.4);
  EXPECT_DOUBLE_EQ(*auroc(flat, y), 0.5);
  std::vector<int> ones(3, 1);
  EXPECT_FALSE(auroc(s, ones).has_value());
}

TEST(Auroc, MonotoneTransformAndComplement) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<double> s(40), t(40), neg(40);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = n(rng);
    t[i] = std::exp(3 * s[i]) + 1;
    neg[i] = -s[i];
    y[i] = (i % 3 == 0);
  }
  EXPECT_DOUBLE_EQ(*auroc(s, y), *auroc(t, y));
  EXPECT_NEAR(*auroc(s, y) + *auroc(neg, y), 1.0, 1e-15);
}

TEST(Auprc, Examples) {
  std::vector<double> s = {0.9, 0.8, 0.1, 0.05};
  EXPECT_DOUBLE_EQ(*auprc(s, std::vector<int>{1, 1, 0, 0}), 1.0);
  // single positive ranked last among 4 distinct scores
  EXPECT_DOUBLE_EQ(*auprc(s, std::vector<int>{0, 0, 0, 1}), 0.25);
  std::vector<double> flat(5, 0.3);
  EXPECT_DOUBLE_EQ(*auprc(flat, std::vector<int>{1, 0, 1, 0, 0}), 0.4);
  EXPECT_FALSE(auprc(s, std::vector<int>(4, 0)).has_value());
}

TEST(Prf1, Examples) {
  std::vector<double> s = {0.9, 0.8, 0.7, 0.2, 0.1};
  auto perfect = prf1(s, std::vector<int>{1, 1, 1, 0, 0}, 0.5);
  EXPECT_EQ(perfect.precision, 1.0);
  EXPECT_EQ(perfect.recall, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  auto none = prf1(s, std::vector<int>{1, 1, 1, 0, 0}, 2.0);
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.recall, 0.0);
  EXPECT_EQ(none.f1, 0.0);
  // TP=2 FP=1 FN=1
  auto mixed = prf1(s, std::vector<int>{1, 0, 1, 1, 0}, 0.5);
  EXPECT_DOUBLE_EQ(mixed.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(mixed.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(mixed.f1, 2.0 / 3.0);
}

TEST(Thresholds, Examples) {
  std::vector<double> s = {0.1, 0.2, 0.7, 0.9};
  EXPECT_DOUBLE_EQ(optimize_threshold(s, std::vector<int>{0, 0, 1, 1}), 0.45);
  EXPECT_LT(optimize_threshold(s, std::vector<int>{1, 1, 1, 1}), 0.1);
  EXPECT_EQ(optimize_threshold(s, std::vector<int>{0, 0, 0, 0}), 0.5);
}

TEST(Thresholds, MatchesExhaustiveSweep) {
  std::vector<double> s = {0.15, 0.3, 0.42, 0.55, 0.61, 0.8};
  std::vector<int> y = {0, 1, 0, 1, 0, 1};
  // every cut position: predict the top k
  double best_f1 = -1, best_t = 0;
  for (int k = 6; k >= 1; --k) {
    const double t = k == 6 ? s[0] - 1 : 0.5 * (s[5 - k] + s[6 - k]);
    const double f = prf1(s, y, t).f1;
    if (f > best_f1) {
      best_f1 = f;
      best_t = t;
    }
  }
  const double got = optimize_threshold(s, y);
  EXPECT_DOUBLE_EQ(got, best_t);
  EXPECT_GE(prf1(s, y, got).f1, prf1(s, y, 0.5).f1);
}

TEST(Correlation, Examples) {
  std::vector<double> x = {1, 2, 3, 4, 5}, neg = {-1, -2, -3, -4, -5};
  EXPECT_NEAR(pearson_r(x, x), 1.0, 1e-15);
  EXPECT_NEAR(kendall_tau(x, x), 1.0, 1e-15);
  EXPECT_NEAR(r_squared(x, x), 1.0, 1e-15);
  EXPECT_NEAR(pearson_r(x, neg), -1.0, 1e-15);
  EXPECT_NEAR(kendall_tau(x, neg), -1.0, 1e-15);
  std::vector<double> c(5, 2.0);
  EXPECT_THROW(pearson_r(x, c), std::invalid_argument);
  EXPECT_THROW(kendall_tau(c, x), std::invalid_argument);
}

TEST(Oracles, TwoHundredRandomInstances) {
  std::mt19937_64 rng(2026);
  std::uniform_int_distribution<int> len(2, 30), coarse(0, 5);
  std::normal_distribution<double> n;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t m = static_cast<std::size_t>(len(rng));
    std::vector<double> s(m), x(m), y(m);
    std::vector<int> lab(m);
    for (std::size_t i = 0; i < m; ++i) {
      // coarse values create ties
      s[i] = inst % 2 ? coarse(rng) / 5.0 : n(rng);
      x[i] = inst % 3 ? coarse(rng) : n(rng);
      y[i] = inst % 4 ? coarse(rng) : n(rng);
      lab[i] = coarse(rng) < 2;
    }
    auto a = auroc(s, lab), b = auroc_pairs(s, lab);
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) {
      EXPECT_NEAR(*a, *b, 1e-10);
    }
    auto p = auprc(s, lab), q = auprc_sweep(s, lab);
    ASSERT_EQ(p.has_value(), q.has_value());
    if (p) {
      EXPECT_NEAR(*p, *q, 1e-10);
    }

    const double t = 0.4;
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const bool pred = s[i] >= t;
      tp += pred && lab[i];
      fp += pred && !lab[i];
      fn += !pred && lab[i];
    }
    const double f1_def = tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    EXPECT_NEAR(prf1(s, lab, t).f1, f1_def, 1e-10);

    bool xvar = std::any_of(x.begin(), x.end(), [&](double v) { return v != x[0]; });
    bool yvar = std::any_of(y.begin(), y.end(), [&](double v) { return v != y[0]; });
    if (xvar && yvar) {
      EXPECT_NEAR(pearson_r(x, y), pearson_def(x, y), 1e-10);
      EXPECT_NEAR(kendall_tau(x, y), tau_b_pairs(x, y), 1e-10);
    }
    if (yvar) {
      double res = 0, tot = 0, my = 0;
      for (double v : y) my += v / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        res += (y[i] - x[i]) * (y[i] - x[i]);
        tot += (y[i] - my) * (y[i] - my);
      }
      EXPECT_NEAR(r_squared(x, y), 1 - res / tot, 1e-10);
    }
  }
}

TEST(Bootstrap, ConstantMetricAndDeterminism) {
  auto constant = bootstrap_ci(50, [](std::span<const std::size_t>) { return std::optional<double>(0.7); }, 200, 3);
  EXPECT_EQ(constant.lo, constant.hi);
  EXPECT_EQ(constant.lo, 0.7);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<double> s(100);
  std::vector<int> y(100);
  for (std::size_t i = 0; i < 100; ++i) {
    y[i] = i % 4 == 0;
    s[i] = n(rng) + y[i];
  }
  auto a = bootstrap_ci(auroc, s, y, 1000, 11);
  auto b = bootstrap_ci(auroc, s, y, 1000, 11);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  EXPECT_LT(a.lo, *auroc(s, y));
  EXPECT_GT(a.hi, *auroc(s, y));
  EXPECT_EQ(a.resamples + a.skipped, 1000u);
  EXPECT_THROW(bootstrap_ci(10, [](std::span<const std::size_t>) { return std::optional<double>(); }, 5, 1),
               std::runtime_error);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 2.5), 1.1);
}

TEST(Report, UnweightedMeansSkipUndefinedLabels) {
  // 4 rows x 2 labels; label 1 has no positives
  std::vector<double> scores = {0.9, 0.1, 0.8, 0.2, 0.3, 0.3, 0.1, 0.4};
  std::vector<int> labels = {1, 0, 1, 0, 0, 0, 0, 0};
  std::vector<std::string> names = {"a", "b"};
  auto rep = evaluate({scores, labels, 2}, names, {}, 100, 1);
  ASSERT_TRUE(rep.mean_auroc.has_value());
  EXPECT_DOUBLE_EQ(*rep.mean_auroc, 1.0);
  EXPECT_EQ(rep.undefined_labels, 1u);
  EXPECT_FALSE(rep.labels[1].auroc.has_value());
}
