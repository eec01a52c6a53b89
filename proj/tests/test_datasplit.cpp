// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <set>

#include "qsor/datasplit.hpp"

using namespace qsor;
using split::LabelMatrix;

namespace {

// Eight molecules, three labels.
const std::vector<int> kToy = {
    1, 1, 0,  //
    1, 0, 0,  //
    1, 1, 1,  //
    0, 1, 1,  //
    0, 1, 0,  //
    1, 0, 1,  //
    0, 0, 1,  //
    1, 1, 0,  //
};

double exhaustive_optimum(const LabelMatrix& y, const std::vector<double>& ratios) {
  const auto sizes = split::target_sizes(y.n_rows, ratios);
  split::SplitAssignment a{std::vector<std::size_t>(y.n_rows), ratios, 0};
  std::vector<std::size_t> left = sizes;
  double best = 1e9;
  std::function<void(std::size_t)> rec = [&](std::size_t r) {
    if (r == y.n_rows) {
      best = std::min(best, split::deviation(y, a, 2));
      return;
    }
    for (std::size_t j = 0; j < left.size(); ++j) {
      if (left[j] == 0) continue;
      --left[j];
      a.split[r] = j;
      rec(r + 1);
      ++left[j];
    }
  };
  rec(0);
  return best;
}

std::vector<int> random_labels(std::size_t n, std::size_t t, std::uint64_t seed) {
  std::vector<int> y(n * t);
  for (std::size_t l = 0; l < t; ++l) {
    const double p = 0.05 + 0.4 * counter_uniform({seed, 1000 + l});
    for (std::size_t r = 0; r < n; ++r) y[r * t + l] = counter_uniform({seed, r, l}) < p;
  }
  return y;
}

void expect_partition(const split::SplitAssignment& a, std::size_t n, std::size_t k) {
  ASSERT_EQ(a.split.size(), n);
  for (auto s : a.split) EXPECT_LT(s, k);
  const auto sizes = split::target_sizes(n, a.ratios);
  for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(a.members(j).size(), sizes[j]);
}

}  // namespace

TEST(TargetSizes, LargestRemainder) {
  std::vector<double> r = {0.8, 0.1, 0.1};
  EXPECT_EQ(split::target_sizes(10, r), (std::vector<std::size_t>{8, 1, 1}));
  EXPECT_EQ(split::target_sizes(11, r), (std::vector<std::size_t>{9, 1, 1}));
  std::vector<double> thirds = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_EQ(split::target_sizes(7, thirds), (std::vector<std::size_t>{3, 2, 2}));
}

TEST(Stratify, SingleLabelTenPositives) {
  std::vector<int> y(20, 0);
  for (int i = 0; i < 10; ++i) y[i * 2] = 1;
  std::vector<double> r = {0.8, 0.2};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto a = split::iterative_stratify({y, 20, 1}, r, 2, seed);
    expect_partition(a, 20, 2);
    int pos_train = 0;
    for (std::size_t i = 0; i < 20; ++i) pos_train += y[i] && a.split[i] == 0;
    EXPECT_EQ(pos_train, 8);
  }
}

TEST(Stratify, IdenticalLabelSetsIsSizeProportional) {
  std::vector<int> y(30 * 2, 1);
  std::vector<double> r = {0.5, 0.3, 0.2};
  auto a = split::iterative_stratify({y, 30, 2}, r, 2, 3);
  expect_partition(a, 30, 3);
  auto b = split::iterative_stratify({y, 30, 2}, r, 2, 4);
  EXPECT_NE(a.split, b.split);
}

TEST(Stratify, LabelFreeExamplesFillCapacity) {
  std::vector<int> y(12, 0);
  y[0] = y[1] = 1;
  std::vector<double> r = {0.5, 0.5};
  auto a = split::iterative_stratify({y, 12, 1}, r, 1, 0);
  expect_partition(a, 12, 2);
  EXPECT_NE(a.split[0], a.split[1]);
}

TEST(Stratify, ToyInstanceMatchesExhaustiveOptimum) {
  LabelMatrix y{kToy, 8, 3};
  for (auto ratios : {std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.25, 0.25}}) {
    const double best = exhaustive_optimum(y, ratios);
    auto a = split::iterative_stratify(y, ratios, 2, 0);
    expect_partition(a, 8, ratios.size());
    EXPECT_NEAR(split::deviation(y, a, 2), best, 1e-12) << "k=" << ratios.size();
  }
}

TEST(Stratify, BeatsSeedMatchedRandomSplit) {
  std::vector<double> r = {0.8, 0.1, 0.1};
  int worse = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t n = 60 + seed % 5 * 20, t = 4 + seed % 6;
    auto y = random_labels(n, t, seed);
    LabelMatrix m{y, n, t};
    auto a = split::iterative_stratify(m, r, 2, seed);
    expect_partition(a, n, 3);
    auto u = split::random_split(n, r, seed);
    worse += split::deviation(m, a, 2) > split::deviation(m, u, 2) + 1e-12;
  }
  EXPECT_EQ(worse, 0);
}

TEST(Stratify, Deterministic) {
  auto y = random_labels(50, 5, 9);
  std::vector<double> r = {0.8, 0.1, 0.1};
  auto a = split::iterative_stratify({y, 50, 5}, r, 2, 11);
  auto b = split::iterative_stratify({y, 50, 5}, r, 2, 11);
  EXPECT_EQ(a.split, b.split);
}

TEST(Stratify, RejectsBadInput) {
  std::vector<int> y(4, 0);
  std::vector<double> bad = {0.5, 0.4};
  EXPECT_THROW(split::iterative_stratify({y, 4, 1}, bad, 2, 0), std::invalid_argument);
  std::vector<double> ok = {0.5, 0.5};
  EXPECT_THROW(split::iterative_stratify({y, 4, 1}, ok, 3, 0), std::invalid_argument);
}

TEST(KFold, UnstratifiedSizes) {
  auto f = split::kfold(10, 5, std::nullopt, 1);
  std::vector<int> count(5);
  for (auto x : f) ++count.at(x);
  for (int c : count) EXPECT_EQ(c, 2);
  EXPECT_THROW(split::kfold(10, 1, std::nullopt, 1), std::invalid_argument);
  EXPECT_THROW(split::kfold(3, 4, std::nullopt, 1), std::invalid_argument);
}

TEST(KFold, StratifiedPositiveCounts) {
  // Label l has 5 * (l + 1) positives, divisible by k = 5.
  const std::size_t n = 60, t = 3, k = 5;
  std::vector<int> y(n * t, 0);
  for (std::size_t l = 0; l < t; ++l)
    for (std::size_t c = 0; c < 5 * (l + 1); ++c) y[((c * 7 + l * 13) % n) * t + l] = 1;
  LabelMatrix m{y, n, t};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto f = split::kfold(n, k, m, seed);
    std::vector<std::vector<int>> pos(t, std::vector<int>(k));
    std::vector<int> size(k);
    for (std::size_t r = 0; r < n; ++r) {
      ++size[f[r]];
      for (std::size_t l = 0; l < t; ++l) pos[l][f[r]] += y[r * t + l];
    }
    EXPECT_LE(*std::max_element(size.begin(), size.end()) - *std::min_element(size.begin(), size.end()), 1);
    for (std::size_t l = 0; l < t; ++l) {
      auto [lo, hi] = std::minmax_element(pos[l].begin(), pos[l].end());
      EXPECT_LE(*hi - *lo, 1) << "label " << l;
      EXPECT_GE(*lo, 1);
    }
  }
}
