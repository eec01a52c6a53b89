// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-label iterative stratification (first and second order) and k-fold
// assignment. Labels are a dense row-major n x T 0/1 matrix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsor/hash.hpp"

namespace qsor::split {

struct LabelMatrix {
  std::span<const int> data;
  std::size_t n_rows = 0;
  std::size_t n_labels = 0;

  bool at(std::size_t r, std::size_t l) const { return data[r * n_labels + l] != 0; }
};

struct SplitAssignment {
  std::vector<std::size_t> split;  // per example
  std::vector<double> ratios;
  std::uint64_t seed = 0;

  std::vector<std::size_t> members(std::size_t s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

inline std::vector<double> checked_ratios(std::span<const double> ratios) {
  if (ratios.empty()) throw std::invalid_argument("split ratios: empty");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("split ratios must sum to 1");
  return {ratios.begin(), ratios.end()};
}

/// Largest-remainder allocation of n items; ties in the remainder go to the lower index.
inline std::vector<std::size_t> target_sizes(std::size_t n, std::span<const double> ratios) {
  std::vector<std::size_t> sizes(ratios.size());
  std::vector<double> rem(ratios.size());
  std::size_t used = 0;
  for (std::size_t j = 0; j < ratios.size(); ++j) {
    const double exact = ratios[j] * static_cast<double>(n);
    sizes[j] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[j] = exact - static_cast<double>(sizes[j]);
    used += sizes[j];
  }
  std::vector<std::size_t> order(ratios.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; used < n; ++k, ++used) sizes[order[k % order.size()]] += 1;
  return sizes;
}

namespace detail {

// Evidence items per example: single labels (order 1) or all label pairs
// i <= j among the positives (order 2, the diagonal included).
inline std::vector<std::vector<std::size_t>> example_items(const LabelMatrix& y, int order,
                                                           std::size_t& n_items) {
  std::vector<std::vector<std::size_t>> items(y.n_rows);
  const std::size_t t = y.n_labels;
  n_items = order == 1 ? t : t * (t + 1) / 2;
  for (std::size_t r = 0; r < y.n_rows; ++r) {
    std::vector<std::size_t> pos;
    for (std::size_t l = 0; l < t; ++l)
      if (y.at(r, l)) pos.push_back(l);
    if (order == 1) {
      items[r] = pos;
      continue;
    }
    for (std::size_t a = 0; a < pos.size(); ++a)
      for (std::size_t b = a; b < pos.size(); ++b) {
        const std::size_t i = pos[a], j = pos[b];
        items[r].push_back(i * t - i * (i - 1) / 2 + (j - i));
      }
  }
  return items;
}

}  // namespace detail

inline SplitAssignment iterative_stratify(const LabelMatrix& y, std::span<const double> ratios_in, int order,
                                          std::uint64_t seed) {
  if (order != 1 && order != 2) throw std::invalid_argument("stratification order must be 1 or 2");
  if (y.n_rows == 0) throw std::invalid_argument("stratification needs at least one example");
  if (y.data.size() != y.n_rows * y.n_labels) throw std::invalid_argument("label matrix size mismatch");
  const auto ratios = checked_ratios(ratios_in);
  const std::size_t n = y.n_rows, k = ratios.size();

  std::size_t n_items = 0;
  const auto items = detail::example_items(y, order, n_items);

  std::vector<std::size_t> capacity = target_sizes(n, ratios);
  std::vector<std::vector<double>> demand(n_items, std::vector<double>(k));
  std::vector<std::size_t> remaining(n_items, 0);  // unassigned holders
  std::vector<std::vector<std::size_t>> holders(n_items);

  // Inside an item, examples carrying more items go first; the rest of the
  // order is a seeded permutation.
  std::vector<std::size_t> visit(n);
  std::iota(visit.begin(), visit.end(), 0);
  counter_shuffle(visit, derive_seed(seed, 0x57a7));
  std::stable_sort(visit.begin(), visit.end(), [&](auto a, auto b) { return items[a].size() > items[b].size(); });
  for (auto r : visit)
    for (auto it : items[r]) {
      holders[it].push_back(r);
      ++remaining[it];
    }
  for (std::size_t it = 0; it < n_items; ++it)
    for (std::size_t j = 0; j < k; ++j) demand[it][j] = ratios[j] * static_cast<double>(remaining[it]);

  SplitAssignment out{std::vector<std::size_t>(n, k), ratios, seed};
  std::uint64_t draw = 0;

  auto choose = [&](const std::vector<double>* item_demand) {
    std::vector<std::size_t> best;
    for (std::size_t j = 0; j < k; ++j) {
      if (capacity[j] == 0) continue;
      if (best.empty()) {
        best = {j};
        continue;
      }
      const std::size_t b = best.front();
      int cmp = 0;
      if (item_demand) {
        const double d = (*item_demand)[j] - (*item_demand)[b];
        if (std::abs(d) > 1e-12) cmp = d > 0 ? 1 : -1;
      }
      if (cmp == 0 && capacity[j] != capacity[b]) cmp = capacity[j] > capacity[b] ? 1 : -1;
      if (cmp > 0)
        best = {j};
      else if (cmp == 0)
        best.push_back(j);
    }
    if (best.size() == 1) return best.front();
    const double u = counter_uniform({seed, 0x71e, draw++});
    return best[std::min(best.size() - 1, static_cast<std::size_t>(u * static_cast<double>(best.size())))];
  };

  auto assign = [&](std::size_t r, std::size_t j) {
    out.split[r] = j;
    --capacity[j];
    for (auto it : items[r]) {
      demand[it][j] -= 1.0;
      --remaining[it];
    }
  };

  for (;;) {
    // Rarest by total support among items that still have unassigned examples.
    std::optional<std::size_t> rarest;
    for (std::size_t it = 0; it < n_items; ++it)
      if (remaining[it] > 0 && (!rarest || holders[it].size() < holders[*rarest].size())) rarest = it;
    if (!rarest) break;
    const std::size_t it = *rarest;
    for (auto r : holders[it]) {
      if (out.split[r] != k) continue;
      assign(r, choose(&demand[it]));
    }
  }
  for (auto r : visit)
    if (out.split[r] == k) assign(r, choose(nullptr));
  return out;
}

/// Size-matched uniform random split, the reference the stratifier is compared to.
inline SplitAssignment random_split(std::size_t n, std::span<const double> ratios_in, std::uint64_t seed) {
  const auto ratios = checked_ratios(ratios_in);
  const auto sizes = target_sizes(n, ratios);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  counter_shuffle(perm, derive_seed(seed, 0x4a4d));
  SplitAssignment out{std::vector<std::size_t>(n), ratios, seed};
  std::size_t pos = 0;
  for (std::size_t j = 0; j < sizes.size(); ++j)
    for (std::size_t c = 0; c < sizes[j]; ++c) out.split[perm[pos++]] = j;
  return out;
}

/// Max over labels (order 1) or label pairs with the diagonal (order 2), and
/// over splits, of |share of that item's examples in the split - ratio|.
inline double deviation(const LabelMatrix& y, const SplitAssignment& a, int order = 2) {
  std::size_t n_items = 0;
  const auto items = detail::example_items(y, order, n_items);
  const std::size_t k = a.ratios.size();
  std::vector<std::vector<double>> counts(n_items, std::vector<double>(k, 0.0));
  std::vector<double> totals(n_items, 0.0);
  for (std::size_t r = 0; r < y.n_rows; ++r)
    for (auto it : items[r]) {
      counts[it][a.split[r]] += 1.0;
      totals[it] += 1.0;
    }
  double worst = 0.0;
  for (std::size_t it = 0; it < n_items; ++it) {
    if (totals[it] == 0.0) continue;
    for (std::size_t j = 0; j < k; ++j) worst = std::max(worst, std::abs(counts[it][j] / totals[it] - a.ratios[j]));
  }
  return worst;
}

/// Fold index per example. With labels, folds come from iterative_stratify with equal ratios.
inline std::vector<std::size_t> kfold(std::size_t n, std::size_t k, const std::optional<LabelMatrix>& labels,
                                      std::uint64_t seed, int order = 1) {
  if (k < 2) throw std::invalid_argument("kfold needs k >= 2");
  if (k > n) throw std::invalid_argument("kfold needs k <= n");
  std::vector<double> ratios(k, 1.0 / static_cast<double>(k));
  // Equal ratios that sum to 1 up to rounding.
  ratios.back() = 1.0 - std::accumulate(ratios.begin(), ratios.end() - 1, 0.0);
  if (labels) {
    if (labels->n_rows != n) throw std::invalid_argument("kfold: label rows != n");
    return iterative_stratify(*labels, ratios, order, seed).split;
  }
  return random_split(n, ratios, seed).split;
}

inline std::string_view split_name(std::size_t s) {
  static constexpr std::string_view names[] = {"train", "val", "test"};
  return s < 3 ? names[s] : std::string_view("other");
}

}  // namespace qsor::split
