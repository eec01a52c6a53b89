// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsor/hash.hpp"
#include "qsor/molgraph.hpp"

namespace qsor::fp {

enum class FingerprintKind { morgan, path };

inline std::string to_string(FingerprintKind k) { return k == FingerprintKind::morgan ? "morgan" : "path"; }

inline FingerprintKind kind_from_string(const std::string& s) {
  if (s == "morgan") return FingerprintKind::morgan;
  if (s == "path") return FingerprintKind::path;
  throw std::invalid_argument("unknown fingerprint kind: " + s);
}

struct FingerprintConfig {
  FingerprintKind kind = FingerprintKind::morgan;
  int radius = 2;  ///< Morgan radius, or maximum path length in bonds
  std::size_t n_bits = 2048;
  bool counted = true;
  /// Drop environments whose bond set duplicates one already emitted.
  bool dedup_environments = true;
  mol::AtomInvariantConfig invariants{};

  void validate() const {
    if (radius < 0) throw std::invalid_argument("fingerprint radius must be >= 0");
    if (n_bits < 64 || (n_bits & (n_bits - 1)) != 0)
      throw std::invalid_argument("fingerprint n_bits must be a power of two >= 64");
  }

  bool operator==(const FingerprintConfig& o) const {
    return kind == o.kind && radius == o.radius && n_bits == o.n_bits && counted == o.counted &&
           dedup_environments == o.dedup_environments;
  }

  /// Bit path fingerprint, 4096 bits, paths up to 6 bonds.
  static FingerprintConfig baseline_bits() { return {FingerprintKind::path, 6, 4096, false, true, {}}; }
  /// Counted Morgan, radius 2, 2048 bits.
  static FingerprintConfig morgan_counts() { return {FingerprintKind::morgan, 2, 2048, true, true, {}}; }
};

struct Fingerprint {
  std::vector<std::uint32_t> values;
  FingerprintConfig config;

  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
  }
  std::vector<double> dense() const { return {values.begin(), values.end()}; }
};

/// One circular environment before folding.
struct Environment {
  int radius;
  std::size_t center;
  std::uint64_t id;
  std::vector<std::size_t> bonds;  // sorted bond indices covered
};

inline std::vector<Environment> morgan_environments(const mol::MolecularGraph& g, int radius, bool dedup = true,
                                                    const mol::AtomInvariantConfig& inv = {}) {
  const std::size_t n = g.atom_count();
  std::vector<std::uint64_t> ids = mol::atom_invariants(g, inv);
  std::vector<std::vector<std::size_t>> cover(n);
  std::vector<Environment> out;
  out.reserve(n * static_cast<std::size_t>(radius + 1));
  for (std::size_t v = 0; v < n; ++v) out.push_back({0, v, ids[v], {}});

  std::vector<std::vector<std::size_t>> seen;
  for (int r = 1; r <= radius; ++r) {
    std::vector<std::uint64_t> next(n);
    std::vector<std::vector<std::size_t>> next_cover(n);
    for (std::size_t v = 0; v < n; ++v) {
      std::vector<std::pair<std::uint64_t, std::uint64_t>> nbrs;
      auto& c = next_cover[v];
      for (const auto& nb : g.neighbors(v)) {
        nbrs.emplace_back(static_cast<std::uint64_t>(g.bond(nb.bond).order), ids[nb.atom]);
        c.push_back(nb.bond);
        c.insert(c.end(), cover[nb.atom].begin(), cover[nb.atom].end());
      }
      std::sort(c.begin(), c.end());
      c.erase(std::unique(c.begin(), c.end()), c.end());
      std::sort(nbrs.begin(), nbrs.end());
      std::uint64_t h = hash_values({static_cast<std::uint64_t>(r), ids[v]});
      for (const auto& [order, id] : nbrs) h = hash_combine(hash_combine(h, order), id);
      next[v] = h;
    }

    std::vector<std::size_t> order(n);
    for (std::size_t v = 0; v < n; ++v) order[v] = v;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (next_cover[a] != next_cover[b]) return next_cover[a] < next_cover[b];
      return next[a] < next[b];
    });
    for (auto v : order) {
      if (dedup) {
        if (next_cover[v].empty()) continue;
        if (std::find(seen.begin(), seen.end(), next_cover[v]) != seen.end()) continue;
        seen.push_back(next_cover[v]);
      }
      out.push_back({r, v, next[v], next_cover[v]});
    }
    ids = std::move(next);
    cover = std::move(next_cover);
  }
  return out;
}

namespace detail {

inline void fold(Fingerprint& fp, std::uint64_t id) {
  auto& slot = fp.values[static_cast<std::size_t>(id % fp.config.n_bits)];
  slot = fp.config.counted ? slot + 1 : 1;
}

}  // namespace detail

inline Fingerprint morgan_fingerprint(const mol::MolecularGraph& g, const FingerprintConfig& cfg) {
  if (cfg.kind != FingerprintKind::morgan) throw std::invalid_argument("morgan_fingerprint needs kind=morgan");
  cfg.validate();
  Fingerprint fp{std::vector<std::uint32_t>(cfg.n_bits, 0), cfg};
  for (const auto& env : morgan_environments(g, cfg.radius, cfg.dedup_environments, cfg.invariants))
    detail::fold(fp, env.id);
  return fp;
}

/// Pre-fold identifiers of every simple bond path of 1..max_len bonds; each
/// undirected path appears once.
inline std::vector<std::uint64_t> path_identifiers(const mol::MolecularGraph& g, int max_len) {
  std::vector<std::uint64_t> out;
  if (max_len < 1) return out;
  const std::size_t n = g.atom_count();
  auto atom_code = [&](std::size_t a) {
    const auto& atom = g.atom(a);
    return static_cast<std::uint64_t>(atom.atomic_number) * 2 + (atom.aromatic ? 1 : 0);
  };
  std::vector<std::size_t> path;
  std::vector<std::size_t> path_bonds;
  std::vector<int> on_path(n, 0);

  auto emit = [&] {
    if (path.front() > path.back()) return;  // other orientation emits it
    std::vector<std::uint64_t> fwd, rev;
    for (std::size_t i = 0; i < path.size(); ++i) {
      fwd.push_back(atom_code(path[i]));
      if (i < path_bonds.size()) fwd.push_back(100 + static_cast<std::uint64_t>(g.bond(path_bonds[i]).order));
    }
    rev.assign(fwd.rbegin(), fwd.rend());
    const auto& canon = std::min(fwd, rev);
    out.push_back(hash_span(canon, hash_combine(kHashSeed, path_bonds.size())));
  };
  auto extend = [&](auto&& self, std::size_t v) -> void {
    if (!path_bonds.empty()) emit();
    if (static_cast<int>(path_bonds.size()) == max_len) return;
    for (const auto& nb : g.neighbors(v)) {
      if (on_path[nb.atom]) continue;
      on_path[nb.atom] = 1;
      path.push_back(nb.atom);
      path_bonds.push_back(nb.bond);
      self(self, nb.atom);
      path.pop_back();
      path_bonds.pop_back();
      on_path[nb.atom] = 0;
    }
  };
  for (std::size_t s = 0; s < n; ++s) {
    on_path[s] = 1;
    path.assign(1, s);
    extend(extend, s);
    on_path[s] = 0;
  }
  return out;
}

inline Fingerprint path_fingerprint(const mol::MolecularGraph& g, const FingerprintConfig& cfg) {
  if (cfg.kind != FingerprintKind::path) throw std::invalid_argument("path_fingerprint needs kind=path");
  cfg.validate();
  Fingerprint fp{std::vector<std::uint32_t>(cfg.n_bits, 0), cfg};
  for (auto id : path_identifiers(g, cfg.radius)) detail::fold(fp, id);
  return fp;
}

inline Fingerprint fingerprint(const mol::MolecularGraph& g, const FingerprintConfig& cfg) {
  return cfg.kind == FingerprintKind::morgan ? morgan_fingerprint(g, cfg) : path_fingerprint(g, cfg);
}

/// Sum-min over sum-max similarity; equals |a and b| / |a or b| on 0/1 vectors.
/// Two all-zero vectors are identical (1).
template <class T>
double tanimoto(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw std::invalid_argument("tanimoto: length mismatch");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += static_cast<double>(std::min(a[i], b[i]));
    den += static_cast<double>(std::max(a[i], b[i]));
  }
  return den == 0 ? 1.0 : num / den;
}

inline double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (!(a.config == b.config)) throw std::invalid_argument("tanimoto: fingerprint configs differ");
  return tanimoto<std::uint32_t>(a.values, b.values);
}

inline double jaccard_distance(const Fingerprint& a, const Fingerprint& b) { return 1.0 - tanimoto(a, b); }

inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_distance: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) throw std::invalid_argument("cosine_distance: zero-norm vector");
  return std::clamp(1.0 - dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 2.0);
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("euclidean_distance: length mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace qsor::fp
