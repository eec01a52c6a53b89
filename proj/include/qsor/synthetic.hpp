// SPDX-License-Identifier: Apache-2.0
#pragma once

// Generated molecules whose labels are fixed functions of the functional
// groups attached to them. Used for separation and transfer experiments.

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "qsor/hash.hpp"
#include "qsor/molgraph.hpp"

namespace qsor::synthetic {

enum Group : unsigned {
  hydroxyl,
  ether,
  aldehyde,
  ketone,
  ester,
  acid,
  amine,
  nitrile,
  nitro,
  thiol,
  thioether,
  chloro,
  bromo,
  kGroupCount
};

inline constexpr std::array<std::string_view, kGroupCount> kGroupSmiles = {
    "O", "OC", "C=O", "C(=O)C", "C(=O)OC", "C(=O)O", "N", "C#N", "[N+](=O)[O-]", "S", "SC", "Cl", "Br"};

enum class Scaffold { chain, benzene, cyclohexane, pyridine };

struct SyntheticMolecule {
  std::string smiles;
  Scaffold scaffold;
  std::size_t chain_length = 0;
  std::set<Group> groups;
};

/// Label names in column order.
inline const std::vector<std::string>& label_names() {
  static const std::vector<std::string> names = {"fruity", "sulfurous", "green",     "nutty",
                                                 "sweet",  "sour",      "medicinal", "waxy"};
  return names;
}

inline std::vector<int> labels_of(const SyntheticMolecule& m) {
  auto has = [&](Group g) { return m.groups.count(g) > 0; };
  const bool aromatic = m.scaffold == Scaffold::benzene || m.scaffold == Scaffold::pyridine;
  return {
      has(ester),
      has(thiol) || has(thioether),
      has(aldehyde),
      has(amine) || has(nitrile) || has(nitro) || m.scaffold == Scaffold::pyridine,
      aromatic && (has(hydroxyl) || has(ether)),
      has(acid),
      has(chloro) || has(bromo),
      m.scaffold == Scaffold::chain && m.chain_length >= 6,
  };
}

/// Draws `n` distinct (by canonical form) molecules, deterministic in `seed`.
inline std::vector<SyntheticMolecule> generate(std::size_t n, std::uint64_t seed) {
  std::vector<SyntheticMolecule> out;
  std::set<std::string> seen;
  for (std::uint64_t draw = 0; out.size() < n; ++draw) {
    if (draw > 1000 * (n + 10)) throw std::runtime_error("synthetic corpus: too many duplicate draws");
    auto u = [&](std::uint64_t k) { return counter_uniform({seed, draw, k}); };
    auto pick = [&](std::uint64_t k, std::size_t count) {
      return std::min(count - 1, static_cast<std::size_t>(u(k) * static_cast<double>(count)));
    };
    SyntheticMolecule m;
    m.scaffold = static_cast<Scaffold>(pick(0, 4));
    std::vector<std::string> atoms;
    switch (m.scaffold) {
      case Scaffold::chain:
        m.chain_length = 2 + pick(1, 8);
        atoms.assign(m.chain_length, "C");
        break;
      case Scaffold::benzene: atoms = {"c1", "c", "c", "c", "c", "c1"}; break;
      case Scaffold::cyclohexane: atoms = {"C1", "C", "C", "C", "C", "C1"}; break;
      case Scaffold::pyridine: atoms = {"c1", "c", "c", "n", "c", "c1"}; break;
    }
    const std::size_t n_groups = 1 + pick(2, 3);
    std::vector<int> used(atoms.size(), 0);
    for (std::size_t k = 0; k < n_groups; ++k) {
      const auto g = static_cast<Group>(pick(10 + k, kGroupCount));
      const std::size_t pos = pick(20 + k, atoms.size());
      if (used[pos] || atoms[pos] == "n") continue;
      used[pos] = 1;
      atoms[pos] += "(" + std::string(kGroupSmiles[g]) + ")";
      m.groups.insert(g);
    }
    if (m.groups.empty()) continue;
    for (const auto& a : atoms) m.smiles += a;
    auto canon = mol::canonical_smiles(m.smiles);
    if (!seen.insert(canon).second) continue;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace qsor::synthetic
