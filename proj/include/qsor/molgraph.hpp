// SPDX-License-Identifier: Apache-2.0
#pragma once

// Molecular graphs from a practical SMILES subset: organic-subset and bracket
// atoms, bonds -=#:, branches, ring closures (including %nn), dot-separated
// fragments. Stereo marks are accepted and dropped.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "qsor/hash.hpp"

namespace qsor::mol {

// ---------------------------------------------------------------------------
// Elements

namespace detail {

inline constexpr std::array<std::string_view, 87> kElementSymbols = {
    "*",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn"};

// Standard valences for the organic subset; empty for everything else.
inline std::span<const int> standard_valences(int z) {
  static constexpr int b[] = {3}, c[] = {4}, n[] = {3, 5}, o[] = {2}, p[] = {3, 5},
                       s[] = {2, 4, 6}, hal[] = {1};
  switch (z) {
    case 5: return b;
    case 6: return c;
    case 7: return n;
    case 8: return o;
    case 15: return p;
    case 16: return s;
    case 9:
    case 17:
    case 35:
    case 53: return hal;
    default: return {};
  }
}

}  // namespace detail

inline std::optional<int> element_from_symbol(std::string_view symbol) {
  for (std::size_t z = 1; z < detail::kElementSymbols.size(); ++z) {
    if (detail::kElementSymbols[z] == symbol) return static_cast<int>(z);
  }
  return std::nullopt;
}

inline std::string_view element_symbol(int z) {
  if (z <= 0 || static_cast<std::size_t>(z) >= detail::kElementSymbols.size()) return "*";
  return detail::kElementSymbols[static_cast<std::size_t>(z)];
}

inline bool is_organic_subset(int z) { return !detail::standard_valences(z).empty(); }

inline bool can_be_aromatic_unbracketed(int z) {
  return z == 5 || z == 6 || z == 7 || z == 8 || z == 15 || z == 16;
}

// ---------------------------------------------------------------------------
// Graph types

enum class BondOrder : std::uint8_t { single = 1, double_bond = 2, triple = 3, aromatic = 4 };

/// Valence contribution of a bond; aromatic bonds count as 1 (the pi share is
/// accounted per atom).
constexpr int valence_contribution(BondOrder order) {
  return order == BondOrder::aromatic ? 1 : static_cast<int>(order);
}

struct Atom {
  int atomic_number = 6;
  int formal_charge = 0;
  int explicit_h = 0;  ///< hydrogens written in a bracket atom
  int implicit_h = 0;  ///< hydrogens implied by standard valence
  bool aromatic = false;
  bool in_ring = false;
  int degree = 0;  ///< heavy-atom neighbors

  int total_h() const { return explicit_h + implicit_h; }
  std::string_view symbol() const { return element_symbol(atomic_number); }
  bool operator==(const Atom&) const = default;
};

struct Bond {
  std::size_t begin = 0;
  std::size_t end = 0;
  BondOrder order = BondOrder::single;
  bool in_ring = false;

  std::size_t other(std::size_t atom) const { return atom == begin ? end : begin; }
  bool operator==(const Bond&) const = default;
};

struct Neighbor {
  std::size_t atom;
  std::size_t bond;
};

class GraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Immutable simple undirected molecular graph with perceived rings.
class MolecularGraph {
 public:
  MolecularGraph() = default;

  /// Validates bonds, recomputes degrees, ring membership and the smallest set
  /// of smallest rings. Hydrogen counts and aromatic flags are taken as given.
  MolecularGraph(std::vector<Atom> atoms, std::vector<Bond> bonds)
      : atoms_(std::move(atoms)), bonds_(std::move(bonds)), adjacency_(atoms_.size()) {
    for (std::size_t b = 0; b < bonds_.size(); ++b) {
      auto& bond = bonds_[b];
      if (bond.begin == bond.end) throw GraphError("bond endpoints must differ");
      if (bond.begin >= atoms_.size() || bond.end >= atoms_.size())
        throw GraphError("bond endpoint out of range");
      for (const auto& nb : adjacency_[bond.begin]) {
        if (nb.atom == bond.end) throw GraphError("duplicate bond between the same atom pair");
      }
      adjacency_[bond.begin].push_back({bond.end, b});
      adjacency_[bond.end].push_back({bond.begin, b});
    }
    for (std::size_t i = 0; i < atoms_.size(); ++i) {
      atoms_[i].degree = static_cast<int>(adjacency_[i].size());
    }
    perceive_rings();
  }

  std::span<const Atom> atoms() const { return atoms_; }
  std::span<const Bond> bonds() const { return bonds_; }
  const Atom& atom(std::size_t i) const { return atoms_.at(i); }
  const Bond& bond(std::size_t i) const { return bonds_.at(i); }
  std::span<const Neighbor> neighbors(std::size_t i) const { return adjacency_.at(i); }
  /// Rings as atom cycles; consecutive atoms are bonded and the last closes to the first.
  const std::vector<std::vector<std::size_t>>& rings() const { return rings_; }
  std::size_t atom_count() const { return atoms_.size(); }
  std::size_t bond_count() const { return bonds_.size(); }

  std::optional<std::size_t> bond_between(std::size_t a, std::size_t b) const {
    for (const auto& nb : adjacency_.at(a)) {
      if (nb.atom == b) return nb.bond;
    }
    return std::nullopt;
  }

  /// Number of disconnected fragments removed by the parser (largest kept).
  std::size_t fragments_dropped() const { return fragments_dropped_; }
  void set_fragments_dropped(std::size_t n) { fragments_dropped_ = n; }

  std::size_t component_count() const {
    std::vector<int> seen(atoms_.size(), 0);
    std::size_t count = 0;
    for (std::size_t s = 0; s < atoms_.size(); ++s) {
      if (seen[s]) continue;
      ++count;
      std::vector<std::size_t> stack{s};
      seen[s] = 1;
      while (!stack.empty()) {
        auto v = stack.back();
        stack.pop_back();
        for (const auto& nb : adjacency_[v]) {
          if (!seen[nb.atom]) {
            seen[nb.atom] = 1;
            stack.push_back(nb.atom);
          }
        }
      }
    }
    return count;
  }

 private:
  void perceive_rings();

  std::vector<Atom> atoms_;
  std::vector<Bond> bonds_;
  std::vector<std::vector<Neighbor>> adjacency_;
  std::vector<std::vector<std::size_t>> rings_;
  std::size_t fragments_dropped_ = 0;
};

// Horton candidate cycles followed by greedy GF(2)-independent selection gives
// a minimum cycle basis, which is the SSSR for ordinary molecules.
inline void MolecularGraph::perceive_rings() {
  const std::size_t n = atoms_.size();
  const std::size_t m = bonds_.size();
  for (auto& a : atoms_) a.in_ring = false;
  for (auto& b : bonds_) b.in_ring = false;
  rings_.clear();
  if (m == 0) return;

  const std::size_t cyclomatic = m - n + component_count();
  if (cyclomatic == 0) return;

  using EdgeSet = std::vector<std::uint64_t>;
  const std::size_t words = (m + 63) / 64;
  struct Candidate {
    EdgeSet edges;
    std::size_t size;
    std::vector<std::size_t> atoms;
  };
  std::vector<Candidate> candidates;

  for (std::size_t root = 0; root < n; ++root) {
    std::vector<std::ptrdiff_t> parent(n, -1), parent_bond(n, -1);
    std::vector<std::size_t> depth(n, 0);
    std::vector<int> seen(n, 0);
    std::vector<std::size_t> queue{root};
    seen[root] = 1;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      auto v = queue[qi];
      for (const auto& nb : adjacency_[v]) {
        if (!seen[nb.atom]) {
          seen[nb.atom] = 1;
          parent[nb.atom] = static_cast<std::ptrdiff_t>(v);
          parent_bond[nb.atom] = static_cast<std::ptrdiff_t>(nb.bond);
          depth[nb.atom] = depth[v] + 1;
          queue.push_back(nb.atom);
        }
      }
    }
    auto path_to_root = [&](std::size_t v) {
      std::vector<std::size_t> path{v};
      while (v != root) {
        v = static_cast<std::size_t>(parent[v]);
        path.push_back(v);
      }
      return path;
    };
    for (std::size_t b = 0; b < m; ++b) {
      const auto x = bonds_[b].begin, y = bonds_[b].end;
      if (!seen[x] || !seen[y]) continue;
      if (parent_bond[x] == static_cast<std::ptrdiff_t>(b) ||
          parent_bond[y] == static_cast<std::ptrdiff_t>(b))
        continue;
      auto px = path_to_root(x);
      auto py = path_to_root(y);
      // paths must share only the root
      std::vector<int> on_px(n, 0);
      for (auto v : px) on_px[v] = 1;
      bool disjoint = true;
      for (auto v : py) {
        if (v != root && on_px[v]) {
          disjoint = false;
          break;
        }
      }
      if (!disjoint) continue;
      // cycle: root .. x, y .. root
      std::vector<std::size_t> cycle(px.rbegin(), px.rend());
      for (auto v : py) {
        if (v != root) cycle.push_back(v);
      }
      EdgeSet edges(words, 0);
      for (std::size_t i = 0; i < cycle.size(); ++i) {
        auto e = *bond_between(cycle[i], cycle[(i + 1) % cycle.size()]);
        edges[e / 64] |= (1ULL << (e % 64));
      }
      candidates.push_back({std::move(edges), cycle.size(), std::move(cycle)});
    }
  }

  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.size != b.size) return a.size < b.size;
    return a.edges < b.edges;
  });
  candidates.erase(std::unique(candidates.begin(), candidates.end(),
                               [](const Candidate& a, const Candidate& b) { return a.edges == b.edges; }),
                   candidates.end());

  // Gaussian elimination over GF(2), pivots keyed by lowest set bit.
  std::vector<EdgeSet> basis;
  std::vector<std::size_t> pivots;
  for (auto& cand : candidates) {
    if (rings_.size() == cyclomatic) break;
    EdgeSet v = cand.edges;
    for (std::size_t i = 0; i < basis.size(); ++i) {
      auto p = pivots[i];
      if (v[p / 64] & (1ULL << (p % 64))) {
        for (std::size_t w = 0; w < words; ++w) v[w] ^= basis[i][w];
      }
    }
    std::optional<std::size_t> pivot;
    for (std::size_t w = 0; w < words && !pivot; ++w) {
      if (v[w]) pivot = w * 64 + static_cast<std::size_t>(__builtin_ctzll(v[w]));
    }
    if (!pivot) continue;
    // keep basis reduced so later pivots stay unique
    for (std::size_t i = 0; i < basis.size(); ++i) {
      if (basis[i][*pivot / 64] & (1ULL << (*pivot % 64))) {
        for (std::size_t w = 0; w < words; ++w) basis[i][w] ^= v[w];
      }
    }
    basis.push_back(std::move(v));
    pivots.push_back(*pivot);
    rings_.push_back(cand.atoms);
  }

  for (const auto& ring : rings_) {
    for (std::size_t i = 0; i < ring.size(); ++i) {
      atoms_[ring[i]].in_ring = true;
      bonds_[*bond_between(ring[i], ring[(i + 1) % ring.size()])].in_ring = true;
    }
  }
}

/// Atoms reordered so that old atom i becomes new atom new_index[i].
inline MolecularGraph permute_atoms(const MolecularGraph& g, std::span<const std::size_t> new_index) {
  if (new_index.size() != g.atom_count()) throw GraphError("permutation size mismatch");
  std::vector<Atom> atoms(g.atom_count());
  for (std::size_t i = 0; i < g.atom_count(); ++i) atoms.at(new_index[i]) = g.atom(i);
  std::vector<Bond> bonds;
  bonds.reserve(g.bond_count());
  for (const auto& b : g.bonds()) bonds.push_back({new_index[b.begin], new_index[b.end], b.order, false});
  MolecularGraph out(std::move(atoms), std::move(bonds));
  out.set_fragments_dropped(g.fragments_dropped());
  return out;
}

// ---------------------------------------------------------------------------
// Hydrogen accounting

/// Implicit H for an organic-subset atom given its bonds; nullopt on valence overflow.
inline std::optional<int> default_implicit_h(int z, bool aromatic, int bond_valence) {
  auto valences = detail::standard_valences(z);
  if (valences.empty()) return 0;
  int used = bond_valence;
  if (aromatic && used + 1 <= valences.front()) used += 1;
  for (int v : valences) {
    if (v >= used) return v - used;
  }
  return std::nullopt;
}

inline int bond_valence(const MolecularGraph& g, std::size_t atom) {
  int sum = 0;
  for (const auto& nb : g.neighbors(atom)) sum += valence_contribution(g.bond(nb.bond).order);
  return sum;
}

/// Largest valence an atom of this element may show (charge-adjusted); 0 if unconstrained.
inline int max_valence(int z, int charge) {
  auto valences = detail::standard_valences(z);
  if (valences.empty()) return 0;
  return valences.back() + std::abs(charge);
}

// ---------------------------------------------------------------------------
// SMILES parsing

enum class SmilesErrorKind {
  empty_input,
  syntax,
  unclosed_ring,
  unbalanced_parentheses,
  unknown_element,
  valence_overflow,
  invalid_aromaticity,
};

inline std::string_view to_string(SmilesErrorKind k) {
  switch (k) {
    case SmilesErrorKind::empty_input: return "empty_input";
    case SmilesErrorKind::syntax: return "syntax";
    case SmilesErrorKind::unclosed_ring: return "unclosed_ring";
    case SmilesErrorKind::unbalanced_parentheses: return "unbalanced_parentheses";
    case SmilesErrorKind::unknown_element: return "unknown_element";
    case SmilesErrorKind::valence_overflow: return "valence_overflow";
    case SmilesErrorKind::invalid_aromaticity: return "invalid_aromaticity";
  }
  return "unknown";
}

class SmilesError : public std::runtime_error {
 public:
  SmilesError(SmilesErrorKind kind, std::size_t offset, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " at offset " + std::to_string(offset) + ": " +
                           message),
        kind_(kind),
        offset_(offset) {}

  SmilesErrorKind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  SmilesErrorKind kind_;
  std::size_t offset_;
};

namespace detail {

struct RawAtom {
  Atom atom;
  bool bracket = false;
  std::size_t offset = 0;
};

struct RawBond {
  std::size_t a, b;
  std::optional<BondOrder> order;  // nullopt: implicit
};

class SmilesParser {
 public:
  explicit SmilesParser(std::string_view text) : text_(text) {}

  MolecularGraph parse() {
    if (text_.empty()) throw SmilesError(SmilesErrorKind::empty_input, 0, "empty SMILES");
    for (std::size_t i = 0; i < text_.size(); ++i) {
      if (static_cast<unsigned char>(text_[i]) > 127 || std::isspace(static_cast<unsigned char>(text_[i])))
        throw SmilesError(SmilesErrorKind::syntax, i, "unexpected character");
    }
    while (pos_ < text_.size()) step();
    if (!branches_.empty())
      throw SmilesError(SmilesErrorKind::unbalanced_parentheses, branches_.back().second, "unclosed '('");
    if (!open_rings_.empty()) {
      const auto& [digit, ring] = *open_rings_.begin();
      throw SmilesError(SmilesErrorKind::unclosed_ring, ring.offset,
                        "unclosed ring closure " + std::to_string(digit));
    }
    if (pending_) throw SmilesError(SmilesErrorKind::syntax, pending_offset_, "dangling bond");
    if (atoms_.empty()) throw SmilesError(SmilesErrorKind::syntax, 0, "no atoms");
    return build();
  }

 private:
  struct OpenRing {
    std::size_t atom;
    std::optional<BondOrder> order;
    std::size_t offset;
  };

  void step() {
    const char c = text_[pos_];
    const std::size_t start = pos_;
    switch (c) {
      case '(':
        if (!prev_) throw SmilesError(SmilesErrorKind::syntax, start, "branch without preceding atom");
        if (pending_) throw SmilesError(SmilesErrorKind::syntax, start, "bond before '('");
        branches_.emplace_back(*prev_, start);
        ++pos_;
        return;
      case ')':
        if (branches_.empty()) throw SmilesError(SmilesErrorKind::unbalanced_parentheses, start, "unmatched ')'");
        if (pending_) throw SmilesError(SmilesErrorKind::syntax, start, "dangling bond before ')'");
        prev_ = branches_.back().first;
        branches_.pop_back();
        ++pos_;
        return;
      case '-':
      case '/':
      case '\\': set_bond(BondOrder::single, start); return;
      case '=': set_bond(BondOrder::double_bond, start); return;
      case '#': set_bond(BondOrder::triple, start); return;
      case ':': set_bond(BondOrder::aromatic, start); return;
      case '.':
        if (pending_) throw SmilesError(SmilesErrorKind::syntax, start, "bond before '.'");
        if (!branches_.empty()) throw SmilesError(SmilesErrorKind::syntax, start, "'.' inside branch");
        prev_.reset();
        ++pos_;
        return;
      case '%': {
        if (pos_ + 2 >= text_.size() || !std::isdigit(static_cast<unsigned char>(text_[pos_ + 1])) ||
            !std::isdigit(static_cast<unsigned char>(text_[pos_ + 2])))
          throw SmilesError(SmilesErrorKind::syntax, start, "'%' must be followed by two digits");
        int digit = (text_[pos_ + 1] - '0') * 10 + (text_[pos_ + 2] - '0');
        pos_ += 3;
        ring_closure(digit, start);
        return;
      }
      case '[': bracket_atom(); return;
      default: break;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      ++pos_;
      ring_closure(c - '0', start);
      return;
    }
    organic_atom();
  }

  void set_bond(BondOrder order, std::size_t offset) {
    if (pending_) throw SmilesError(SmilesErrorKind::syntax, offset, "consecutive bond symbols");
    if (!prev_) throw SmilesError(SmilesErrorKind::syntax, offset, "bond without preceding atom");
    pending_ = order;
    pending_offset_ = offset;
    ++pos_;
  }

  void ring_closure(int digit, std::size_t offset) {
    if (!prev_) throw SmilesError(SmilesErrorKind::syntax, offset, "ring closure without atom");
    auto it = open_rings_.find(digit);
    if (it == open_rings_.end()) {
      open_rings_.emplace(digit, OpenRing{*prev_, pending_, offset});
    } else {
      auto ring = it->second;
      open_rings_.erase(it);
      if (ring.order && pending_ && *ring.order != *pending_)
        throw SmilesError(SmilesErrorKind::syntax, offset, "conflicting ring closure bond orders");
      auto order = pending_ ? pending_ : ring.order;
      if (ring.atom == *prev_) throw SmilesError(SmilesErrorKind::syntax, offset, "ring closure to the same atom");
      add_bond(ring.atom, *prev_, order, offset);
    }
    pending_.reset();
  }

  void add_bond(std::size_t a, std::size_t b, std::optional<BondOrder> order, std::size_t offset) {
    for (const auto& bond : bonds_) {
      if ((bond.a == a && bond.b == b) || (bond.a == b && bond.b == a))
        throw SmilesError(SmilesErrorKind::syntax, offset, "duplicate bond");
    }
    bonds_.push_back({a, b, order});
  }

  void push_atom(RawAtom raw) {
    const std::size_t index = atoms_.size();
    atoms_.push_back(raw);
    if (prev_) add_bond(*prev_, index, pending_, raw.offset);
    pending_.reset();
    prev_ = index;
  }

  void organic_atom() {
    const std::size_t start = pos_;
    const char c = text_[pos_];
    RawAtom raw;
    raw.offset = start;
    auto two = text_.substr(pos_, 2);
    if (two == "Cl" || two == "Br") {
      raw.atom.atomic_number = two == "Cl" ? 17 : 35;
      pos_ += 2;
    } else {
      static constexpr std::string_view upper = "BCNOPSFI", lower = "bcnops";
      static constexpr int upper_z[] = {5, 6, 7, 8, 15, 16, 9, 53};
      static constexpr int lower_z[] = {5, 6, 7, 8, 15, 16};
      if (auto u = upper.find(c); u != std::string_view::npos) {
        raw.atom.atomic_number = upper_z[u];
      } else if (auto l = lower.find(c); l != std::string_view::npos) {
        raw.atom.atomic_number = lower_z[l];
        raw.atom.aromatic = true;
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '*') {
        throw SmilesError(SmilesErrorKind::unknown_element, start,
                          "unknown element '" + std::string(1, c) + "'");
      } else {
        throw SmilesError(SmilesErrorKind::syntax, start, "unexpected character '" + std::string(1, c) + "'");
      }
      ++pos_;
    }
    push_atom(raw);
  }

  void bracket_atom() {
    const std::size_t start = pos_;
    ++pos_;  // '['
    auto peek = [&]() -> char { return pos_ < text_.size() ? text_[pos_] : '\0'; };
    auto read_int = [&]() -> std::optional<int> {
      int value = 0;
      bool any = false;
      while (std::isdigit(static_cast<unsigned char>(peek()))) {
        value = value * 10 + (peek() - '0');
        any = true;
        ++pos_;
      }
      return any ? std::optional<int>(value) : std::nullopt;
    };
    RawAtom raw;
    raw.bracket = true;
    raw.offset = start;
    read_int();  // isotope, discarded

    const std::size_t sym_start = pos_;
    char c = peek();
    if (std::isupper(static_cast<unsigned char>(c))) {
      std::string sym(1, c);
      ++pos_;
      if (std::islower(static_cast<unsigned char>(peek()))) {
        std::string two = sym + peek();
        if (element_from_symbol(two)) {
          sym = two;
          ++pos_;
        }
      }
      auto z = element_from_symbol(sym);
      if (!z) throw SmilesError(SmilesErrorKind::unknown_element, sym_start, "unknown element '" + sym + "'");
      raw.atom.atomic_number = *z;
    } else if (std::islower(static_cast<unsigned char>(c))) {
      auto two = text_.substr(pos_, 2);
      if (two == "se" || two == "as" || two == "te") {
        std::string sym{static_cast<char>(std::toupper(two[0])), two[1]};
        raw.atom.atomic_number = *element_from_symbol(sym);
        pos_ += 2;
      } else {
        static constexpr std::string_view lower = "bcnops";
        static constexpr int lower_z[] = {5, 6, 7, 8, 15, 16};
        auto l = lower.find(c);
        if (l == std::string_view::npos)
          throw SmilesError(SmilesErrorKind::unknown_element, sym_start,
                            "unknown aromatic element '" + std::string(1, c) + "'");
        raw.atom.atomic_number = lower_z[l];
        ++pos_;
      }
      raw.atom.aromatic = true;
    } else {
      throw SmilesError(c == '*' ? SmilesErrorKind::unknown_element : SmilesErrorKind::syntax, sym_start,
                        "expected element symbol in bracket atom");
    }

    // chirality, discarded
    while (peek() == '@') ++pos_;
    for (std::string_view cls : {"TH", "AL", "SP", "TB", "OH"}) {
      if (text_.substr(pos_, 2) == cls) {
        pos_ += 2;
        read_int();
      }
    }
    if (peek() == 'H') {
      ++pos_;
      raw.atom.explicit_h = read_int().value_or(1);
    }
    if (peek() == '+' || peek() == '-') {
      const char sign = peek();
      int magnitude = 0;
      if (auto n = (++pos_, read_int())) {
        magnitude = *n;
      } else {
        magnitude = 1;
        while (peek() == sign) {
          ++magnitude;
          ++pos_;
        }
      }
      raw.atom.formal_charge = sign == '+' ? magnitude : -magnitude;
    }
    if (peek() == ':') {
      ++pos_;
      if (!read_int()) throw SmilesError(SmilesErrorKind::syntax, pos_, "atom class needs digits");
    }
    if (peek() != ']') throw SmilesError(SmilesErrorKind::syntax, pos_, "expected ']'");
    ++pos_;
    push_atom(raw);
  }

  MolecularGraph build();

  std::string_view text_;
  std::size_t pos_ = 0;
  std::vector<RawAtom> atoms_;
  std::vector<RawBond> bonds_;
  std::optional<std::size_t> prev_;
  std::optional<BondOrder> pending_;
  std::size_t pending_offset_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> branches_;  // (atom, offset of '(')
  std::map<int, OpenRing> open_rings_;
};

// Marks explicit alternating Kekule rings of size 5-6 aromatic when they
// satisfy the 4n+2 rule. Returns true if anything changed.
inline bool aromatize_kekule_rings(std::vector<Atom>& atoms, std::vector<Bond>& bonds,
                                   const MolecularGraph& g) {
  bool changed = false;
  for (const auto& ring : g.rings()) {
    const std::size_t size = ring.size();
    if (size != 5 && size != 6) continue;
    std::vector<std::size_t> ring_bonds(size);
    for (std::size_t i = 0; i < size; ++i) ring_bonds[i] = *g.bond_between(ring[i], ring[(i + 1) % size]);
    bool ok = true;
    std::vector<int> ring_doubles(size, 0);
    for (std::size_t i = 0; i < size && ok; ++i) {
      auto order = bonds[ring_bonds[i]].order;
      if (order == BondOrder::double_bond) {
        ++ring_doubles[i];
        ++ring_doubles[(i + 1) % size];
      } else if (order != BondOrder::single) {
        ok = false;
      }
    }
    if (!ok) continue;
    int electrons = 0;
    for (std::size_t i = 0; i < size && ok; ++i) {
      const auto& atom = atoms[ring[i]];
      // exocyclic double bonds disqualify
      for (const auto& nb : g.neighbors(ring[i])) {
        if (bonds[nb.bond].order == BondOrder::double_bond &&
            std::find(ring_bonds.begin(), ring_bonds.end(), nb.bond) == ring_bonds.end())
          ok = false;
      }
      if (atom.formal_charge != 0) ok = false;
      if (ring_doubles[i] == 1) {
        if (atom.atomic_number != 6 && atom.atomic_number != 7) ok = false;
        electrons += 1;
      } else if (ring_doubles[i] == 0 && size == 5) {
        const int z = atom.atomic_number;
        const bool pyrrole_n = z == 7 && (atom.total_h() + atom.degree) == 3;
        if (z == 8 || z == 16 || pyrrole_n) {
          electrons += 2;
        } else {
          ok = false;
        }
      } else {
        ok = false;
      }
    }
    if (!ok || electrons % 4 != 2) continue;
    for (auto a : ring) {
      if (!atoms[a].aromatic) {
        atoms[a].aromatic = true;
        changed = true;
      }
    }
    for (auto b : ring_bonds) {
      if (bonds[b].order != BondOrder::aromatic) {
        bonds[b].order = BondOrder::aromatic;
        changed = true;
      }
    }
  }
  return changed;
}

inline MolecularGraph SmilesParser::build() {
  // resolve implicit bond orders
  std::vector<Bond> bonds;
  bonds.reserve(bonds_.size());
  for (const auto& raw : bonds_) {
    BondOrder order = BondOrder::single;
    const bool both_aromatic = atoms_[raw.a].atom.aromatic && atoms_[raw.b].atom.aromatic;
    if (raw.order) {
      order = *raw.order;
      if (order == BondOrder::aromatic && !both_aromatic) order = BondOrder::single;
    } else if (both_aromatic) {
      order = BondOrder::aromatic;
    }
    bonds.push_back({raw.a, raw.b, order, false});
  }

  // valence and implicit hydrogens
  std::vector<int> valence(atoms_.size(), 0);
  for (const auto& b : bonds) {
    valence[b.begin] += valence_contribution(b.order);
    valence[b.end] += valence_contribution(b.order);
  }
  for (std::size_t i = 0; i < atoms_.size(); ++i) {
    auto& raw = atoms_[i];
    const int z = raw.atom.atomic_number;
    if (!raw.bracket) {
      auto h = default_implicit_h(z, raw.atom.aromatic, valence[i]);
      if (!h)
        throw SmilesError(SmilesErrorKind::valence_overflow, raw.offset,
                          "valence exceeded for " + std::string(element_symbol(z)));
      raw.atom.implicit_h = *h;
    } else if (int maxv = max_valence(z, raw.atom.formal_charge);
               maxv > 0 && valence[i] + raw.atom.explicit_h > maxv) {
      throw SmilesError(SmilesErrorKind::valence_overflow, raw.offset,
                        "valence exceeded for " + std::string(element_symbol(z)));
    }
  }

  // keep the largest fragment
  std::vector<std::size_t> component(atoms_.size(), SIZE_MAX);
  std::vector<std::size_t> component_sizes;
  {
    std::vector<std::vector<std::size_t>> adj(atoms_.size());
    for (const auto& b : bonds) {
      adj[b.begin].push_back(b.end);
      adj[b.end].push_back(b.begin);
    }
    for (std::size_t s = 0; s < atoms_.size(); ++s) {
      if (component[s] != SIZE_MAX) continue;
      const std::size_t id = component_sizes.size();
      component_sizes.push_back(0);
      std::vector<std::size_t> stack{s};
      component[s] = id;
      while (!stack.empty()) {
        auto v = stack.back();
        stack.pop_back();
        ++component_sizes[id];
        for (auto u : adj[v]) {
          if (component[u] == SIZE_MAX) {
            component[u] = id;
            stack.push_back(u);
          }
        }
      }
    }
  }
  const std::size_t keep = static_cast<std::size_t>(
      std::max_element(component_sizes.begin(), component_sizes.end()) - component_sizes.begin());
  std::vector<std::size_t> remap(atoms_.size(), SIZE_MAX);
  std::vector<Atom> atoms;
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < atoms_.size(); ++i) {
    if (component[i] == keep) {
      remap[i] = atoms.size();
      atoms.push_back(atoms_[i].atom);
      offsets.push_back(atoms_[i].offset);
    }
  }
  std::vector<Bond> kept;
  for (const auto& b : bonds) {
    if (component[b.begin] == keep) kept.push_back({remap[b.begin], remap[b.end], b.order, false});
  }

  MolecularGraph g(atoms, kept);
  for (std::size_t i = 0; i < g.atom_count(); ++i) {
    if (g.atom(i).aromatic && !g.atom(i).in_ring)
      throw SmilesError(SmilesErrorKind::invalid_aromaticity, offsets[i], "aromatic atom outside a ring");
  }
  std::vector<Atom> arom_atoms(g.atoms().begin(), g.atoms().end());
  std::vector<Bond> arom_bonds(g.bonds().begin(), g.bonds().end());
  if (aromatize_kekule_rings(arom_atoms, arom_bonds, g)) {
    g = MolecularGraph(std::move(arom_atoms), std::move(arom_bonds));
  }
  g.set_fragments_dropped(component_sizes.size() - 1);
  return g;
}

}  // namespace detail

/// Parses SMILES into a graph. Multi-fragment input keeps the largest
/// fragment (see MolecularGraph::fragments_dropped()).
inline MolecularGraph parse_smiles(std::string_view text) { return detail::SmilesParser(text).parse(); }

// ---------------------------------------------------------------------------
// Atom invariants

/// Which atom properties enter the initial invariant.
struct AtomInvariantConfig {
  bool element = true;
  bool degree = true;
  bool formal_charge = true;
  bool hydrogens = true;
  bool in_ring = true;
  bool aromatic = true;
};

inline std::uint64_t atom_invariant(const Atom& a, const AtomInvariantConfig& cfg = {}) {
  return hash_values({cfg.element ? static_cast<std::uint64_t>(a.atomic_number) : 0,
                      cfg.degree ? static_cast<std::uint64_t>(a.degree) : 0,
                      cfg.formal_charge ? static_cast<std::uint64_t>(static_cast<std::int64_t>(a.formal_charge)) : 0,
                      cfg.hydrogens ? static_cast<std::uint64_t>(a.total_h()) : 0,
                      cfg.in_ring ? static_cast<std::uint64_t>(a.in_ring) : 0,
                      cfg.aromatic ? static_cast<std::uint64_t>(a.aromatic) : 0});
}

inline std::vector<std::uint64_t> atom_invariants(const MolecularGraph& g, const AtomInvariantConfig& cfg = {}) {
  std::vector<std::uint64_t> out;
  out.reserve(g.atom_count());
  for (const auto& a : g.atoms()) out.push_back(atom_invariant(a, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// SMILES emission and canonical form

namespace detail {

inline std::string atom_token(const MolecularGraph& g, std::size_t i) {
  const Atom& a = g.atom(i);
  const int z = a.atomic_number;
  const bool organic_ok = is_organic_subset(z) && a.formal_charge == 0 &&
                          (!a.aromatic || can_be_aromatic_unbracketed(z)) &&
                          default_implicit_h(z, a.aromatic, bond_valence(g, i)) == std::optional<int>(a.total_h());
  std::string sym(a.symbol());
  if (a.aromatic) sym[0] = static_cast<char>(std::tolower(sym[0]));
  if (organic_ok) return sym;
  std::string out = "[" + sym;
  if (a.total_h() > 0) {
    out += 'H';
    if (a.total_h() > 1) out += std::to_string(a.total_h());
  }
  if (a.formal_charge != 0) {
    out += a.formal_charge > 0 ? '+' : '-';
    if (std::abs(a.formal_charge) > 1) out += std::to_string(std::abs(a.formal_charge));
  }
  return out + "]";
}

inline std::string bond_token(const MolecularGraph& g, const Bond& b) {
  const bool both_aromatic = g.atom(b.begin).aromatic && g.atom(b.end).aromatic;
  switch (b.order) {
    case BondOrder::single: return both_aromatic ? "-" : "";
    case BondOrder::double_bond: return "=";
    case BondOrder::triple: return "#";
    case BondOrder::aromatic: return both_aromatic ? "" : ":";
  }
  return "";
}

inline std::string ring_label(int digit) {
  return digit < 10 ? std::string(1, static_cast<char>('0' + digit)) : "%" + std::to_string(digit);
}

}  // namespace detail

/// Writes SMILES by depth-first traversal; `priority` orders start atoms and
/// neighbor visits (lower first). Every fragment is written, dot-separated.
inline std::string write_smiles(const MolecularGraph& g, std::span<const std::size_t> priority) {
  const std::size_t n = g.atom_count();
  if (priority.size() != n) throw GraphError("priority size mismatch");
  auto by_priority = [&](std::size_t a, std::size_t b) { return priority[a] < priority[b]; };

  std::vector<std::vector<std::size_t>> children(n);
  // closures[v]: (partner atom, bond) pairs incident to v, in encounter order
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> closures(n);
  std::vector<int> visited(n, 0);
  std::vector<int> bond_used(g.bond_count(), 0);
  std::vector<std::size_t> parent_bond(n, SIZE_MAX);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), by_priority);

  std::vector<std::size_t> roots;
  auto dfs = [&](auto&& self, std::size_t v) -> void {
    visited[v] = 1;
    std::vector<Neighbor> nbs(g.neighbors(v).begin(), g.neighbors(v).end());
    std::sort(nbs.begin(), nbs.end(), [&](const Neighbor& a, const Neighbor& b) { return by_priority(a.atom, b.atom); });
    for (const auto& nb : nbs) {
      if (bond_used[nb.bond]) continue;
      bond_used[nb.bond] = 1;
      if (!visited[nb.atom]) {
        children[v].push_back(nb.atom);
        parent_bond[nb.atom] = nb.bond;
        self(self, nb.atom);
      } else {
        // back edge: opens at the ancestor, closes here
        closures[nb.atom].emplace_back(v, nb.bond);
        closures[v].emplace_back(nb.atom, nb.bond);
      }
    }
  };
  for (auto s : order) {
    if (!visited[s]) {
      roots.push_back(s);
      dfs(dfs, s);
    }
  }

  std::string out;
  std::map<std::size_t, int> open_digit;  // bond -> digit
  std::vector<int> digit_in_use(100, 0);
  auto write = [&](auto&& self, std::size_t v) -> void {
    out += detail::atom_token(g, v);
    for (const auto& [partner, bond] : closures[v]) {
      if (auto it = open_digit.find(bond); it != open_digit.end()) {
        out += detail::ring_label(it->second);
        digit_in_use[static_cast<std::size_t>(it->second)] = 0;
        open_digit.erase(it);
      } else {
        int d = 1;
        while (digit_in_use[static_cast<std::size_t>(d)]) ++d;
        digit_in_use[static_cast<std::size_t>(d)] = 1;
        open_digit[bond] = d;
        out += detail::bond_token(g, g.bond(bond)) + detail::ring_label(d);
      }
    }
    for (std::size_t i = 0; i < children[v].size(); ++i) {
      auto c = children[v][i];
      const bool branch = i + 1 < children[v].size();
      if (branch) out += '(';
      out += detail::bond_token(g, g.bond(parent_bond[c]));
      self(self, c);
      if (branch) out += ')';
    }
  };
  for (std::size_t r = 0; r < roots.size(); ++r) {
    if (r) out += '.';
    write(write, roots[r]);
  }
  return out;
}

/// A random valid spelling of the same molecule (random atom priorities).
template <class Rng>
std::string random_smiles(const MolecularGraph& g, Rng& rng) {
  std::vector<std::size_t> priority(g.atom_count());
  std::iota(priority.begin(), priority.end(), std::size_t{0});
  std::shuffle(priority.begin(), priority.end(), rng);
  return write_smiles(g, priority);
}

namespace detail {

// Dense ranks for keys; equal keys share a rank.
template <class Key>
std::vector<std::size_t> dense_ranks(const std::vector<Key>& keys) {
  std::vector<std::size_t> idx(keys.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return keys[a] < keys[b]; });
  std::vector<std::size_t> ranks(keys.size());
  std::size_t r = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (i > 0 && keys[idx[i - 1]] < keys[idx[i]]) ++r;
    ranks[idx[i]] = r;
  }
  return ranks;
}

inline std::size_t class_count(const std::vector<std::size_t>& ranks) {
  return ranks.empty() ? 0 : *std::max_element(ranks.begin(), ranks.end()) + 1;
}

// Iterated neighborhood refinement until the partition stops splitting.
inline std::vector<std::size_t> refine_ranks(const MolecularGraph& g, std::vector<std::size_t> ranks) {
  using Key = std::pair<std::size_t, std::vector<std::pair<int, std::size_t>>>;
  for (;;) {
    std::vector<Key> keys(g.atom_count());
    for (std::size_t v = 0; v < g.atom_count(); ++v) {
      keys[v].first = ranks[v];
      for (const auto& nb : g.neighbors(v))
        keys[v].second.emplace_back(static_cast<int>(g.bond(nb.bond).order), ranks[nb.atom]);
      std::sort(keys[v].second.begin(), keys[v].second.end());
    }
    auto next = dense_ranks(keys);
    if (class_count(next) == class_count(ranks)) return next;
    ranks = std::move(next);
  }
}

struct CanonicalSearch {
  const MolecularGraph& g;
  std::size_t budget;
  std::optional<std::string> best;

  void run(std::vector<std::size_t> ranks) {
    ranks = refine_ranks(g, std::move(ranks));
    const std::size_t n = ranks.size();
    if (class_count(ranks) == n) {
      auto s = write_smiles(g, ranks);
      if (!best || s < *best) best = std::move(s);
      if (budget > 0) --budget;
      return;
    }
    // smallest rank shared by several atoms
    std::vector<std::size_t> members;
    std::vector<std::size_t> count(n, 0);
    for (auto r : ranks) ++count[r];
    std::size_t tied = 0;
    while (count[tied] < 2) ++tied;
    for (std::size_t v = 0; v < n; ++v) {
      if (ranks[v] == tied) members.push_back(v);
    }
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (i > 0 && budget == 0) break;
      std::vector<std::size_t> split(n);
      for (std::size_t v = 0; v < n; ++v) split[v] = 2 * ranks[v] + (ranks[v] == tied && v != members[i] ? 1 : 0);
      run(dense_ranks(split));
    }
  }
};

}  // namespace detail

/// Canonical ranks: invariant refinement plus a search over tie-breaks that
/// keeps the lexicographically smallest emission.
inline std::string canonical_form(const MolecularGraph& g) {
  if (g.atom_count() == 0) return "";
  std::vector<std::tuple<int, int, int, int, int, int>> keys;
  for (const auto& a : g.atoms())
    keys.emplace_back(a.atomic_number, a.aromatic, a.degree, a.total_h(), a.formal_charge, a.in_ring);
  detail::CanonicalSearch search{g, 4096, std::nullopt};
  search.run(detail::dense_ranks(keys));
  return *search.best;
}

inline std::string canonical_smiles(std::string_view smiles) { return canonical_form(parse_smiles(smiles)); }

}  // namespace qsor::mol
