// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "corpus.hpp"
#include "qsor/molgraph.hpp"

using namespace qsor::mol;

namespace {

SmilesErrorKind error_kind(std::string_view smiles) {
  try {
    parse_smiles(smiles);
  } catch (const SmilesError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected parse error for " << smiles;
  return SmilesErrorKind::syntax;
}

}  // namespace

TEST(ParseSmiles, Ethanol) {
  auto g = parse_smiles("CCO");
  EXPECT_EQ(g.atom_count(), 3u);
  EXPECT_EQ(g.bond_count(), 2u);
  EXPECT_TRUE(g.rings().empty());
  for (const auto& b : g.bonds()) EXPECT_EQ(b.order, BondOrder::single);
  EXPECT_EQ(g.atom(0).total_h(), 3);
  EXPECT_EQ(g.atom(1).total_h(), 2);
  EXPECT_EQ(g.atom(2).total_h(), 1);
}

TEST(ParseSmiles, Benzene) {
  auto g = parse_smiles("c1ccccc1");
  EXPECT_EQ(g.atom_count(), 6u);
  EXPECT_EQ(g.bond_count(), 6u);
  ASSERT_EQ(g.rings().size(), 1u);
  EXPECT_EQ(g.rings()[0].size(), 6u);
  for (const auto& a : g.atoms()) {
    EXPECT_TRUE(a.aromatic);
    EXPECT_TRUE(a.in_ring);
    EXPECT_EQ(a.total_h(), 1);
  }
  for (const auto& b : g.bonds()) EXPECT_EQ(b.order, BondOrder::aromatic);
}

TEST(ParseSmiles, ErrorKindsCarryOffsets) {
  EXPECT_EQ(error_kind("C1CC"), SmilesErrorKind::unclosed_ring);
  try {
    parse_smiles("CC1CC");
    FAIL();
  } catch (const SmilesError& e) {
    EXPECT_EQ(e.offset(), 2u);
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
  }
  EXPECT_EQ(error_kind("CC(C"), SmilesErrorKind::unbalanced_parentheses);
  EXPECT_EQ(error_kind("CC)C"), SmilesErrorKind::unbalanced_parentheses);
  EXPECT_EQ(error_kind("CXC"), SmilesErrorKind::unknown_element);
  EXPECT_EQ(error_kind("C[Xx]C"), SmilesErrorKind::unknown_element);
  EXPECT_EQ(error_kind("C(C)(C)(C)(C)C"), SmilesErrorKind::valence_overflow);
  EXPECT_EQ(error_kind("O=O=O"), SmilesErrorKind::valence_overflow);
  EXPECT_EQ(error_kind(""), SmilesErrorKind::empty_input);
  EXPECT_EQ(error_kind("cc"), SmilesErrorKind::invalid_aromaticity);
  EXPECT_EQ(error_kind("C=C="), SmilesErrorKind::syntax);
  EXPECT_EQ(error_kind("C11"), SmilesErrorKind::syntax);
}

TEST(ParseSmiles, BracketAtomsAndCharges) {
  auto g = parse_smiles("C[N+](=O)[O-]");
  EXPECT_EQ(g.atom(1).formal_charge, 1);
  EXPECT_EQ(g.atom(3).formal_charge, -1);
  EXPECT_EQ(g.atom(1).total_h(), 0);
  auto nh4 = parse_smiles("[NH4+]");
  EXPECT_EQ(nh4.atom(0).explicit_h, 4);
  auto pyrrole = parse_smiles("c1cc[nH]c1");
  EXPECT_EQ(pyrrole.atom(3).total_h(), 1);
  auto iso = parse_smiles("[13CH3:4]C");
  EXPECT_EQ(iso.atom(0).total_h(), 3);
  EXPECT_EQ(parse_smiles("[Fe++]").atom(0).formal_charge, 2);
  EXPECT_EQ(parse_smiles("[Se]").atom(0).atomic_number, 34);
}

TEST(ParseSmiles, StereoMarksAreDiscarded) {
  EXPECT_EQ(canonical_smiles("C/C=C/C"), canonical_smiles("CC=CC"));
  EXPECT_EQ(canonical_smiles("N[C@@H](C)C(=O)O"), canonical_smiles("NC(C)C(=O)O"));
}

TEST(ParseSmiles, TwoDigitRingClosures) {
  auto g = parse_smiles("C%10CCCC%10");
  ASSERT_EQ(g.rings().size(), 1u);
  EXPECT_EQ(g.rings()[0].size(), 5u);
  EXPECT_EQ(canonical_form(g), canonical_smiles("C1CCCC1"));
}

TEST(ParseSmiles, LargestFragmentKept) {
  auto g = parse_smiles("[Na+].CCCC(=O)[O-]");
  EXPECT_EQ(g.atom_count(), 6u);
  EXPECT_EQ(g.fragments_dropped(), 1u);
}

TEST(ParseSmiles, KekuleRingsAreAromatized) {
  EXPECT_EQ(canonical_smiles("C1=CC=CC=C1"), canonical_smiles("c1ccccc1"));
  EXPECT_EQ(canonical_smiles("C1=CNC=C1"), canonical_smiles("c1cc[nH]c1"));
  EXPECT_EQ(canonical_smiles("C1=COC=C1"), canonical_smiles("c1ccoc1"));
  EXPECT_EQ(canonical_smiles("C1=CC=NC=C1"), canonical_smiles("c1ccncc1"));
  // cyclohexadiene is not aromatic
  EXPECT_NE(canonical_smiles("C1=CCC=CC1"), canonical_smiles("c1ccccc1"));
}

TEST(Rings, FusedAndBridgedSystems) {
  auto naph = parse_smiles("c1ccc2ccccc2c1");
  EXPECT_EQ(naph.rings().size(), 2u);
  for (const auto& r : naph.rings()) EXPECT_EQ(r.size(), 6u);
  auto norbornane = parse_smiles("C1CC2CCC1C2");
  ASSERT_EQ(norbornane.rings().size(), 2u);
  EXPECT_EQ(norbornane.rings()[0].size(), 5u);
  EXPECT_EQ(norbornane.rings()[1].size(), 5u);
  auto chain = parse_smiles("CC1CC1CC");
  EXPECT_FALSE(chain.atom(0).in_ring);
  EXPECT_TRUE(chain.atom(1).in_ring);
  EXPECT_FALSE(chain.atom(5).in_ring);
}

TEST(Rings, CyclesAreClosedAndConsistentWithFlags) {
  for (auto smiles : qsor::test_data::odorant_corpus()) {
    auto g = parse_smiles(smiles);
    std::set<std::size_t> ring_atoms;
    for (const auto& ring : g.rings()) {
      ASSERT_GE(ring.size(), 3u) << smiles;
      for (std::size_t i = 0; i < ring.size(); ++i) {
        EXPECT_TRUE(g.bond_between(ring[i], ring[(i + 1) % ring.size()]).has_value()) << smiles;
        ring_atoms.insert(ring[i]);
      }
    }
    for (std::size_t i = 0; i < g.atom_count(); ++i) {
      EXPECT_EQ(g.atom(i).in_ring, ring_atoms.count(i) == 1) << smiles << " atom " << i;
      if (g.atom(i).aromatic) {
        EXPECT_TRUE(g.atom(i).in_ring);
      }
    }
    EXPECT_EQ(g.rings().size(), g.bond_count() - g.atom_count() + 1) << smiles;
  }
}

TEST(Hydrogens, NeverExceedStandardValence) {
  for (auto smiles : qsor::test_data::odorant_corpus()) {
    auto g = parse_smiles(smiles);
    for (std::size_t i = 0; i < g.atom_count(); ++i) {
      const auto& a = g.atom(i);
      int maxv = max_valence(a.atomic_number, a.formal_charge);
      if (maxv == 0) continue;
      EXPECT_LE(a.total_h() + bond_valence(g, i), maxv) << smiles << " atom " << i;
      EXPECT_EQ(a.degree, static_cast<int>(g.neighbors(i).size()));
    }
  }
}

TEST(CanonicalForm, SameMoleculeDifferentSpelling) {
  EXPECT_EQ(canonical_smiles("CCO"), canonical_smiles("OCC"));
  EXPECT_NE(canonical_smiles("CCO"), canonical_smiles("CCN"));
  EXPECT_EQ(canonical_smiles("OC(=O)c1ccccc1"), canonical_smiles("c1cccc(c1)C(O)=O"));
  EXPECT_EQ(canonical_smiles("C1CCCCC1C"), canonical_smiles("CC1CCCCC1"));
}

TEST(CanonicalForm, RoundTripIsStable) {
  for (auto smiles : qsor::test_data::odorant_corpus()) {
    auto once = canonical_smiles(smiles);
    EXPECT_EQ(canonical_smiles(once), once) << smiles;
  }
}

TEST(CanonicalForm, HundredRespellingsOfTenAtomMolecule) {
  const auto g = parse_smiles("CC(C)C1CCC(C)CC1O");  // menthol, 11 heavy atoms
  const auto expected = canonical_form(g);
  std::mt19937_64 rng(11);
  std::set<std::string> spellings;
  for (int i = 0; i < 100; ++i) {
    auto s = random_smiles(g, rng);
    spellings.insert(s);
    EXPECT_EQ(canonical_smiles(s), expected) << s;
  }
  EXPECT_GT(spellings.size(), 10u);
}

TEST(CanonicalForm, InvariantUnderAtomPermutation) {
  std::mt19937_64 rng(3);
  for (auto smiles : qsor::test_data::odorant_corpus()) {
    auto g = parse_smiles(smiles);
    const auto expected = canonical_form(g);
    for (int t = 0; t < 10; ++t) {
      std::vector<std::size_t> perm(g.atom_count());
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      auto p = permute_atoms(g, perm);
      EXPECT_EQ(canonical_form(p), expected) << smiles;
      EXPECT_EQ(canonical_smiles(random_smiles(g, rng)), expected) << smiles;
    }
  }
}

TEST(AtomInvariants, Basics) {
  EXPECT_EQ(atom_invariants(parse_smiles("C")).size(), 1u);
  auto inv = atom_invariants(parse_smiles("CCO"));
  EXPECT_NE(inv[0], inv[1]);
  auto a = atom_invariants(parse_smiles("OCC"));
  std::multiset<std::uint64_t> x(inv.begin(), inv.end()), y(a.begin(), a.end());
  EXPECT_EQ(x, y);
}

TEST(AtomInvariants, ConfigurableFeatureSet) {
  AtomInvariantConfig no_h;
  no_h.hydrogens = false;
  no_h.degree = false;
  auto inv = atom_invariants(parse_smiles("CCO"), no_h);
  EXPECT_EQ(inv[0], inv[1]);
}
