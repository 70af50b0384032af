#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "emcomm/topsim.hpp"
#include "oracles.hpp"

using namespace emcomm;

namespace {

LanguageTable random_table(Rng& rng, int n_m, int d_m) {
  LanguageTable t;
  for (int i = 0; i < kNumConcepts; ++i) {
    Message m{{}, d_m};
    for (int p = 0; p < n_m; ++p) m.symbols.push_back(static_cast<int>(rng.below(d_m)));
    t.push_back(m);
  }
  return t;
}

}  // namespace

TEST(Topsim, PerfectSpeakerScoresExactlyOne) {
  const auto r = topsim(perfect_language_table({5, 4}));
  EXPECT_EQ(r.value, 1.0);
  EXPECT_FALSE(r.degenerate);
  EXPECT_EQ(r.pairs, 192L * 191 / 2);
}

TEST(Topsim, FastPathMatchesBruteForce) {
  const auto cs = all_concepts();
  const auto perfect = perfect_language_table({5, 4});
  EXPECT_NEAR(topsim(cs, perfect).value, test::brute_spearman(cs, perfect), 1e-9);

  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const auto t = random_table(rng, 5, 4);
    EXPECT_NEAR(topsim(cs, t).value, test::brute_spearman(cs, t), 1e-9);
  }
  // partially structured: perfect code with a couple of positions scrambled
  auto partial = perfect;
  for (auto& m : partial) {
    m.symbols[1] = static_cast<int>(rng.below(4));
    m.symbols[4] = static_cast<int>(rng.below(4));
  }
  EXPECT_NEAR(topsim(cs, partial).value, test::brute_spearman(cs, partial), 1e-9);
  const auto longer = random_table(rng, 7, 3);
  EXPECT_NEAR(topsim(cs, longer).value, test::brute_spearman(cs, longer), 1e-9);
}

TEST(Topsim, RandomBijectionIsNearZero) {
  const auto cs = all_concepts();
  auto table = perfect_language_table({5, 4});
  Rng rng(2024);
  int small = 0;
  for (int s = 0; s < 1000; ++s) {
    rng.shuffle(std::span(table));
    small += std::abs(topsim(cs, table).value) < 0.1;
  }
  EXPECT_GE(small, 950);
}

TEST(Topsim, ConstantTableIsDegenerate) {
  const LanguageTable constant(kNumConcepts, Message{{1, 1, 1, 1, 1}, 4});
  const auto r = topsim(constant);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
}

TEST(Topsim, InvariantUnderSymbolRelabeling) {
  Rng rng(5);
  const auto t = random_table(rng, 5, 4);
  auto relabeled = t;
  const std::array<std::array<int, 4>, 5> perms{{{1, 0, 3, 2}, {3, 2, 1, 0}, {0, 1, 2, 3}, {2, 3, 0, 1}, {1, 2, 3, 0}}};
  for (auto& m : relabeled)
    for (int p = 0; p < 5; ++p) m.symbols[p] = perms[p][m.symbols[p]];
  EXPECT_EQ(topsim(t).value, topsim(relabeled).value);
}

TEST(Topsim, RejectsBadInput) {
  const std::vector<Concept> one{Concept{}};
  const LanguageTable single{Message{{0}, 2}};
  EXPECT_THROW(topsim(one, single), Error);
  const std::vector<Concept> two{Concept::from_index(0), Concept::from_index(1)};
  EXPECT_THROW(topsim(two, single), Error);
  const LanguageTable ragged{Message{{0}, 2}, Message{{0, 1}, 2}};
  EXPECT_THROW(topsim(two, ragged), Error);
}

TEST(Distances, HammingOverSlotsAndPositions) {
  EXPECT_EQ(concept_distance(Concept::from_index(0), Concept::from_index(0)), 0);
  EXPECT_EQ(message_distance(Message{{0, 1, 2}, 3}, Message{{0, 2, 2}, 3}), 1);
  int max_d = 0;
  for (const auto& c : all_concepts()) max_d = std::max(max_d, concept_distance(Concept::from_index(0), c));
  EXPECT_EQ(max_d, kNumSlots);
}
