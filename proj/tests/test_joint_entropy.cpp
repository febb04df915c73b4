#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "jamje/gradcheck.hpp"
#include "jamje/joint_entropy.hpp"

using namespace jamje;

namespace {

AttentionMap map_of(std::vector<double> v) {
  const std::size_t n = v.size();
  return AttentionMap{Tensor(Shape{n}, std::move(v)), Domain::k2D};
}

AttentionMap random_attention(std::mt19937_64& rng, std::size_t p, double temp = 1.0) {
  std::normal_distribution<double> d(0.0, temp);
  Tensor t(Shape{p, p});
  for (std::size_t r = 0; r < p; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < p; ++c) s += (t[r * p + c] = std::exp(d(rng)));
    for (std::size_t c = 0; c < p; ++c) t[r * p + c] /= s;
  }
  return AttentionMap{t, Domain::k2D};
}

BinningConfig hard_cfg(std::size_t bins = 32, Normalization n = Normalization::kPerMapMinMax) {
  BinningConfig c;
  c.bins = bins;
  c.normalization = n;
  c.assignment = Assignment::kHard;
  return c;
}

std::size_t argmax_row(const Tensor& a, std::size_t row) {
  const std::size_t b = a.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < b; ++j)
    if (a[row * b + j] > a[row * b + best]) best = j;
  return best;
}

}  // namespace

TEST(Discretize, TwoValuesTwoBinsFixedUnit) {
  const Tensor a = discretize(map_of({0.0, 1.0}), hard_cfg(2, Normalization::kFixedUnit));
  EXPECT_EQ(a[0 * 2 + 0], 1.0);
  EXPECT_EQ(a[1 * 2 + 1], 1.0);
  EXPECT_EQ(a[0 * 2 + 1] + a[1 * 2 + 0], 0.0);
}

TEST(Discretize, ValueAtBinCenterHasUnitSoftWeight) {
  BinningConfig c;
  c.bins = 4;
  c.normalization = Normalization::kFixedUnit;
  for (std::size_t b = 0; b < 4; ++b) {
    const Tensor a = discretize(map_of({(b + 0.5) / 4.0}), c);
    EXPECT_NEAR(a[b], 1.0, 1e-15);
  }
}

TEST(Discretize, FourValuesOnePerBin) {
  const Tensor a = discretize(map_of({0.1, 0.4, 0.6, 0.9}), hard_cfg(4, Normalization::kFixedUnit));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(argmax_row(a, i), i);
}

TEST(Discretize, SoftRowsAreDistributionsOverNeighbouringBins) {
  std::mt19937_64 rng(1);
  BinningConfig c;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = discretize(random_attention(rng, 8), c);
    for (std::size_t i = 0; i < a.dim(0); ++i) {
      double s = 0.0;
      std::size_t nonzero = 0, first = c.bins, last = 0;
      for (std::size_t b = 0; b < c.bins; ++b) {
        const double v = a[i * c.bins + b];
        ASSERT_GE(v, 0.0);
        s += v;
        if (v > 0.0) {
          ++nonzero;
          first = std::min(first, b);
          last = b;
        }
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
      EXPECT_LE(nonzero, 2u);
      EXPECT_LE(last - first, 1u);
    }
  }
}

TEST(Discretize, ConstantMapFallsBackToBinZero) {
  const std::size_t before = constant_map_fallbacks();
  for (Assignment as : {Assignment::kHard, Assignment::kSoftTriangular}) {
    BinningConfig c;
    c.assignment = as;
    const Tensor a = discretize(map_of(std::vector<double>(9, 1.0 / 9.0)), c);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(a[i * c.bins], 1.0);
  }
  EXPECT_EQ(constant_map_fallbacks(), before + 2);
}

TEST(Discretize, SoftConvergesToHardForNarrowKernel) {
  std::mt19937_64 rng(2);
  BinningConfig soft;
  soft.kernel_width = 1e-4;
  const BinningConfig hard = hard_cfg();
  std::size_t tested = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const AttentionMap m = random_attention(rng, 6);
    // Skip inputs with an interior value near a bin edge.
    const auto [mn, mx] = std::minmax_element(m.values.values().begin(), m.values.values().end());
    bool near_edge = false;
    for (double v : m.values.values()) {
      const double x = (v - *mn) / (*mx - *mn) * 32.0;
      const double frac = x - std::floor(x);
      if (v != *mn && v != *mx && (frac < 1e-3 || frac > 1 - 1e-3)) near_edge = true;
    }
    if (near_edge) continue;
    ++tested;
    const Tensor a = discretize(m, soft), b = discretize(m, hard);
    EXPECT_LT(max_abs_diff(a, b), 1e-6);
  }
  EXPECT_GT(tested, 50u);
}

TEST(JointDistribution, IdenticalOneHotAlignedIsDiagonal) {
  const Tensor a = discretize(map_of({0.1, 0.4, 0.6, 0.9}), hard_cfg(4, Normalization::kFixedUnit));
  const JointDistribution jd = joint_distribution(a, a, JointMode::kAligned);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(jd.p[i * 4 + j], i == j ? 0.25 : 0.0);
}

TEST(JointDistribution, PairwiseLiteralIsOuterProductOfMarginals) {
  std::mt19937_64 rng(3);
  BinningConfig c;
  c.bins = 8;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a2 = discretize(random_attention(rng, 5), c), a3 = discretize(random_attention(rng, 5), c);
    const JointDistribution jd = joint_distribution(a2, a3, JointMode::kPairwiseLiteral);
    std::vector<double> m2(8, 0.0), m3(8, 0.0);
    for (std::size_t i = 0; i < 25; ++i)
      for (std::size_t b = 0; b < 8; ++b) {
        m2[b] += a2[i * 8 + b] / 25.0;
        m3[b] += a3[i * 8 + b] / 25.0;
      }
    for (std::size_t a = 0; a < 8; ++a)
      for (std::size_t b = 0; b < 8; ++b) EXPECT_NEAR(jd.p[a * 8 + b], m2[a] * m3[b], 1e-15);
  }
}

TEST(JointDistribution, AlignedMatchesEnumerationOverElements) {
  // Four elements with hand-set soft assignments over 3 bins.
  const Tensor a2(Shape{4, 3}, {1, 0, 0, 0.5, 0.5, 0, 0, 1, 0, 0, 0.25, 0.75});
  const Tensor a3(Shape{4, 3}, {0, 1, 0, 0, 0, 1, 0.5, 0.5, 0, 1, 0, 0});
  const JointDistribution jd = joint_distribution(a2, a3, JointMode::kAligned);
  double total = 0.0;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      double expect = 0.0;
      for (std::size_t i = 0; i < 4; ++i) expect += a2[i * 3 + a] * a3[i * 3 + b];
      EXPECT_NEAR(jd.p[a * 3 + b], expect / 4.0, 1e-15);
      total += jd.p[a * 3 + b];
    }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(JointDistribution, ElementCountMismatchThrows) {
  EXPECT_THROW(joint_distribution(Tensor(Shape{4, 3}), Tensor(Shape{5, 3}), JointMode::kAligned), ShapeError);
  EXPECT_THROW(je_loss(map_of({0.1, 0.2, 0.3}), map_of({0.1, 0.2}), BinningConfig{}, JointMode::kAligned), ShapeError);
}

TEST(JointEntropy, ReferenceValues) {
  Tensor one(Shape{4, 4});
  one[5] = 1.0;
  EXPECT_EQ(joint_entropy(JointDistribution{one}), 0.0);
  EXPECT_NEAR(joint_entropy(JointDistribution{Tensor(Shape{4, 4}, 1.0 / 16.0)}), std::log(16.0), 1e-12);
  EXPECT_NEAR(std::log(16.0), 2.7726, 1e-4);
  Tensor diag(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) diag[i * 5] = 0.25;
  EXPECT_NEAR(joint_entropy(JointDistribution{diag}), 1.3863, 1e-4);
}

TEST(JeLoss, IdenticalMapsGiveMarginalEntropy) {
  std::mt19937_64 rng(4);
  for (Assignment as : {Assignment::kHard, Assignment::kSoftTriangular}) {
    BinningConfig c;
    c.assignment = as;
    for (int trial = 0; trial < 20; ++trial) {
      const AttentionMap m = random_attention(rng, 8);
      const Tensor w = discretize(m, c);
      std::vector<double> marg(c.bins, 0.0);
      for (std::size_t i = 0; i < w.dim(0); ++i)
        for (std::size_t b = 0; b < c.bins; ++b) marg[b] += w[i * c.bins + b] / w.dim(0);
      const double l = je_loss(m, m, c, JointMode::kAligned);
      if (as == Assignment::kHard) EXPECT_NEAR(l, entropy(marg), 1e-9);
      else EXPECT_GE(l, entropy(marg) - 1e-9);  // soft rows spread across two bins
    }
  }
}

TEST(JeLoss, IdenticalMapsBeatUnrelatedMaps) {
  std::mt19937_64 rng(5);
  const BinningConfig c;
  for (int trial = 0; trial < 20; ++trial) {
    const AttentionMap a = random_attention(rng, 8), b = random_attention(rng, 8);
    EXPECT_LT(je_loss(a, a, c, JointMode::kAligned), je_loss(a, b, c, JointMode::kAligned));
  }
}

TEST(JeLoss, PairwiseLiteralIsSumOfMarginalEntropies) {
  std::mt19937_64 rng(6);
  const BinningConfig c;
  for (int trial = 0; trial < 20; ++trial) {
    const AttentionMap a = random_attention(rng, 8), b = random_attention(rng, 8);
    const JointDistribution jd = joint_distribution(discretize(a, c), discretize(b, c), JointMode::kPairwiseLiteral);
    const auto [m2, m3] = marginals(jd);
    EXPECT_NEAR(je_loss(a, b, c, JointMode::kPairwiseLiteral), entropy(m2) + entropy(m3), 1e-9);
  }
}

TEST(JeLoss, BoundsAndMarginalSandwich) {
  std::mt19937_64 rng(7);
  const BinningConfig c = hard_cfg();
  for (int trial = 0; trial < 300; ++trial) {
    const AttentionMap a = random_attention(rng, 6, 0.5 + trial % 3), b = random_attention(rng, 6, 1.0);
    const JointDistribution jd = joint_distribution(discretize(a, c), discretize(b, c), JointMode::kAligned);
    const auto [m2, m3] = marginals(jd);
    const double h = joint_entropy(jd);
    EXPECT_GE(h, -1e-9);
    EXPECT_LE(h, 2.0 * std::log(32.0) + 1e-9);
    EXPECT_GE(h, std::max(entropy(m2), entropy(m3)) - 1e-9);
    EXPECT_LE(h, entropy(m2) + entropy(m3) + 1e-9);
  }
}

TEST(JeLoss, HardModeRefusesGradient) {
  ad::Tape tape;
  ad::Var a = tape.leaf(Tensor(Shape{1, 4}, {0.1, 0.2, 0.3, 0.4}));
  EXPECT_THROW(je_loss(a, a, hard_cfg(), JointMode::kAligned), std::logic_error);
}

TEST(JeLoss, SoftModeGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor logits(Shape{2, 2, 9, 9});
  for (double& v : logits.values()) v = d(rng);
  auto f = [](ad::Tape&, ad::Var x) {
    ad::Var a2 = ad::softmax_rows(ad::reshape(ad::slice(x, 0, Shape{2, 9, 9}), Shape{2, 9, 9}));
    ad::Var a3 = ad::softmax_rows(ad::reshape(ad::slice(x, 162, Shape{2, 9, 9}), Shape{2, 9, 9}));
    return je_loss(a2, a3, BinningConfig{}, JointMode::kAligned);
  };
  const ad::GradCheckResult r = ad::grad_check_detailed(f, logits, 1e-7);
  EXPECT_LT(r.max_relative_error, 1e-4);
}
