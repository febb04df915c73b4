#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <random>

#include "jamje/metrics.hpp"
#include "oracles.hpp"

using namespace jamje;

namespace {

ScoreSet chance_set(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ScoreSet s;
  for (std::size_t i = 0; i < n; ++i) s.push_back({u(rng), i % 2 == 0, 0});
  return s;
}

ScoreSet separated_set() {
  ScoreSet s;
  for (int i = 0; i < 20; ++i) s.push_back({0.6 + 0.01 * i, true, 0});
  for (int i = 0; i < 80; ++i) s.push_back({-0.5 + 0.01 * i, false, 0});
  return s;
}

}  // namespace

TEST(Scores, CosineBasics) {
  const std::vector<EmbeddingRow> gallery{{1, 0, {1.0, 2.0}}};
  const ScoreSet self = cosine_scores(gallery, {{1, 3, {1.0, 2.0}}});
  ASSERT_EQ(self.size(), 1u);
  EXPECT_NEAR(self[0].score, 1.0, 1e-15);
  EXPECT_TRUE(self[0].genuine);
  EXPECT_EQ(self[0].bin, 3);
  EXPECT_NEAR(cosine_scores(gallery, {{2, 0, {-2.0, 1.0}}})[0].score, 0.0, 1e-15);
  EXPECT_THROW(cosine_scores(gallery, {{2, 0, {0.0, 0.0}}}), MetricError);
}

TEST(Scores, MaxFusionHandOracle) {
  const std::vector<EmbeddingRow> gallery{
      {0, 0, {1.0, 0.0}}, {0, 0, {0.0, 1.0}}, {1, 0, {-1.0, 0.0}}, {1, 0, {-1.0, -1.0}}};
  const std::vector<EmbeddingRow> probes{{0, 2, {3.0, 4.0}}, {1, 4, {-1.0, 1.0}}};
  const ScoreSet s = cosine_scores(gallery, probes);
  ASSERT_EQ(s.size(), 4u);
  // probe (3,4)/5: id0 max(0.6, 0.8); id1 max(-0.6, -0.99)
  EXPECT_NEAR(s[0].score, 0.8, 1e-15);
  EXPECT_NEAR(s[1].score, -0.6, 1e-15);
  // probe (-1,1)/sqrt2: id0 max(-1/sqrt2, 1/sqrt2); id1 max(1/sqrt2, 0)
  EXPECT_NEAR(s[2].score, 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(s[3].score, 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_TRUE(s[0].genuine && !s[1].genuine && !s[2].genuine && s[3].genuine);
  EXPECT_EQ(s[2].bin, 4);
  const ScoreSet mean = cosine_scores(gallery, probes, GalleryFusion::kMean);
  EXPECT_NEAR(mean[0].score, 0.7, 1e-15);
}

TEST(Roc, HandSetMatchesEnumeration) {
  const ScoreSet s{{0.9, true, 0}, {0.8, false, 0}, {0.7, true, 0}, {0.7, false, 0}, {0.4, true, 0}, {0.1, false, 0}};
  const RocCurve c = roc_curve(s);
  const std::vector<std::pair<double, double>> expect{
      {0, 0}, {0, 1.0 / 3}, {1.0 / 3, 1.0 / 3}, {2.0 / 3, 2.0 / 3}, {2.0 / 3, 1}, {1, 1}};
  ASSERT_EQ(c.size(), expect.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(c[i].far, expect[i].first, 1e-15);
    EXPECT_NEAR(c[i].tar, expect[i].second, 1e-15);
  }
  EXPECT_THROW(roc_curve({{0.1, true, 0}, {0.2, true, 0}}), MetricError);
  EXPECT_THROW(roc_curve({{0.1, false, 0}}), MetricError);
}

TEST(Roc, MonotoneWithEndpoints) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const RocCurve c = roc_curve(oracle::random_scores(rng, 60));
    EXPECT_EQ(c.front().far, 0.0);
    EXPECT_EQ(c.front().tar, 0.0);
    EXPECT_EQ(c.back().far, 1.0);
    EXPECT_EQ(c.back().tar, 1.0);
    for (std::size_t i = 1; i < c.size(); ++i) {
      ASSERT_GE(c[i].far, c[i - 1].far);
      ASSERT_GE(c[i].tar, c[i - 1].tar);
    }
  }
}

TEST(Metrics, AgreeWithBruteForceOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const ScoreSet s = oracle::random_scores(rng, 200);
    const RocCurve c = roc_curve(s);
    const EerAuc ea = eer_and_auc(c);
    EXPECT_NEAR(tar_at_far(c, 0.01), oracle::tar_at_far(s, 0.01), 1e-9);
    EXPECT_NEAR(tar_at_far(c, 0.1), oracle::tar_at_far(s, 0.1), 1e-9);
    EXPECT_NEAR(ea.auc, oracle::auc(s), 1e-9);
    EXPECT_NEAR(ea.eer, oracle::eer(s), 0.1);
  }
}

TEST(Metrics, PerfectSeparation) {
  const RocCurve c = roc_curve(separated_set());
  EXPECT_EQ(tar_at_far(c), 100.0);
  const EerAuc ea = eer_and_auc(c);
  EXPECT_EQ(ea.eer, 0.0);
  EXPECT_EQ(ea.auc, 100.0);
  bool through_corner = false;
  for (const RocPoint& p : c) through_corner |= p.far == 0.0 && p.tar == 1.0;
  EXPECT_TRUE(through_corner);
}

TEST(Metrics, ChanceLevel) {
  std::mt19937_64 rng(3);
  const RocCurve c = roc_curve(chance_set(rng, 40000));
  const EerAuc ea = eer_and_auc(c);
  EXPECT_NEAR(tar_at_far(c), 1.0, 0.3);
  EXPECT_NEAR(ea.eer, 50.0, 1.0);
  EXPECT_NEAR(ea.auc, 50.0, 1.0);
  for (std::size_t i = 0; i < c.size(); i += 1000) EXPECT_NEAR(c[i].tar, c[i].far, 0.02);
}

TEST(Metrics, TarMonotoneInFarTarget) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const RocCurve c = roc_curve(oracle::random_scores(rng, 150));
    double prev = -1.0;
    for (double t : {0.0, 0.001, 0.01, 0.05, 0.1, 0.3, 1.0}) {
      const double v = tar_at_far(c, t);
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(Metrics, InvariantUnderIncreasingMaps) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const ScoreSet s = oracle::random_scores(rng, 120);
    ScoreSet t = s;
    for (Score& x : t) x.score = std::exp(2.0 * x.score) - 7.0;
    const RocCurve a = roc_curve(s), b = roc_curve(t);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].far, b[i].far);
      EXPECT_EQ(a[i].tar, b[i].tar);
    }
    EXPECT_EQ(tar_at_far(a), tar_at_far(b));
    EXPECT_EQ(eer_and_auc(a).eer, eer_and_auc(b).eer);
    EXPECT_EQ(eer_and_auc(a).auc, eer_and_auc(b).auc);
  }
}

TEST(Report, ReplicatedBinsEqualPooled) {
  std::mt19937_64 rng(6);
  const ScoreSet base = oracle::random_scores(rng, 100);
  ScoreSet all;
  for (int b = 0; b < kNumPoseBins; ++b)
    for (Score s : base) {
      s.bin = b;
      all.push_back(s);
    }
  const VerificationReport r = pose_binned_report(all);
  const double pooled = tar_at_far(roc_curve(base));
  for (const auto& v : r.bin_tar) {
    ASSERT_TRUE(v.has_value());
    EXPECT_NEAR(*v, pooled, 1e-12);
  }
  EXPECT_NEAR(r.average_tar, pooled, 1e-12);
  EXPECT_NEAR(r.pooled_tar, pooled, 1e-12);
}

TEST(Report, SeparatedBinReportsHundred) {
  std::mt19937_64 rng(7);
  ScoreSet s = separated_set();
  for (Score& x : s) x.bin = 2;
  for (Score x : chance_set(rng, 2000)) {
    x.bin = static_cast<int>(rng() % 2);
    s.push_back(x);
  }
  const VerificationReport r = pose_binned_report(s);
  EXPECT_EQ(*r.bin_tar[2], 100.0);
  EXPECT_LT(*r.bin_tar[0], 20.0);
  EXPECT_FALSE(r.bin_tar[3].has_value());
  EXPECT_FALSE(r.bin_tar[4].has_value());
  EXPECT_NEAR(r.average_tar, (*r.bin_tar[0] + *r.bin_tar[1] + 100.0) / 3.0, 1e-12);
}

TEST(Report, TwoBinBruteForce) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    ScoreSet a = oracle::random_scores(rng, 80), b = oracle::random_scores(rng, 80);
    for (Score& x : b) x.bin = 3;
    ScoreSet all = a;
    all.insert(all.end(), b.begin(), b.end());
    const VerificationReport r = pose_binned_report(all);
    EXPECT_NEAR(*r.bin_tar[0], oracle::tar_at_far(a, 0.01), 1e-9);
    EXPECT_NEAR(*r.bin_tar[3], oracle::tar_at_far(b, 0.01), 1e-9);
    EXPECT_NEAR(r.auc, oracle::auc(all), 1e-9);
    std::size_t ga = 0, gb = 0;
    for (const Score& x : a) ga += x.genuine;
    for (const Score& x : b) gb += x.genuine;
    const VerificationReport w = pose_binned_report(all, 0.01, BinAverage::kProbeWeighted);
    EXPECT_NEAR(w.average_tar, (ga * *r.bin_tar[0] + gb * *r.bin_tar[3]) / static_cast<double>(ga + gb), 1e-9);
  }
}

TEST(Report, JsonAndTable) {
  std::mt19937_64 rng(9);
  ScoreSet s = oracle::random_scores(rng, 100, 3);
  const VerificationReport r = pose_binned_report(s, 0.01, BinAverage::kBinMean, 2);
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  EXPECT_EQ(table_header(), "method,tar_0-10,tar_10-30,tar_30-60,tar_60-90,tar_90+,average,auc,eer");
  const std::string row = table_row("x", r);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 8);
  EXPECT_NE(row.find(",-,"), std::string::npos);  // bins 3 and 4 are empty
}

TEST(EmbeddingFiles, RoundTripIsExact) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<EmbeddingRow> rows;
  for (int i = 0; i < 20; ++i) {
    EmbeddingRow r{i % 4, i % 5, {}};
    for (int k = 0; k < 8; ++k) r.values.push_back(d(rng));
    rows.push_back(r);
  }
  const fs::path p = fs::temp_directory_path() / ("jamje_emb_" + std::to_string(::getpid()) + ".csv");
  write_embeddings(p, rows);
  const auto back = read_embeddings(p);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].identity, rows[i].identity);
    EXPECT_EQ(back[i].bin, rows[i].bin);
    EXPECT_EQ(back[i].values, rows[i].values);
  }
  std::ofstream(p) << "1,2,abc\n";
  EXPECT_THROW(read_embeddings(p), IoError);
  fs::remove(p);
}
