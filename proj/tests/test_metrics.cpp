#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mmr/errors.hpp"
#include "mmr/metrics.hpp"
#include "mmr/rng.hpp"
#include "oracles.hpp"

using namespace mmr;
using namespace mmr::metrics;

TEST(SampleAuroc, TrivialCases) {
  EXPECT_DOUBLE_EQ(sample_auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(sample_auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(sample_auroc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}), 0.0);
  EXPECT_THROW(sample_auroc({0.1, 0.2}, {1, 1}), UndefinedMetric);
  EXPECT_THROW(sample_auroc({0.1}, {0, 1}), ShapeError);
}

TEST(SampleAuroc, MatchesPairwiseOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
      s[i] = std::round(rng.uniform() * 10) / 10;  // frequent ties
      y[i] = i < 2 ? i : static_cast<int>(rng.below(2));
    }
    EXPECT_NEAR(sample_auroc(s, y), oracle::pairwise_auroc(s, y), 1e-12);
  }
}

TEST(SampleAuroc, RankInvariances) {
  Rng rng(5);
  std::vector<double> s(30), neg(30), mono(30);
  std::vector<int> y(30);
  for (int i = 0; i < 30; ++i) {
    s[i] = rng.uniform();
    y[i] = i % 3 == 0;
    neg[i] = -s[i];
    mono[i] = std::exp(3 * s[i]) + 1;
  }
  EXPECT_NEAR(sample_auroc(s, y) + sample_auroc(neg, y), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(sample_auroc(s, y), sample_auroc(mono, y));
}

TEST(PixelAuroc, PoolsPixels) {
  Rng rng(7);
  std::vector<AnomalyMap> maps;
  std::vector<BinaryMask> masks;
  std::vector<double> pooled;
  std::vector<int> labels;
  for (int i = 0; i < 3; ++i) {
    AnomalyMap m{4, 5, std::vector<float>(20), 0.0f};
    BinaryMask b(20);
    for (int k = 0; k < 20; ++k) {
      m.values[k] = static_cast<float>(rng.uniform());
      b[k] = rng.uniform() < 0.3;
      pooled.push_back(m.values[k]);
      labels.push_back(b[k]);
    }
    maps.push_back(m);
    masks.push_back(b);
  }
  EXPECT_NEAR(pixel_auroc(maps, masks), oracle::pairwise_auroc(pooled, labels), 1e-12);
  EXPECT_DOUBLE_EQ(pixel_auroc(maps, masks), sample_auroc(pooled, labels));
  masks[1].pop_back();
  EXPECT_THROW(pixel_auroc(maps, masks), ShapeError);
}

TEST(PixelAuroc, MapEqualsMask) {
  AnomalyMap m{2, 2, {0, 1, 1, 0}, 1};
  EXPECT_DOUBLE_EQ(pixel_auroc({m}, {BinaryMask{0, 1, 1, 0}}), 1.0);
}

TEST(Components, EightConnected) {
  // Diagonal neighbours join; a separate blob stays apart.
  const BinaryMask m = {1, 0, 0, 0,
                        0, 1, 0, 1,
                        0, 0, 0, 1,
                        1, 0, 0, 0};
  std::vector<int> labels;
  EXPECT_EQ(label_components(m, 4, 4, labels), 3);
  EXPECT_EQ(labels[0], labels[5]);
  EXPECT_EQ(labels[7], labels[11]);
  EXPECT_NE(labels[0], labels[7]);
  EXPECT_NE(labels[12], labels[0]);
}

TEST(Pro, OneRegionMapEqualsMask) {
  AnomalyMap m{4, 4, std::vector<float>(16, 0.0f), 1};
  BinaryMask b(16, 0);
  for (int k : {5, 6, 9, 10}) {
    m.values[k] = 1.0f;
    b[k] = 1;
  }
  EXPECT_DOUBLE_EQ(pro_score({m}, {b}), 1.0);
}

TEST(Pro, TwoRegionsOneDetected) {
  AnomalyMap m{8, 8, std::vector<float>(64, 0.0f), 1};
  BinaryMask b(64, 0);
  for (int k : {9, 10, 17, 18}) {
    b[k] = 1;
    m.values[k] = 1.0f;
  }
  for (int k : {45, 46, 53, 54}) b[k] = 1;  // scored 0 like the background
  const ProCurve c = pro_curve({m}, {b});
  ASSERT_EQ(c.regions, 2);
  // the point at FPR 0 has mean overlap 0.5
  bool seen = false;
  for (std::size_t i = 0; i < c.fpr.size(); ++i)
    if (c.fpr[i] == 0.0 && c.overlap[i] == 0.5) seen = true;
  EXPECT_TRUE(seen);
  // (0, 0.5) then linear to (1, 1): area over [0, 0.3] / 0.3 = 0.575
  EXPECT_NEAR(pro_score({m}, {b}, 0.3), 0.575, 1e-12);
}

TEST(Pro, MatchesExhaustiveOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<AnomalyMap> maps;
    std::vector<BinaryMask> masks;
    for (int img = 0; img < 2; ++img) {
      AnomalyMap m{16, 16, std::vector<float>(256), 0};
      BinaryMask b(256, 0);
      const int blobs = 1 + static_cast<int>(rng.below(3));
      for (int q = 0; q < blobs; ++q) {
        const int cy = static_cast<int>(rng.below(16)), cx = static_cast<int>(rng.below(16));
        const int r = 1 + static_cast<int>(rng.below(3));
        for (int y = std::max(0, cy - r); y < std::min(16, cy + r); ++y)
          for (int x = std::max(0, cx - r); x < std::min(16, cx + r); ++x) b[y * 16 + x] = 1;
      }
      for (int k = 0; k < 256; ++k)
        m.values[k] = static_cast<float>(std::round((rng.uniform() + 0.4 * b[k]) * 50) / 50);
      maps.push_back(m);
      masks.push_back(b);
    }
    for (double limit : {0.05, 0.3, 1.0})
      EXPECT_NEAR(pro_score(maps, masks, limit), oracle::pro_exhaustive(maps, masks, limit), 1e-6);
  }
}

TEST(Pro, Errors) {
  AnomalyMap m{2, 2, {0, 1, 1, 0}, 1};
  EXPECT_THROW(pro_score({m}, {BinaryMask{0, 0, 0, 0}}), UndefinedMetric);
  EXPECT_THROW(pro_score({m}, {BinaryMask{0, 1, 1, 0}}, 0.0), ConfigError);
  EXPECT_THROW(pro_score({m}, {BinaryMask{0, 1, 1}}), ShapeError);
}

TEST(Pro, QuantileSweepForManyValues) {
  // More distinct values than the exact limit switches to quantile thresholds.
  const int side = 400;
  AnomalyMap m{side, side, std::vector<float>(side * side), 0};
  BinaryMask b(static_cast<std::size_t>(side) * side, 0);
  Rng rng(1);
  for (std::size_t k = 0; k < m.values.size(); ++k) {
    b[k] = (k / side) < 40 && (k % side) < 40;
    m.values[k] = static_cast<float>(rng.uniform() + (b[k] ? 0.5 : 0.0));
  }
  const ProCurve c = pro_curve({m}, {b});
  EXPECT_FALSE(c.exact);
  EXPECT_LE(c.fpr.size(), static_cast<std::size_t>(kQuantileThresholds) + 2);
  // Dense reference with 1000 evenly spaced quantiles of the values.
  std::vector<double> sorted(m.values.begin(), m.values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> thresholds;
  for (int q = 0; q < 1000; ++q) thresholds.push_back(sorted[q * (sorted.size() - 1) / 999]);
  EXPECT_NEAR(integrate_pro(c, 0.3), oracle::pro_exhaustive({m}, {b}, 0.3, thresholds), 5e-3);
}

TEST(Report, PerDomainAndSerialization) {
  std::vector<EvalSample> samples;
  Rng rng(2);
  for (int i = 0; i < 12; ++i) {
    EvalSample s;
    s.domain = i < 6 ? data::DomainTag::same : data::DomainTag::view;
    s.label = i % 2 ? data::Label::anomalous : data::Label::normal;
    s.map = AnomalyMap{4, 4, std::vector<float>(16), 0};
    BinaryMask mask(16, 0);
    for (int k = 0; k < 16; ++k) s.map.values[k] = static_cast<float>(rng.uniform());
    if (s.label == data::Label::anomalous) {
      mask[5] = 1;
      s.map.values[5] = 2.0f;
    }
    s.map.score = *std::max_element(s.map.values.begin(), s.map.values.end());
    s.score = s.map.score;
    s.mask = mask;
    samples.push_back(s);
  }
  const EvalReport r = build_report(samples);
  EXPECT_TRUE(r.pixel_annotated);
  ASSERT_EQ(r.per_domain.size(), 2u);
  EXPECT_DOUBLE_EQ(*r.overall.sample_auroc, 1.0);
  EXPECT_EQ(r.overall.n_anomalous, 6);
  const auto j = r.to_json();
  EXPECT_TRUE(j["per_domain"].contains("same"));
  EXPECT_TRUE(j["per_domain"].contains("view"));
  EXPECT_EQ(j["pro_sweep"], "exact");
  const std::string csv = r.to_csv();
  EXPECT_NE(csv.find("same,3,3,1.000000"), std::string::npos);
  EXPECT_NE(csv.find("\nall,6,6,"), std::string::npos);

  for (auto& s : samples) s.mask.reset();
  const EvalReport r2 = build_report(samples);
  EXPECT_FALSE(r2.pixel_annotated);
  EXPECT_FALSE(r2.overall.pixel_auroc.has_value());
  EXPECT_FALSE(r2.overall.pro.has_value());
}
