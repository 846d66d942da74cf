#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mmr/errors.hpp"
#include "mmr/masking.hpp"
#include "mmr/rng.hpp"

using namespace mmr;
using namespace mmr::masking;

namespace {

ImageTensor random_image(int c, int h, int w, std::uint64_t seed) {
  ImageTensor x(c, h, w);
  Rng rng(seed);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  return x;
}

}  // namespace

TEST(Patchify, RoundTripIsExact) {
  for (int side : {16, 64, 224}) {
    const auto x = random_image(3, side, side, side);
    const auto seq = patchify(x, 16);
    EXPECT_EQ(seq.count, (side / 16) * (side / 16));
    EXPECT_EQ(seq.dim(), 768);
    const auto y = unpatchify(seq);
    EXPECT_EQ(y.data, x.data);
  }
}

TEST(Patchify, RowLayoutIsYXChannel) {
  const auto x = random_image(3, 32, 48, 3);
  const auto seq = patchify(x, 16);
  EXPECT_EQ(seq.grid_h, 2);
  EXPECT_EQ(seq.grid_w, 3);
  EXPECT_THROW(seq.grid_side(), ShapeError);
  // patch 4 = grid (1, 1); element (py=2, px=5, c=1)
  EXPECT_EQ(seq.row(4)[(2 * 16 + 5) * 3 + 1], x.at(1, 16 + 2, 16 + 5));
}

TEST(Patchify, RejectsIndivisibleSides) {
  EXPECT_THROW(patchify(random_image(3, 30, 32, 1), 16), ShapeError);
}

TEST(MaskArithmetic, VisibleCountFloors) {
  EXPECT_EQ(visible_count(196, 0.4), 117);
  EXPECT_EQ(visible_count(196, 0.0), 196);
  EXPECT_EQ(visible_count(64, 0.9), 6);
  EXPECT_EQ(visible_count(10, 0.3), 7);  // 7.000000000000001 or 6.999... both floor to 7
  const auto spec = sample_mask_indices(196, 0.4, 11);
  EXPECT_EQ(spec.visible.size(), 117u);
  EXPECT_EQ(spec.masked.size(), 79u);
}

TEST(MaskArithmetic, PartitionSortedAndSeeded) {
  const auto a = sample_mask_indices(64, 0.6, 3);
  const auto b = sample_mask_indices(64, 0.6, 3);
  const auto c = sample_mask_indices(64, 0.6, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.visible, c.visible);
  EXPECT_TRUE(std::is_sorted(a.visible.begin(), a.visible.end()));
  EXPECT_TRUE(std::is_sorted(a.masked.begin(), a.masked.end()));
  std::set<int> all(a.visible.begin(), a.visible.end());
  all.insert(a.masked.begin(), a.masked.end());
  EXPECT_EQ(all.size(), 64u);
  EXPECT_EQ(*all.begin(), 0);
  EXPECT_EQ(*all.rbegin(), 63);
}

TEST(MaskArithmetic, InclusionFrequencyIsUniform) {
  // Each index is visible with probability |V| / n.
  const int n = 20, trials = 20000;
  std::vector<int> hits(n, 0);
  for (int t = 0; t < trials; ++t)
    for (int k : sample_mask_indices(n, 0.4, static_cast<std::uint64_t>(t)).visible) ++hits[k];
  const double p = 12.0 / 20.0;
  const double sd = std::sqrt(trials * p * (1 - p));
  for (int k = 0; k < n; ++k) EXPECT_NEAR(hits[k], trials * p, 5 * sd) << k;
}

TEST(MaskArithmetic, RejectsBadRatio) {
  EXPECT_THROW(sample_mask_indices(10, 1.0, 0), ConfigError);
  EXPECT_THROW(sample_mask_indices(10, -0.1, 0), ConfigError);
  EXPECT_THROW(sample_mask_indices(0, 0.5, 0), ConfigError);
}

TEST(UnitMask, FillsOnlyMaskedUnits) {
  const auto x = random_image(3, 32, 32, 8);
  const auto spec = sample_unit_mask(32, 32, 8, 0.5, 2);
  EXPECT_EQ(spec.n, 16);
  EXPECT_EQ(spec.visible.size(), 8u);
  const auto y = apply_unit_mask(x, spec, -7.0f);
  std::set<int> masked(spec.masked.begin(), spec.masked.end());
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 32; ++yy)
      for (int xx = 0; xx < 32; ++xx) {
        const int unit = (yy / 8) * 4 + xx / 8;
        if (masked.count(unit))
          ASSERT_EQ(y.at(c, yy, xx), -7.0f);
        else
          ASSERT_EQ(y.at(c, yy, xx), x.at(c, yy, xx));
      }
  EXPECT_THROW(sample_unit_mask(30, 32, 8, 0.5, 2), ShapeError);
}

TEST(AssembleGrid, ScatterAndBackward) {
  const int d = 3;
  const auto spec = sample_mask_indices(6, 0.5, 1);
  std::vector<double> vis = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> token = {100, 200, 300};
  std::vector<double> pos(18);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = 0.01 * static_cast<double>(i);
  const auto grid = assemble_full_grid<double>(vis.data(), 3, spec, token.data(), pos.data(), d);
  for (std::size_t r = 0; r < 3; ++r)
    for (int j = 0; j < d; ++j) EXPECT_EQ(grid[spec.visible[r] * d + j], vis[r * d + j]);
  for (int k : spec.masked)
    for (int j = 0; j < d; ++j) EXPECT_DOUBLE_EQ(grid[k * d + j], token[j] + pos[k * d + j]);

  std::vector<double> dgrid(18, 1.0), dvis(9, 0.0), dtok(3, 0.0);
  assemble_full_grid_backward<double>(dgrid.data(), spec, d, dvis.data(), dtok.data());
  for (double v : dvis) EXPECT_EQ(v, 1.0);
  for (double v : dtok) EXPECT_EQ(v, 3.0);
}

TEST(MaskSpecJson, RoundTrip) {
  const auto a = sample_unit_mask(64, 64, 16, 0.25, 9);
  EXPECT_EQ(mask_spec_from_json(to_json(a)), a);
}
