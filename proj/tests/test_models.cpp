#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "checks.hpp"
#include "mmr/backbones.hpp"
#include "mmr/core.hpp"
#include "mmr/errors.hpp"
#include "mmr/fpn.hpp"
#include "oracles.hpp"

using namespace mmr;
namespace fs = std::filesystem;

namespace {

FrozenEncoderConfig random_teacher(TeacherFamily f) {
  FrozenEncoderConfig c;
  c.family = f;
  c.weights = TeacherWeights::random;
  return c;
}

MultiScaleFeatures<float> random_features(const std::vector<std::array<int, 3>>& shapes, Rng& rng) {
  MultiScaleFeatures<float> z;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    z.maps.emplace_back(shapes[i][0], shapes[i][1], shapes[i][2]);
    z.scale_ids.push_back(static_cast<int>(i) + 1);
    for (auto& v : z.maps.back().data) v = static_cast<float>(rng.normal());
  }
  return z;
}

}  // namespace

TEST(Teacher, ToyShapesAcrossSizes) {
  FrozenEncoder t(random_teacher(TeacherFamily::toy_cnn));
  for (int side : {64, 128, 224}) {
    const auto z = t.extract(checks::noise_image(side, 1));
    ASSERT_EQ(z.maps.size(), 3u);
    const int ch[] = {32, 64, 128};
    for (int s = 0; s < 3; ++s) {
      EXPECT_EQ(z.maps[s].channels, ch[s]);
      EXPECT_EQ(z.maps[s].height, side >> (s + 2));
      EXPECT_EQ(z.maps[s].width, side >> (s + 2));
    }
    EXPECT_EQ(z.scale_ids, (std::vector<int>{1, 2, 3}));
  }
}

TEST(Teacher, ResnetFamiliesAt224) {
  for (auto [family, c1] : {std::pair{TeacherFamily::resnet18, 64}, std::pair{TeacherFamily::wideresnet50, 256}}) {
    FrozenEncoder t(random_teacher(family));
    const auto shapes = t.output_shapes(224, 224);
    ASSERT_EQ(shapes.size(), 3u);
    EXPECT_EQ(shapes[0], (std::array<int, 3>{c1, 56, 56}));
    EXPECT_EQ(shapes[1], (std::array<int, 3>{2 * c1, 28, 28}));
    EXPECT_EQ(shapes[2], (std::array<int, 3>{4 * c1, 14, 14}));
    if (family == TeacherFamily::resnet18) {
      const auto z = t.extract(checks::noise_image(224, 2));
      for (int s = 0; s < 3; ++s) {
        EXPECT_EQ(z.maps[s].channels, shapes[s][0]);
        EXPECT_EQ(z.maps[s].height, shapes[s][1]);
      }
    }
  }
}

TEST(Teacher, StageSubset) {
  auto cfg = random_teacher(TeacherFamily::toy_cnn);
  cfg.stages_used = {2, 3};
  FrozenEncoder t(cfg);
  const auto z = t.extract(checks::noise_image(64, 3));
  ASSERT_EQ(z.maps.size(), 2u);
  EXPECT_EQ(z.maps[0].channels, 64);
  EXPECT_EQ(z.scale_ids, (std::vector<int>{2, 3}));
  cfg.stages_used = {3, 1};
  EXPECT_THROW(FrozenEncoder{cfg}, ConfigError);
}

TEST(Teacher, PretrainedWithoutWeightsFails) {
  FrozenEncoderConfig c;
  c.family = TeacherFamily::wideresnet50;
  c.weights = TeacherWeights::pretrained;
  c.weights_path = "/nonexistent/wrn50.bin";
  EXPECT_THROW(FrozenEncoder{c}, WeightsUnavailable);
}

TEST(Teacher, SaveLoadRoundTripAndDeterministicInit) {
  FrozenEncoder a(random_teacher(TeacherFamily::toy_cnn));
  FrozenEncoder b(random_teacher(TeacherFamily::toy_cnn));
  EXPECT_EQ(a.parameter_hash(), b.parameter_hash());
  auto other = random_teacher(TeacherFamily::toy_cnn);
  other.seed = 99;
  FrozenEncoder c(other);
  EXPECT_NE(a.parameter_hash(), c.parameter_hash());
  const fs::path file = fs::temp_directory_path() / "mmr_teacher_roundtrip.bin";
  a.save(file);
  c.load(file);
  EXPECT_EQ(a.parameter_hash(), c.parameter_hash());
  // Names must match.
  FrozenEncoder r18(random_teacher(TeacherFamily::resnet18));
  EXPECT_THROW(r18.load(file), WeightsUnavailable);
  fs::remove(file);
}

TEST(Teacher, NoDeadFeatureVectors) {
  FrozenEncoder t(random_teacher(TeacherFamily::toy_cnn));
  const auto z = t.extract(checks::noise_image(64, 4));
  for (const auto& m : z.maps)
    for (int k = 0; k < m.positions(); ++k) {
      double n = 0;
      for (int c = 0; c < m.channels; ++c) n += double(m.row(k)[c]) * m.row(k)[c];
      EXPECT_GT(n, 0.0);
    }
}

TEST(Fpn, OutputShapesMatchTeacher) {
  for (auto family : {TeacherFamily::toy_cnn, TeacherFamily::resnet18, TeacherFamily::wideresnet50}) {
    FrozenEncoder t(random_teacher(family));
    const int width = family == TeacherFamily::toy_cnn ? 64 : 32;
    const FpnConfig cfg = fpn_config_for(t, width);
    EXPECT_NO_THROW(check_fpn_against_teacher(cfg, t));
    auto enc = TokenEncoderConfig::vit_tiny(width, 1, 2);
    MmrStudent<float> s(enc, cfg, 1);
    for (int side : family == TeacherFamily::toy_cnn ? std::vector<int>{64, 128} : std::vector<int>{224}) {
      const auto z = student_features(s, checks::noise_image(side, 5));
      const auto expect = t.output_shapes(side, side);
      ASSERT_EQ(z.maps.size(), expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i) {
        EXPECT_EQ(z.maps[i].channels, expect[i][0]);
        EXPECT_EQ(z.maps[i].height, expect[i][1]);
        EXPECT_EQ(z.maps[i].width, expect[i][2]);
      }
    }
  }
}

TEST(Fpn, MismatchIsRejected) {
  FrozenEncoder t(random_teacher(TeacherFamily::toy_cnn));
  FpnConfig cfg = fpn_config_for(t, 64);
  cfg.out_channels[1] = 65;
  EXPECT_THROW(check_fpn_against_teacher(cfg, t), ShapeError);
  cfg = fpn_config_for(t, 64);
  cfg.scales = {FpnScale::x2, FpnScale::x4, FpnScale::x1};
  EXPECT_THROW(check_fpn_against_teacher(cfg, t), ShapeError);
  EXPECT_EQ(teacher_stage_of(FpnScale::x4), 1);
  EXPECT_EQ(scale_for_stage(3), FpnScale::x1);
}

TEST(Encoder, PositionTable) {
  const auto pos = sincos_position_table<double>(2, 3, 8);
  // (row 0, col 0): sin terms 0, cos terms 1 in both halves.
  EXPECT_EQ(pos[0], 0.0);
  EXPECT_EQ(pos[2], 1.0);
  // Tokens in the same column share the column half.
  for (int j = 0; j < 4; ++j) EXPECT_EQ(pos[1 * 8 + j], pos[4 * 8 + j]);
  EXPECT_NE(pos[1 * 8 + 4], pos[4 * 8 + 4]);
}

TEST(Encoder, ZeroVisibleTokensRejected) {
  MmrStudent<float> s(TokenEncoderConfig::vit_tiny(32, 1, 2), FpnConfig{{FpnScale::x1}, {8}, 32}, 0);
  masking::MaskSpec empty;
  empty.n = 4;
  empty.masked = {0, 1, 2, 3};
  const auto seq = masking::patchify(checks::noise_image(32, 1), 16);
  EXPECT_THROW(encode_visible_tokens(s, seq, empty), ConfigError);
}

TEST(Leakage, TokenDropIsolatesVisibleTokens) {
  MmrStudent<float> s(TokenEncoderConfig::vit_tiny(64, 2, 2), FpnConfig{{FpnScale::x1}, {8}, 64}, 2);
  const double diff = checks::token_drop_leakage(s, checks::noise_image(64, 8), 0.5, 3);
  EXPECT_LT(diff, 1e-5);
}

TEST(Leakage, InPlaceFillSharesInformation) {
  MmrStudent<float> s(TokenEncoderConfig::vit_tiny(64, 2, 2), FpnConfig{{FpnScale::x1}, {8}, 64}, 2);
  const auto r = checks::in_place_fill_leakage(s, checks::noise_image(64, 8), 8, 0.5, 3);
  ASSERT_GT(r.untouched_tokens, 0);
  ASSERT_GT(r.perturbed_pixels, 0);
  EXPECT_GT(r.max_diff, 1e-3);
}

TEST(Loss, MatchesOracleAndBounds) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int s = 1 + static_cast<int>(rng.below(3));
    std::vector<std::array<int, 3>> shapes;
    for (int i = 0; i < s; ++i)
      shapes.push_back({1 + static_cast<int>(rng.below(8)), 1 + static_cast<int>(rng.below(5)),
                        1 + static_cast<int>(rng.below(5))});
    const auto a = random_features(shapes, rng);
    const auto b = random_features(shapes, rng);
    const double l = mmr_loss(a, b);
    EXPECT_NEAR(l, oracle::loss(a, b), 1e-6);
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0 * s);
  }
}

TEST(Loss, ExtremesAndZeroVectors) {
  Rng rng(1);
  auto a = random_features({{4, 2, 2}, {3, 1, 1}}, rng);
  auto neg = a;
  for (auto& m : neg.maps)
    for (auto& v : m.data) v = -v;
  EXPECT_NEAR(mmr_loss(a, a), 0.0, 1e-6);
  EXPECT_NEAR(mmr_loss(a, neg), 4.0, 1e-6);
  auto zero = a;
  for (auto& m : zero.maps) std::fill(m.data.begin(), m.data.end(), 0.0f);
  MultiScaleFeatures<float> g;
  EXPECT_NEAR(mmr_loss(zero, a, &g), 2.0, 1e-6);  // cos = 0 everywhere
  for (const auto& m : g.maps)
    for (float v : m.data) EXPECT_TRUE(std::isfinite(v));
  auto bad = a;
  bad.maps[1].channels = 2;
  bad.maps[1].data.resize(2);
  EXPECT_THROW(mmr_loss(a, bad), ShapeError);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  std::vector<std::array<int, 3>> shapes{{5, 2, 3}, {3, 1, 2}};
  MultiScaleFeatures<double> a, b;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    a.maps.emplace_back(shapes[i][0], shapes[i][1], shapes[i][2]);
    b.maps.emplace_back(shapes[i][0], shapes[i][1], shapes[i][2]);
    for (auto& v : a.maps[i].data) v = rng.normal();
    for (auto& v : b.maps[i].data) v = rng.normal();
  }
  MultiScaleFeatures<double> g;
  mmr_loss(a, b, &g);
  for (std::size_t i = 0; i < a.maps.size(); ++i)
    for (std::size_t k = 0; k < a.maps[i].data.size(); ++k) {
      const double keep = a.maps[i].data[k];
      a.maps[i].data[k] = keep + 1e-6;
      const double lp = mmr_loss(a, b);
      a.maps[i].data[k] = keep - 1e-6;
      const double lm = mmr_loss(a, b);
      a.maps[i].data[k] = keep;
      EXPECT_NEAR(g.maps[i].data[k], (lp - lm) / 2e-6, 1e-7);
    }
}

TEST(AnomalyMap, MatchesOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const int side = 4 << rng.below(3);  // 4, 8, 16
    const int s = 1 + static_cast<int>(rng.below(3));
    std::vector<std::array<int, 3>> shapes;
    for (int i = 0; i < s; ++i) shapes.push_back({1 + static_cast<int>(rng.below(6)), side >> i, side >> i});
    const auto a = random_features(shapes, rng);
    const auto b = random_features(shapes, rng);
    const int out = side * (1 + static_cast<int>(rng.below(4)));
    const AnomalyMap m = anomaly_map(a, b, out, out);
    const auto ref = oracle::anomaly(a, b, out, out);
    ASSERT_EQ(m.values.size(), ref.size());
    double mx = -1;
    for (std::size_t k = 0; k < ref.size(); ++k) {
      ASSERT_NEAR(m.values[k], ref[k], 1e-6);
      mx = std::max(mx, ref[k]);
    }
    EXPECT_NEAR(m.score, mx, 1e-6);
    EXPECT_GE(m.score, 0.0f);
    EXPECT_LE(m.score, 2.0f * s + 1e-6f);
  }
}

TEST(AnomalyMap, IdenticalFeaturesGiveZeroAndSmallOutputRejected) {
  Rng rng(3);
  const auto a = random_features({{3, 4, 4}, {2, 2, 2}}, rng);
  const AnomalyMap m = anomaly_map(a, a, 16, 16);
  for (float v : m.values) EXPECT_NEAR(v, 0.0f, 1e-6);
  EXPECT_THROW(anomaly_map(a, a, 2, 2), ConfigError);
}

TEST(Student, GradientCheckMiniature) {
  const auto r = checks::miniature_gradient_check();
  EXPECT_GT(r.checked, 1000u);
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
}

TEST(Student, InferenceHeatmapShape) {
  FrozenEncoder t(random_teacher(TeacherFamily::toy_cnn));
  MmrStudent<float> s(TokenEncoderConfig::vit_tiny(64, 1, 2), fpn_config_for(t, 64), 0);
  const AnomalyMap m = infer_heatmap(s, t, checks::noise_image(64, 2));
  EXPECT_EQ(m.height, 64);
  EXPECT_EQ(m.width, 64);
  EXPECT_EQ(m.values.size(), 64u * 64u);
}

TEST(Training, LossDescendsAndTeacherStaysFrozen) {
  FrozenEncoder t(random_teacher(TeacherFamily::toy_cnn));
  const auto hash = t.parameter_hash();
  MmrStudent<float> s(TokenEncoderConfig::vit_tiny(64, 2, 2), fpn_config_for(t, 64), 0);
  std::vector<ImageTensor> images;
  for (int i = 0; i < 4; ++i) images.push_back(checks::noise_image(64, 100 + i));
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 4;
  cfg.eta = 0.4;
  const auto curve = train_on_tensors(s, t, images, cfg);
  ASSERT_EQ(curve.size(), 50u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += curve[i].loss;
    last += curve[curve.size() - 1 - i].loss;
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(t.parameter_hash(), hash);
}

TEST(Training, SeededRunsAreIdentical) {
  FrozenEncoder t(random_teacher(TeacherFamily::toy_cnn));
  std::vector<ImageTensor> images;
  for (int i = 0; i < 5; ++i) images.push_back(checks::noise_image(32, 200 + i));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.mode = masking::MaskMode::in_place_fill;
  cfg.unit_q = 8;
  std::vector<std::vector<LossRecord>> runs;
  std::vector<std::vector<float>> params;
  for (int r = 0; r < 2; ++r) {
    MmrStudent<float> s(TokenEncoderConfig::vit_tiny(32, 1, 2), fpn_config_for(t, 32), 0);
    runs.push_back(train_on_tensors(s, t, images, cfg));
    params.push_back(s.params().values());
  }
  ASSERT_EQ(runs[0].size(), 9u);
  for (std::size_t i = 0; i < runs[0].size(); ++i) EXPECT_EQ(runs[0][i].loss, runs[1][i].loss);
  EXPECT_EQ(params[0], params[1]);
}

TEST(Training, ConfigValidation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.resolved_schedule(), (std::vector<std::pair<int, double>>{{160, 0.1}, {180, 0.1}}));
  EXPECT_DOUBLE_EQ(cfg.lr_at(159), 1e-3);
  EXPECT_NEAR(cfg.lr_at(170), 1e-4, 1e-18);
  EXPECT_NEAR(cfg.lr_at(199), 1e-5, 1e-18);
  cfg.eta = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  FrozenEncoder t(random_teacher(TeacherFamily::toy_cnn));
  MmrStudent<float> s(TokenEncoderConfig::vit_tiny(32, 1, 2), fpn_config_for(t, 32), 0);
  EXPECT_THROW(train_on_tensors(s, t, {}, TrainConfig{}), ConfigError);
}
