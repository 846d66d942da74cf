#pragma once

// Property checks shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "mmr/core.hpp"
#include "mmr/fpn.hpp"
#include "mmr/masking.hpp"
#include "mmr/rng.hpp"

namespace checks {

inline mmr::ImageTensor noise_image(int side, std::uint64_t seed) {
  mmr::ImageTensor x(3, side, side);
  mmr::Rng rng(seed);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  return x;
}

// Max abs change of the visible-token embeddings when every masked patch is
// replaced by fresh noise.
inline double token_drop_leakage(const mmr::MmrStudent<float>& student, const mmr::ImageTensor& x, double eta,
                                 std::uint64_t seed) {
  using namespace mmr::masking;
  const PatchSequence a = patchify(x, student.patch());
  const MaskSpec spec = sample_mask_indices(a.count, eta, seed);
  PatchSequence b = a;
  mmr::Rng rng(seed + 1);
  for (int k : spec.masked)
    for (int j = 0; j < b.dim(); ++j) b.data[static_cast<std::size_t>(k) * b.dim() + j] += static_cast<float>(5 * rng.normal());
  const auto ea = mmr::encode_visible_tokens(student, a, spec);
  const auto eb = mmr::encode_visible_tokens(student, b, spec);
  double worst = 0;
  for (std::size_t i = 0; i < ea.size(); ++i) worst = std::max(worst, double(std::abs(ea[i] - eb[i])));
  return worst;
}

struct FillLeakage {
  double max_diff = 0;  // over tokens that contain no perturbed pixel
  int untouched_tokens = 0;
  int perturbed_pixels = 0;
};

// In-place filling with q x q units: perturb the unfilled pixels of one token
// that also holds a filled unit, then compare the encoder output of every other
// token.
inline FillLeakage in_place_fill_leakage(const mmr::MmrStudent<float>& student, const mmr::ImageTensor& x, int q,
                                         double eta, std::uint64_t seed) {
  using namespace mmr::masking;
  const int p = student.patch();
  const int units_per_row = x.width / q;
  const MaskSpec units = sample_unit_mask(x.height, x.width, q, eta, seed);
  const std::set<int> masked(units.masked.begin(), units.masked.end());
  auto is_masked = [&](int y, int xx) { return masked.count((y / q) * units_per_row + xx / q) > 0; };
  const mmr::ImageTensor filled = apply_unit_mask(x, units, 0.0f);
  const int gw = x.width / p, n_tokens = (x.height / p) * gw;

  // first token holding both filled and unfilled pixels
  int target = -1;
  for (int t = 0; t < n_tokens && target < 0; ++t) {
    int hits = 0;
    for (int y = (t / gw) * p; y < (t / gw + 1) * p; ++y)
      for (int xx = (t % gw) * p; xx < (t % gw + 1) * p; ++xx) hits += is_masked(y, xx);
    if (hits > 0 && hits < p * p) target = t;
  }
  FillLeakage out;
  if (target < 0) return out;
  mmr::ImageTensor perturbed = filled;
  mmr::Rng rng(seed + 7);
  for (int y = (target / gw) * p; y < (target / gw + 1) * p; ++y)
    for (int xx = (target % gw) * p; xx < (target % gw + 1) * p; ++xx) {
      if (is_masked(y, xx)) continue;
      ++out.perturbed_pixels;
      for (int c = 0; c < 3; ++c) perturbed.at(c, y, xx) += static_cast<float>(5 * rng.normal());
    }
  const PatchSequence a = patchify(filled, p), b = patchify(perturbed, p);
  const MaskSpec all = sample_mask_indices(a.count, 0.0, 0);
  const auto ea = mmr::encode_visible_tokens(student, a, all);
  const auto eb = mmr::encode_visible_tokens(student, b, all);
  const int d = student.encoder().config().width;
  for (int t = 0; t < a.count; ++t) {
    if (t == target) continue;
    ++out.untouched_tokens;
    for (int j = 0; j < d; ++j)
      out.max_diff = std::max(out.max_diff, double(std::abs(ea[static_cast<std::size_t>(t) * d + j] -
                                                             eb[static_cast<std::size_t>(t) * d + j])));
  }
  return out;
}

struct GradCheck {
  double max_rel = 0;
  std::string worst;
  std::size_t checked = 0;
};

// Width-16 encoder with class token, two pyramid scales, double precision;
// every parameter is compared against a central difference.
inline GradCheck miniature_gradient_check(double step = 1e-4, double floor = 1e-6) {
  mmr::TokenEncoderConfig enc = mmr::TokenEncoderConfig::vit_tiny(16, 2, 2);
  enc.patch = 4;
  enc.include_class_token = true;
  mmr::FpnConfig fpn{{mmr::FpnScale::x4, mmr::FpnScale::x2}, {6, 10}, 16};
  mmr::MmrStudent<double> student(enc, fpn, 3);
  auto& P = student.params().values();
  // Non-trivial norm affine parameters and mask token.
  mmr::Rng rng(17);
  for (auto& v : P) v += 0.05 * rng.normal();

  const int side = 16, gh = side / 4;
  std::vector<double> patches(static_cast<std::size_t>(gh * gh) * 4 * 4 * 3);
  for (auto& v : patches) v = rng.normal();
  const auto spec = mmr::masking::sample_mask_indices(gh * gh, 0.5, 5);
  mmr::MultiScaleFeatures<double> target;
  target.scale_ids = {1, 2};
  target.maps.emplace_back(6, 16, 16);
  target.maps.emplace_back(10, 8, 8);
  for (auto& m : target.maps)
    for (auto& v : m.data) v = rng.normal();

  std::vector<double> G(P.size(), 0.0);
  mmr::image_loss_and_grad(student, patches, gh, gh, spec, target, G.data());
  GradCheck out;
  for (const auto& info : student.params().infos())
    for (std::size_t i = info.offset; i < info.offset + info.size; ++i) {
      const double keep = P[i];
      P[i] = keep + step;
      const double lp = mmr::image_loss_and_grad<double>(student, patches, gh, gh, spec, target, nullptr);
      P[i] = keep - step;
      const double lm = mmr::image_loss_and_grad<double>(student, patches, gh, gh, spec, target, nullptr);
      P[i] = keep;
      const double num = (lp - lm) / (2 * step);
      const double rel = std::abs(num - G[i]) / std::max(std::abs(num) + std::abs(G[i]), floor);
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = info.name + "[" + std::to_string(i - info.offset) + "] analytic " + std::to_string(G[i]) +
                    " numeric " + std::to_string(num);
      }
    }
  return out;
}

}  // namespace checks
