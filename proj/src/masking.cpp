#include "mmr/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmr/rng.hpp"

namespace mmr::masking {

std::string to_string(MaskMode m) { return m == MaskMode::token_drop ? "token_drop" : "in_place_fill"; }

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "token_drop") return MaskMode::token_drop;
  if (s == "in_place_fill") return MaskMode::in_place_fill;
  throw ConfigError("unknown masking mode: '" + s + "'");
}

PatchSequence patchify(const ImageTensor& x, int patch) {
  if (patch <= 0 || x.height % patch != 0 || x.width % patch != 0)
    throw ShapeError("image " + std::to_string(x.height) + "x" + std::to_string(x.width) +
                     " is not divisible by patch " + std::to_string(patch));
  PatchSequence seq;
  seq.patch = patch;
  seq.channels = x.channels;
  seq.grid_h = x.height / patch;
  seq.grid_w = x.width / patch;
  seq.count = seq.grid_h * seq.grid_w;
  const int dim = seq.dim();
  seq.data.resize(static_cast<std::size_t>(seq.count) * dim);
  for (int k = 0; k < seq.count; ++k) {
    const int gy = k / seq.grid_w, gx = k % seq.grid_w;
    float* row = seq.data.data() + static_cast<std::size_t>(k) * dim;
    for (int py = 0; py < patch; ++py)
      for (int px = 0; px < patch; ++px)
        for (int c = 0; c < x.channels; ++c)
          row[(py * patch + px) * x.channels + c] = x.at(c, gy * patch + py, gx * patch + px);
  }
  return seq;
}

ImageTensor unpatchify(const PatchSequence& seq) {
  const int p = seq.patch;
  ImageTensor x(seq.channels, seq.grid_h * p, seq.grid_w * p);
  for (int k = 0; k < seq.count; ++k) {
    const int gy = k / seq.grid_w, gx = k % seq.grid_w;
    const float* row = seq.row(k);
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px)
        for (int c = 0; c < seq.channels; ++c)
          x.at(c, gy * p + py, gx * p + px) = row[(py * p + px) * seq.channels + c];
  }
  return x;
}

std::vector<float> gather_rows(const PatchSequence& seq, const std::vector<int>& indices) {
  const int dim = seq.dim();
  std::vector<float> out(indices.size() * static_cast<std::size_t>(dim));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || indices[r] >= seq.count) throw ShapeError("patch index out of range");
    std::copy_n(seq.row(indices[r]), dim, out.data() + r * dim);
  }
  return out;
}

int visible_count(int n, double eta) {
  return static_cast<int>(std::floor(n * (1.0 - eta) + 1e-9));
}

MaskSpec sample_mask_indices(int n, double eta, std::uint64_t seed, MaskMode mode, int unit_q) {
  if (!(eta >= 0.0 && eta < 1.0)) throw ConfigError("masking ratio must lie in [0, 1)");
  if (n < 1) throw ConfigError("mask sampling needs at least one unit");
  MaskSpec spec;
  spec.n = n;
  spec.eta = eta;
  spec.unit_q = unit_q;
  spec.mode = mode;
  spec.seed = seed;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  const int keep = visible_count(n, eta);
  spec.visible.assign(order.begin(), order.begin() + keep);
  spec.masked.assign(order.begin() + keep, order.end());
  std::sort(spec.visible.begin(), spec.visible.end());
  std::sort(spec.masked.begin(), spec.masked.end());
  return spec;
}

MaskSpec sample_unit_mask(int height, int width, int unit_q, double eta, std::uint64_t seed) {
  if (unit_q <= 0 || height % unit_q != 0 || width % unit_q != 0)
    throw ShapeError("unit size " + std::to_string(unit_q) + " does not divide the image");
  return sample_mask_indices((height / unit_q) * (width / unit_q), eta, seed,
                             MaskMode::in_place_fill, unit_q);
}

ImageTensor apply_unit_mask(const ImageTensor& x, const MaskSpec& spec, float fill) {
  const int q = spec.unit_q;
  if (q <= 0 || x.height % q != 0 || x.width % q != 0)
    throw ShapeError("unit size " + std::to_string(q) + " does not divide the image");
  const int units_w = x.width / q;
  if ((x.height / q) * units_w != spec.n) throw ShapeError("mask spec unit count mismatch");
  ImageTensor out = x;
  for (int u : spec.masked) {
    const int uy = u / units_w, ux = u % units_w;
    for (int c = 0; c < x.channels; ++c)
      for (int y = uy * q; y < (uy + 1) * q; ++y)
        for (int xx = ux * q; xx < (ux + 1) * q; ++xx) out.at(c, y, xx) = fill;
  }
  return out;
}

nlohmann::json to_json(const MaskSpec& spec) {
  return {{"n", spec.n},         {"eta", spec.eta},         {"q", spec.unit_q},
          {"mode", to_string(spec.mode)}, {"seed", spec.seed}, {"visible", spec.visible},
          {"masked", spec.masked}};
}

MaskSpec mask_spec_from_json(const nlohmann::json& j) {
  MaskSpec spec;
  spec.n = j.at("n").get<int>();
  spec.eta = j.at("eta").get<double>();
  spec.unit_q = j.at("q").get<int>();
  spec.mode = parse_mask_mode(j.at("mode").get<std::string>());
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.visible = j.at("visible").get<std::vector<int>>();
  spec.masked = j.at("masked").get<std::vector<int>>();
  return spec;
}

}  // namespace mmr::masking
