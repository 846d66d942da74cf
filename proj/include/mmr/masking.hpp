#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <vector>

#include "mmr/errors.hpp"
#include "mmr/image.hpp"

namespace mmr::masking {

enum class MaskMode { token_drop, in_place_fill };

std::string to_string(MaskMode m);
MaskMode parse_mask_mode(const std::string& s);

// n x (p * p * c) rows; row k is the patch at grid (k / grid_w, k % grid_w),
// flattened in (y, x, channel) order.
struct PatchSequence {
  int count = 0;
  int patch = 0;
  int channels = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<float> data;

  int dim() const { return patch * patch * channels; }
  // Side of the (square) token grid.
  int grid_side() const {
    if (grid_h != grid_w) throw ShapeError("token grid is not square");
    return grid_h;
  }
  const float* row(int k) const { return data.data() + static_cast<std::size_t>(k) * dim(); }
};

PatchSequence patchify(const ImageTensor& x, int patch);
ImageTensor unpatchify(const PatchSequence& seq);

// Rows of `seq` at `indices`, in that order.
std::vector<float> gather_rows(const PatchSequence& seq, const std::vector<int>& indices);

struct MaskSpec {
  int n = 0;  // number of units (patches in token_drop mode)
  double eta = 0.0;
  int unit_q = 16;
  MaskMode mode = MaskMode::token_drop;
  std::uint64_t seed = 0;
  std::vector<int> visible;  // sorted
  std::vector<int> masked;   // sorted complement

  bool operator==(const MaskSpec&) const = default;
};

// floor(n * (1 - eta)); the count of units kept visible.
int visible_count(int n, double eta);

// Uniformly random visible subset of size visible_count(n, eta).
// Throws ConfigError when eta is outside [0, 1) or n < 1.
MaskSpec sample_mask_indices(int n, double eta, std::uint64_t seed,
                             MaskMode mode = MaskMode::token_drop, int unit_q = 16);

// The unit mask for an image: units are q x q pixel squares in row-major order.
MaskSpec sample_unit_mask(int height, int width, int unit_q, double eta, std::uint64_t seed);

// Overwrites every pixel of the masked units with `fill`; visible units are
// untouched. Throws ShapeError when q does not divide the image sides.
ImageTensor apply_unit_mask(const ImageTensor& x, const MaskSpec& spec, float fill = 0.0f);

// Scatters visible embeddings back to their grid positions; masked positions get
// mask_token + pos_emb[k]. Result is n x d in row-major grid order.
template <class T>
std::vector<T> assemble_full_grid(const T* visible_emb, int visible_rows, const MaskSpec& spec,
                                  const T* mask_token, const T* pos_emb, int d) {
  if (visible_rows != static_cast<int>(spec.visible.size()))
    throw ShapeError("visible embedding count does not match mask spec");
  if (spec.visible.size() + spec.masked.size() != static_cast<std::size_t>(spec.n))
    throw ShapeError("mask spec does not partition the grid");
  std::vector<T> grid(static_cast<std::size_t>(spec.n) * d);
  for (std::size_t r = 0; r < spec.visible.size(); ++r) {
    const T* src = visible_emb + r * d;
    T* dst = grid.data() + static_cast<std::size_t>(spec.visible[r]) * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  for (int k : spec.masked) {
    T* dst = grid.data() + static_cast<std::size_t>(k) * d;
    const T* pos = pos_emb + static_cast<std::size_t>(k) * d;
    for (int j = 0; j < d; ++j) dst[j] = mask_token[j] + pos[j];
  }
  return grid;
}

// Backward of assemble_full_grid: splits dgrid into visible-row gradients and
// the accumulated mask-token gradient.
template <class T>
void assemble_full_grid_backward(const T* dgrid, const MaskSpec& spec, int d, T* dvisible,
                                 T* dmask_token) {
  for (std::size_t r = 0; r < spec.visible.size(); ++r) {
    const T* src = dgrid + static_cast<std::size_t>(spec.visible[r]) * d;
    for (int j = 0; j < d; ++j) dvisible[r * d + j] = src[j];
  }
  for (int k : spec.masked) {
    const T* src = dgrid + static_cast<std::size_t>(k) * d;
    for (int j = 0; j < d; ++j) dmask_token[j] += src[j];
  }
}

nlohmann::json to_json(const MaskSpec& spec);
MaskSpec mask_spec_from_json(const nlohmann::json& j);

}  // namespace mmr::masking
