#pragma once

#include <string>
#include <vector>

#include "mmr/backbones.hpp"
#include "mmr/nn.hpp"

namespace mmr {

// Upsampling factor of a pyramid branch relative to the token grid.
enum class FpnScale { x4 = 4, x2 = 2, x1 = 1 };
std::string to_string(FpnScale s);
// x4 <-> stage 1, x2 <-> stage 2, x1 <-> stage 3.
int teacher_stage_of(FpnScale s);
FpnScale scale_for_stage(int stage);

struct FpnConfig {
  std::vector<FpnScale> scales;   // finest first
  std::vector<int> out_channels;  // one per scale
  int in_width = 768;

  void validate() const;
};

// The pairing used by MMR: one branch per teacher stage, channels copied from
// the teacher.
FpnConfig fpn_config_for(const FrozenEncoder& teacher, int in_width);
// ShapeError unless every branch matches its teacher stage's channel count.
void check_fpn_against_teacher(const FpnConfig& cfg, const FrozenEncoder& teacher);

template <class T>
struct FpnBranchCache {
  std::vector<T> up1, up1_norm, up1_act, up2;
  nn::NormCache<T> up1_ln;
  std::vector<T> proj, proj_norm, cols, conv;
  nn::NormCache<T> proj_ln, conv_ln;
  int h = 0, w = 0;  // branch resolution
};

template <class T>
struct FpnCache {
  std::vector<T> grid;
  int grid_h = 0, grid_w = 0;
  std::vector<FpnBranchCache<T>> branches;
};

// Parallel branches from one token grid, no lateral connections:
//   x4: deconv 2x2/2 -> LN -> GELU -> deconv 2x2/2
//   x2: deconv 2x2/2
//   x1: identity
// then each branch: 1x1 conv -> LN -> 3x3 conv -> LN.
template <class T>
class SimpleFpn {
 public:
  void create(nn::ParamStore<T>& ps, const FpnConfig& cfg, Rng& rng);
  const FpnConfig& config() const { return cfg_; }

  // grid: (gh * gw) x d, row-major.
  MultiScaleFeatures<T> forward(const T* P, const std::vector<T>& grid, int grid_h, int grid_w,
                                FpnCache<T>* cache) const;
  // dgrid is overwritten with dL/dgrid.
  void backward(const T* P, const FpnCache<T>& cache, const MultiScaleFeatures<T>& dout,
                std::vector<T>& dgrid, T* G) const;

 private:
  struct Branch {
    FpnScale scale = FpnScale::x1;
    nn::Deconv2x2<T> up1, up2;
    nn::LayerNorm<T> up1_ln;
    nn::Conv2d<T> proj, conv;
    nn::LayerNorm<T> proj_ln, conv_ln;
    int in_ch = 0;  // channels entering the 1x1 projection
  };
  FpnConfig cfg_;
  std::vector<Branch> branches_;
};

}  // namespace mmr
