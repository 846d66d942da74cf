#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "mmr/backbones.hpp"
#include "mmr/data.hpp"
#include "mmr/fpn.hpp"
#include "mmr/masking.hpp"

namespace mmr {

// Guards every norm product in cosine similarities.
inline constexpr double kCosineEps = 1e-8;

// Sum over scales of the mean over positions of (1 - cos(z_masked(k), z_frozen(k))).
// When `grad` is given it receives dL/dz_masked. Throws ShapeError on misaligned inputs.
template <class T>
T mmr_loss(const MultiScaleFeatures<T>& z_masked, const MultiScaleFeatures<T>& z_frozen,
           MultiScaleFeatures<T>* grad = nullptr);

struct AnomalyMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major
  float score = 0.0f;         // max(values)
};

// Per-scale 1 - cos maps (h_i x w_i, row-major), before upsampling.
std::vector<std::vector<float>> scale_anomaly_maps(const MultiScaleFeatures<float>& z_masked,
                                                   const MultiScaleFeatures<float>& z_frozen);

// Sum over scales of bilinearly upsampled (1 - cos) maps; score is the maximum.
// Throws ConfigError when the output is smaller than a scale's map.
AnomalyMap anomaly_map(const MultiScaleFeatures<float>& z_masked,
                       const MultiScaleFeatures<float>& z_frozen, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Student: visible-token encoder + mask-token reassembly + simple FPN.

template <class T>
struct StudentCache {
  masking::MaskSpec spec;
  int grid_h = 0, grid_w = 0;
  EncoderCache<T> encoder;
  FpnCache<T> fpn;
};

template <class T>
class MmrStudent {
 public:
  MmrStudent(const TokenEncoderConfig& encoder, const FpnConfig& fpn, std::uint64_t seed);

  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const TokenEncoder<T>& encoder() const { return encoder_; }
  const SimpleFpn<T>& fpn() const { return fpn_; }
  std::size_t mask_token_offset() const { return mask_token_; }
  int patch() const { return encoder_.config().patch; }

  // patches: all n patch rows (n x p*p*c) of a grid_h x grid_w grid. Only the
  // rows listed in spec.visible are read.
  MultiScaleFeatures<T> forward(const std::vector<T>& patches, int grid_h, int grid_w,
                                const masking::MaskSpec& spec, StudentCache<T>* cache) const;
  void backward(const StudentCache<T>& cache, const MultiScaleFeatures<T>& dz, T* G) const;

 private:
  nn::ParamStore<T> store_;
  TokenEncoder<T> encoder_;
  SimpleFpn<T> fpn_;
  std::size_t mask_token_ = 0;
};

// Embeddings of the visible patches only (|V| x d).
std::vector<float> encode_visible_tokens(const MmrStudent<float>& student,
                                         const masking::PatchSequence& patches,
                                         const masking::MaskSpec& spec);

// Student features of an unmasked image (every token visible).
MultiScaleFeatures<float> student_features(const MmrStudent<float>& student, const ImageTensor& x);

// Both branches on the whole image; map at input resolution.
AnomalyMap infer_heatmap(const MmrStudent<float>& student, const FrozenEncoder& teacher,
                         const ImageTensor& x);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double adam_eps = 1e-8;
  // (epoch, multiplier) milestones applied cumulatively; empty selects
  // x0.1 at ceil(0.8 E) and ceil(0.9 E).
  std::vector<std::pair<int, double>> lr_schedule;
  double eta = 0.4;
  masking::MaskMode mode = masking::MaskMode::token_drop;
  int unit_q = 16;          // in_place_fill unit side
  float fill_value = 0.0f;  // in_place_fill value (normalized space)
  std::uint64_t seed = 0;
  int threads = 1;  // 0 = hardware concurrency; results depend on the count

  void validate() const;
  std::vector<std::pair<int, double>> resolved_schedule() const;
  double lr_at(int epoch) const;
};

struct LossRecord {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

struct TrainHooks {
  std::function<void(const LossRecord&)> on_step;
  std::function<void(int epoch)> on_epoch_end;
};

// Optimizes the student on normal training images; the teacher sees the same
// unmasked image. Throws ConfigError on an empty set and NumericError on a
// non-finite loss.
std::vector<LossRecord> train(MmrStudent<float>& student, const FrozenEncoder& teacher,
                              const std::vector<data::SampleRecord>& records,
                              const PreprocessOptions& preprocess, const TrainConfig& cfg,
                              const TrainHooks& hooks = {});

// Same loop over already-preprocessed images (augmentation disabled).
std::vector<LossRecord> train_on_tensors(MmrStudent<float>& student, const FrozenEncoder& teacher,
                                         const std::vector<ImageTensor>& images,
                                         const TrainConfig& cfg, const TrainHooks& hooks = {});

// Loss and gradient of one image under a given mask; the building block of the
// trainer, exposed for verification.
template <class T>
T image_loss_and_grad(const MmrStudent<T>& student, const std::vector<T>& patches, int grid_h,
                      int grid_w, const masking::MaskSpec& spec, const MultiScaleFeatures<T>& target,
                      T* G);

}  // namespace mmr
