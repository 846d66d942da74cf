#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmr/image.hpp"
#include "mmr/masking.hpp"
#include "mmr/nn.hpp"

namespace mmr {

// One feature map stored position-major: row k = spatial position
// (k / width, k % width) holding `channels` values.
template <class T>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w) {}
  int positions() const { return height * width; }
  const T* row(int k) const { return data.data() + static_cast<std::size_t>(k) * channels; }
  T* row(int k) { return data.data() + static_cast<std::size_t>(k) * channels; }
};

// Ordered by teacher stage, finest first; scale_ids holds the stage numbers.
template <class T>
struct MultiScaleFeatures {
  std::vector<FeatureMap<T>> maps;
  std::vector<int> scale_ids;
};

// ---------------------------------------------------------------------------
// Trainable visible-token encoder (a ViT).

enum class EncoderVariant { vit_b_pretrained_mae, vit_tiny_scratch };
std::string to_string(EncoderVariant v);
EncoderVariant parse_encoder_variant(const std::string& s);

struct TokenEncoderConfig {
  EncoderVariant variant = EncoderVariant::vit_b_pretrained_mae;
  int width = 768;
  int depth = 12;
  int heads = 12;
  int patch = 16;
  int mlp_ratio = 4;
  int in_channels = 3;
  bool include_class_token = false;

  static TokenEncoderConfig vit_b();
  static TokenEncoderConfig vit_tiny(int width = 192, int depth = 4, int heads = 3);
  void validate() const;
};

// Fixed 2D sine-cosine table, n x d for an gh x gw grid. The first half of each
// row encodes the column, the second half the row.
template <class T>
std::vector<T> sincos_position_table(int grid_h, int grid_w, int d);

template <class T>
struct EncoderCache {
  std::vector<nn::BlockCache<T>> blocks;
  nn::NormCache<T> final_norm;
  std::vector<T> patches;  // visible patch rows fed to the embedding
  int tokens = 0;          // including the class token
};

template <class T>
class TokenEncoder {
 public:
  void create(nn::ParamStore<T>& ps, const TokenEncoderConfig& cfg, Rng& rng);
  const TokenEncoderConfig& config() const { return cfg_; }

  // patches: |V| x (p*p*c) rows of the visible patches, `positions` their grid
  // indices (positional embeddings follow the original grid, not the compacted
  // order). Returns |V| x d after the final norm, class token removed.
  // Throws ConfigError when no token is visible.
  std::vector<T> forward(const T* P, const std::vector<T>& patches,
                         const std::vector<int>& positions, int grid_h, int grid_w,
                         EncoderCache<T>* cache) const;

  // dout is |V| x d. Adds parameter gradients into G.
  void backward(const T* P, const EncoderCache<T>& cache, const std::vector<T>& dout, T* G) const;

 private:
  TokenEncoderConfig cfg_;
  nn::Linear<T> patch_embed_;
  std::size_t cls_token_ = 0;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> norm_;
};

// ---------------------------------------------------------------------------
// Frozen hierarchical teacher.

enum class TeacherFamily { wideresnet50, resnet18, toy_cnn };
enum class TeacherWeights { pretrained, random };
std::string to_string(TeacherFamily v);
std::string to_string(TeacherWeights v);
TeacherFamily parse_teacher_family(const std::string& s);
TeacherWeights parse_teacher_weights(const std::string& s);

struct FrozenEncoderConfig {
  TeacherFamily family = TeacherFamily::wideresnet50;
  std::vector<int> stages_used{1, 2, 3};
  TeacherWeights weights = TeacherWeights::pretrained;
  std::filesystem::path weights_path;  // converted checkpoint for `pretrained`
  std::vector<int> toy_channels{32, 64, 128};
  std::uint64_t seed = 1234;  // random weights

  void validate() const;
};

class FrozenEncoder {
 public:
  // Throws WeightsUnavailable when pretrained weights cannot be loaded.
  explicit FrozenEncoder(const FrozenEncoderConfig& cfg);

  const FrozenEncoderConfig& config() const { return cfg_; }
  // Channel count of teacher stage 1..3.
  int stage_channels(int stage) const;
  // (c, h, w) for each used stage at the given input size.
  std::vector<std::array<int, 3>> output_shapes(int height, int width) const;

  MultiScaleFeatures<float> extract(const ImageTensor& x) const;

  std::uint64_t parameter_hash() const;
  const nn::ParamStore<float>& parameters() const { return store_; }

  void save(const std::filesystem::path& file) const;
  // Replaces the weights with those stored in `file` (names and shapes must match).
  void load(const std::filesystem::path& file);

 private:
  struct ConvBn {
    nn::Conv2d<float> conv;  // batch norm folded into the bias
  };
  struct Block {
    std::vector<ConvBn> convs;
    bool has_downsample = false;
    ConvBn downsample;
  };
  struct Stage {
    std::vector<Block> blocks;
  };

  void build_toy(Rng& rng);
  void build_resnet(bool bottleneck, const std::vector<int>& depths, int width_factor, Rng& rng);
  ConvBn make_conv(const std::string& name, int cin, int cout, int k, int stride, int pad, Rng& rng);

  FrozenEncoderConfig cfg_;
  nn::ParamStore<float> store_;
  std::vector<ConvBn> stem_;
  bool stem_pool_ = false;
  std::vector<Stage> stages_;
  std::array<int, 3> channels_{};
  bool residual_ = false;
};

// Flat weight file: "MMRW0001", u64 header length, JSON header
// {"params": [{name, shape, offset, size}], "meta": {...}}, then float32 data.
void save_weights(const std::filesystem::path& file, const std::vector<nn::ParamInfo>& infos,
                  const std::vector<float>& values, const nlohmann::json& meta = {});
struct WeightFile {
  std::vector<nn::ParamInfo> infos;
  std::vector<float> values;
  nlohmann::json meta;
};
WeightFile read_weights(const std::filesystem::path& file);
// Copies every parameter of `infos` by name from `file`; throws WeightsUnavailable
// on a missing name or shape mismatch.
void assign_weights(const WeightFile& file, const std::vector<nn::ParamInfo>& infos,
                    std::vector<float>& values);

std::uint64_t fnv1a(const void* data, std::size_t bytes);

}  // namespace mmr
