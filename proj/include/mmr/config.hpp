#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmr/backbones.hpp"
#include "mmr/core.hpp"
#include "mmr/data.hpp"
#include "mmr/errors.hpp"
#include "mmr/image.hpp"
#include "mmr/masking.hpp"

namespace mmr {

inline constexpr const char* kCodeVersion = "0.1.0";

// Validation failure tied to one dotted config field.
class ConfigFieldError : public ConfigError {
 public:
  ConfigFieldError(std::string field, const std::string& message)
      : ConfigError(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct DataSection {
  std::filesystem::path root;
  data::Layout layout = data::Layout::aebad;
  PreprocessOptions preprocess{256, 224, true, 0.8, 1.0, {}};
};

struct MaskingSection {
  masking::MaskMode mode = masking::MaskMode::token_drop;
  double eta = 0.4;
  int unit_q = 16;
  float fill_value = 0.0f;
};

struct EncoderSection {
  TokenEncoderConfig arch{EncoderVariant::vit_b_pretrained_mae, 768, 12, 12, 16, 4, 3, true};
  std::filesystem::path weights_path;  // converted MAE checkpoint
};

struct TrainSection {
  int epochs = 200;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double adam_eps = 1e-8;
  std::vector<std::pair<int, double>> lr_schedule;
  int threads = 1;
};

struct EvalSection {
  double fpr_limit = 0.3;
  std::string heatmap_scale = "fixed";  // fixed: [0, 2 * scales]; relative: [min, max]
};

struct RunSection {
  std::filesystem::path out_dir = "runs/default";
  std::uint64_t seed = 0;
  std::string device = "cpu";
};

struct RunConfig {
  DataSection data;
  MaskingSection masking;
  EncoderSection encoder;
  FrozenEncoderConfig teacher;
  TrainSection train;
  EvalSection eval;
  RunSection run;
  data::ToyConfig toy;

  nlohmann::json to_json() const;
  // Keys absent from `j` keep their defaults; unknown keys and type mismatches
  // raise ConfigFieldError naming the dotted path.
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;

  TrainConfig train_config() const;
};

// "a.b.c=value". The value is read as JSON when it parses, else as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Defaults <- file (when given) <- overrides.
RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

}  // namespace mmr
