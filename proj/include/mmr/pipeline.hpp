#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmr/config.hpp"
#include "mmr/core.hpp"
#include "mmr/metrics.hpp"

namespace mmr {

// Student and teacher built from a config (teacher weights loaded or generated,
// student freshly initialized).
struct Model {
  std::unique_ptr<FrozenEncoder> teacher;
  std::unique_ptr<MmrStudent<float>> student;
};
Model build_model(const RunConfig& cfg);

// Run directory contents:
//   config.json      resolved configuration
//   checkpoint.json  code version, seed, normalization, parameter layout, teacher hash
//   weights.bin      student parameters
//   teacher.bin      teacher parameters when they are randomly initialized
//   loss.csv         epoch,step,loss
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, const Model& model);
struct LoadedRun {
  RunConfig config;
  Model model;
};
// `overrides` apply on top of the stored config (e.g. a different data root).
LoadedRun load_checkpoint(const std::filesystem::path& dir, const std::vector<std::string>& overrides = {});

void write_loss_csv(const std::filesystem::path& file, const std::vector<LossRecord>& curve);

struct TrainOutcome {
  std::filesystem::path run_dir;
  std::vector<LossRecord> curve;
  double seconds = 0.0;
};
TrainOutcome run_train(const RunConfig& cfg);

// Scores every test record; writes report.json and report.csv into out_dir.
metrics::EvalReport evaluate_model(const RunConfig& cfg, const Model& model,
                                   const std::vector<data::SampleRecord>& records);
metrics::EvalReport run_evaluate(const std::filesystem::path& run_dir, const std::vector<std::string>& overrides,
                                 const std::filesystem::path& out_dir);

// Heatmap colouring: value range mapped through a perceptually uniform colormap.
Image8 render_heatmap(const AnomalyMap& map, float lo, float hi);
// One PNG plus a JSON sidecar {score, min, max, scale} per input image.
nlohmann::json run_predict(const std::filesystem::path& run_dir, const std::vector<std::filesystem::path>& inputs,
                           const std::filesystem::path& out_dir, const std::vector<std::string>& overrides);

// Sweep axes: name=v1,v2,... Aliases: eta -> masking.eta, q -> masking.unit_q,
// stages -> teacher.stages (values written as 1+2+3).
struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};
SweepAxis parse_axis(const std::string& spec);
// Trains and evaluates each grid point in out_dir/run_NNN; writes out_dir/results.csv.
std::vector<nlohmann::json> run_sweep(const std::vector<std::string>& base_overrides,
                                      const std::filesystem::path& config_file, const std::vector<SweepAxis>& axes,
                                      const std::filesystem::path& out_dir);

// Images per second for infer_heatmap at the configured input size.
nlohmann::json run_bench(const RunConfig& cfg, const Model& model, int iterations);
std::string hardware_descriptor();

}  // namespace mmr
