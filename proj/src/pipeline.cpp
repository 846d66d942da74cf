#include "mmr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "mmr/rng.hpp"
#include "mmr/simd/kernels.hpp"

namespace mmr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
  if (!out) throw IoError("write failed: " + file.string());
}

std::unique_ptr<MmrStudent<float>> build_student(const RunConfig& cfg, const FrozenEncoder& teacher) {
  const FpnConfig fpn = fpn_config_for(teacher, cfg.encoder.arch.width);
  check_fpn_against_teacher(fpn, teacher);
  return std::make_unique<MmrStudent<float>>(cfg.encoder.arch, fpn, derive_seed(cfg.run.seed, {0x57u}));
}

std::vector<nn::ParamInfo> encoder_params(const nn::ParamStore<float>& ps) {
  std::vector<nn::ParamInfo> out;
  for (const auto& p : ps.infos())
    if (p.name.rfind("fpn.", 0) != 0 && p.name != "mask_token") out.push_back(p);
  return out;
}

PreprocessOptions eval_preprocess(const RunConfig& cfg) {
  PreprocessOptions pp = cfg.data.preprocess;
  pp.augment = false;
  return pp;
}

// Runs f(i) for i in [0, n) over `threads` workers with a static interleave.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += threads) f(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

int worker_count(const RunConfig& cfg) {
  return cfg.train.threads == 0 ? static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))
                                : cfg.train.threads;
}

std::vector<data::SampleRecord> dataset(const RunConfig& cfg) {
  if (cfg.data.root.empty()) throw ConfigFieldError("data.root", "no dataset given");
  return data::load_manifest(cfg.data.root, cfg.data.layout);
}

}  // namespace

Model build_model(const RunConfig& cfg) {
  Model m;
  m.teacher = std::make_unique<FrozenEncoder>(cfg.teacher);
  m.student = build_student(cfg, *m.teacher);
  if (cfg.encoder.arch.variant == EncoderVariant::vit_b_pretrained_mae) {
    if (cfg.encoder.weights_path.empty())
      throw WeightsUnavailable("encoder.weights_path is required for vit_b_pretrained_mae");
    const WeightFile wf = read_weights(cfg.encoder.weights_path);
    assign_weights(wf, encoder_params(m.student->params()), m.student->params().values());
  }
  return m;
}

void save_checkpoint(const fs::path& dir, const RunConfig& cfg, const Model& model) {
  fs::create_directories(dir);
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
  const auto& ps = model.student->params();
  save_weights(dir / "weights.bin", ps.infos(), ps.values(), {{"kind", "student"}});
  if (cfg.teacher.weights == TeacherWeights::random) model.teacher->save(dir / "teacher.bin");
  json layout = json::array();
  for (const auto& p : ps.infos()) layout.push_back({{"name", p.name}, {"shape", p.shape}});
  const json data_json = cfg.to_json()["data"];
  json ck = {{"code_version", kCodeVersion},
             {"seed", cfg.run.seed},
             {"normalization", {{"mean", data_json["mean"]}, {"std", data_json["std"]}}},
             {"teacher_hash", hex64(model.teacher->parameter_hash())},
             {"student_hash", hex64(fnv1a(ps.data(), ps.size() * sizeof(float)))},
             {"student_parameters", ps.size()},
             {"param_layout", layout}};
  write_text(dir / "checkpoint.json", ck.dump(2) + "\n");
}

LoadedRun load_checkpoint(const fs::path& dir, const std::vector<std::string>& overrides) {
  if (!fs::exists(dir / "config.json") || !fs::exists(dir / "weights.bin"))
    throw NotFound("not a run directory: " + dir.string());
  LoadedRun run{load_config(dir / "config.json", overrides), {}};
  const RunConfig& cfg = run.config;
  if (cfg.teacher.weights == TeacherWeights::random) {
    run.model.teacher = std::make_unique<FrozenEncoder>(cfg.teacher);
    if (fs::exists(dir / "teacher.bin")) run.model.teacher->load(dir / "teacher.bin");
  } else {
    run.model.teacher = std::make_unique<FrozenEncoder>(cfg.teacher);
  }
  run.model.student = build_student(cfg, *run.model.teacher);
  auto& ps = run.model.student->params();
  assign_weights(read_weights(dir / "weights.bin"), ps.infos(), ps.values());

  std::ifstream in(dir / "checkpoint.json");
  if (in) {
    const json ck = json::parse(in, nullptr, false);
    if (!ck.is_discarded() && ck.contains("teacher_hash") &&
        ck["teacher_hash"] != hex64(run.model.teacher->parameter_hash()))
      spdlog::warn("teacher weights differ from the ones used in training ({})", dir.string());
  }
  return run;
}

void write_loss_csv(const fs::path& file, const std::vector<LossRecord>& curve) {
  std::string text = "epoch,step,loss\n";
  char buf[96];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g\n", r.epoch, r.step, r.loss);
    text += buf;
  }
  write_text(file, text);
}

TrainOutcome run_train(const RunConfig& cfg) {
  cfg.validate();
  const auto records = dataset(cfg);
  Model model = build_model(cfg);
  TrainOutcome out;
  out.run_dir = cfg.run.out_dir;
  fs::create_directories(out.run_dir);
  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks hooks;
  double epoch_loss = 0.0;
  int epoch_steps = 0;
  hooks.on_step = [&](const LossRecord& r) {
    epoch_loss += r.loss;
    ++epoch_steps;
  };
  hooks.on_epoch_end = [&](int epoch) {
    spdlog::info("epoch {}/{} loss {:.5f}", epoch + 1, cfg.train.epochs, epoch_loss / std::max(1, epoch_steps));
    epoch_loss = 0.0;
    epoch_steps = 0;
  };
  out.curve = train(*model.student, *model.teacher, records, cfg.data.preprocess, cfg.train_config(), hooks);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(out.run_dir, cfg, model);
  write_loss_csv(out.run_dir / "loss.csv", out.curve);
  return out;
}

metrics::EvalReport evaluate_model(const RunConfig& cfg, const Model& model,
                                   const std::vector<data::SampleRecord>& records) {
  std::vector<const data::SampleRecord*> test;
  for (const auto& r : records)
    if (r.split == data::Split::test) test.push_back(&r);
  if (test.empty()) throw ManifestError("dataset has no test samples");
  bool any_anomalous = false, annotated = true;
  for (const auto* r : test)
    if (r->label == data::Label::anomalous) {
      any_anomalous = true;
      annotated = annotated && r->mask_path.has_value();
    }
  annotated = annotated && any_anomalous;

  const PreprocessOptions pp = eval_preprocess(cfg);
  std::vector<metrics::EvalSample> samples(test.size());
  parallel_for(static_cast<int>(test.size()), worker_count(cfg), [&](int i) {
    const auto& r = *test[static_cast<std::size_t>(i)];
    auto& s = samples[static_cast<std::size_t>(i)];
    const ImageTensor x = preprocess_image(read_image(r.image_path), pp);
    s.domain = r.domain;
    s.label = r.label;
    s.map = infer_heatmap(*model.student, *model.teacher, x);
    s.score = s.map.score;
    if (annotated) {
      if (r.mask_path)
        s.mask = preprocess_mask(read_image(*r.mask_path), pp);
      else
        s.mask = metrics::BinaryMask(static_cast<std::size_t>(x.height) * x.width, 0);
    }
  });
  return metrics::build_report(samples, cfg.eval.fpr_limit);
}

metrics::EvalReport run_evaluate(const fs::path& run_dir, const std::vector<std::string>& overrides,
                                 const fs::path& out_dir) {
  LoadedRun run = load_checkpoint(run_dir, overrides);
  const auto report = evaluate_model(run.config, run.model, dataset(run.config));
  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", report.to_json().dump(2) + "\n");
  write_text(out_dir / "report.csv", report.to_csv());
  return report;
}

Image8 render_heatmap(const AnomalyMap& map, float lo, float hi) {
  // Polynomial fit of the viridis colormap.
  static const double c[7][3] = {{0.2777273272234177, 0.005407344544966578, 0.3340998053353061},
                                 {0.1050930431085774, 1.404613529898575, 1.384590162594685},
                                 {-0.3308618287255563, 0.214847559468213, 0.09509516302823659},
                                 {-4.634230498983486, -5.799100973351585, -19.33244095627987},
                                 {6.228269936347081, 14.17993336680509, 56.69055260068105},
                                 {4.776384997670288, -13.74514537774601, -65.35303263337234},
                                 {-5.435455855934631, 4.645852612178535, 26.3124352495832}};
  Image8 img(map.width, map.height, 3);
  const double span = hi > lo ? hi - lo : 1.0;
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      double t = (map.values[static_cast<std::size_t>(y) * map.width + x] - lo) / span;
      t = std::clamp(t, 0.0, 1.0);
      for (int ch = 0; ch < 3; ++ch) {
        double v = c[6][ch];
        for (int k = 5; k >= 0; --k) v = c[k][ch] + t * v;
        img.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  return img;
}

json run_predict(const fs::path& run_dir, const std::vector<fs::path>& inputs, const fs::path& out_dir,
                 const std::vector<std::string>& overrides) {
  LoadedRun run = load_checkpoint(run_dir, overrides);
  const RunConfig& cfg = run.config;
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(in)) {
      files.push_back(in);
    } else {
      throw NotFound("input not found: " + in.string());
    }
  }
  if (files.empty()) throw NotFound("no input images");
  fs::create_directories(out_dir);
  const PreprocessOptions pp = eval_preprocess(cfg);
  const float fixed_hi = 2.0f * static_cast<float>(cfg.teacher.stages_used.size());
  std::vector<json> results(files.size());
  parallel_for(static_cast<int>(files.size()), worker_count(cfg), [&](int i) {
    const fs::path& file = files[static_cast<std::size_t>(i)];
    const ImageTensor x = preprocess_image(read_image(file), pp);
    const AnomalyMap map = infer_heatmap(*run.model.student, *run.model.teacher, x);
    const auto [mn, mx] = std::minmax_element(map.values.begin(), map.values.end());
    const bool fixed = cfg.eval.heatmap_scale == "fixed";
    const float lo = fixed ? 0.0f : *mn, hi = fixed ? fixed_hi : *mx;
    const std::string stem = file.stem().string();
    write_png(out_dir / (stem + ".png"), render_heatmap(map, lo, hi));
    json j = {{"image", file.string()}, {"score", map.score}, {"min", *mn},   {"max", *mx},
              {"scale", cfg.eval.heatmap_scale}, {"range", {lo, hi}}, {"heatmap", stem + ".png"}};
    write_text(out_dir / (stem + ".json"), j.dump(2) + "\n");
    results[static_cast<std::size_t>(i)] = j;
  });
  return json(results);
}

SweepAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ConfigFieldError("--axis", "expected name=v1,v2,...: " + spec);
  SweepAxis axis;
  const std::string name = spec.substr(0, eq);
  axis.key = name == "eta" ? "masking.eta" : name == "q" ? "masking.unit_q" : name == "stages" ? "teacher.stages" : name;
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ',')) {
    if (v.empty()) throw ConfigFieldError("--axis", "empty value in " + spec);
    if (axis.key == "teacher.stages") {
      std::string arr = "[";
      for (char ch : v) arr += ch == '+' ? ',' : ch;
      v = arr + "]";
    }
    axis.values.push_back(v);
  }
  return axis;
}

std::vector<json> run_sweep(const std::vector<std::string>& base_overrides, const fs::path& config_file,
                            const std::vector<SweepAxis>& axes, const fs::path& out_dir) {
  if (axes.empty()) throw ConfigFieldError("--axis", "a sweep needs at least one axis");
  std::size_t total = 1;
  for (const auto& a : axes) total *= a.values.size();
  // Validate every grid point before training anything.
  std::vector<RunConfig> grid;
  std::vector<std::vector<std::string>> labels;
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::vector<std::string> overrides = base_overrides;
    std::vector<std::string> point;
    std::size_t rem = idx;
    for (std::size_t a = axes.size(); a-- > 0;) {
      const auto& axis = axes[a];
      const std::string& v = axis.values[rem % axis.values.size()];
      rem /= axis.values.size();
      point.insert(point.begin(), v);
    }
    for (std::size_t a = 0; a < axes.size(); ++a) overrides.push_back(axes[a].key + "=" + point[a]);
    char name[32];
    std::snprintf(name, sizeof name, "run_%03zu", idx);
    overrides.push_back("run.out_dir=" + (out_dir / name).string());
    grid.push_back(load_config(config_file, overrides));
    labels.push_back(point);
  }
  fs::create_directories(out_dir);
  std::vector<json> rows;
  std::string csv = "run";
  for (const auto& a : axes) csv += "," + a.key;
  csv += ",final_loss,sample_auroc,pixel_auroc,pro\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const RunConfig& cfg = grid[i];
    spdlog::info("sweep point {}/{}", i + 1, grid.size());
    const TrainOutcome t = run_train(cfg);
    LoadedRun run = load_checkpoint(t.run_dir);
    const auto report = evaluate_model(run.config, run.model, dataset(run.config));
    fs::create_directories(t.run_dir / "eval");
    write_text(t.run_dir / "eval" / "report.json", report.to_json().dump(2) + "\n");
    write_text(t.run_dir / "eval" / "report.csv", report.to_csv());
    json row = {{"run", t.run_dir.filename().string()}, {"final_loss", t.curve.back().loss}, {"report", report.to_json()}};
    csv += t.run_dir.filename().string();
    for (std::size_t a = 0; a < axes.size(); ++a) {
      row["axes"][axes[a].key] = labels[i][a];
      std::string cell = labels[i][a];
      std::replace(cell.begin(), cell.end(), ',', '+');
      csv += "," + cell;
    }
    char loss[32];
    std::snprintf(loss, sizeof loss, "%.9g", t.curve.back().loss);
    csv += std::string(",") + loss + "," + opt(report.overall.sample_auroc) + "," + opt(report.overall.pixel_auroc) +
           "," + opt(report.overall.pro) + "\n";
    rows.push_back(row);
    write_text(out_dir / "results.csv", csv);
  }
  return rows;
}

std::string hardware_descriptor() {
  std::string model = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("model name", 0) == 0 || line.rfind("Model", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) model = line.substr(colon + 2);
      break;
    }
  return model + "; " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads; simd " +
         std::string(simd::isa_name(simd::active().isa));
}

json run_bench(const RunConfig& cfg, const Model& model, int iterations) {
  if (iterations < 1) throw ConfigFieldError("--iterations", "must be >= 1");
  const int side = cfg.data.preprocess.crop_to;
  ImageTensor x(3, side, side);
  Rng rng(derive_seed(cfg.run.seed, {0xbeu}));
  for (float& v : x.data) v = static_cast<float>(rng.normal());
  infer_heatmap(*model.student, *model.teacher, x);  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iterations; ++i) infer_heatmap(*model.student, *model.teacher, x);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {{"images_per_second", iterations / secs},
          {"seconds", secs},
          {"iterations", iterations},
          {"input_size", side},
          {"encoder", to_string(cfg.encoder.arch.variant)},
          {"teacher", to_string(cfg.teacher.family)},
          {"threads", 1},
          {"hardware", hardware_descriptor()}};
}

}  // namespace mmr
