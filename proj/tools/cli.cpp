#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mmr/config.hpp"
#include "mmr/errors.hpp"
#include "mmr/pipeline.hpp"

namespace mmr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> device, layout, data, out;
  std::optional<double> fpr_limit;
  std::optional<int> threads;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool with_config) {
  if (with_config) cmd->add_option("-c,--config", c.config, "JSON config file");
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--device", c.device, "compute device (cpu)");
  cmd->add_option("--layout", c.layout, "dataset layout: mvtec, aebad, manifest_file");
  cmd->add_option("--fpr-limit", c.fpr_limit, "PRO integration limit");
  cmd->add_option("--data", c.data, "dataset root");
  cmd->add_option("--threads", c.threads, "worker threads (0 = all cores)");
  cmd->add_option("--set", c.sets, "override key=value (dotted path)");
  cmd->allow_extras();
}

// Named flags first, then --set, then bare --a.b=value extras.
std::vector<std::string> overrides_of(const Common& c, const CLI::App* cmd) {
  std::vector<std::string> o;
  if (c.seed) o.push_back("run.seed=" + std::to_string(*c.seed));
  if (c.device) o.push_back("run.device=" + json(*c.device).dump());
  if (c.layout) o.push_back("data.layout=" + json(*c.layout).dump());
  if (c.fpr_limit) o.push_back("eval.fpr_limit=" + json(*c.fpr_limit).dump());
  if (c.data) o.push_back("data.root=" + json(*c.data).dump());
  if (c.threads) o.push_back("train.threads=" + std::to_string(*c.threads));
  o.insert(o.end(), c.sets.begin(), c.sets.end());
  for (const std::string& extra : cmd->remaining()) {
    if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos)
      throw UsageError("unexpected argument: " + extra);
    o.push_back(extra.substr(2));
  }
  return o;
}

json error_json(const std::string& kind, const std::string& message) {
  return {{"error", kind}, {"message", message}};
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked multi-scale reconstruction anomaly detection"};
  app.name("mmr");
  app.require_subcommand(1);

  Common common;
  std::string run_dir, out_dir;
  std::vector<std::string> inputs, axes;
  int iterations = 20;

  auto* train = app.add_subcommand("train", "train a student and write a run directory");
  add_common(train, common, true);
  train->add_option("--out", common.out, "run directory (run.out_dir)");

  auto* evaluate = app.add_subcommand("evaluate", "score the test split of a dataset");
  add_common(evaluate, common, false);
  evaluate->add_option("--run", run_dir, "run directory")->required();
  evaluate->add_option("--out", out_dir, "report directory (default <run>/eval)");

  auto* predict = app.add_subcommand("predict", "write heatmaps and scores for images");
  add_common(predict, common, false);
  predict->add_option("--run", run_dir, "run directory")->required();
  predict->add_option("--input", inputs, "image files or directories")->required();
  predict->add_option("--out", out_dir, "output directory")->required();

  auto* toygen = app.add_subcommand("toygen", "generate the procedural toy corpus");
  add_common(toygen, common, true);
  toygen->add_option("--out", out_dir, "corpus directory")->required();

  auto* sweep = app.add_subcommand("sweep", "train and evaluate over a grid of settings");
  add_common(sweep, common, true);
  sweep->add_option("--axis", axes, "name=v1,v2,... (eta, q, stages or a dotted key)")->required();
  sweep->add_option("--out", out_dir, "sweep directory")->required();

  auto* bench = app.add_subcommand("bench", "heatmap throughput at the configured input size");
  add_common(bench, common, true);
  bench->add_option("--run", run_dir, "run directory (else a freshly initialized model)");
  bench->add_option("--iterations", iterations, "timed images");
  bench->add_option("--out", out_dir, "directory for bench.json");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << error_json("UsageError", e.what()).dump() << "\n" << app.help();
    return 2;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const std::vector<std::string> overrides = overrides_of(common, cmd);

    if (cmd == train) {
      std::vector<std::string> o = overrides;
      if (common.out) o.push_back("run.out_dir=" + json(*common.out).dump());
      const RunConfig cfg = load_config(common.config, o);
      const TrainOutcome t = run_train(cfg);
      out << json{{"run_dir", t.run_dir.string()},
                  {"steps", t.curve.size()},
                  {"final_loss", t.curve.back().loss},
                  {"seconds", t.seconds}}
                 .dump(2)
          << "\n";
    } else if (cmd == evaluate) {
      const fs::path dest = out_dir.empty() ? fs::path(run_dir) / "eval" : fs::path(out_dir);
      const auto report = run_evaluate(run_dir, overrides, dest);
      out << report.to_json().dump(2) << "\n";
    } else if (cmd == predict) {
      std::vector<fs::path> files(inputs.begin(), inputs.end());
      out << run_predict(run_dir, files, out_dir, overrides).dump(2) << "\n";
    } else if (cmd == toygen) {
      const RunConfig cfg = load_config(common.config, overrides);
      const auto records = data::generate_toy_dataset(cfg.toy, out_dir);
      out << json{{"root", out_dir}, {"records", records.size()}}.dump(2) << "\n";
    } else if (cmd == sweep) {
      std::vector<SweepAxis> parsed;
      for (const auto& a : axes) parsed.push_back(parse_axis(a));
      const auto rows = run_sweep(overrides, common.config, parsed, out_dir);
      out << json{{"runs", rows.size()}, {"results", (fs::path(out_dir) / "results.csv").string()}}.dump(2) << "\n";
    } else if (cmd == bench) {
      json result;
      if (!run_dir.empty()) {
        LoadedRun run = load_checkpoint(run_dir, overrides);
        result = run_bench(run.config, run.model, iterations);
      } else {
        const RunConfig cfg = load_config(common.config, overrides);
        result = run_bench(cfg, build_model(cfg), iterations);
      }
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream(fs::path(out_dir) / "bench.json") << result.dump(2) << "\n";
      }
      out << result.dump(2) << "\n";
    }
    return 0;
  } catch (const UsageError& e) {
    err << error_json("UsageError", e.what()).dump() << "\n";
    return 2;
  } catch (const ConfigFieldError& e) {
    json j = error_json("ConfigError", e.what());
    j["field"] = e.field();
    err << j.dump() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    err << error_json("ConfigError", e.what()).dump() << "\n";
    return 3;
  } catch (const Error& e) {
    err << error_json(e.kind(), e.what()).dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << error_json("InternalError", e.what()).dump() << "\n";
    return 1;
  }
}

}  // namespace mmr::cli
