#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "mmr/config.hpp"
#include "mmr/pipeline.hpp"

using namespace mmr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Minute corpus and model so the whole command set runs in seconds.
class CliFlow : public ::testing::Test {
 protected:
  static inline fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "mmr_cli_flow";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const json cfg = {
        {"data", {{"root", (dir / "toy").string()}, {"resize_to", 32}, {"crop_to", 32}, {"augment", false}}},
        {"encoder", {{"variant", "vit_tiny_scratch"}, {"width", 16}, {"depth", 1}, {"heads", 2}, {"class_token", false}}},
        {"teacher", {{"family", "toy_cnn"}, {"weights", "random"}, {"toy_channels", {4, 8, 8}}}},
        {"train", {{"epochs", 2}, {"batch_size", 2}, {"threads", 1}}},
        {"run", {{"out_dir", (dir / "run").string()}, {"seed", 3}}},
        {"toy", {{"n_train", 4}, {"n_test_normal", 2}, {"n_test_anomalous", 4}, {"image_size", 32},
                 {"shifts", {"none", "mirror_view"}}}}};
    std::ofstream(dir / "tiny.json") << cfg.dump(2);
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }

  static fs::path config() { return dir / "tiny.json"; }
};

}  // namespace

TEST(Config, DefaultsAndOverrides) {
  const RunConfig d = load_config({}, {});
  EXPECT_EQ(d.train.epochs, 200);
  EXPECT_EQ(d.train.batch_size, 16);
  EXPECT_DOUBLE_EQ(d.train.learning_rate, 1e-3);
  EXPECT_DOUBLE_EQ(d.masking.eta, 0.4);
  EXPECT_EQ(d.encoder.arch.width, 768);
  EXPECT_EQ(d.data.preprocess.resize_to, 256);
  EXPECT_EQ(d.data.preprocess.crop_to, 224);

  const RunConfig o = load_config({}, {"masking.eta=0.6", "run.out_dir=somewhere", "teacher.stages=[2,3]"});
  EXPECT_DOUBLE_EQ(o.masking.eta, 0.6);
  EXPECT_EQ(o.run.out_dir, "somewhere");
  EXPECT_EQ(o.teacher.stages_used, (std::vector<int>{2, 3}));
  // round trip through JSON
  EXPECT_EQ(RunConfig::from_json(o.to_json()).to_json(), o.to_json());
}

TEST(Config, StrictFields) {
  try {
    load_config({}, {"train.epochz=3"});
    FAIL();
  } catch (const ConfigFieldError& e) {
    EXPECT_EQ(e.field(), "train.epochz");
  }
  try {
    load_config({}, {"train.epochs=\"many\""});
    FAIL();
  } catch (const ConfigFieldError& e) {
    EXPECT_EQ(e.field(), "train.epochs");
  }
  EXPECT_THROW(load_config({}, {"masking.eta=1.0"}), ConfigError);
  EXPECT_THROW(load_config({}, {"run.device=cuda"}), ConfigError);
  EXPECT_THROW(load_config({}, {"noequals"}), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json", {}), Error);
}

TEST(Dispatch, UsageAndConfigExitCodes) {
  EXPECT_EQ(run({"bogus"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"evaluate"}).code, 2);  // --run is required
  const Result r = run({"train", "--set", "train.epochz=3"});
  EXPECT_EQ(r.code, 3);
  const json e = json::parse(r.err);
  EXPECT_EQ(e["error"], "ConfigError");
  EXPECT_EQ(e["field"], "train.epochz");
  const Result dev = run({"train", "--device", "cuda"});
  EXPECT_EQ(dev.code, 3);
  const Result missing = run({"evaluate", "--run", "/nonexistent/run"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_TRUE(json::parse(missing.err).contains("message"));
}

TEST(Dispatch, SweepAxisParsing) {
  const SweepAxis a = parse_axis("eta=0,0.4,0.9");
  EXPECT_EQ(a.key, "masking.eta");
  EXPECT_EQ(a.values.size(), 3u);
  EXPECT_EQ(parse_axis("q=8,16").key, "masking.unit_q");
  const SweepAxis s = parse_axis("stages=1+2+3,3");
  EXPECT_EQ(s.key, "teacher.stages");
  EXPECT_EQ(s.values[0], "[1,2,3]");
  EXPECT_THROW(parse_axis("eta"), Error);
}

TEST_F(CliFlow, ToygenTrainEvaluatePredictBench) {
  const std::string cfg = config().string();
  Result r = run({"toygen", "-c", cfg, "--out", (dir / "toy").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["records"], 10);

  r = run({"train", "-c", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path run_dir = dir / "run";
  for (const char* f : {"config.json", "checkpoint.json", "weights.bin", "teacher.bin", "loss.csv"})
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  EXPECT_EQ(slurp(run_dir / "loss.csv").rfind("epoch,step,loss\n", 0), 0u);
  const json meta = json::parse(slurp(run_dir / "checkpoint.json"));
  EXPECT_EQ(meta["seed"], 3);
  EXPECT_TRUE(meta.contains("normalization"));

  r = run({"evaluate", "--run", run_dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json report = json::parse(r.out);
  for (const char* domain : {"same", "view"}) {
    ASSERT_TRUE(report["per_domain"].contains(domain)) << domain;
    const double a = report["per_domain"][domain]["sample_auroc"];
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
  EXPECT_TRUE(fs::exists(run_dir / "eval" / "report.json"));
  EXPECT_TRUE(fs::exists(run_dir / "eval" / "report.csv"));
  const std::string first = slurp(run_dir / "eval" / "report.json");
  ASSERT_EQ(run({"evaluate", "--run", run_dir.string(), "--fpr-limit", "0.3"}).code, 0);
  EXPECT_EQ(slurp(run_dir / "eval" / "report.json"), first);

  const fs::path image = dir / "toy" / "test" / "same" / "good" / "000.png";
  r = run({"predict", "--run", run_dir.string(), "--input", image.string(), "--out", (dir / "pred").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "pred" / "000.png"));
  EXPECT_TRUE(fs::exists(dir / "pred" / "000.json"));
  const json side = json::parse(slurp(dir / "pred" / "000.json"));
  EXPECT_GE(side["score"].get<double>(), 0.0);

  r = run({"bench", "--run", run_dir.string(), "--iterations", "2", "--out", (dir / "bench").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GT(json::parse(r.out)["images_per_second"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir / "bench" / "bench.json"));
}

TEST_F(CliFlow, SweepWritesMergedTable) {
  const std::string cfg = config().string();
  if (!fs::exists(dir / "toy"))
    ASSERT_EQ(run({"toygen", "-c", cfg, "--out", (dir / "toy").string()}).code, 0);
  const Result r = run({"sweep", "-c", cfg, "--axis", "eta=0,0.4,0.7", "--set", "train.epochs=1", "--out",
                        (dir / "sweep").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(dir / "sweep" / "results.csv"));
  std::string line;
  int rows = 0;
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("run,masking.eta,", 0), 0u);
  while (std::getline(csv, line)) rows += !line.empty();
  EXPECT_EQ(rows, 3);
  EXPECT_TRUE(fs::exists(dir / "sweep" / "run_002" / "eval" / "report.json"));
}
