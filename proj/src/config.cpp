#include "mmr/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

namespace mmr {

using nlohmann::json;

namespace {

// Floats are echoed with the digits they were written with.
double tidy(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.7g", static_cast<double>(v));
  return std::strtod(buf, nullptr);
}

std::string type_name(const json& j) {
  if (j.is_object()) return "object";
  if (j.is_array()) return "array";
  if (j.is_string()) return "string";
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer() || j.is_number_unsigned()) return "integer";
  if (j.is_number()) return "number";
  return "null";
}

bool compatible(const json& def, const json& val) {
  if (def.is_number_integer() || def.is_number_unsigned()) {
    if (val.is_number_integer() || val.is_number_unsigned()) return true;
    return val.is_number_float() && std::floor(val.get<double>()) == val.get<double>();
  }
  if (def.is_number()) return val.is_number();
  return type_name(def) == type_name(val);
}

void merge_strict(const json& defaults, const json& user, json& out, const std::string& prefix) {
  if (!user.is_object()) throw ConfigFieldError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, val] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigFieldError(path, "unknown key");
    const json& def = defaults.at(key);
    if (def.is_object()) {
      merge_strict(def, val, out[key], path);
    } else {
      if (!compatible(def, val))
        throw ConfigFieldError(path, "expected " + type_name(def) + ", got " + type_name(val));
      out[key] = val;
    }
  }
}

// Typed read with the field path attached to any conversion failure.
template <class T>
T read(const json& root, const std::string& path) {
  const json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    node = &node->at(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return node->get<T>();
  } catch (const json::exception& e) {
    throw ConfigFieldError(path, e.what());
  }
}

template <class F>
auto field(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigFieldError&) {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigFieldError(path, e.what());
  }
}

}  // namespace

json RunConfig::to_json() const {
  const auto& pp = data.preprocess;
  json j;
  j["data"] = {{"root", data.root.string()},
               {"layout", data::to_string(data.layout)},
               {"resize_to", pp.resize_to},
               {"crop_to", pp.crop_to},
               {"augment", pp.augment},
               {"crop_scale_min", pp.crop_scale_min},
               {"crop_scale_max", pp.crop_scale_max},
               {"mean", {tidy(pp.norm.mean[0]), tidy(pp.norm.mean[1]), tidy(pp.norm.mean[2])}},
               {"std", {tidy(pp.norm.std[0]), tidy(pp.norm.std[1]), tidy(pp.norm.std[2])}}};
  j["masking"] = {{"mode", masking::to_string(masking.mode)},
                  {"eta", masking.eta},
                  {"unit_q", masking.unit_q},
                  {"fill_value", tidy(masking.fill_value)}};
  const auto& a = encoder.arch;
  j["encoder"] = {{"variant", to_string(a.variant)}, {"width", a.width},
                  {"depth", a.depth},                {"heads", a.heads},
                  {"patch", a.patch},                {"mlp_ratio", a.mlp_ratio},
                  {"class_token", a.include_class_token}, {"weights_path", encoder.weights_path.string()}};
  j["teacher"] = {{"family", to_string(teacher.family)},
                  {"stages", teacher.stages_used},
                  {"weights", to_string(teacher.weights)},
                  {"weights_path", teacher.weights_path.string()},
                  {"toy_channels", teacher.toy_channels},
                  {"seed", teacher.seed}};
  json schedule = json::array();
  for (const auto& [e, m] : train.lr_schedule) schedule.push_back({e, m});
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"weight_decay", train.weight_decay},
                {"adam_eps", train.adam_eps},
                {"lr_schedule", schedule},
                {"threads", train.threads}};
  j["eval"] = {{"fpr_limit", eval.fpr_limit}, {"heatmap_scale", eval.heatmap_scale}};
  j["run"] = {{"out_dir", run.out_dir.string()}, {"seed", run.seed}, {"device", run.device}};
  json defects = json::array(), shifts = json::array();
  for (auto d : toy.defect_kinds) defects.push_back(data::to_string(d));
  for (auto s : toy.shift_kinds) shifts.push_back(data::to_string(s));
  j["toy"] = {{"n_train", toy.n_train},
              {"n_test_normal", toy.n_test_normal},
              {"n_test_anomalous", toy.n_test_anomalous},
              {"image_size", toy.image_size},
              {"defects", defects},
              {"shifts", shifts},
              {"seed", toy.seed},
              {"illumination_factor", toy.illumination_factor}};
  return j;
}

RunConfig RunConfig::from_json(const json& user) {
  json j = RunConfig{}.to_json();
  merge_strict(RunConfig{}.to_json(), user, j, "");

  RunConfig c;
  auto& pp = c.data.preprocess;
  c.data.root = read<std::string>(j, "data.root");
  c.data.layout = field("data.layout", [&] { return data::parse_layout(read<std::string>(j, "data.layout")); });
  pp.resize_to = read<int>(j, "data.resize_to");
  pp.crop_to = read<int>(j, "data.crop_to");
  pp.augment = read<bool>(j, "data.augment");
  pp.crop_scale_min = read<double>(j, "data.crop_scale_min");
  pp.crop_scale_max = read<double>(j, "data.crop_scale_max");
  const auto mean = read<std::vector<float>>(j, "data.mean");
  const auto stdv = read<std::vector<float>>(j, "data.std");
  if (mean.size() != 3) throw ConfigFieldError("data.mean", "expected 3 values");
  if (stdv.size() != 3) throw ConfigFieldError("data.std", "expected 3 values");
  std::copy(mean.begin(), mean.end(), pp.norm.mean.begin());
  std::copy(stdv.begin(), stdv.end(), pp.norm.std.begin());

  c.masking.mode = field("masking.mode", [&] { return masking::parse_mask_mode(read<std::string>(j, "masking.mode")); });
  c.masking.eta = read<double>(j, "masking.eta");
  c.masking.unit_q = read<int>(j, "masking.unit_q");
  c.masking.fill_value = read<float>(j, "masking.fill_value");

  auto& a = c.encoder.arch;
  a.variant = field("encoder.variant", [&] { return parse_encoder_variant(read<std::string>(j, "encoder.variant")); });
  a.width = read<int>(j, "encoder.width");
  a.depth = read<int>(j, "encoder.depth");
  a.heads = read<int>(j, "encoder.heads");
  a.patch = read<int>(j, "encoder.patch");
  a.mlp_ratio = read<int>(j, "encoder.mlp_ratio");
  a.include_class_token = read<bool>(j, "encoder.class_token");
  c.encoder.weights_path = read<std::string>(j, "encoder.weights_path");

  c.teacher.family = field("teacher.family", [&] { return parse_teacher_family(read<std::string>(j, "teacher.family")); });
  c.teacher.stages_used = read<std::vector<int>>(j, "teacher.stages");
  c.teacher.weights = field("teacher.weights", [&] { return parse_teacher_weights(read<std::string>(j, "teacher.weights")); });
  c.teacher.weights_path = read<std::string>(j, "teacher.weights_path");
  c.teacher.toy_channels = read<std::vector<int>>(j, "teacher.toy_channels");
  c.teacher.seed = read<std::uint64_t>(j, "teacher.seed");

  c.train.epochs = read<int>(j, "train.epochs");
  c.train.batch_size = read<int>(j, "train.batch_size");
  c.train.learning_rate = read<double>(j, "train.learning_rate");
  c.train.beta1 = read<double>(j, "train.beta1");
  c.train.beta2 = read<double>(j, "train.beta2");
  c.train.weight_decay = read<double>(j, "train.weight_decay");
  c.train.adam_eps = read<double>(j, "train.adam_eps");
  for (const auto& m : j.at("train").at("lr_schedule")) {
    if (!m.is_array() || m.size() != 2 || !m[0].is_number() || !m[1].is_number())
      throw ConfigFieldError("train.lr_schedule", "expected [epoch, multiplier] pairs");
    c.train.lr_schedule.emplace_back(m[0].get<int>(), m[1].get<double>());
  }
  c.train.threads = read<int>(j, "train.threads");

  c.eval.fpr_limit = read<double>(j, "eval.fpr_limit");
  c.eval.heatmap_scale = read<std::string>(j, "eval.heatmap_scale");

  c.run.out_dir = read<std::string>(j, "run.out_dir");
  c.run.seed = read<std::uint64_t>(j, "run.seed");
  c.run.device = read<std::string>(j, "run.device");

  c.toy.n_train = read<int>(j, "toy.n_train");
  c.toy.n_test_normal = read<int>(j, "toy.n_test_normal");
  c.toy.n_test_anomalous = read<int>(j, "toy.n_test_anomalous");
  c.toy.image_size = read<int>(j, "toy.image_size");
  c.toy.defect_kinds.clear();
  for (const auto& s : read<std::vector<std::string>>(j, "toy.defects"))
    c.toy.defect_kinds.push_back(field("toy.defects", [&] { return data::parse_defect(s); }));
  c.toy.shift_kinds.clear();
  for (const auto& s : read<std::vector<std::string>>(j, "toy.shifts"))
    c.toy.shift_kinds.push_back(field("toy.shifts", [&] { return data::parse_shift(s); }));
  c.toy.seed = read<std::uint64_t>(j, "toy.seed");
  c.toy.illumination_factor = read<double>(j, "toy.illumination_factor");

  c.validate();
  return c;
}

void RunConfig::validate() const {
  const auto& pp = data.preprocess;
  if (pp.resize_to < 1) throw ConfigFieldError("data.resize_to", "must be positive");
  if (pp.crop_to < 16 || pp.crop_to % 16 != 0) throw ConfigFieldError("data.crop_to", "must be a positive multiple of 16");
  if (pp.crop_to > pp.resize_to) throw ConfigFieldError("data.crop_to", "exceeds data.resize_to");
  if (!(pp.crop_scale_min > 0 && pp.crop_scale_min <= pp.crop_scale_max && pp.crop_scale_max <= 1))
    throw ConfigFieldError("data.crop_scale_min", "need 0 < crop_scale_min <= crop_scale_max <= 1");
  for (float s : pp.norm.std)
    if (!(s > 0)) throw ConfigFieldError("data.std", "must be positive");

  if (!(masking.eta >= 0 && masking.eta < 1)) throw ConfigFieldError("masking.eta", "must lie in [0, 1)");
  if (masking.unit_q < 1) throw ConfigFieldError("masking.unit_q", "must be >= 1");
  if (masking.mode == masking::MaskMode::in_place_fill && pp.crop_to % masking.unit_q != 0)
    throw ConfigFieldError("masking.unit_q", "must divide data.crop_to");

  field("encoder", [&] {
    encoder.arch.validate();
    return 0;
  });
  if (pp.crop_to % encoder.arch.patch != 0) throw ConfigFieldError("encoder.patch", "must divide data.crop_to");

  field("teacher", [&] {
    teacher.validate();
    return 0;
  });

  field("train", [&] {
    train_config().validate();
    return 0;
  });
  for (const auto& [e, m] : train.lr_schedule)
    if (e < 0 || !(m > 0)) throw ConfigFieldError("train.lr_schedule", "epochs must be >= 0 and multipliers positive");

  if (!(eval.fpr_limit > 0 && eval.fpr_limit <= 1)) throw ConfigFieldError("eval.fpr_limit", "must lie in (0, 1]");
  if (eval.heatmap_scale != "fixed" && eval.heatmap_scale != "relative")
    throw ConfigFieldError("eval.heatmap_scale", "expected fixed or relative");
  if (run.device != "cpu") throw ConfigFieldError("run.device", "only cpu is supported by this build");
  field("toy", [&] {
    toy.validate();
    return 0;
  });
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = train.epochs;
  t.batch_size = train.batch_size;
  t.learning_rate = train.learning_rate;
  t.beta1 = train.beta1;
  t.beta2 = train.beta2;
  t.weight_decay = train.weight_decay;
  t.adam_eps = train.adam_eps;
  t.lr_schedule = train.lr_schedule;
  t.eta = masking.eta;
  t.mode = masking.mode;
  t.unit_q = masking.unit_q;
  t.fill_value = masking.fill_value;
  t.seed = run.seed;
  t.threads = train.threads;
  return t;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigFieldError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigFieldError(key, "empty path component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json user = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw NotFound("config file not found: " + file.string());
    try {
      user = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigFieldError("<file>", std::string("invalid JSON: ") + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(user, o);
  return RunConfig::from_json(user);
}

}  // namespace mmr
