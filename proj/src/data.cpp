#include "mmr/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "mmr/errors.hpp"
#include "mmr/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmr::data {

// ---------------------------------------------------------------------------
// Enum names

namespace {

template <class E, std::size_t N>
std::string name_of(E v, const std::array<const char*, N>& names) {
  return names.at(static_cast<std::size_t>(v));
}

template <class E, std::size_t N>
E parse_enum(const std::string& s, const std::array<const char*, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<E>(i);
  throw ConfigError(std::string("unknown ") + what + ": '" + s + "'");
}

constexpr std::array<const char*, 2> kLabels{"normal", "anomalous"};
constexpr std::array<const char*, 5> kDomains{"same", "background", "illumination", "view",
                                              "train"};
constexpr std::array<const char*, 2> kSplits{"train", "test"};
constexpr std::array<const char*, 3> kLayouts{"mvtec", "aebad", "manifest_file"};
constexpr std::array<const char*, 3> kDefects{"scratch", "hole", "blotch"};
constexpr std::array<const char*, 4> kShifts{"none", "background", "illumination",
                                             "mirror_view"};

}  // namespace

std::string to_string(Label v) { return name_of(v, kLabels); }
std::string to_string(DomainTag v) { return name_of(v, kDomains); }
std::string to_string(Split v) { return name_of(v, kSplits); }
std::string to_string(Layout v) { return name_of(v, kLayouts); }
std::string to_string(DefectKind v) { return name_of(v, kDefects); }
std::string to_string(ShiftKind v) { return name_of(v, kShifts); }
Label parse_label(const std::string& s) { return parse_enum<Label>(s, kLabels, "label"); }
DomainTag parse_domain(const std::string& s) { return parse_enum<DomainTag>(s, kDomains, "domain"); }
Split parse_split(const std::string& s) { return parse_enum<Split>(s, kSplits, "split"); }
Layout parse_layout(const std::string& s) { return parse_enum<Layout>(s, kLayouts, "layout"); }
DefectKind parse_defect(const std::string& s) { return parse_enum<DefectKind>(s, kDefects, "defect"); }
ShiftKind parse_shift(const std::string& s) { return parse_enum<ShiftKind>(s, kShifts, "shift"); }

DomainTag domain_of(ShiftKind s) {
  switch (s) {
    case ShiftKind::none: return DomainTag::same;
    case ShiftKind::background: return DomainTag::background;
    case ShiftKind::illumination: return DomainTag::illumination;
    case ShiftKind::mirror_view: return DomainTag::view;
  }
  return DomainTag::same;
}

// ---------------------------------------------------------------------------
// Manifest loading

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> images_in(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path())) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory()) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<fs::path> find_mask(const fs::path& gt_dir, const fs::path& image) {
  const std::string stem = image.stem().string();
  for (const std::string& name : {stem + "_mask.png", stem + ".png"}) {
    const fs::path candidate = gt_dir / name;
    if (fs::is_regular_file(candidate)) return candidate;
  }
  return std::nullopt;
}

bool mask_has_positive(const fs::path& mask_path) {
  const Image8 m = read_image(mask_path);
  for (std::size_t i = 0; i < m.pixels.size(); i += m.channels)
    if (m.pixels[i] > 127) return true;
  return false;
}

void check_record(const SampleRecord& r, bool pixel_annotated) {
  if (r.split == Split::train && r.label != Label::normal)
    throw ManifestError("training split must contain only normal samples: " + r.image_path.string());
  if (r.label == Label::anomalous && pixel_annotated) {
    if (!r.mask_path)
      throw ManifestError("anomalous image without ground-truth mask: " + r.image_path.string());
    if (!mask_has_positive(*r.mask_path))
      throw ManifestError("ground-truth mask has no positive pixel: " + r.mask_path->string());
  }
}

void add_train(const fs::path& root, std::vector<SampleRecord>& out) {
  for (const auto& img : images_in(root / "train" / "good"))
    out.push_back({img, Label::normal, std::nullopt, DomainTag::train, Split::train});
}

void add_test_class_dirs(const fs::path& test_dir, const fs::path& gt_dir, DomainTag domain,
                         bool pixel_annotated, std::vector<SampleRecord>& out) {
  for (const auto& cls_dir : subdirs(test_dir)) {
    const std::string cls = cls_dir.filename().string();
    const bool good = cls == "good";
    for (const auto& img : images_in(cls_dir)) {
      SampleRecord r{img, good ? Label::normal : Label::anomalous, std::nullopt, domain, Split::test};
      if (!good) r.mask_path = find_mask(gt_dir / cls, img);
      check_record(r, pixel_annotated);
      out.push_back(std::move(r));
    }
  }
}

std::vector<SampleRecord> load_jsonl(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFound("cannot open manifest " + file.string());
  const fs::path base = file.parent_path();
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  std::vector<SampleRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = file.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ManifestError(where + ": " + e.what());
    }
    try {
      SampleRecord r;
      r.image_path = resolve(j.at("image").get<std::string>());
      r.label = parse_label(j.at("label").get<std::string>());
      r.split = parse_split(j.at("split").get<std::string>());
      if (j.contains("mask") && !j["mask"].is_null()) r.mask_path = resolve(j["mask"].get<std::string>());
      r.domain = j.contains("domain") ? parse_domain(j["domain"].get<std::string>())
                                      : (r.split == Split::train ? DomainTag::train : DomainTag::same);
      if (r.split == Split::train && r.label != Label::normal)
        throw ManifestError("training split must contain only normal samples");
      if (r.mask_path && !fs::is_regular_file(*r.mask_path))
        throw ManifestError("mask not found: " + r.mask_path->string());
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ManifestError(where + ": " + e.what());
    } catch (const Error& e) {
      throw ManifestError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

std::vector<SampleRecord> load_manifest(const fs::path& root, Layout layout) {
  if (!fs::exists(root)) throw NotFound("dataset root not found: " + root.string());
  if (layout == Layout::manifest_file)
    return load_jsonl(fs::is_directory(root) ? root / "manifest.jsonl" : root);

  if (!fs::is_directory(root / "train") && !fs::is_directory(root / "test"))
    throw ManifestError("expected train/ or test/ under " + root.string());
  const bool pixel_annotated = fs::is_directory(root / "ground_truth");
  std::vector<SampleRecord> out;
  add_train(root, out);
  if (layout == Layout::mvtec) {
    add_test_class_dirs(root / "test", root / "ground_truth", DomainTag::same, pixel_annotated, out);
  } else {
    for (const auto& domain_dir : subdirs(root / "test")) {
      const std::string name = domain_dir.filename().string();
      DomainTag tag;
      try {
        tag = parse_domain(name);
      } catch (const ConfigError&) {
        throw ManifestError("unknown test domain directory: " + domain_dir.string());
      }
      if (tag == DomainTag::train)
        throw ManifestError("unknown test domain directory: " + domain_dir.string());
      add_test_class_dirs(domain_dir, root / "ground_truth" / name, tag, pixel_annotated, out);
    }
  }
  std::sort(out.begin(), out.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.image_path < b.image_path; });
  return out;
}

void write_manifest(const fs::path& file, const std::vector<SampleRecord>& records,
                    const fs::path& base) {
  auto rel = [&](const fs::path& p) {
    const fs::path r = p.lexically_relative(base);
    return (r.empty() || *r.begin() == "..") ? p.string() : r.generic_string();
  };
  std::ofstream out(file);
  if (!out) throw IoError("cannot write manifest " + file.string());
  for (const auto& r : records) {
    json j;
    j["image"] = rel(r.image_path);
    j["label"] = to_string(r.label);
    j["mask"] = r.mask_path ? json(rel(*r.mask_path)) : json(nullptr);
    j["domain"] = to_string(r.domain);
    j["split"] = to_string(r.split);
    out << j.dump() << "\n";
  }
}

std::vector<SampleRecord> filter(const std::vector<SampleRecord>& records, Split split) {
  std::vector<SampleRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

// ---------------------------------------------------------------------------
// Toy corpus

void ToyConfig::validate() const {
  if (n_train <= 0 || n_test_normal <= 0 || n_test_anomalous <= 0)
    throw ConfigError("toy counts must be positive");
  if (image_size <= 0 || image_size % 16 != 0)
    throw ConfigError("toy image_size must be a positive multiple of 16");
  if (defect_kinds.empty()) throw ConfigError("toy defect_kinds is empty");
  if (shift_kinds.empty()) throw ConfigError("toy shift_kinds is empty");
  if (!(illumination_factor > 0.0)) throw ConfigError("illumination_factor must be positive");
}

namespace {

struct Vec2 {
  double x, y;
};

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = p.x - (a.x + t * dx), ey = p.y - (a.y + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

// Signed distance to a simple polygon (negative inside).
template <std::size_t N>
double polygon_sdf(Vec2 p, const std::array<Vec2, N>& v) {
  double d = (p.x - v[0].x) * (p.x - v[0].x) + (p.y - v[0].y) * (p.y - v[0].y);
  double s = 1.0;
  for (std::size_t i = 0, j = N - 1; i < N; j = i, ++i) {
    const Vec2 e{v[j].x - v[i].x, v[j].y - v[i].y};
    const Vec2 w{p.x - v[i].x, p.y - v[i].y};
    const double t = std::clamp((w.x * e.x + w.y * e.y) / (e.x * e.x + e.y * e.y), 0.0, 1.0);
    const Vec2 b{w.x - e.x * t, w.y - e.y * t};
    d = std::min(d, b.x * b.x + b.y * b.y);
    const bool c1 = p.y >= v[i].y, c2 = p.y < v[j].y, c3 = e.x * w.y > e.y * w.x;
    if ((c1 && c2 && c3) || (!c1 && !c2 && !c3)) s = -s;
  }
  return s * std::sqrt(d);
}

// Blade outline in units of the image side, centred on the pose origin.
constexpr std::array<Vec2, 5> kBlade{{{-0.19, 0.28}, {0.15, 0.28}, {0.13, -0.10},
                                      {0.09, -0.36}, {-0.03, -0.38}}};
constexpr std::array<Vec2, 4> kPlatform{{{-0.27, 0.27}, {0.23, 0.27}, {0.23, 0.39}, {-0.27, 0.39}}};
constexpr double kCornerRadius = 0.025;

struct Pose {
  double cx, cy, angle, scale, brightness;
};

struct Scene {
  int size;
  Pose pose;
  bool shifted_background;

  Vec2 to_local(double px, double py) const {
    const double s = pose.scale * size;
    const double dx = (px - pose.cx) / s, dy = (py - pose.cy) / s;
    const double c = std::cos(pose.angle), sn = std::sin(pose.angle);
    return {c * dx + sn * dy, -sn * dx + c * dy};
  }
  double px_per_unit() const { return pose.scale * size; }

  // Signed distances in pixels.
  double blade_sd(double px, double py) const {
    return (polygon_sdf(to_local(px, py), kBlade) - kCornerRadius) * px_per_unit();
  }
  double platform_sd(double px, double py) const {
    return (polygon_sdf(to_local(px, py), kPlatform) - kCornerRadius * 0.5) * px_per_unit();
  }

  std::array<double, 3> background(int x, int y) const {
    const double u = (x + 0.5) / size, v = (y + 0.5) / size;
    constexpr double kTwoPi = 6.283185307179586;
    if (!shifted_background) {
      const double pattern = 6.0 * std::sin(kTwoPi * 3 * u) * std::sin(kTwoPi * 2 * v);
      return {38 + 30 * v + pattern, 46 + 30 * v + pattern, 60 + 28 * v + pattern};
    }
    const double pattern = 12.0 * std::sin(kTwoPi * 5 * (u + v));
    return {96 + 30 * v + pattern, 72 + 24 * v + pattern, 46 + 16 * v + pattern};
  }

  std::array<double, 3> render(int x, int y) const {
    const double px = x + 0.5, py = y + 0.5;
    std::array<double, 3> col = background(x, y);
    const double plat = std::clamp(0.5 - platform_sd(px, py), 0.0, 1.0);
    if (plat > 0)
      for (int c = 0; c < 3; ++c) col[c] = col[c] * (1 - plat) + (c == 2 ? 122.0 : 112.0) * plat;
    const double alpha = std::clamp(0.5 - blade_sd(px, py), 0.0, 1.0);
    if (alpha > 0) {
      const Vec2 q = to_local(px, py);
      const double shade = 0.78 + 0.7 * (q.x + 0.19);
      const double ridge = 1.0 + 0.07 * std::sin(6.283185307179586 * (q.x + 0.3 * q.y) / 0.055);
      const double taper = 1.0 - 0.25 * (q.y + 0.38);
      const std::array<double, 3> base{190, 178, 156};
      for (int c = 0; c < 3; ++c) col[c] = col[c] * (1 - alpha) + base[c] * shade * ridge * taper * alpha;
    }
    for (double& c : col) c *= pose.brightness;
    return col;
  }
};

Pose sample_pose(Rng& rng, int size) {
  Pose p;
  p.cx = size * (0.5 + rng.uniform(-0.03, 0.03));
  p.cy = size * (0.5 + rng.uniform(-0.03, 0.03));
  p.angle = rng.uniform(-4.0, 4.0) * 3.141592653589793 / 180.0;
  p.scale = 1.0 + rng.uniform(-0.04, 0.04);
  p.brightness = 1.0 + rng.uniform(-0.04, 0.04);
  return p;
}

// Random pixel position whose blade signed distance is below -margin.
Vec2 point_inside(const Scene& scene, Rng& rng, double margin) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const Vec2 p{rng.uniform(0, scene.size), rng.uniform(0, scene.size)};
    if (scene.blade_sd(p.x, p.y) < -margin) return p;
  }
  throw ConfigError("toy defect does not fit inside the blade; increase image_size");
}

DefectGeometry place_defect(const Scene& scene, DefectKind kind, Rng& rng) {
  const double S = scene.size;
  DefectGeometry g;
  g.kind = kind;
  switch (kind) {
    case DefectKind::scratch: {
      g.radius = 1.25;
      for (int attempt = 0;; ++attempt) {
        const Vec2 a = point_inside(scene, rng, 2.0);
        const double len = rng.uniform(0.16, 0.30) * S;
        const double th = rng.uniform(0.0, 6.283185307179586);
        const Vec2 b{a.x + len * std::cos(th), a.y + len * std::sin(th)};
        if (scene.blade_sd(b.x, b.y) < -2.0 || attempt > 1000) {
          g.x0 = a.x; g.y0 = a.y; g.x1 = b.x; g.y1 = b.y;
          break;
        }
      }
      break;
    }
    case DefectKind::hole: {
      g.radius = rng.uniform(0.04, 0.07) * S;
      const Vec2 c = point_inside(scene, rng, g.radius + 1.0);
      g.x0 = c.x;
      g.y0 = c.y;
      break;
    }
    case DefectKind::blotch: {
      g.x1 = rng.uniform(0.05, 0.09) * S;
      g.y1 = rng.uniform(0.05, 0.09) * S;
      const Vec2 c = point_inside(scene, rng, std::max(g.x1, g.y1));
      g.x0 = c.x;
      g.y0 = c.y;
      break;
    }
  }
  return g;
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

bool DefectGeometry::contains(int x, int y, int image_size) const {
  const int sx = mirrored ? image_size - 1 - x : x;
  const Vec2 p{sx + 0.5, y + 0.5};
  switch (kind) {
    case DefectKind::scratch:
      return segment_distance(p, {x0, y0}, {x1, y1}) <= radius;
    case DefectKind::hole:
      return (p.x - x0) * (p.x - x0) + (p.y - y0) * (p.y - y0) <= radius * radius;
    case DefectKind::blotch: {
      const double u = (p.x - x0) / x1, v = (p.y - y0) / y1;
      return u * u + v * v <= 1.0;
    }
  }
  return false;
}

ToySample render_toy_sample(const ToyConfig& cfg, Split split, int index) {
  cfg.validate();
  const int S = cfg.image_size;
  const bool anomalous = split == Split::test && index >= cfg.n_test_normal;
  const int shift_slot = anomalous ? index - cfg.n_test_normal : index;

  ToySample out;
  out.split = split;
  out.shift = split == Split::train
                  ? ShiftKind::none
                  : cfg.shift_kinds[static_cast<std::size_t>(shift_slot) % cfg.shift_kinds.size()];

  Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index)}));
  Scene scene{S, sample_pose(rng, S), out.shift == ShiftKind::background};

  std::vector<double> pix(static_cast<std::size_t>(S) * S * 3);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const auto col = scene.render(x, y);
      for (int c = 0; c < 3; ++c) pix[(static_cast<std::size_t>(y) * S + x) * 3 + c] = col[c];
    }

  std::optional<DefectGeometry> defect;
  if (anomalous) {
    const std::size_t kinds = cfg.defect_kinds.size();
    const std::size_t slot = static_cast<std::size_t>(shift_slot) / cfg.shift_kinds.size();
    defect = place_defect(scene, cfg.defect_kinds[slot % kinds], rng);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        if (!defect->contains(x, y, S)) continue;
        double* p = &pix[(static_cast<std::size_t>(y) * S + x) * 3];
        switch (defect->kind) {
          case DefectKind::scratch:
            p[0] = 34; p[1] = 30; p[2] = 28;
            break;
          case DefectKind::hole: {
            const auto bg = scene.background(x, y);
            for (int c = 0; c < 3; ++c) p[c] = bg[c] * scene.pose.brightness;
            break;
          }
          case DefectKind::blotch: {
            const double n = rng.uniform(-40.0, 40.0);
            p[0] = 150 + n; p[1] = 82 + 0.6 * n; p[2] = 48 + 0.3 * n;
            break;
          }
        }
      }
  }

  const double gain = out.shift == ShiftKind::illumination ? cfg.illumination_factor : 1.0;
  for (double& v : pix) v = (v + 2.0 * rng.normal()) * gain;

  const bool mirror = out.shift == ShiftKind::mirror_view;
  out.image = Image8(S, S, 3);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int sx = mirror ? S - 1 - x : x;
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = quantize(pix[(static_cast<std::size_t>(y) * S + sx) * 3 + c]);
    }
  if (defect) {
    defect->mirrored = mirror;
    Image8 mask(S, S, 1);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) mask.at(y, x) = defect->contains(x, y, S) ? 255 : 0;
    out.mask = std::move(mask);
    out.defect = defect;
  }
  return out;
}

namespace {

json toy_config_json(const ToyConfig& cfg) {
  json j;
  j["n_train"] = cfg.n_train;
  j["n_test_normal"] = cfg.n_test_normal;
  j["n_test_anomalous"] = cfg.n_test_anomalous;
  j["image_size"] = cfg.image_size;
  j["seed"] = cfg.seed;
  j["illumination_factor"] = cfg.illumination_factor;
  j["defect_kinds"] = json::array();
  for (auto d : cfg.defect_kinds) j["defect_kinds"].push_back(to_string(d));
  j["shift_kinds"] = json::array();
  for (auto s : cfg.shift_kinds) j["shift_kinds"].push_back(to_string(s));
  return j;
}

std::string numbered(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d.png", i);
  return buf;
}

}  // namespace

std::vector<SampleRecord> generate_toy_dataset(const ToyConfig& cfg, const fs::path& out_root) {
  cfg.validate();
  fs::create_directories(out_root);
  for (int i = 0; i < cfg.n_train; ++i)
    write_png(out_root / "train" / "good" / numbered(i), render_toy_sample(cfg, Split::train, i).image);
  const int n_test = cfg.n_test_normal + cfg.n_test_anomalous;
  for (int i = 0; i < n_test; ++i) {
    const ToySample s = render_toy_sample(cfg, Split::test, i);
    const std::string domain = to_string(domain_of(s.shift));
    const std::string cls = s.defect ? to_string(s.defect->kind) : "good";
    write_png(out_root / "test" / domain / cls / numbered(i), s.image);
    if (s.mask) write_png(out_root / "ground_truth" / domain / cls / numbered(i), *s.mask);
  }
  {
    std::ofstream out(out_root / "toy_config.json");
    out << toy_config_json(cfg).dump(2) << "\n";
  }
  auto records = load_manifest(out_root, Layout::aebad);
  write_manifest(out_root / "manifest.jsonl", records, out_root);
  return records;
}

}  // namespace mmr::data
