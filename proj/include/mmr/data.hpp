#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmr/image.hpp"

namespace mmr::data {

enum class Label { normal, anomalous };
enum class DomainTag { same, background, illumination, view, train };
enum class Split { train, test };
enum class Layout { mvtec, aebad, manifest_file };

std::string to_string(Label v);
std::string to_string(DomainTag v);
std::string to_string(Split v);
std::string to_string(Layout v);
Label parse_label(const std::string& s);
DomainTag parse_domain(const std::string& s);
Split parse_split(const std::string& s);
Layout parse_layout(const std::string& s);

struct SampleRecord {
  std::filesystem::path image_path;
  Label label = Label::normal;
  std::optional<std::filesystem::path> mask_path;
  DomainTag domain = DomainTag::same;
  Split split = Split::train;

  bool operator==(const SampleRecord&) const = default;
};

// Enumerates a dataset directory (or, for manifest_file, a JSON-lines file or
// a directory holding manifest.jsonl).
//   mvtec: train/good/*, test/<good|defect>/*, ground_truth/<defect>/<stem>[_mask].png
//   aebad: train/good/*, test/<domain>/<good|defect>/*,
//          ground_truth/<domain>/<defect>/<stem>[_mask].png
// Directory layouts are returned sorted by path. A layout with a ground_truth
// directory is pixel-annotated and every anomalous test image must have a
// non-empty mask there.
std::vector<SampleRecord> load_manifest(const std::filesystem::path& root, Layout layout);

// One JSON object per line: {image, label, mask, domain, split}. Paths are
// written relative to `base` when they lie beneath it.
void write_manifest(const std::filesystem::path& file, const std::vector<SampleRecord>& records,
                    const std::filesystem::path& base);

std::vector<SampleRecord> filter(const std::vector<SampleRecord>& records, Split split);

// ---------------------------------------------------------------------------
// Procedural toy corpus.

enum class DefectKind { scratch, hole, blotch };
enum class ShiftKind { none, background, illumination, mirror_view };

std::string to_string(DefectKind v);
std::string to_string(ShiftKind v);
DefectKind parse_defect(const std::string& s);
ShiftKind parse_shift(const std::string& s);
DomainTag domain_of(ShiftKind s);

struct ToyConfig {
  int n_train = 200;
  int n_test_normal = 50;
  int n_test_anomalous = 50;
  int image_size = 128;
  std::vector<DefectKind> defect_kinds{DefectKind::scratch, DefectKind::hole, DefectKind::blotch};
  std::vector<ShiftKind> shift_kinds{ShiftKind::none, ShiftKind::background,
                                     ShiftKind::illumination, ShiftKind::mirror_view};
  std::uint64_t seed = 7;
  // Multiplicative brightness applied to illumination-shifted test images.
  double illumination_factor = 0.7;

  void validate() const;
};

struct DefectGeometry {
  DefectKind kind = DefectKind::scratch;
  // scratch: segment (x0,y0)-(x1,y1) with half width `radius`;
  // hole: disk centre (x0,y0), `radius`;
  // blotch: axis-aligned ellipse centre (x0,y0), semi-axes (x1,y1).
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0, radius = 0;
  bool mirrored = false;  // geometry is given before the horizontal flip

  // Pixel-centre membership test in the final (possibly mirrored) image.
  bool contains(int x, int y, int image_size) const;
};

struct ToySample {
  Image8 image;
  std::optional<Image8> mask;  // 0/255, present for anomalous samples
  std::optional<DefectGeometry> defect;
  Split split = Split::train;
  ShiftKind shift = ShiftKind::none;
};

// Renders sample `index` of a split; anomalous test samples follow the normal ones
// (index >= n_test_normal). Pure function of (cfg, split, index).
ToySample render_toy_sample(const ToyConfig& cfg, Split split, int index);

// Writes the corpus in the aebad layout plus manifest.jsonl and toy_config.json,
// returning the records as load_manifest would.
std::vector<SampleRecord> generate_toy_dataset(const ToyConfig& cfg,
                                               const std::filesystem::path& out_root);

}  // namespace mmr::data
