#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmr/core.hpp"
#include "mmr/data.hpp"

namespace mmr::metrics {

// Mann-Whitney statistic: P(anomalous > normal) + 0.5 P(tie). labels are 0/1.
// Throws UndefinedMetric unless both classes are present.
double sample_auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Row-major 0/1 mask with the shape of its map; any non-zero value counts as anomalous.
using BinaryMask = std::vector<std::uint8_t>;

// sample_auroc over the pooled pixels. Throws ShapeError when a mask and its map differ in size.
double pixel_auroc(const std::vector<AnomalyMap>& maps, const std::vector<BinaryMask>& masks);

struct ProCurve {
  std::vector<double> fpr;      // non-decreasing, starts at 0
  std::vector<double> overlap;  // mean per-region overlap at each threshold
  std::vector<double> thresholds;
  bool exact = true;  // false when quantile thresholds were used
  int regions = 0;
};

// Exact sweep over all distinct values up to this many, else quantile thresholds.
inline constexpr std::size_t kExactSweepLimit = 100000;
inline constexpr int kQuantileThresholds = 200;

// Regions are the 8-connected components of each mask. Throws UndefinedMetric
// when there is no region or no normal pixel.
ProCurve pro_curve(const std::vector<AnomalyMap>& maps, const std::vector<BinaryMask>& masks);

// Area under the curve on [0, fpr_limit] divided by fpr_limit.
double pro_score(const std::vector<AnomalyMap>& maps, const std::vector<BinaryMask>& masks,
                 double fpr_limit = 0.3);
double integrate_pro(const ProCurve& curve, double fpr_limit);

// 8-connected component labels (0 = background, 1..count); returns count.
int label_components(const BinaryMask& mask, int height, int width, std::vector<int>& labels);

// ---------------------------------------------------------------------------

struct MetricSet {
  std::optional<double> sample_auroc;
  std::optional<double> pixel_auroc;
  std::optional<double> pro;
  int n_normal = 0;
  int n_anomalous = 0;
};

struct EvalReport {
  MetricSet overall;
  std::map<std::string, MetricSet> per_domain;
  double fpr_limit = 0.3;
  bool pixel_annotated = false;
  std::string pro_sweep;  // "exact" or "quantile"

  nlohmann::json to_json() const;
  // One row per domain then an "all" row.
  std::string to_csv() const;
};

struct EvalSample {
  data::DomainTag domain = data::DomainTag::same;
  data::Label label = data::Label::normal;
  double score = 0.0;
  AnomalyMap map;
  std::optional<BinaryMask> mask;  // absent when the set has no pixel annotation
};

// Pixel metrics are computed only when every sample carries a mask. A metric
// that is undefined for a subset (e.g. one class only) is left empty.
EvalReport build_report(const std::vector<EvalSample>& samples, double fpr_limit = 0.3);

}  // namespace mmr::metrics
