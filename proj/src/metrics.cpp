#include "mmr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <limits>
#include <set>

#include "mmr/errors.hpp"

namespace mmr::metrics {

namespace {

// Rank-sum AUROC over (score, positive) pairs; ties get average ranks.
double rank_auroc(std::vector<std::pair<double, bool>>& items) {
  std::size_t n_pos = 0;
  for (const auto& it : items) n_pos += it.second;
  const std::size_t n_neg = items.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetric("AUROC needs both normal and anomalous samples");
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < items.size() && items[j].first == items[i].first) pos_in_group += items[j++].second;
    // ranks i+1 .. j, average (i + 1 + j) / 2
    rank_sum += static_cast<double>(pos_in_group) * (static_cast<double>(i + 1 + j) / 2.0);
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

void check_pairs(const std::vector<AnomalyMap>& maps, const std::vector<BinaryMask>& masks) {
  if (maps.size() != masks.size()) throw ShapeError("number of maps and masks differ");
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const std::size_t expect = static_cast<std::size_t>(maps[i].height) * maps[i].width;
    if (maps[i].values.size() != expect || masks[i].size() != expect)
      throw ShapeError("map/mask " + std::to_string(i) + " size mismatch");
  }
}

}  // namespace

double sample_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  std::vector<std::pair<double, bool>> items(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ConfigError("labels must be 0 or 1");
    if (std::isnan(scores[i])) throw NumericError("NaN score at index " + std::to_string(i));
    items[i] = {scores[i], labels[i] == 1};
  }
  return rank_auroc(items);
}

double pixel_auroc(const std::vector<AnomalyMap>& maps, const std::vector<BinaryMask>& masks) {
  check_pairs(maps, masks);
  std::size_t total = 0;
  for (const auto& m : maps) total += m.values.size();
  std::vector<std::pair<double, bool>> items;
  items.reserve(total);
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (std::size_t k = 0; k < maps[i].values.size(); ++k)
      items.emplace_back(maps[i].values[k], masks[i][k] != 0);
  return rank_auroc(items);
}

int label_components(const BinaryMask& mask, int height, int width, std::vector<int>& labels) {
  labels.assign(mask.size(), 0);
  int count = 0;
  std::vector<int> stack;
  for (int start = 0; start < height * width; ++start) {
    if (!mask[static_cast<std::size_t>(start)] || labels[static_cast<std::size_t>(start)]) continue;
    ++count;
    labels[static_cast<std::size_t>(start)] = count;
    stack.push_back(start);
    while (!stack.empty()) {
      const int k = stack.back();
      stack.pop_back();
      const int y = k / width, x = k % width;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= height || xx < 0 || xx >= width) continue;
          const std::size_t q = static_cast<std::size_t>(yy) * width + xx;
          if (mask[q] && !labels[q]) {
            labels[q] = count;
            stack.push_back(static_cast<int>(q));
          }
        }
    }
  }
  return count;
}

ProCurve pro_curve(const std::vector<AnomalyMap>& maps, const std::vector<BinaryMask>& masks) {
  check_pairs(maps, masks);
  // Pixel entries: value and region id (-1 for normal pixels).
  std::vector<std::pair<float, int>> pixels;
  std::vector<double> region_size;
  std::size_t n_normal = 0;
  std::vector<int> labels;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const int base = static_cast<int>(region_size.size());
    const int count = label_components(masks[i], maps[i].height, maps[i].width, labels);
    region_size.resize(region_size.size() + static_cast<std::size_t>(count), 0.0);
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const int region = labels[k] ? base + labels[k] - 1 : -1;
      if (region >= 0)
        region_size[static_cast<std::size_t>(region)] += 1.0;
      else
        ++n_normal;
      pixels.emplace_back(maps[i].values[k], region);
    }
  }
  if (region_size.empty()) throw UndefinedMetric("PRO needs at least one anomalous region");
  if (n_normal == 0) throw UndefinedMetric("PRO needs at least one normal pixel");
  for (const auto& p : pixels)
    if (std::isnan(p.first)) throw NumericError("NaN in anomaly map");

  std::sort(pixels.begin(), pixels.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < pixels.size(); ++i)
    if (i == 0 || pixels[i].first != pixels[i - 1].first) ++distinct;

  ProCurve curve;
  curve.regions = static_cast<int>(region_size.size());
  curve.exact = distinct <= kExactSweepLimit;
  // Group indices (in descending order) at which a curve point is recorded.
  std::set<std::size_t> keep;
  if (!curve.exact) {
    for (int q = 0; q < kQuantileThresholds; ++q)
      keep.insert(static_cast<std::size_t>(
          std::llround(static_cast<double>(q) * static_cast<double>(distinct - 1) / (kQuantileThresholds - 1))));
  }

  curve.fpr.push_back(0.0);
  curve.overlap.push_back(0.0);
  curve.thresholds.push_back(std::numeric_limits<double>::infinity());
  std::size_t fp = 0;
  double overlap_sum = 0.0;  // sum over regions of covered / size
  const double n_regions = static_cast<double>(region_size.size());
  std::size_t i = 0, group = 0;
  while (i < pixels.size()) {
    const float t = pixels[i].first;
    while (i < pixels.size() && pixels[i].first == t) {
      const int r = pixels[i].second;
      if (r < 0)
        ++fp;
      else
        overlap_sum += 1.0 / region_size[static_cast<std::size_t>(r)];
      ++i;
    }
    if (curve.exact || keep.count(group) || i == pixels.size()) {
      curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(n_normal));
      curve.overlap.push_back(std::min(1.0, overlap_sum / n_regions));
      curve.thresholds.push_back(t);
    }
    ++group;
  }
  return curve;
}

double integrate_pro(const ProCurve& curve, double fpr_limit) {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("fpr_limit must lie in (0, 1]");
  double area = 0.0;
  for (std::size_t k = 1; k < curve.fpr.size(); ++k) {
    const double x0 = curve.fpr[k - 1], x1 = curve.fpr[k];
    const double y0 = curve.overlap[k - 1], y1 = curve.overlap[k];
    if (x0 >= fpr_limit) break;
    if (x1 <= fpr_limit) {
      area += (x1 - x0) * (y0 + y1) / 2.0;
    } else {
      const double y_lim = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
      area += (fpr_limit - x0) * (y0 + y_lim) / 2.0;
      break;
    }
  }
  return area / fpr_limit;
}

double pro_score(const std::vector<AnomalyMap>& maps, const std::vector<BinaryMask>& masks, double fpr_limit) {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("fpr_limit must lie in (0, 1]");
  return integrate_pro(pro_curve(maps, masks), fpr_limit);
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json metric_json(const MetricSet& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"sample_auroc", opt(m.sample_auroc)},
          {"pixel_auroc", opt(m.pixel_auroc)},
          {"pro", opt(m.pro)},
          {"n_samples", {{"normal", m.n_normal}, {"anomalous", m.n_anomalous}}}};
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

template <class F>
std::optional<double> try_metric(F&& f) {
  try {
    return f();
  } catch (const UndefinedMetric&) {
    return std::nullopt;
  }
}

MetricSet compute(const std::vector<const EvalSample*>& subset, bool pixels, double fpr_limit,
                  bool* quantile_used) {
  MetricSet m;
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto* s : subset) {
    scores.push_back(s->score);
    labels.push_back(s->label == data::Label::anomalous ? 1 : 0);
    (s->label == data::Label::anomalous ? m.n_anomalous : m.n_normal)++;
  }
  m.sample_auroc = try_metric([&] { return sample_auroc(scores, labels); });
  if (pixels) {
    std::vector<AnomalyMap> maps;
    std::vector<BinaryMask> masks;
    for (const auto* s : subset) {
      maps.push_back(s->map);
      masks.push_back(*s->mask);
    }
    m.pixel_auroc = try_metric([&] { return pixel_auroc(maps, masks); });
    m.pro = try_metric([&] {
      const ProCurve c = pro_curve(maps, masks);
      if (!c.exact) *quantile_used = true;
      return integrate_pro(c, fpr_limit);
    });
  }
  return m;
}

}  // namespace

EvalReport build_report(const std::vector<EvalSample>& samples, double fpr_limit) {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("fpr_limit must lie in (0, 1]");
  EvalReport report;
  report.fpr_limit = fpr_limit;
  report.pixel_annotated =
      !samples.empty() && std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.mask.has_value(); });
  bool quantile_used = false;
  std::vector<const EvalSample*> all;
  std::map<std::string, std::vector<const EvalSample*>> by_domain;
  for (const auto& s : samples) {
    all.push_back(&s);
    by_domain[data::to_string(s.domain)].push_back(&s);
  }
  report.overall = compute(all, report.pixel_annotated, fpr_limit, &quantile_used);
  for (const auto& [name, subset] : by_domain)
    report.per_domain[name] = compute(subset, report.pixel_annotated, fpr_limit, &quantile_used);
  report.pro_sweep = report.pixel_annotated ? (quantile_used ? "quantile" : "exact") : "";
  return report;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = metric_json(overall);
  nlohmann::json domains = nlohmann::json::object();
  for (const auto& [name, m] : per_domain) domains[name] = metric_json(m);
  j["per_domain"] = domains;
  j["pixel_annotated"] = pixel_annotated;
  j["pro_fpr_limit"] = fpr_limit;
  if (!pro_sweep.empty()) j["pro_sweep"] = pro_sweep;
  return j;
}

std::string EvalReport::to_csv() const {
  std::string out = "domain,n_normal,n_anomalous,sample_auroc,pixel_auroc,pro\n";
  auto row = [&](const std::string& name, const MetricSet& m) {
    out += name + "," + std::to_string(m.n_normal) + "," + std::to_string(m.n_anomalous) + "," +
           fmt_opt(m.sample_auroc) + "," + fmt_opt(m.pixel_auroc) + "," + fmt_opt(m.pro) + "\n";
  };
  for (const auto& [name, m] : per_domain) row(name, m);
  row("all", overall);
  return out;
}

}  // namespace mmr::metrics
