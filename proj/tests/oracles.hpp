#pragma once

// Brute-force reference implementations used only by tests. They share no code
// with the library.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mmr/backbones.hpp"
#include "mmr/core.hpp"
#include "mmr/metrics.hpp"

namespace oracle {

// O(n^2) concordance count.
inline double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// Union-find 8-connected labelling, compacted to 0..count-1 (-1 background).
inline int components(const std::vector<std::uint8_t>& m, int h, int w, std::vector<int>& out) {
  std::vector<int> parent(m.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w || !m[yy * w + xx]) continue;
          parent[find(y * w + x)] = find(yy * w + xx);
        }
    }
  out.assign(m.size(), -1);
  std::vector<int> id(m.size(), -1);
  int count = 0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    if (!m[k]) continue;
    const int r = find(static_cast<int>(k));
    if (id[r] < 0) id[r] = count++;
    out[k] = id[r];
  }
  return count;
}

// Threshold at every distinct value (or at the given thresholds), curve from
// (0, 0), trapezoids up to the limit, normalized.
inline double pro_exhaustive(const std::vector<mmr::AnomalyMap>& maps,
                             const std::vector<std::vector<std::uint8_t>>& masks, double limit,
                             std::vector<double> thresholds = {}) {
  struct Px {
    double v;
    int region;
  };
  std::vector<Px> px;
  std::vector<double> size;
  double n_normal = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    std::vector<int> lab;
    const int base = static_cast<int>(size.size());
    const int c = components(masks[i], maps[i].height, maps[i].width, lab);
    size.resize(size.size() + c, 0);
    for (std::size_t k = 0; k < lab.size(); ++k) {
      const int r = lab[k] < 0 ? -1 : base + lab[k];
      if (r >= 0) size[r] += 1; else n_normal += 1;
      px.push_back({maps[i].values[k], r});
    }
  }
  if (thresholds.empty()) {
    for (const auto& p : px) thresholds.push_back(p.v);
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  }
  std::sort(thresholds.rbegin(), thresholds.rend());
  std::vector<double> fx{0.0}, fy{0.0};
  for (double t : thresholds) {
    double fp = 0;
    std::vector<double> hit(size.size(), 0);
    for (const auto& p : px)
      if (p.v >= t) {
        if (p.region < 0) fp += 1; else hit[p.region] += 1;
      }
    double ov = 0;
    for (std::size_t r = 0; r < size.size(); ++r) ov += hit[r] / size[r];
    fx.push_back(fp / n_normal);
    fy.push_back(ov / static_cast<double>(size.size()));
  }
  double area = 0;
  for (std::size_t k = 1; k < fx.size(); ++k) {
    const double x0 = fx[k - 1], x1 = std::min(fx[k], limit);
    if (x0 >= limit) break;
    const double y1 = fx[k] > fx[k - 1] ? fy[k - 1] + (fy[k] - fy[k - 1]) * (x1 - x0) / (fx[k] - fx[k - 1]) : fy[k];
    area += (x1 - x0) * (fy[k - 1] + y1) / 2;
  }
  return area / limit;
}

// Direct evaluation of sum_i mean_k (1 - cos) in double.
template <class T>
double loss(const mmr::MultiScaleFeatures<T>& a, const mmr::MultiScaleFeatures<T>& b) {
  double total = 0;
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    const auto& A = a.maps[i];
    const auto& B = b.maps[i];
    double s = 0;
    for (int y = 0; y < A.height; ++y)
      for (int x = 0; x < A.width; ++x) {
        double ab = 0, aa = 0, bb = 0;
        for (int c = 0; c < A.channels; ++c) {
          const double u = A.data[(y * A.width + x) * A.channels + c];
          const double v = B.data[(y * B.width + x) * B.channels + c];
          ab += u * v;
          aa += u * u;
          bb += v * v;
        }
        s += 1 - ab / std::max(std::sqrt(aa * bb), 1e-8);
      }
    total += s / (A.height * A.width);
  }
  return total;
}

// Per-pixel anomaly by sampling each scale's cosine map bilinearly at the
// output pixel centre (edge clamped), summed over scales.
inline std::vector<double> anomaly(const mmr::MultiScaleFeatures<float>& a, const mmr::MultiScaleFeatures<float>& b,
                                   int H, int W) {
  std::vector<double> out(static_cast<std::size_t>(H) * W, 0.0);
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    const auto& A = a.maps[i];
    const auto& B = b.maps[i];
    std::vector<double> d(static_cast<std::size_t>(A.height) * A.width);
    for (int k = 0; k < A.height * A.width; ++k) {
      double ab = 0, aa = 0, bb = 0;
      for (int c = 0; c < A.channels; ++c) {
        const double u = A.data[k * A.channels + c], v = B.data[k * A.channels + c];
        ab += u * v;
        aa += u * u;
        bb += v * v;
      }
      d[k] = 1 - ab / std::max(std::sqrt(aa) * std::sqrt(bb), 1e-8);
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double sy = std::clamp((y + 0.5) * A.height / H - 0.5, 0.0, A.height - 1.0);
        const double sx = std::clamp((x + 0.5) * A.width / W - 0.5, 0.0, A.width - 1.0);
        const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
        const int y1 = std::min(y0 + 1, A.height - 1), x1 = std::min(x0 + 1, A.width - 1);
        const double fy = sy - y0, fx = sx - x0;
        out[y * W + x] += (1 - fy) * ((1 - fx) * d[y0 * A.width + x0] + fx * d[y0 * A.width + x1]) +
                          fy * ((1 - fx) * d[y1 * A.width + x0] + fx * d[y1 * A.width + x1]);
      }
  }
  return out;
}

}  // namespace oracle
