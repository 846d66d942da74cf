#include "mmr/fpn.hpp"

#include <algorithm>

#include "mmr/errors.hpp"

namespace mmr {

std::string to_string(FpnScale s) {
  switch (s) {
    case FpnScale::x4: return "x4";
    case FpnScale::x2: return "x2";
    case FpnScale::x1: return "x1";
  }
  return "";
}

int teacher_stage_of(FpnScale s) {
  switch (s) {
    case FpnScale::x4: return 1;
    case FpnScale::x2: return 2;
    case FpnScale::x1: return 3;
  }
  return 0;
}

FpnScale scale_for_stage(int stage) {
  switch (stage) {
    case 1: return FpnScale::x4;
    case 2: return FpnScale::x2;
    case 3: return FpnScale::x1;
  }
  throw ConfigError("no pyramid branch for teacher stage " + std::to_string(stage));
}

void FpnConfig::validate() const {
  if (scales.empty()) throw ConfigError("fpn scales are empty");
  if (scales.size() != out_channels.size())
    throw ShapeError("fpn needs one output channel count per scale");
  if (in_width <= 0 || in_width % 4 != 0) throw ConfigError("fpn input width must be a multiple of 4");
  for (int c : out_channels)
    if (c <= 0) throw ConfigError("fpn output channels must be positive");
}

FpnConfig fpn_config_for(const FrozenEncoder& teacher, int in_width) {
  std::vector<int> stages = teacher.config().stages_used;
  std::sort(stages.begin(), stages.end());
  FpnConfig cfg;
  cfg.in_width = in_width;
  for (int s : stages) {
    cfg.scales.push_back(scale_for_stage(s));
    cfg.out_channels.push_back(teacher.stage_channels(s));
  }
  return cfg;
}

void check_fpn_against_teacher(const FpnConfig& cfg, const FrozenEncoder& teacher) {
  std::vector<int> stages = teacher.config().stages_used;
  std::sort(stages.begin(), stages.end());
  if (stages.size() != cfg.scales.size())
    throw ShapeError("fpn branch count differs from teacher stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (teacher_stage_of(cfg.scales[i]) != stages[i])
      throw ShapeError("fpn branch " + to_string(cfg.scales[i]) + " does not pair with teacher stage " +
                       std::to_string(stages[i]));
    if (cfg.out_channels[i] != teacher.stage_channels(stages[i]))
      throw ShapeError("fpn branch " + to_string(cfg.scales[i]) + " has " +
                       std::to_string(cfg.out_channels[i]) + " channels, teacher stage " +
                       std::to_string(stages[i]) + " has " +
                       std::to_string(teacher.stage_channels(stages[i])));
  }
}

template <class T>
void SimpleFpn<T>::create(nn::ParamStore<T>& ps, const FpnConfig& cfg, Rng& rng) {
  cfg.validate();
  cfg_ = cfg;
  const int d = cfg.in_width;
  branches_.clear();
  for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
    Branch b;
    b.scale = cfg.scales[i];
    const std::string name = "fpn." + to_string(b.scale);
    const int out = cfg.out_channels[i];
    b.in_ch = d;
    if (b.scale == FpnScale::x4) {
      b.up1.create(ps, name + ".up1", d, d / 2);
      b.up1_ln.create(ps, name + ".up1_norm", d / 2);
      b.up2.create(ps, name + ".up2", d / 2, d / 4);
      ps.trunc_normal(b.up1.w, static_cast<std::size_t>(d) * 4 * (d / 2), 0.02, rng);
      ps.trunc_normal(b.up2.w, static_cast<std::size_t>(d / 2) * 4 * (d / 4), 0.02, rng);
      b.in_ch = d / 4;
    } else if (b.scale == FpnScale::x2) {
      b.up1.create(ps, name + ".up1", d, d / 2);
      ps.trunc_normal(b.up1.w, static_cast<std::size_t>(d) * 4 * (d / 2), 0.02, rng);
      b.in_ch = d / 2;
    }
    b.proj.create(ps, name + ".proj", b.in_ch, out, 1, 1, 0, false);
    b.proj_ln.create(ps, name + ".proj_norm", out);
    b.conv.create(ps, name + ".conv", out, out, 3, 1, 1, false);
    b.conv_ln.create(ps, name + ".conv_norm", out);
    ps.trunc_normal(b.proj.w, static_cast<std::size_t>(b.in_ch) * out, 0.02, rng);
    ps.trunc_normal(b.conv.w, static_cast<std::size_t>(9) * out * out, 0.02, rng);
    branches_.push_back(std::move(b));
  }
}

template <class T>
MultiScaleFeatures<T> SimpleFpn<T>::forward(const T* P, const std::vector<T>& grid, int grid_h,
                                            int grid_w, FpnCache<T>* cache) const {
  if (grid.size() != static_cast<std::size_t>(grid_h) * grid_w * cfg_.in_width)
    throw ShapeError("token grid does not match fpn input width");
  if (cache) {
    cache->grid = grid;
    cache->grid_h = grid_h;
    cache->grid_w = grid_w;
    cache->branches.resize(branches_.size());
  }
  MultiScaleFeatures<T> out;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const Branch& b = branches_[i];
    FpnBranchCache<T> local;
    FpnBranchCache<T>& c = cache ? cache->branches[i] : local;
    const int d = cfg_.in_width;
    const std::vector<T>* x = &grid;
    int h = grid_h, w = grid_w;
    if (b.scale != FpnScale::x1) {
      c.up1.resize(static_cast<std::size_t>(4) * h * w * (d / 2));
      b.up1.forward(P, grid.data(), h, w, c.up1.data());
      h *= 2;
      w *= 2;
      x = &c.up1;
    }
    if (b.scale == FpnScale::x4) {
      const std::size_t n = static_cast<std::size_t>(h) * w * (d / 2);
      c.up1_norm.resize(n);
      c.up1_act.resize(n);
      b.up1_ln.forward(P, c.up1.data(), h * w, c.up1_norm.data(), &c.up1_ln);
      for (std::size_t k = 0; k < n; ++k) c.up1_act[k] = nn::gelu(c.up1_norm[k]);
      c.up2.resize(static_cast<std::size_t>(4) * h * w * (d / 4));
      b.up2.forward(P, c.up1_act.data(), h, w, c.up2.data());
      h *= 2;
      w *= 2;
      x = &c.up2;
    }
    c.h = h;
    c.w = w;
    const int out_ch = b.proj.cout;
    const std::size_t n = static_cast<std::size_t>(h) * w * out_ch;
    c.proj.resize(n);
    c.proj_norm.resize(n);
    c.conv.resize(n);
    b.proj.forward(P, x->data(), h, w, c.proj.data(), nullptr);
    b.proj_ln.forward(P, c.proj.data(), h * w, c.proj_norm.data(), &c.proj_ln);
    b.conv.forward(P, c.proj_norm.data(), h, w, c.conv.data(), &c.cols);
    FeatureMap<T> fm(out_ch, h, w);
    b.conv_ln.forward(P, c.conv.data(), h * w, fm.data.data(), &c.conv_ln);
    out.maps.push_back(std::move(fm));
    out.scale_ids.push_back(teacher_stage_of(b.scale));
  }
  return out;
}

template <class T>
void SimpleFpn<T>::backward(const T* P, const FpnCache<T>& cache, const MultiScaleFeatures<T>& dout,
                            std::vector<T>& dgrid, T* G) const {
  if (dout.maps.size() != branches_.size()) throw ShapeError("fpn gradient scale count mismatch");
  const int d = cfg_.in_width;
  dgrid.assign(cache.grid.size(), T(0));
  std::vector<T> tmp;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const Branch& b = branches_[i];
    const FpnBranchCache<T>& c = cache.branches[i];
    const int h = c.h, w = c.w;
    const std::size_t n = static_cast<std::size_t>(h) * w * b.proj.cout;
    std::vector<T> g1(n), g2(n);
    b.conv_ln.backward(P, c.conv_ln, dout.maps[i].data.data(), h * w, g1.data(), G);
    b.conv.backward(P, c.proj_norm.data(), c.cols, h, w, g1.data(), g2.data(), G);
    b.proj_ln.backward(P, c.proj_ln, g2.data(), h * w, g1.data(), G);
    const std::vector<T>& proj_in =
        b.scale == FpnScale::x4 ? c.up2 : (b.scale == FpnScale::x2 ? c.up1 : cache.grid);
    std::vector<T> dx(static_cast<std::size_t>(h) * w * b.in_ch);
    b.proj.backward(P, proj_in.data(), c.cols, h, w, g1.data(), dx.data(), G);
    if (b.scale == FpnScale::x1) {
      for (std::size_t k = 0; k < dx.size(); ++k) dgrid[k] += dx[k];
      continue;
    }
    if (b.scale == FpnScale::x4) {
      const int hh = h / 2, ww = w / 2;
      std::vector<T> dact(static_cast<std::size_t>(hh) * ww * (d / 2));
      b.up2.backward(P, c.up1_act.data(), hh, ww, dx.data(), dact.data(), G);
      for (std::size_t k = 0; k < dact.size(); ++k) dact[k] *= nn::gelu_grad(c.up1_norm[k]);
      dx.resize(dact.size());
      b.up1_ln.backward(P, c.up1_ln, dact.data(), hh * ww, dx.data(), G);
    }
    tmp.resize(dgrid.size());
    b.up1.backward(P, cache.grid.data(), cache.grid_h, cache.grid_w, dx.data(), tmp.data(), G);
    for (std::size_t k = 0; k < dgrid.size(); ++k) dgrid[k] += tmp[k];
  }
}

template class SimpleFpn<float>;
template class SimpleFpn<double>;

}  // namespace mmr
