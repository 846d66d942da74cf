#include "mmr/backbones.hpp"

#include <algorithm>
#include <functional>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "mmr/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mmr {

std::string to_string(EncoderVariant v) {
  return v == EncoderVariant::vit_b_pretrained_mae ? "vit_b_pretrained_mae" : "vit_tiny_scratch";
}

EncoderVariant parse_encoder_variant(const std::string& s) {
  if (s == "vit_b_pretrained_mae") return EncoderVariant::vit_b_pretrained_mae;
  if (s == "vit_tiny_scratch") return EncoderVariant::vit_tiny_scratch;
  throw ConfigError("unknown encoder variant: '" + s + "'");
}

TokenEncoderConfig TokenEncoderConfig::vit_b() { return {}; }

TokenEncoderConfig TokenEncoderConfig::vit_tiny(int width, int depth, int heads) {
  TokenEncoderConfig cfg;
  cfg.variant = EncoderVariant::vit_tiny_scratch;
  cfg.width = width;
  cfg.depth = depth;
  cfg.heads = heads;
  return cfg;
}

void TokenEncoderConfig::validate() const {
  if (width <= 0 || depth < 0 || heads <= 0 || patch <= 0 || mlp_ratio <= 0)
    throw ConfigError("encoder dimensions must be positive");
  if (width % heads != 0) throw ConfigError("encoder width must be divisible by heads");
  if (width % 4 != 0) throw ConfigError("encoder width must be divisible by 4 (2D sin-cos positions)");
  if (variant == EncoderVariant::vit_b_pretrained_mae && (width != 768 || depth != 12 || heads != 12))
    throw ConfigError("vit_b_pretrained_mae requires width 768, depth 12, heads 12");
}

template <class T>
std::vector<T> sincos_position_table(int grid_h, int grid_w, int d) {
  const int half = d / 2, quarter = d / 4;
  std::vector<T> table(static_cast<std::size_t>(grid_h) * grid_w * d);
  for (int y = 0; y < grid_h; ++y)
    for (int x = 0; x < grid_w; ++x) {
      T* row = table.data() + (static_cast<std::size_t>(y) * grid_w + x) * d;
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        row[i] = static_cast<T>(std::sin(x * omega));
        row[quarter + i] = static_cast<T>(std::cos(x * omega));
        row[half + i] = static_cast<T>(std::sin(y * omega));
        row[half + quarter + i] = static_cast<T>(std::cos(y * omega));
      }
    }
  return table;
}

template <class T>
void TokenEncoder<T>::create(nn::ParamStore<T>& ps, const TokenEncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  cfg_ = cfg;
  const int d = cfg.width;
  const int pdim = cfg.patch * cfg.patch * cfg.in_channels;
  patch_embed_.create(ps, "patch_embed", pdim, d);
  ps.xavier_uniform(patch_embed_.w, pdim, d, rng);
  if (cfg.include_class_token) {
    cls_token_ = ps.add("cls_token", {d}, false);
    ps.trunc_normal(cls_token_, static_cast<std::size_t>(d), 0.02, rng);
  }
  blocks_.resize(static_cast<std::size_t>(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) {
    auto& blk = blocks_[static_cast<std::size_t>(i)];
    blk.create(ps, "blocks." + std::to_string(i), d, cfg.heads, d * cfg.mlp_ratio);
    ps.xavier_uniform(blk.attn.qkv.w, d, 3 * d, rng);
    ps.xavier_uniform(blk.attn.proj.w, d, d, rng);
    ps.xavier_uniform(blk.fc1.w, d, d * cfg.mlp_ratio, rng);
    ps.xavier_uniform(blk.fc2.w, d * cfg.mlp_ratio, d, rng);
  }
  norm_.create(ps, "norm", d);
}

template <class T>
std::vector<T> TokenEncoder<T>::forward(const T* P, const std::vector<T>& patches,
                                        const std::vector<int>& positions, int grid_h, int grid_w,
                                        EncoderCache<T>* cache) const {
  const int d = cfg_.width;
  const int visible = static_cast<int>(positions.size());
  if (visible == 0) throw ConfigError("no visible tokens: masking ratio too large for the grid");
  const int pdim = cfg_.patch * cfg_.patch * cfg_.in_channels;
  if (patches.size() != static_cast<std::size_t>(visible) * pdim)
    throw ShapeError("visible patch buffer does not match positions");
  const int offset = cfg_.include_class_token ? 1 : 0;
  const int tokens = visible + offset;

  const std::vector<T> pos = sincos_position_table<T>(grid_h, grid_w, d);
  std::vector<T> x(static_cast<std::size_t>(tokens) * d);
  patch_embed_.forward(P, patches.data(), visible, x.data() + static_cast<std::size_t>(offset) * d);
  for (int r = 0; r < visible; ++r) {
    if (positions[r] < 0 || positions[r] >= grid_h * grid_w) throw ShapeError("token position out of range");
    T* row = x.data() + static_cast<std::size_t>(r + offset) * d;
    const T* pr = pos.data() + static_cast<std::size_t>(positions[r]) * d;
    for (int j = 0; j < d; ++j) row[j] += pr[j];
  }
  if (offset)
    for (int j = 0; j < d; ++j) x[j] = P[cls_token_ + j];

  if (cache) {
    cache->blocks.resize(blocks_.size());
    cache->patches = patches;
    cache->tokens = tokens;
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].forward(P, x, tokens, cache ? &cache->blocks[i] : nullptr);
  std::vector<T> y(x.size());
  norm_.forward(P, x.data(), tokens, y.data(), cache ? &cache->final_norm : nullptr);
  if (offset) y.erase(y.begin(), y.begin() + d);
  return y;
}

template <class T>
void TokenEncoder<T>::backward(const T* P, const EncoderCache<T>& cache, const std::vector<T>& dout,
                               T* G) const {
  const int d = cfg_.width;
  const int offset = cfg_.include_class_token ? 1 : 0;
  const int tokens = cache.tokens;
  const int visible = tokens - offset;
  std::vector<T> dy(static_cast<std::size_t>(tokens) * d, T(0));
  std::copy(dout.begin(), dout.end(), dy.begin() + static_cast<std::ptrdiff_t>(offset) * d);
  std::vector<T> dx(dy.size());
  norm_.backward(P, cache.final_norm, dy.data(), tokens, dx.data(), G);
  for (std::size_t i = blocks_.size(); i-- > 0;) blocks_[i].backward(P, cache.blocks[i], dx, tokens, G);
  if (offset)
    for (int j = 0; j < d; ++j) G[cls_token_ + j] += dx[j];
  patch_embed_.backward(P, cache.patches.data(), dx.data() + static_cast<std::size_t>(offset) * d,
                        visible, nullptr, G);
}

template std::vector<float> sincos_position_table<float>(int, int, int);
template std::vector<double> sincos_position_table<double>(int, int, int);
template class TokenEncoder<float>;
template class TokenEncoder<double>;

// ---------------------------------------------------------------------------
// Frozen teacher

std::string to_string(TeacherFamily v) {
  switch (v) {
    case TeacherFamily::wideresnet50: return "wideresnet50";
    case TeacherFamily::resnet18: return "resnet18";
    case TeacherFamily::toy_cnn: return "toy_cnn";
  }
  return "";
}

std::string to_string(TeacherWeights v) { return v == TeacherWeights::pretrained ? "pretrained" : "random"; }

TeacherFamily parse_teacher_family(const std::string& s) {
  if (s == "wideresnet50") return TeacherFamily::wideresnet50;
  if (s == "resnet18") return TeacherFamily::resnet18;
  if (s == "toy_cnn") return TeacherFamily::toy_cnn;
  throw ConfigError("unknown teacher family: '" + s + "'");
}

TeacherWeights parse_teacher_weights(const std::string& s) {
  if (s == "pretrained") return TeacherWeights::pretrained;
  if (s == "random") return TeacherWeights::random;
  throw ConfigError("unknown teacher weights: '" + s + "'");
}

void FrozenEncoderConfig::validate() const {
  if (stages_used.empty()) throw ConfigError("teacher stages_used is empty");
  if (std::adjacent_find(stages_used.begin(), stages_used.end(), std::greater_equal<int>()) != stages_used.end())
    throw ConfigError("teacher stages must be strictly increasing (finest first)");
  for (int s : stages_used)
    if (s < 1 || s > 3) throw ConfigError("teacher stages must be in {1, 2, 3}");
  if (family == TeacherFamily::toy_cnn) {
    if (toy_channels.size() != 3) throw ConfigError("toy teacher needs three channel counts");
    for (int c : toy_channels)
      if (c <= 0) throw ConfigError("toy teacher channels must be positive");
  }
}

FrozenEncoder::ConvBn FrozenEncoder::make_conv(const std::string& name, int cin, int cout, int k,
                                               int stride, int pad, Rng& rng) {
  ConvBn c;
  c.conv.create(store_, name, cin, cout, k, stride, pad, true);
  // He initialisation; resnets use fan-out like their reference implementation.
  const int fan = cfg_.family == TeacherFamily::toy_cnn ? k * k * cin : k * k * cout;
  const double std = std::sqrt(2.0 / fan);
  auto& v = store_.values();
  const std::size_t n = static_cast<std::size_t>(k) * k * cin * cout;
  for (std::size_t i = 0; i < n; ++i) v[c.conv.w + i] = static_cast<float>(rng.normal() * std);
  return c;
}

void FrozenEncoder::build_toy(Rng& rng) {
  const auto& ch = cfg_.toy_channels;
  stem_.push_back(make_conv("stem.conv", 3, std::max(1, ch[0] / 2), 3, 2, 1, rng));
  int cin = std::max(1, ch[0] / 2);
  for (int s = 0; s < 3; ++s) {
    Stage st;
    Block b;
    b.convs.push_back(make_conv("layer" + std::to_string(s + 1) + ".0.conv1", cin, ch[s], 3, 2, 1, rng));
    st.blocks.push_back(std::move(b));
    stages_.push_back(std::move(st));
    channels_[s] = ch[s];
    cin = ch[s];
  }
}

void FrozenEncoder::build_resnet(bool bottleneck, const std::vector<int>& depths, int width_factor,
                                 Rng& rng) {
  residual_ = true;
  stem_pool_ = true;
  stem_.push_back(make_conv("conv1", 3, 64, 7, 2, 3, rng));
  int cin = 64;
  const int expansion = bottleneck ? 4 : 1;
  for (int s = 0; s < 3; ++s) {
    const int planes = 64 << s;
    const int stride = s == 0 ? 1 : 2;
    Stage st;
    for (int b = 0; b < depths[s]; ++b) {
      const std::string prefix = "layer" + std::to_string(s + 1) + "." + std::to_string(b) + ".";
      const int st_b = b == 0 ? stride : 1;
      Block blk;
      if (bottleneck) {
        const int width = planes * width_factor;
        blk.convs.push_back(make_conv(prefix + "conv1", cin, width, 1, 1, 0, rng));
        blk.convs.push_back(make_conv(prefix + "conv2", width, width, 3, st_b, 1, rng));
        blk.convs.push_back(make_conv(prefix + "conv3", width, planes * expansion, 1, 1, 0, rng));
      } else {
        blk.convs.push_back(make_conv(prefix + "conv1", cin, planes, 3, st_b, 1, rng));
        blk.convs.push_back(make_conv(prefix + "conv2", planes, planes, 3, 1, 1, rng));
      }
      if (st_b != 1 || cin != planes * expansion) {
        blk.has_downsample = true;
        blk.downsample = make_conv(prefix + "downsample", cin, planes * expansion, 1, st_b, 0, rng);
      }
      cin = planes * expansion;
      st.blocks.push_back(std::move(blk));
    }
    channels_[s] = planes * expansion;
    stages_.push_back(std::move(st));
  }
}

FrozenEncoder::FrozenEncoder(const FrozenEncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  switch (cfg_.family) {
    case TeacherFamily::toy_cnn: build_toy(rng); break;
    case TeacherFamily::resnet18: build_resnet(false, {2, 2, 2}, 1, rng); break;
    case TeacherFamily::wideresnet50: build_resnet(true, {3, 4, 6}, 2, rng); break;
  }
  if (cfg_.weights == TeacherWeights::pretrained) {
    if (cfg_.weights_path.empty() || !fs::is_regular_file(cfg_.weights_path))
      throw WeightsUnavailable("pretrained " + to_string(cfg_.family) +
                               " weights not found (teacher.weights_path='" +
                               cfg_.weights_path.string() + "'); convert them with "
                               "tools/convert_weights.py or use weights=random");
    load(cfg_.weights_path);
  }
}

int FrozenEncoder::stage_channels(int stage) const {
  if (stage < 1 || stage > 3) throw ConfigError("teacher stage out of range");
  return channels_[static_cast<std::size_t>(stage - 1)];
}

std::vector<std::array<int, 3>> FrozenEncoder::output_shapes(int height, int width) const {
  std::vector<std::array<int, 3>> out;
  for (int s : cfg_.stages_used)
    out.push_back({stage_channels(s), height >> (s + 1), width >> (s + 1)});
  return out;
}

namespace {

void relu(std::vector<float>& v) {
  for (float& x : v) x = std::max(x, 0.0f);
}

std::vector<float> max_pool_3x3_s2(const std::vector<float>& x, int H, int W, int C, int& Ho, int& Wo) {
  Ho = (H + 2 - 3) / 2 + 1;
  Wo = (W + 2 - 3) / 2 + 1;
  std::vector<float> y(static_cast<std::size_t>(Ho) * Wo * C, -std::numeric_limits<float>::infinity());
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      float* dst = y.data() + (static_cast<std::size_t>(oy) * Wo + ox) * C;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * 2 - 1 + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * 2 - 1 + kx;
          if (ix < 0 || ix >= W) continue;
          const float* src = x.data() + (static_cast<std::size_t>(iy) * W + ix) * C;
          for (int c = 0; c < C; ++c) dst[c] = std::max(dst[c], src[c]);
        }
      }
    }
  return y;
}

}  // namespace

MultiScaleFeatures<float> FrozenEncoder::extract(const ImageTensor& x) const {
  if (x.channels != 3) throw ShapeError("teacher expects a 3-channel image");
  if (x.height % 16 != 0 || x.width % 16 != 0)
    throw ShapeError("teacher input sides must be divisible by 16");
  const float* P = store_.data();
  int H = x.height, W = x.width, C = 3;
  std::vector<float> cur(static_cast<std::size_t>(H) * W * C);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) cur[(static_cast<std::size_t>(y) * W + xx) * C + c] = x.at(c, y, xx);

  auto run_conv = [&](const nn::Conv2d<float>& conv, const std::vector<float>& in, int h, int w,
                      int& ho, int& wo) {
    ho = conv.out_size(h);
    wo = conv.out_size(w);
    std::vector<float> out(static_cast<std::size_t>(ho) * wo * conv.cout);
    conv.forward(P, in.data(), h, w, out.data(), nullptr);
    return out;
  };

  for (const auto& s : stem_) {
    int ho, wo;
    cur = run_conv(s.conv, cur, H, W, ho, wo);
    relu(cur);
    H = ho;
    W = wo;
    C = s.conv.cout;
  }
  if (stem_pool_) {
    int ho, wo;
    cur = max_pool_3x3_s2(cur, H, W, C, ho, wo);
    H = ho;
    W = wo;
  }

  const int last = *std::max_element(cfg_.stages_used.begin(), cfg_.stages_used.end());
  MultiScaleFeatures<float> out;
  for (int s = 0; s < last; ++s) {
    for (const auto& blk : stages_[static_cast<std::size_t>(s)].blocks) {
      std::vector<float> branch = cur;
      int h = H, w = W;
      for (std::size_t i = 0; i < blk.convs.size(); ++i) {
        int ho, wo;
        branch = run_conv(blk.convs[i].conv, branch, h, w, ho, wo);
        h = ho;
        w = wo;
        if (!residual_ || i + 1 < blk.convs.size()) relu(branch);
      }
      if (residual_) {
        std::vector<float> shortcut;
        if (blk.has_downsample) {
          int ho, wo;
          shortcut = run_conv(blk.downsample.conv, cur, H, W, ho, wo);
        } else {
          shortcut = std::move(cur);
        }
        for (std::size_t i = 0; i < branch.size(); ++i) branch[i] += shortcut[i];
        relu(branch);
      }
      cur = std::move(branch);
      H = h;
      W = w;
      C = blk.convs.back().conv.cout;
    }
    if (std::find(cfg_.stages_used.begin(), cfg_.stages_used.end(), s + 1) != cfg_.stages_used.end()) {
      FeatureMap<float> fm(C, H, W);
      fm.data = cur;
      out.maps.push_back(std::move(fm));
      out.scale_ids.push_back(s + 1);
    }
  }
  return out;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t FrozenEncoder::parameter_hash() const {
  return fnv1a(store_.data(), store_.size() * sizeof(float));
}

void FrozenEncoder::save(const fs::path& file) const {
  save_weights(file, store_.infos(), store_.values(),
               {{"kind", "teacher"}, {"family", to_string(cfg_.family)}});
}

void FrozenEncoder::load(const fs::path& file) {
  const WeightFile wf = read_weights(file);
  assign_weights(wf, store_.infos(), store_.values());
}

// ---------------------------------------------------------------------------
// Weight files

namespace {
constexpr char kMagic[8] = {'M', 'M', 'R', 'W', '0', '0', '0', '1'};
}

void save_weights(const fs::path& file, const std::vector<nn::ParamInfo>& infos,
                  const std::vector<float>& values, const json& meta) {
  json header;
  header["params"] = json::array();
  for (const auto& p : infos)
    header["params"].push_back({{"name", p.name}, {"shape", p.shape}, {"offset", p.offset}, {"size", p.size}});
  header["meta"] = meta.is_null() ? json::object() : meta;
  header["count"] = values.size();
  const std::string text = header.dump();
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!out) throw IoError("cannot write " + file.string());
}

WeightFile read_weights(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw WeightsUnavailable("cannot open weights " + file.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw WeightsUnavailable("not an MMRW weight file: " + file.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  WeightFile wf;
  const json header = json::parse(text);
  for (const auto& p : header.at("params")) {
    nn::ParamInfo info;
    info.name = p.at("name").get<std::string>();
    info.shape = p.at("shape").get<std::vector<int>>();
    info.offset = p.at("offset").get<std::size_t>();
    info.size = p.at("size").get<std::size_t>();
    wf.infos.push_back(std::move(info));
  }
  wf.meta = header.value("meta", json::object());
  wf.values.resize(header.at("count").get<std::size_t>());
  in.read(reinterpret_cast<char*>(wf.values.data()),
          static_cast<std::streamsize>(wf.values.size() * sizeof(float)));
  if (!in) throw WeightsUnavailable("truncated weight file: " + file.string());
  return wf;
}

void assign_weights(const WeightFile& file, const std::vector<nn::ParamInfo>& infos,
                    std::vector<float>& values) {
  for (const auto& want : infos) {
    auto it = std::find_if(file.infos.begin(), file.infos.end(),
                           [&](const nn::ParamInfo& p) { return p.name == want.name; });
    if (it == file.infos.end()) throw WeightsUnavailable("weight file lacks parameter " + want.name);
    if (it->shape != want.shape) throw WeightsUnavailable("shape mismatch for parameter " + want.name);
    std::copy_n(file.values.begin() + static_cast<std::ptrdiff_t>(it->offset), want.size,
                values.begin() + static_cast<std::ptrdiff_t>(want.offset));
  }
}

}  // namespace mmr
