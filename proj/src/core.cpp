#include "mmr/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "mmr/errors.hpp"
#include "mmr/rng.hpp"

namespace mmr {

namespace {

template <class T>
void check_aligned(const MultiScaleFeatures<T>& a, const MultiScaleFeatures<T>& b) {
  if (a.maps.size() != b.maps.size()) throw ShapeError("feature pyramids have different scale counts");
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    const auto& x = a.maps[i];
    const auto& y = b.maps[i];
    if (x.channels != y.channels || x.height != y.height || x.width != y.width)
      throw ShapeError("scale " + std::to_string(i) + " shape mismatch: (" + std::to_string(x.channels) +
                       "," + std::to_string(x.height) + "," + std::to_string(x.width) + ") vs (" +
                       std::to_string(y.channels) + "," + std::to_string(y.height) + "," +
                       std::to_string(y.width) + ")");
    if (x.data.size() != static_cast<std::size_t>(x.channels) * x.height * x.width ||
        y.data.size() != x.data.size())
      throw ShapeError("feature buffer size does not match its shape");
  }
}

}  // namespace

template <class T>
T mmr_loss(const MultiScaleFeatures<T>& z_masked, const MultiScaleFeatures<T>& z_frozen,
           MultiScaleFeatures<T>* grad) {
  check_aligned(z_masked, z_frozen);
  if (grad) {
    grad->maps.clear();
    grad->scale_ids = z_masked.scale_ids;
  }
  double total = 0;
  for (std::size_t i = 0; i < z_masked.maps.size(); ++i) {
    const auto& a = z_masked.maps[i];
    const auto& b = z_frozen.maps[i];
    const int n = a.positions(), c = a.channels;
    FeatureMap<T> g;
    if (grad) g = FeatureMap<T>(c, a.height, a.width);
    double scale_sum = 0;
    for (int k = 0; k < n; ++k) {
      const T* u = a.row(k);
      const T* v = b.row(k);
      double uv = 0, uu = 0, vv = 0;
      for (int j = 0; j < c; ++j) {
        uv += double(u[j]) * v[j];
        uu += double(u[j]) * u[j];
        vv += double(v[j]) * v[j];
      }
      const double nu = std::sqrt(uu), nv = std::sqrt(vv);
      const double denom = std::max(nu * nv, kCosineEps);
      const double cos = uv / denom;
      scale_sum += 1.0 - std::clamp(cos, -1.0, 1.0);
      if (grad) {
        // d(1 - cos)/du, scaled by 1/n.
        T* gr = g.row(k);
        const double w = -1.0 / n;
        if (nu * nv > kCosineEps) {
          const double cu = cos / uu;
          for (int j = 0; j < c; ++j) gr[j] = static_cast<T>(w * (v[j] / denom - cu * u[j]));
        } else {
          for (int j = 0; j < c; ++j) gr[j] = static_cast<T>(w * v[j] / denom);
        }
      }
    }
    total += scale_sum / n;
    if (grad) grad->maps.push_back(std::move(g));
  }
  return static_cast<T>(total);
}

template float mmr_loss<float>(const MultiScaleFeatures<float>&, const MultiScaleFeatures<float>&,
                               MultiScaleFeatures<float>*);
template double mmr_loss<double>(const MultiScaleFeatures<double>&, const MultiScaleFeatures<double>&,
                                 MultiScaleFeatures<double>*);

namespace {

std::vector<std::vector<double>> cosine_distance_maps(const MultiScaleFeatures<float>& z_masked,
                                                      const MultiScaleFeatures<float>& z_frozen) {
  check_aligned(z_masked, z_frozen);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < z_masked.maps.size(); ++i) {
    const auto& a = z_masked.maps[i];
    const auto& b = z_frozen.maps[i];
    std::vector<double> am(static_cast<std::size_t>(a.positions()));
    for (int k = 0; k < a.positions(); ++k) {
      const float* u = a.row(k);
      const float* v = b.row(k);
      double uv = 0, uu = 0, vv = 0;
      for (int j = 0; j < a.channels; ++j) {
        uv += double(u[j]) * v[j];
        uu += double(u[j]) * u[j];
        vv += double(v[j]) * v[j];
      }
      const double cos = uv / std::max(std::sqrt(uu) * std::sqrt(vv), kCosineEps);
      am[static_cast<std::size_t>(k)] = 1.0 - std::clamp(cos, -1.0, 1.0);
    }
    out.push_back(std::move(am));
  }
  return out;
}

// Half-pixel-centre bilinear upsampling added into `dst`.
void add_upsampled(const std::vector<double>& src, int sh, int sw, int dh, int dw, std::vector<double>& dst) {
  const double ry = double(sh) / dh, rx = double(sw) / dw;
  for (int y = 0; y < dh; ++y) {
    const double fy = std::clamp((y + 0.5) * ry - 0.5, 0.0, double(sh - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      const double fx = std::clamp((x + 0.5) * rx - 0.5, 0.0, double(sw - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double top = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
      const double bot = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
      dst[static_cast<std::size_t>(y) * dw + x] += top * (1 - wy) + bot * wy;
    }
  }
}

}  // namespace

std::vector<std::vector<float>> scale_anomaly_maps(const MultiScaleFeatures<float>& z_masked,
                                                   const MultiScaleFeatures<float>& z_frozen) {
  std::vector<std::vector<float>> out;
  for (const auto& m : cosine_distance_maps(z_masked, z_frozen)) out.emplace_back(m.begin(), m.end());
  return out;
}

AnomalyMap anomaly_map(const MultiScaleFeatures<float>& z_masked,
                       const MultiScaleFeatures<float>& z_frozen, int out_h, int out_w) {
  const auto per_scale = cosine_distance_maps(z_masked, z_frozen);
  std::vector<double> acc(static_cast<std::size_t>(out_h) * out_w, 0.0);
  for (std::size_t i = 0; i < per_scale.size(); ++i) {
    const auto& fm = z_masked.maps[i];
    if (out_h < fm.height || out_w < fm.width)
      throw ConfigError("anomaly map output is smaller than a feature map");
    add_upsampled(per_scale[i], fm.height, fm.width, out_h, out_w, acc);
  }
  AnomalyMap am;
  am.height = out_h;
  am.width = out_w;
  am.values.assign(acc.begin(), acc.end());
  am.score = am.values.empty() ? 0.0f : *std::max_element(am.values.begin(), am.values.end());
  return am;
}

// ---------------------------------------------------------------------------
// Student

template <class T>
MmrStudent<T>::MmrStudent(const TokenEncoderConfig& encoder, const FpnConfig& fpn, std::uint64_t seed) {
  if (fpn.in_width != encoder.width) throw ShapeError("fpn input width differs from encoder width");
  Rng rng(seed);
  encoder_.create(store_, encoder, rng);
  mask_token_ = store_.add("mask_token", {encoder.width}, false);
  store_.trunc_normal(mask_token_, static_cast<std::size_t>(encoder.width), 0.02, rng);
  fpn_.create(store_, fpn, rng);
}

template <class T>
MultiScaleFeatures<T> MmrStudent<T>::forward(const std::vector<T>& patches, int grid_h, int grid_w,
                                             const masking::MaskSpec& spec, StudentCache<T>* cache) const {
  const int n = grid_h * grid_w;
  const int d = encoder_.config().width;
  const int pdim = patch() * patch() * encoder_.config().in_channels;
  if (spec.n != n) throw ShapeError("mask spec covers " + std::to_string(spec.n) + " tokens, grid has " +
                                    std::to_string(n));
  if (patches.size() != static_cast<std::size_t>(n) * pdim) throw ShapeError("patch buffer size mismatch");
  const T* P = store_.data();
  std::vector<T> visible(spec.visible.size() * static_cast<std::size_t>(pdim));
  for (std::size_t r = 0; r < spec.visible.size(); ++r)
    std::copy_n(patches.data() + static_cast<std::size_t>(spec.visible[r]) * pdim, pdim,
                visible.data() + r * pdim);
  const std::vector<T> emb =
      encoder_.forward(P, visible, spec.visible, grid_h, grid_w, cache ? &cache->encoder : nullptr);
  const std::vector<T> pos = sincos_position_table<T>(grid_h, grid_w, d);
  const std::vector<T> grid = masking::assemble_full_grid<T>(
      emb.data(), static_cast<int>(spec.visible.size()), spec, P + mask_token_, pos.data(), d);
  if (cache) {
    cache->spec = spec;
    cache->grid_h = grid_h;
    cache->grid_w = grid_w;
  }
  return fpn_.forward(P, grid, grid_h, grid_w, cache ? &cache->fpn : nullptr);
}

template <class T>
void MmrStudent<T>::backward(const StudentCache<T>& cache, const MultiScaleFeatures<T>& dz, T* G) const {
  const T* P = store_.data();
  const int d = encoder_.config().width;
  std::vector<T> dgrid;
  fpn_.backward(P, cache.fpn, dz, dgrid, G);
  std::vector<T> dvisible(cache.spec.visible.size() * static_cast<std::size_t>(d));
  masking::assemble_full_grid_backward<T>(dgrid.data(), cache.spec, d, dvisible.data(), G + mask_token_);
  encoder_.backward(P, cache.encoder, dvisible, G);
}

template class MmrStudent<float>;
template class MmrStudent<double>;

std::vector<float> encode_visible_tokens(const MmrStudent<float>& student,
                                         const masking::PatchSequence& patches,
                                         const masking::MaskSpec& spec) {
  if (spec.n != patches.count) throw ShapeError("mask spec does not match the patch sequence");
  if (patches.patch != student.patch()) throw ShapeError("patch size differs from the encoder's");
  return student.encoder().forward(student.params().data(), masking::gather_rows(patches, spec.visible),
                                   spec.visible, patches.grid_h, patches.grid_w, nullptr);
}

MultiScaleFeatures<float> student_features(const MmrStudent<float>& student, const ImageTensor& x) {
  const masking::PatchSequence seq = masking::patchify(x, student.patch());
  const masking::MaskSpec all = masking::sample_mask_indices(seq.count, 0.0, 0);
  return student.forward(seq.data, seq.grid_h, seq.grid_w, all, nullptr);
}

AnomalyMap infer_heatmap(const MmrStudent<float>& student, const FrozenEncoder& teacher,
                         const ImageTensor& x) {
  const auto zs = student_features(student, x);
  const auto zt = teacher.extract(x);
  return anomaly_map(zs, zt, x.height, x.width);
}

template <class T>
T image_loss_and_grad(const MmrStudent<T>& student, const std::vector<T>& patches, int grid_h,
                      int grid_w, const masking::MaskSpec& spec, const MultiScaleFeatures<T>& target,
                      T* G) {
  StudentCache<T> cache;
  const auto z = student.forward(patches, grid_h, grid_w, spec, G ? &cache : nullptr);
  if (!G) return mmr_loss(z, target);
  MultiScaleFeatures<T> dz;
  const T loss = mmr_loss(z, target, &dz);
  student.backward(cache, dz, G);
  return loss;
}

template float image_loss_and_grad<float>(const MmrStudent<float>&, const std::vector<float>&, int, int,
                                          const masking::MaskSpec&, const MultiScaleFeatures<float>&,
                                          float*);
template double image_loss_and_grad<double>(const MmrStudent<double>&, const std::vector<double>&, int,
                                            int, const masking::MaskSpec&,
                                            const MultiScaleFeatures<double>&, double*);

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train.betas must lie in [0, 1)");
  if (!(eta >= 0 && eta < 1)) throw ConfigError("masking ratio must lie in [0, 1)");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (threads < 0) throw ConfigError("train.threads must be non-negative");
}

std::vector<std::pair<int, double>> TrainConfig::resolved_schedule() const {
  if (!lr_schedule.empty()) return lr_schedule;
  return {{static_cast<int>(std::ceil(0.8 * epochs)), 0.1}, {static_cast<int>(std::ceil(0.9 * epochs)), 0.1}};
}

double TrainConfig::lr_at(int epoch) const {
  double lr = learning_rate;
  for (const auto& [at, mult] : resolved_schedule())
    if (epoch >= at) lr *= mult;
  return lr;
}

namespace {

class AdamW {
 public:
  AdamW(const nn::ParamStore<float>& ps, const TrainConfig& cfg)
      : cfg_(cfg), m_(ps.size(), 0.0f), v_(ps.size(), 0.0f), decay_(ps.size(), 0) {
    for (const auto& info : ps.infos())
      if (info.decay) std::fill_n(decay_.begin() + static_cast<std::ptrdiff_t>(info.offset), info.size, 1);
  }

  void step(std::vector<float>& params, const std::vector<float>& grad, double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i];
      m_[i] = static_cast<float>(b1 * m_[i] + (1 - b1) * g);
      v_[i] = static_cast<float>(b2 * v_[i] + (1 - b2) * g * g);
      const double mhat = m_[i] / c1, vhat = v_[i] / c2;
      double p = params[i];
      if (decay_[i]) p -= lr * cfg_.weight_decay * p;
      p -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      params[i] = static_cast<float>(p);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<float> m_, v_;
  std::vector<unsigned char> decay_;
  long t_ = 0;
};

struct Example {
  const ImageTensor* image;
  const MultiScaleFeatures<float>* target;
};

// Provides the (image, teacher target) pair of sample i in a given epoch.
using ExampleSource = std::function<Example(int epoch, int index, ImageTensor& image_buf,
                                            MultiScaleFeatures<float>& target_buf)>;

float example_loss(const MmrStudent<float>& student, const Example& ex, const TrainConfig& cfg,
                   std::uint64_t mask_seed, float* G) {
  const int p = student.patch();
  if (cfg.mode == masking::MaskMode::token_drop) {
    const masking::PatchSequence seq = masking::patchify(*ex.image, p);
    const masking::MaskSpec spec = masking::sample_mask_indices(seq.count, cfg.eta, mask_seed);
    return image_loss_and_grad(student, seq.data, seq.grid_h, seq.grid_w, spec, *ex.target, G);
  }
  const masking::MaskSpec unit =
      masking::sample_unit_mask(ex.image->height, ex.image->width, cfg.unit_q, cfg.eta, mask_seed);
  const ImageTensor filled = masking::apply_unit_mask(*ex.image, unit, cfg.fill_value);
  const masking::PatchSequence seq = masking::patchify(filled, p);
  const masking::MaskSpec all = masking::sample_mask_indices(seq.count, 0.0, 0);
  return image_loss_and_grad(student, seq.data, seq.grid_h, seq.grid_w, all, *ex.target, G);
}

std::vector<LossRecord> run_training(MmrStudent<float>& student, int n_images, const ExampleSource& source,
                                     const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (n_images == 0) throw ConfigError("training set is empty");
  const int workers = std::max(1, cfg.threads == 0 ? static_cast<int>(std::thread::hardware_concurrency())
                                                   : cfg.threads);
  auto& params = student.params().values();
  AdamW opt(student.params(), cfg);
  std::vector<std::vector<float>> grads(static_cast<std::size_t>(workers), std::vector<float>(params.size()));
  std::vector<float> total(params.size());
  std::vector<LossRecord> curve;
  int step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n_images));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x5u}));
    shuffle_rng.shuffle(order);
    const double lr = cfg.lr_at(epoch);

    for (int start = 0; start < n_images; start += cfg.batch_size, ++step) {
      const int count = std::min(cfg.batch_size, n_images - start);
      std::vector<double> losses(static_cast<std::size_t>(count));
      auto work = [&](int w) {
        auto& g = grads[static_cast<std::size_t>(w)];
        std::fill(g.begin(), g.end(), 0.0f);
        ImageTensor image_buf;
        MultiScaleFeatures<float> target_buf;
        for (int b = w; b < count; b += workers) {
          const int idx = order[static_cast<std::size_t>(start + b)];
          const Example ex = source(epoch, idx, image_buf, target_buf);
          const std::uint64_t mask_seed =
              derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx), 0x1u});
          losses[static_cast<std::size_t>(b)] = example_loss(student, ex, cfg, mask_seed, g.data());
        }
      };
      const int active = std::min(workers, count);
      if (active == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < active; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
      }
      std::fill(total.begin(), total.end(), 0.0f);
      for (int w = 0; w < active; ++w)
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += grads[static_cast<std::size_t>(w)][i];
      const float inv = 1.0f / static_cast<float>(count);
      for (float& g : total) g *= inv;

      const double loss = std::accumulate(losses.begin(), losses.end(), 0.0) / count;
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", step " << step << " (batch starting at "
            << start << ", seed " << cfg.seed << ")";
        throw NumericError(msg.str());
      }
      opt.step(params, total, lr);
      LossRecord rec{epoch, step, loss};
      curve.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
  }
  return curve;
}

}  // namespace

std::vector<LossRecord> train_on_tensors(MmrStudent<float>& student, const FrozenEncoder& teacher,
                                         const std::vector<ImageTensor>& images, const TrainConfig& cfg,
                                         const TrainHooks& hooks) {
  if (images.empty()) throw ConfigError("training set is empty");
  std::vector<MultiScaleFeatures<float>> targets;
  targets.reserve(images.size());
  for (const auto& x : images) targets.push_back(teacher.extract(x));
  ExampleSource source = [&](int, int idx, ImageTensor&, MultiScaleFeatures<float>&) {
    return Example{&images[static_cast<std::size_t>(idx)], &targets[static_cast<std::size_t>(idx)]};
  };
  return run_training(student, static_cast<int>(images.size()), source, cfg, hooks);
}

std::vector<LossRecord> train(MmrStudent<float>& student, const FrozenEncoder& teacher,
                              const std::vector<data::SampleRecord>& records,
                              const PreprocessOptions& preprocess, const TrainConfig& cfg,
                              const TrainHooks& hooks) {
  cfg.validate();
  std::vector<Image8> raw;
  for (const auto& r : records) {
    if (r.split != data::Split::train) continue;
    if (r.label != data::Label::normal)
      throw ConfigError("training data must be normal: " + r.image_path.string());
    raw.push_back(read_image(r.image_path));
  }
  if (raw.empty()) throw ConfigError("training manifest has no train samples");
  if (!preprocess.augment) {
    std::vector<ImageTensor> images;
    for (const auto& im : raw) images.push_back(preprocess_image(im, preprocess));
    return train_on_tensors(student, teacher, images, cfg, hooks);
  }
  ExampleSource source = [&](int epoch, int idx, ImageTensor& image_buf, MultiScaleFeatures<float>& target_buf) {
    const std::uint64_t seed =
        derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx), 0x2u});
    image_buf = preprocess_image(raw[static_cast<std::size_t>(idx)], preprocess, seed);
    target_buf = teacher.extract(image_buf);
    return Example{&image_buf, &target_buf};
  };
  return run_training(student, static_cast<int>(raw.size()), source, cfg, hooks);
}

}  // namespace mmr
