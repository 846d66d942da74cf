#pragma once

// Hand-differentiated layers over channels-last (rows = tokens or spatial
// positions, cols = channels) buffers. Parameters live in one flat store so
// optimizers, checkpoints and finite-difference checks address them by offset;
// gradients go to a parallel flat buffer supplied by the caller, which keeps
// forward passes const and reentrant.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mmr/errors.hpp"
#include "mmr/linalg.hpp"
#include "mmr/rng.hpp"

namespace mmr::nn {

struct ParamInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decay = true;  // weight decay applies (matrices yes, norms/biases no)
};

template <class T>
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::vector<int> shape, bool decay) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    ParamInfo info{name, std::move(shape), values_.size(), n, decay};
    values_.resize(values_.size() + n, T(0));
    infos_.push_back(std::move(info));
    return infos_.back().offset;
  }

  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }
  const std::vector<ParamInfo>& infos() const { return infos_; }
  std::size_t size() const { return values_.size(); }
  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  const ParamInfo* find(const std::string& name) const {
    for (const auto& p : infos_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void fill(std::size_t offset, std::size_t n, T v) {
    for (std::size_t i = 0; i < n; ++i) values_[offset + i] = v;
  }
  void trunc_normal(std::size_t offset, std::size_t n, double std, Rng& rng) {
    for (std::size_t i = 0; i < n; ++i) values_[offset + i] = static_cast<T>(rng.truncated_normal(std));
  }
  void xavier_uniform(std::size_t offset, int fan_in, int fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    const std::size_t n = static_cast<std::size_t>(fan_in) * fan_out;
    for (std::size_t i = 0; i < n; ++i) values_[offset + i] = static_cast<T>(rng.uniform(-a, a));
  }

 private:
  std::vector<T> values_;
  std::vector<ParamInfo> infos_;
};

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <class T>
inline T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// Linear: y = x W + b, W stored [in x out].

template <class T>
struct Linear {
  int in = 0, out = 0;
  bool has_bias = true;
  std::size_t w = 0, b = 0;

  void create(ParamStore<T>& ps, const std::string& name, int in_features, int out_features,
              bool bias = true) {
    in = in_features;
    out = out_features;
    has_bias = bias;
    w = ps.add(name + ".weight", {in, out}, true);
    if (has_bias) b = ps.add(name + ".bias", {out}, false);
  }

  void forward(const T* P, const T* x, int rows, T* y) const {
    linalg::matmul<T>(rows, out, in, x, false, P + w, false, y, false);
    if (has_bias)
      for (int r = 0; r < rows; ++r) {
        T* yr = y + static_cast<std::size_t>(r) * out;
        for (int j = 0; j < out; ++j) yr[j] += P[b + j];
      }
  }

  // Adds parameter gradients into G. dx (optional) is overwritten, or
  // accumulated into when accumulate_dx is set.
  void backward(const T* P, const T* x, const T* dy, int rows, T* dx, T* G,
                bool accumulate_dx = false) const {
    linalg::matmul<T>(in, out, rows, x, true, dy, false, G + w, true);
    if (has_bias)
      for (int r = 0; r < rows; ++r) {
        const T* d = dy + static_cast<std::size_t>(r) * out;
        for (int j = 0; j < out; ++j) G[b + j] += d[j];
      }
    if (dx) linalg::matmul<T>(rows, in, out, dy, false, P + w, true, dx, accumulate_dx);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over the last (channel) dimension.

template <class T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<T> rstd;
};

template <class T>
struct LayerNorm {
  int dim = 0;
  double eps = 1e-6;
  std::size_t g = 0, b = 0;

  void create(ParamStore<T>& ps, const std::string& name, int d, double epsilon = 1e-6) {
    dim = d;
    eps = epsilon;
    g = ps.add(name + ".weight", {d}, false);
    b = ps.add(name + ".bias", {d}, false);
    ps.fill(g, static_cast<std::size_t>(d), T(1));
  }

  void forward(const T* P, const T* x, int rows, T* y, NormCache<T>* cache) const {
    if (cache) {
      cache->xhat.resize(static_cast<std::size_t>(rows) * dim);
      cache->rstd.resize(static_cast<std::size_t>(rows));
    }
    for (int r = 0; r < rows; ++r) {
      const T* xr = x + static_cast<std::size_t>(r) * dim;
      T mean = 0;
      for (int j = 0; j < dim; ++j) mean += xr[j];
      mean /= dim;
      T var = 0;
      for (int j = 0; j < dim; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= dim;
      const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
      T* yr = y + static_cast<std::size_t>(r) * dim;
      T* xh = cache ? cache->xhat.data() + static_cast<std::size_t>(r) * dim : nullptr;
      for (int j = 0; j < dim; ++j) {
        const T h = (xr[j] - mean) * rstd;
        if (xh) xh[j] = h;
        yr[j] = h * P[g + j] + P[b + j];
      }
      if (cache) cache->rstd[r] = rstd;
    }
  }

  void backward(const T* P, const NormCache<T>& cache, const T* dy, int rows, T* dx, T* G,
                bool accumulate_dx = false) const {
    std::vector<T> gh(static_cast<std::size_t>(dim));
    for (int r = 0; r < rows; ++r) {
      const T* d = dy + static_cast<std::size_t>(r) * dim;
      const T* xh = cache.xhat.data() + static_cast<std::size_t>(r) * dim;
      T sum_g = 0, sum_gx = 0;
      for (int j = 0; j < dim; ++j) {
        G[g + j] += d[j] * xh[j];
        G[b + j] += d[j];
        gh[j] = d[j] * P[g + j];
        sum_g += gh[j];
        sum_gx += gh[j] * xh[j];
      }
      const T scale = cache.rstd[r] / dim;
      T* dxr = dx + static_cast<std::size_t>(r) * dim;
      for (int j = 0; j < dim; ++j) {
        const T v = scale * (dim * gh[j] - sum_g - xh[j] * sum_gx);
        dxr[j] = accumulate_dx ? dxr[j] + v : v;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention.

template <class T>
struct AttentionCache {
  std::vector<T> qkv;    // tokens x 3d
  std::vector<T> probs;  // heads x tokens x tokens
  std::vector<T> ctx;    // tokens x d
};

template <class T>
struct Attention {
  int dim = 0, heads = 1;
  Linear<T> qkv, proj;

  void create(ParamStore<T>& ps, const std::string& name, int d, int n_heads) {
    if (d % n_heads != 0) throw ConfigError("attention width must be divisible by heads");
    dim = d;
    heads = n_heads;
    qkv.create(ps, name + ".qkv", d, 3 * d);
    proj.create(ps, name + ".proj", d, d);
  }

  void forward(const T* P, const T* x, int tokens, T* y, AttentionCache<T>& c) const {
    const int hd = dim / heads;
    const std::size_t tn = static_cast<std::size_t>(tokens);
    c.qkv.resize(tn * 3 * dim);
    c.probs.resize(static_cast<std::size_t>(heads) * tn * tn);
    c.ctx.resize(tn * dim);
    qkv.forward(P, x, tokens, c.qkv.data());
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<T> q(tn * hd), k(tn * hd), v(tn * hd), o(tn * hd);
    for (int h = 0; h < heads; ++h) {
      split_head(c.qkv.data(), tokens, h, q.data(), k.data(), v.data());
      T* p = c.probs.data() + static_cast<std::size_t>(h) * tn * tn;
      linalg::matmul<T>(tokens, tokens, hd, q.data(), false, k.data(), true, p, false);
      for (std::size_t i = 0; i < tn; ++i) {
        T* row = p + i * tn;
        T mx = row[0] * scale;
        for (std::size_t j = 0; j < tn; ++j) mx = std::max(mx, row[j] * scale);
        T sum = 0;
        for (std::size_t j = 0; j < tn; ++j) {
          row[j] = std::exp(row[j] * scale - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < tn; ++j) row[j] /= sum;
      }
      linalg::matmul<T>(tokens, hd, tokens, p, false, v.data(), false, o.data(), false);
      for (std::size_t i = 0; i < tn; ++i)
        for (int j = 0; j < hd; ++j) c.ctx[i * dim + h * hd + j] = o[i * hd + j];
    }
    proj.forward(P, c.ctx.data(), tokens, y);
  }

  // dx is overwritten.
  void backward(const T* P, const T* x, const AttentionCache<T>& c, const T* dy, int tokens,
                T* dx, T* G) const {
    const int hd = dim / heads;
    const std::size_t tn = static_cast<std::size_t>(tokens);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<T> dctx(tn * dim);
    proj.backward(P, c.ctx.data(), dy, tokens, dctx.data(), G);
    std::vector<T> dqkv(tn * 3 * dim);
    std::vector<T> q(tn * hd), k(tn * hd), v(tn * hd), dout(tn * hd), dq(tn * hd), dk(tn * hd),
        dv(tn * hd), dp(tn * tn);
    for (int h = 0; h < heads; ++h) {
      split_head(c.qkv.data(), tokens, h, q.data(), k.data(), v.data());
      const T* p = c.probs.data() + static_cast<std::size_t>(h) * tn * tn;
      for (std::size_t i = 0; i < tn; ++i)
        for (int j = 0; j < hd; ++j) dout[i * hd + j] = dctx[i * dim + h * hd + j];
      linalg::matmul<T>(tokens, tokens, hd, dout.data(), false, v.data(), true, dp.data(), false);
      linalg::matmul<T>(tokens, hd, tokens, p, true, dout.data(), false, dv.data(), false);
      for (std::size_t i = 0; i < tn; ++i) {
        const T* pr = p + i * tn;
        T* dr = dp.data() + i * tn;
        T s = 0;
        for (std::size_t j = 0; j < tn; ++j) s += pr[j] * dr[j];
        for (std::size_t j = 0; j < tn; ++j) dr[j] = pr[j] * (dr[j] - s) * scale;
      }
      linalg::matmul<T>(tokens, hd, tokens, dp.data(), false, k.data(), false, dq.data(), false);
      linalg::matmul<T>(tokens, hd, tokens, dp.data(), true, q.data(), false, dk.data(), false);
      for (std::size_t i = 0; i < tn; ++i)
        for (int j = 0; j < hd; ++j) {
          T* row = dqkv.data() + i * 3 * dim;
          row[h * hd + j] = dq[i * hd + j];
          row[dim + h * hd + j] = dk[i * hd + j];
          row[2 * dim + h * hd + j] = dv[i * hd + j];
        }
    }
    qkv.backward(P, x, dqkv.data(), tokens, dx, G);
  }

 private:
  void split_head(const T* qkv_buf, int tokens, int h, T* q, T* k, T* v) const {
    const int hd = dim / heads;
    for (int i = 0; i < tokens; ++i) {
      const T* row = qkv_buf + static_cast<std::size_t>(i) * 3 * dim;
      for (int j = 0; j < hd; ++j) {
        q[static_cast<std::size_t>(i) * hd + j] = row[h * hd + j];
        k[static_cast<std::size_t>(i) * hd + j] = row[dim + h * hd + j];
        v[static_cast<std::size_t>(i) * hd + j] = row[2 * dim + h * hd + j];
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Pre-norm transformer block: x + attn(ln1 x), then + mlp(ln2 x).

template <class T>
struct BlockCache {
  std::vector<T> x, a, x1, b, hpre, hact;
  NormCache<T> n1, n2;
  AttentionCache<T> attn;
};

template <class T>
struct TransformerBlock {
  int dim = 0, hidden = 0;
  LayerNorm<T> norm1, norm2;
  Attention<T> attn;
  Linear<T> fc1, fc2;

  void create(ParamStore<T>& ps, const std::string& name, int d, int heads, int mlp_hidden) {
    dim = d;
    hidden = mlp_hidden;
    norm1.create(ps, name + ".norm1", d);
    attn.create(ps, name + ".attn", d, heads);
    norm2.create(ps, name + ".norm2", d);
    fc1.create(ps, name + ".mlp.fc1", d, mlp_hidden);
    fc2.create(ps, name + ".mlp.fc2", mlp_hidden, d);
  }

  void forward(const T* P, std::vector<T>& x, int tokens, BlockCache<T>* cache) const {
    BlockCache<T> local;
    BlockCache<T>& c = cache ? *cache : local;
    const std::size_t n = static_cast<std::size_t>(tokens) * dim;
    c.x = x;
    c.a.resize(n);
    norm1.forward(P, x.data(), tokens, c.a.data(), &c.n1);
    std::vector<T> t(n);
    attn.forward(P, c.a.data(), tokens, t.data(), c.attn);
    c.x1.resize(n);
    for (std::size_t i = 0; i < n; ++i) c.x1[i] = x[i] + t[i];
    c.b.resize(n);
    norm2.forward(P, c.x1.data(), tokens, c.b.data(), &c.n2);
    const std::size_t nh = static_cast<std::size_t>(tokens) * hidden;
    c.hpre.resize(nh);
    c.hact.resize(nh);
    fc1.forward(P, c.b.data(), tokens, c.hpre.data());
    for (std::size_t i = 0; i < nh; ++i) c.hact[i] = gelu(c.hpre[i]);
    fc2.forward(P, c.hact.data(), tokens, t.data());
    for (std::size_t i = 0; i < n; ++i) x[i] = c.x1[i] + t[i];
  }

  // In: dx holds dL/d(output). Out: dx holds dL/d(input).
  void backward(const T* P, const BlockCache<T>& c, std::vector<T>& dx, int tokens, T* G) const {
    const std::size_t n = static_cast<std::size_t>(tokens) * dim;
    const std::size_t nh = static_cast<std::size_t>(tokens) * hidden;
    std::vector<T> dh(nh);
    fc2.backward(P, c.hact.data(), dx.data(), tokens, dh.data(), G);
    for (std::size_t i = 0; i < nh; ++i) dh[i] *= gelu_grad(c.hpre[i]);
    std::vector<T> db(n);
    fc1.backward(P, c.b.data(), dh.data(), tokens, db.data(), G);
    norm2.backward(P, c.n2, db.data(), tokens, dx.data(), G, true);  // dx is now dL/dx1
    std::vector<T> da(n);
    attn.backward(P, c.a.data(), c.attn, dx.data(), tokens, da.data(), G);
    norm1.backward(P, c.n1, da.data(), tokens, dx.data(), G, true);
  }
};

// ---------------------------------------------------------------------------
// Convolutions over HWC maps.

template <class T>
void im2col(const T* x, int H, int W, int C, int k, int stride, int pad, int Ho, int Wo,
            std::vector<T>& cols) {
  const std::size_t row_len = static_cast<std::size_t>(k) * k * C;
  cols.assign(static_cast<std::size_t>(Ho) * Wo * row_len, T(0));
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      T* row = cols.data() + (static_cast<std::size_t>(oy) * Wo + ox) * row_len;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= W) continue;
          const T* src = x + (static_cast<std::size_t>(iy) * W + ix) * C;
          T* dst = row + (static_cast<std::size_t>(ky) * k + kx) * C;
          for (int ch = 0; ch < C; ++ch) dst[ch] = src[ch];
        }
      }
    }
}

template <class T>
void col2im_add(const T* cols, int H, int W, int C, int k, int stride, int pad, int Ho, int Wo,
                T* dx) {
  const std::size_t row_len = static_cast<std::size_t>(k) * k * C;
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      const T* row = cols + (static_cast<std::size_t>(oy) * Wo + ox) * row_len;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= W) continue;
          const T* src = row + (static_cast<std::size_t>(ky) * k + kx) * C;
          T* dst = dx + (static_cast<std::size_t>(iy) * W + ix) * C;
          for (int ch = 0; ch < C; ++ch) dst[ch] += src[ch];
        }
      }
    }
}

// Weight layout [(ky, kx, cin) x cout].
template <class T>
struct Conv2d {
  int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
  bool has_bias = false;
  std::size_t w = 0, b = 0;

  void create(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch, int kernel,
              int stride_, int pad_, bool bias) {
    cin = in_ch;
    cout = out_ch;
    k = kernel;
    stride = stride_;
    pad = pad_;
    has_bias = bias;
    w = ps.add(name + ".weight", {k, k, cin, cout}, true);
    if (bias) b = ps.add(name + ".bias", {cout}, false);
  }

  int out_size(int in) const { return (in + 2 * pad - k) / stride + 1; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }

  // cols (optional) receives the im2col buffer for the backward pass.
  void forward(const T* P, const T* x, int H, int W, T* y, std::vector<T>* cols) const {
    const int Ho = out_size(H), Wo = out_size(W);
    const int K = k * k * cin;
    const T* a = x;
    std::vector<T> local;
    if (!pointwise()) {
      std::vector<T>& buf = cols ? *cols : local;
      im2col(x, H, W, cin, k, stride, pad, Ho, Wo, buf);
      a = buf.data();
    }
    linalg::matmul<T>(Ho * Wo, cout, K, a, false, P + w, false, y, false);
    if (has_bias)
      for (std::size_t r = 0; r < static_cast<std::size_t>(Ho) * Wo; ++r)
        for (int j = 0; j < cout; ++j) y[r * cout + j] += P[b + j];
  }

  // x is the forward input; cols the buffer from forward (unused when pointwise).
  // dx (optional) is overwritten.
  void backward(const T* P, const T* x, const std::vector<T>& cols, int H, int W, const T* dy,
                T* dx, T* G) const {
    const int Ho = out_size(H), Wo = out_size(W);
    const int K = k * k * cin;
    const int rows = Ho * Wo;
    const T* a = pointwise() ? x : cols.data();
    linalg::matmul<T>(K, cout, rows, a, true, dy, false, G + w, true);
    if (has_bias)
      for (std::size_t r = 0; r < static_cast<std::size_t>(rows); ++r)
        for (int j = 0; j < cout; ++j) G[b + j] += dy[r * cout + j];
    if (!dx) return;
    if (pointwise()) {
      linalg::matmul<T>(rows, cin, cout, dy, false, P + w, true, dx, false);
      return;
    }
    std::vector<T> dcols(static_cast<std::size_t>(rows) * K);
    linalg::matmul<T>(rows, K, cout, dy, false, P + w, true, dcols.data(), false);
    std::fill(dx, dx + static_cast<std::size_t>(H) * W * cin, T(0));
    col2im_add(dcols.data(), H, W, cin, k, stride, pad, Ho, Wo, dx);
  }
};

// 2x2 transposed convolution with stride 2. Weight layout [cin x (dy, dx, cout)].
template <class T>
struct Deconv2x2 {
  int cin = 0, cout = 0;
  std::size_t w = 0, b = 0;

  void create(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch) {
    cin = in_ch;
    cout = out_ch;
    w = ps.add(name + ".weight", {cin, 2, 2, cout}, true);
    b = ps.add(name + ".bias", {cout}, false);
  }

  // y is (2H x 2W x cout).
  void forward(const T* P, const T* x, int H, int W, T* y) const {
    const int rows = H * W;
    std::vector<T> tmp(static_cast<std::size_t>(rows) * 4 * cout);
    linalg::matmul<T>(rows, 4 * cout, cin, x, false, P + w, false, tmp.data(), false);
    const int W2 = 2 * W;
    for (int iy = 0; iy < H; ++iy)
      for (int ix = 0; ix < W; ++ix) {
        const T* src = tmp.data() + (static_cast<std::size_t>(iy) * W + ix) * 4 * cout;
        for (int q = 0; q < 4; ++q) {
          const int oy = 2 * iy + q / 2, ox = 2 * ix + q % 2;
          T* dst = y + (static_cast<std::size_t>(oy) * W2 + ox) * cout;
          for (int c = 0; c < cout; ++c) dst[c] = src[q * cout + c] + P[b + c];
        }
      }
  }

  void backward(const T* P, const T* x, int H, int W, const T* dy, T* dx, T* G) const {
    const int rows = H * W;
    const int W2 = 2 * W;
    std::vector<T> gathered(static_cast<std::size_t>(rows) * 4 * cout);
    for (int iy = 0; iy < H; ++iy)
      for (int ix = 0; ix < W; ++ix) {
        T* dst = gathered.data() + (static_cast<std::size_t>(iy) * W + ix) * 4 * cout;
        for (int q = 0; q < 4; ++q) {
          const int oy = 2 * iy + q / 2, ox = 2 * ix + q % 2;
          const T* src = dy + (static_cast<std::size_t>(oy) * W2 + ox) * cout;
          for (int c = 0; c < cout; ++c) {
            dst[q * cout + c] = src[c];
            G[b + c] += src[c];
          }
        }
      }
    linalg::matmul<T>(cin, 4 * cout, rows, x, true, gathered.data(), false, G + w, true);
    if (dx) linalg::matmul<T>(rows, cin, 4 * cout, gathered.data(), false, P + w, true, dx, false);
  }
};

}  // namespace mmr::nn
