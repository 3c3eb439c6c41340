#pragma once

// Cross-modality attention: a pre-norm transformer over the per-window
// modality/timestep tokens. Produces the diffusion conditioning vector and
// reports the last layer's attention weights averaged over heads.

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cmadp/encoders.hpp"
#include "cmadp/nn/layers.hpp"

namespace cmadp {

struct CmaConfig {
  int layers = 2;
  int heads = 8;
  int model_dim = 128;
  int mlp_hidden = 512;
  int cond_dim = 256;
  int tokens = kTokens;

  int head_dim() const { return model_dim / heads; }
  void validate() const {
    if (layers < 1 || heads < 1 || tokens < 1 || cond_dim < 1 || mlp_hidden < 1)
      throw ConfigError("cma: sizes must be positive");
    if (heads * head_dim() != model_dim) throw ConfigError("cma: heads * head_dim != model_dim");
  }
};

template <typename T>
struct AttentionResult {
  Mat<T> output;   // n x d_v
  Mat<T> weights;  // n x n, row-stochastic
};

/// weights = softmax_rows(Q K^T / sqrt(d_k)), output = weights * V.
template <typename T>
AttentionResult<T> attend(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v) {
  if (q.rows() < 1) throw ShapeError("attend: need at least one query");
  if (q.cols() != k.cols()) throw ShapeError("attend: Q and K differ in d_k");
  if (k.rows() != v.rows()) throw ShapeError("attend: K and V differ in length");
  if (q.rows() != k.rows()) throw ShapeError("attend: self-attention expects n queries and n keys");
  AttentionResult<T> r;
  r.weights = (q * k.transpose()) / std::sqrt(static_cast<T>(q.cols()));
  for (Eigen::Index i = 0; i < r.weights.rows(); ++i) {
    auto row = r.weights.row(i);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  r.output = r.weights * v;
  return r;
}

template <typename T>
struct AttendGrads {
  Mat<T> dq, dk, dv;
};

template <typename T>
AttendGrads<T> attend_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                               const Mat<T>& weights, const Mat<T>& dout) {
  AttendGrads<T> g;
  g.dv = weights.transpose() * dout;
  const Mat<T> dp = dout * v.transpose();
  Vec<T> inner = (dp.array() * weights.array()).rowwise().sum();
  Mat<T> dlogits = weights.array() * (dp.colwise() - inner).array();
  const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  g.dq = dlogits * k * scale;
  g.dk = dlogits.transpose() * q * scale;
  return g;
}

/// Multi-head self-attention over B groups of S tokens, batch-major rows
/// (b*S + s). Never mixes tokens of different batch elements.
template <typename T>
class MultiHeadAttention {
 public:
  struct Cache {
    Mat<T> x, q, k, v, heads_out;
    std::vector<Mat<T>> weights;  // B*H entries of S x S
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, std::mt19937_64& rng)
      : heads_(heads), wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng) {}

  /// `avg_weights` (optional) receives B rows of head-averaged S x S
  /// weights flattened row-major.
  Mat<T> forward(const Mat<T>& x, int batch, Cache* cache, Mat<T>* avg_weights) const {
    const int S = static_cast<int>(x.rows()) / batch;
    const int dh = static_cast<int>(x.cols()) / heads_;
    Mat<T> q = wq.forward(x), k = wk.forward(x), v = wv.forward(x);
    Mat<T> out(x.rows(), x.cols());
    if (avg_weights) avg_weights->setZero(batch, S * S);
    std::vector<Mat<T>> ws;
    if (cache) ws.reserve(static_cast<std::size_t>(batch * heads_));
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads_; ++h) {
        auto r = attend<T>(q.block(b * S, h * dh, S, dh), k.block(b * S, h * dh, S, dh),
                           v.block(b * S, h * dh, S, dh));
        out.block(b * S, h * dh, S, dh) = r.output;
        if (avg_weights)
          avg_weights->row(b) += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
                                     r.weights.data(), S * S) /
                                 static_cast<T>(heads_);
        if (cache) ws.push_back(std::move(r.weights));
      }
    }
    Mat<T> y = wo.forward(out);
    if (cache) {
      cache->x = x;
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->heads_out = std::move(out);
      cache->weights = std::move(ws);
    }
    return y;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dy, int batch) {
    const int S = static_cast<int>(c.x.rows()) / batch;
    const int dh = static_cast<int>(c.x.cols()) / heads_;
    const Mat<T> dheads = wo.backward(c.heads_out, dy);
    Mat<T> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < heads_; ++h) {
        auto g = attend_backward<T>(c.q.block(b * S, h * dh, S, dh), c.k.block(b * S, h * dh, S, dh),
                                    c.v.block(b * S, h * dh, S, dh),
                                    c.weights[static_cast<std::size_t>(b * heads_ + h)],
                                    dheads.block(b * S, h * dh, S, dh));
        dq.block(b * S, h * dh, S, dh) = g.dq;
        dk.block(b * S, h * dh, S, dh) = g.dk;
        dv.block(b * S, h * dh, S, dh) = g.dv;
      }
    Mat<T> dx = wq.backward(c.x, dq);
    dx += wk.backward(c.x, dk);
    dx += wv.backward(c.x, dv);
    return dx;
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    wq.collect(prefix + ".q", out);
    wk.collect(prefix + ".k", out);
    wv.collect(prefix + ".v", out);
    wo.collect(prefix + ".o", out);
  }

 private:
  int heads_ = 1;

 public:
  nn::Linear<T> wq, wk, wv, wo;
};

/// Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x)) with a SiLU MLP.
template <typename T>
class TransformerLayer {
 public:
  struct Cache {
    typename nn::LayerNorm<T>::Cache ln1, ln2;
    typename MultiHeadAttention<T>::Cache attn;
    Mat<T> h2, a1;
  };

  TransformerLayer() = default;
  TransformerLayer(const CmaConfig& cfg, std::mt19937_64& rng)
      : ln1(cfg.model_dim), attn(cfg.model_dim, cfg.heads, rng), ln2(cfg.model_dim),
        fc1(cfg.model_dim, cfg.mlp_hidden, rng), fc2(cfg.mlp_hidden, cfg.model_dim, rng) {}

  Mat<T> forward(const Mat<T>& x, int batch, Cache* c, Mat<T>* avg_weights) const {
    typename nn::LayerNorm<T>::Cache l1, l2;
    typename MultiHeadAttention<T>::Cache ac;
    Mat<T> x1 = x + attn.forward(ln1.forward(x, c ? &l1 : nullptr), batch, c ? &ac : nullptr,
                                 avg_weights);
    Mat<T> h2 = ln2.forward(x1, c ? &l2 : nullptr);
    Mat<T> a1 = fc1.forward(h2);
    Mat<T> y = x1 + fc2.forward(nn::silu<T>(a1));
    if (c) {
      c->ln1 = std::move(l1);
      c->ln2 = std::move(l2);
      c->attn = std::move(ac);
      c->h2 = std::move(h2);
      c->a1 = std::move(a1);
    }
    return y;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dy, int batch) {
    const Mat<T> da1 = nn::silu_backward<T>(c.a1, fc2.backward(nn::silu<T>(c.a1), dy));
    Mat<T> dx1 = dy + ln2.backward(c.ln2, fc1.backward(c.h2, da1));
    return dx1 + ln1.backward(c.ln1, attn.backward(c.attn, dx1, batch));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }

  nn::LayerNorm<T> ln1;
  MultiHeadAttention<T> attn;
  nn::LayerNorm<T> ln2;
  nn::Linear<T> fc1, fc2;
};

template <typename T>
struct CmaOutput {
  Mat<T> cond;       // B x cond_dim
  Mat<T> attention;  // B x (S*S), last layer, head-averaged, row-major S x S
  Mat<T> tokens;     // (B*S) x D output tokens, batch-major

  /// Head-averaged attention matrix of batch element b.
  Mat<T> attention_matrix(int b) const {
    const auto s = static_cast<Eigen::Index>(std::lround(std::sqrt(attention.cols())));
    return Eigen::Map<const Mat<T>>(attention.row(b).data(), s, s);
  }
  /// Mean of the output tokens of batch element b.
  Vec<T> embedding(int b) const {
    const Eigen::Index s = tokens.rows() / cond.rows();
    return tokens.middleRows(b * s, s).colwise().mean().transpose();
  }
};

template <typename T>
class Cma {
 public:
  struct Cache {
    int batch = 0;
    std::vector<typename TransformerLayer<T>::Cache> layers;
    Mat<T> flat;  // B x (S*D)
  };

  Cma() = default;
  Cma(const CmaConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    for (int l = 0; l < cfg.layers; ++l) layers.emplace_back(cfg, rng);
    cond_proj = nn::Linear<T>(cfg.tokens * cfg.model_dim, cfg.cond_dim, rng);
  }

  const CmaConfig& config() const { return cfg_; }

  CmaOutput<T> forward(const TokenBatch<T>& tokens, Cache* cache) const {
    const int B = tokens.batch;
    const int S = cfg_.tokens;
    const int D = cfg_.model_dim;
    if (B < 1 || tokens.data.rows() != static_cast<Eigen::Index>(S) * B || tokens.data.cols() != D)
      throw ShapeError("cma: tokens must be shaped (" + std::to_string(S) + ", B, " +
                       std::to_string(D) + ")");
    // token-major -> batch-major
    Mat<T> x(tokens.data.rows(), D);
    for (int s = 0; s < S; ++s)
      for (int b = 0; b < B; ++b) x.row(b * S + s) = tokens.data.row(s * B + b);

    CmaOutput<T> out;
    if (cache) {
      cache->batch = B;
      cache->layers.resize(layers.size());
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const bool last = l + 1 == layers.size();
      x = layers[l].forward(x, B, cache ? &cache->layers[l] : nullptr,
                            last ? &out.attention : nullptr);
    }
    Mat<T> flat = Eigen::Map<const Mat<T>>(x.data(), B, static_cast<Eigen::Index>(S) * D);
    out.cond = cond_proj.forward(flat);
    out.tokens = std::move(x);
    if (cache) cache->flat = std::move(flat);
    return out;
  }

  /// Returns d(tokens) in token-major layout.
  Mat<T> backward(const Cache& c, const Mat<T>& dcond) {
    const int B = c.batch;
    const int S = cfg_.tokens;
    const int D = cfg_.model_dim;
    Mat<T> dflat = cond_proj.backward(c.flat, dcond);
    Mat<T> dx = Eigen::Map<const Mat<T>>(dflat.data(), static_cast<Eigen::Index>(B) * S, D);
    for (std::size_t l = layers.size(); l-- > 0;) dx = layers[l].backward(c.layers[l], dx, B);
    Mat<T> dtok(dx.rows(), D);
    for (int s = 0; s < S; ++s)
      for (int b = 0; b < B; ++b) dtok.row(s * B + b) = dx.row(b * S + s);
    return dtok;
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    for (std::size_t l = 0; l < layers.size(); ++l)
      layers[l].collect(prefix + ".layer" + std::to_string(l), out);
    cond_proj.collect(prefix + ".cond_proj", out);
  }

  std::vector<TransformerLayer<T>> layers;
  nn::Linear<T> cond_proj;

 private:
  CmaConfig cfg_;
};

/// Share of attention mass each modality receives: for every modality, the
/// attention paid to its two key columns (both timesteps), averaged over the
/// eight query rows. Lies on the 4-simplex for row-stochastic input.
template <typename T>
std::array<T, kNumModalities> allocation(const Mat<T>& attn) {
  if (attn.rows() != kTokens || attn.cols() != kTokens)
    throw ShapeError("allocation expects an 8x8 attention matrix");
  std::array<T, kNumModalities> a{};
  for (int m = 0; m < kNumModalities; ++m) {
    T total = T(0);
    for (int q = 0; q < kTokens; ++q)
      for (int t = 0; t < kWindow; ++t) total += attn(q, t * kNumModalities + m);
    a[static_cast<std::size_t>(m)] = total / static_cast<T>(kTokens);
  }
  return a;
}

}  // namespace cmadp
