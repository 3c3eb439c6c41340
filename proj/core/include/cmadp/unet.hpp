#pragma once

// 1D conditional U-Net noise predictor over action chunks. Residual blocks
// are FiLM-modulated by the concatenation of a sinusoidal diffusion-step
// embedding and the attention-derived conditioning vector.

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmadp/nn/layers.hpp"

namespace cmadp {

struct UNetConfig {
  int action_dim = 4;
  int horizon = 8;
  std::array<int, 3> down_dims{64, 128, 256};
  int kernel = 3;
  int groups = 8;
  int step_embed_dim = 128;
  int cond_dim = 256;

  static UNetConfig desk() { return {}; }
  static UNetConfig paper() {
    UNetConfig c;
    c.down_dims = {256, 512, 1024};
    c.step_embed_dim = 256;
    return c;
  }

  void validate() const {
    if (!(down_dims[0] < down_dims[1] && down_dims[1] < down_dims[2]))
      throw ConfigError("unet: down_dims must be strictly increasing");
    for (int d : down_dims)
      if (d % groups != 0) throw ConfigError("unet: down_dims must be divisible by groups");
    if (kernel % 2 != 1) throw ConfigError("unet: kernel must be odd");
    if (horizon % 4 != 0) throw ConfigError("unet: horizon must be divisible by 4");
    if (step_embed_dim % 2 != 0 || step_embed_dim < 4)
      throw ConfigError("unet: step_embed_dim must be even and >= 4");
    if (action_dim < 1 || cond_dim < 1) throw ConfigError("unet: sizes must be positive");
  }
};

/// Sinusoidal embedding of integer diffusion steps: [sin(k w_i), cos(k w_i)].
template <typename T>
Mat<T> step_embedding(std::span<const int> steps, int dim) {
  const int half = dim / 2;
  Mat<T> e(static_cast<Eigen::Index>(steps.size()), dim);
  const double scale = std::log(10000.0) / (half - 1);
  for (std::size_t b = 0; b < steps.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double a = steps[b] * std::exp(-scale * i);
      e(static_cast<Eigen::Index>(b), i) = static_cast<T>(std::sin(a));
      e(static_cast<Eigen::Index>(b), half + i) = static_cast<T>(std::cos(a));
    }
  return e;
}

/// Conv1d -> GroupNorm -> SiLU.
template <typename T>
class ConvBlock {
 public:
  struct Cache {
    Mat<T> cols;
    typename nn::GroupNorm<T>::Cache gn;
    Mat<T> pre;
    int length = 0;
  };

  ConvBlock() = default;
  ConvBlock(int in, int out, int kernel, int groups, std::mt19937_64& rng)
      : conv(in, out, kernel, 1, kernel / 2, rng), norm(out, groups) {}

  Mat<T> forward(const Mat<T>& x, int batch, Cache* c) const {
    Mat<T> cols;
    typename nn::GroupNorm<T>::Cache gn;
    Mat<T> pre = norm.forward(conv.forward(x, batch, c ? &cols : nullptr), batch, c ? &gn : nullptr);
    Mat<T> y = nn::silu<T>(pre);
    if (c) {
      c->cols = std::move(cols);
      c->gn = std::move(gn);
      c->pre = std::move(pre);
      c->length = static_cast<int>(x.rows()) / batch;
    }
    return y;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dy, int batch) {
    return conv.backward(c.cols, norm.backward(c.gn, nn::silu_backward<T>(c.pre, dy), batch), batch,
                         c.length);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    conv.collect(prefix + ".conv", out);
    norm.collect(prefix + ".norm", out);
  }

  nn::Conv1d<T> conv;
  nn::GroupNorm<T> norm;
};

/// Two conv blocks with FiLM (per-channel scale and shift) in between and a
/// residual path (1x1 conv when the channel count changes).
template <typename T>
class ResidualBlock {
 public:
  struct Cache {
    typename ConvBlock<T>::Cache b0, b1;
    Mat<T> h0;        // block0 output
    Mat<T> scale;     // B x C
    Mat<T> res_cols;  // residual conv im2col
    Mat<T> global;    // activated global conditioning (input to film linear)
    int length = 0;
  };

  ResidualBlock() = default;
  ResidualBlock(int in, int out, int global_dim, int kernel, int groups, std::mt19937_64& rng)
      : block0(in, out, kernel, groups, rng), block1(out, out, kernel, groups, rng),
        film(global_dim, 2 * out, rng), has_res_conv_(in != out) {
    if (has_res_conv_) res_conv = nn::Conv1d<T>(in, out, 1, 1, 0, rng);
  }

  /// `global_act` is SiLU(global conditioning), B x global_dim.
  Mat<T> forward(const Mat<T>& x, const Mat<T>& global_act, int batch, Cache* c) const {
    const int L = static_cast<int>(x.rows()) / batch;
    const int C = block1.conv.out_channels();
    typename ConvBlock<T>::Cache c0, c1;
    Mat<T> h0 = block0.forward(x, batch, c ? &c0 : nullptr);
    const Mat<T> fb = film.forward(global_act);
    Mat<T> h(h0.rows(), C);
    for (int b = 0; b < batch; ++b) {
      auto blk = h0.middleRows(static_cast<Eigen::Index>(b) * L, L);
      h.middleRows(static_cast<Eigen::Index>(b) * L, L) =
          (blk.array().rowwise() * fb.row(b).head(C).array()).rowwise() + fb.row(b).tail(C).array();
    }
    Mat<T> y = block1.forward(h, batch, c ? &c1 : nullptr);
    Mat<T> rc;
    if (has_res_conv_)
      y += res_conv.forward(x, batch, c ? &rc : nullptr);
    else
      y += x;
    if (c) {
      c->b0 = std::move(c0);
      c->b1 = std::move(c1);
      c->h0 = std::move(h0);
      c->scale = fb.leftCols(C);
      c->res_cols = std::move(rc);
      c->global = global_act;
      c->length = L;
    }
    return y;
  }

  /// Returns dx; accumulates d(global_act) into `dglobal`.
  Mat<T> backward(const Cache& c, const Mat<T>& dy, int batch, Mat<T>& dglobal) {
    const int L = c.length;
    const int C = block1.conv.out_channels();
    const Mat<T> dh = block1.backward(c.b1, dy, batch);
    Mat<T> dfb(batch, 2 * C);
    Mat<T> dh0(dh.rows(), C);
    for (int b = 0; b < batch; ++b) {
      auto g = dh.middleRows(static_cast<Eigen::Index>(b) * L, L);
      auto h0 = c.h0.middleRows(static_cast<Eigen::Index>(b) * L, L);
      dfb.row(b).head(C) = (g.array() * h0.array()).colwise().sum();
      dfb.row(b).tail(C) = g.colwise().sum();
      dh0.middleRows(static_cast<Eigen::Index>(b) * L, L) = g.array().rowwise() * c.scale.row(b).array();
    }
    dglobal += film.backward(c.global, dfb);
    Mat<T> dx = block0.backward(c.b0, dh0, batch);
    if (has_res_conv_)
      dx += res_conv.backward(c.res_cols, dy, batch, L);
    else
      dx += dy;
    return dx;
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    block0.collect(prefix + ".block0", out);
    block1.collect(prefix + ".block1", out);
    film.collect(prefix + ".film", out);
    if (has_res_conv_) res_conv.collect(prefix + ".res", out);
  }

  ConvBlock<T> block0, block1;
  nn::Linear<T> film;
  nn::Conv1d<T> res_conv;

 private:
  bool has_res_conv_ = false;
};

/// Encoder-decoder over the horizon axis: three down stages (two residual
/// blocks each, stride-2 downsampling between stages), two mid blocks, two
/// up stages fed by skip connections, then a conv block and a 1x1 output
/// conv. Input and output are (B*H) x action_dim.
template <typename T>
class ConditionalUNet1d {
 public:
  struct Cache {
    int batch = 0;
    Mat<T> step_emb, step_hidden, global;
    std::array<std::array<typename ResidualBlock<T>::Cache, 2>, 3> down;
    std::array<Mat<T>, 2> down_in;  // inputs to the downsample convs
    std::array<Mat<T>, 2> down_cols;
    std::array<typename ResidualBlock<T>::Cache, 2> mid;
    std::array<std::array<typename ResidualBlock<T>::Cache, 2>, 2> up;
    std::array<Mat<T>, 2> up_in;  // inputs to the upsample convs
    typename ConvBlock<T>::Cache final_block;
    Mat<T> final_cols;
  };

  ConditionalUNet1d() = default;
  ConditionalUNet1d(const UNetConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    const int dsed = cfg.step_embed_dim;
    const int gdim = dsed + cfg.cond_dim;
    step_fc1 = nn::Linear<T>(dsed, 4 * dsed, rng);
    step_fc2 = nn::Linear<T>(4 * dsed, dsed, rng);
    const auto& d = cfg.down_dims;
    const std::array<int, 3> ins = {cfg.action_dim, d[0], d[1]};
    for (int s = 0; s < 3; ++s) {
      down[static_cast<std::size_t>(s)][0] =
          ResidualBlock<T>(ins[static_cast<std::size_t>(s)], d[static_cast<std::size_t>(s)], gdim,
                           cfg.kernel, cfg.groups, rng);
      down[static_cast<std::size_t>(s)][1] =
          ResidualBlock<T>(d[static_cast<std::size_t>(s)], d[static_cast<std::size_t>(s)], gdim,
                           cfg.kernel, cfg.groups, rng);
      if (s < 2)
        downsample[static_cast<std::size_t>(s)] =
            nn::Conv1d<T>(d[static_cast<std::size_t>(s)], d[static_cast<std::size_t>(s)], 3, 2, 1, rng);
    }
    for (auto& m : mid) m = ResidualBlock<T>(d[2], d[2], gdim, cfg.kernel, cfg.groups, rng);
    // Up stage u consumes [x, skip] with 2*d[2-u] channels and emits d[1-u].
    for (int u = 0; u < 2; ++u) {
      const int wide = d[static_cast<std::size_t>(2 - u)];
      const int narrow = d[static_cast<std::size_t>(1 - u)];
      up[static_cast<std::size_t>(u)][0] = ResidualBlock<T>(2 * wide, narrow, gdim, cfg.kernel, cfg.groups, rng);
      up[static_cast<std::size_t>(u)][1] = ResidualBlock<T>(narrow, narrow, gdim, cfg.kernel, cfg.groups, rng);
      upsample[static_cast<std::size_t>(u)] = nn::ConvTranspose1d<T>(narrow, narrow, 4, 2, 1, rng);
    }
    final_block = ConvBlock<T>(d[0], d[0], cfg.kernel, cfg.groups, rng);
    final_conv = nn::Conv1d<T>(d[0], cfg.action_dim, 1, 1, 0, rng);
  }

  const UNetConfig& config() const { return cfg_; }

  Mat<T> forward(const Mat<T>& x, std::span<const int> steps, const Mat<T>& cond, Cache* c) const {
    const int B = static_cast<int>(steps.size());
    const int H = cfg_.horizon;
    if (B < 1 || x.rows() != static_cast<Eigen::Index>(B) * H || x.cols() != cfg_.action_dim)
      throw ShapeError("unet: x must be (B*horizon) x action_dim");
    if (cond.rows() != B || cond.cols() != cfg_.cond_dim)
      throw ShapeError("unet: cond must be B x cond_dim");

    Mat<T> se = step_embedding<T>(steps, cfg_.step_embed_dim);
    Mat<T> sh = step_fc1.forward(se);
    Mat<T> global(B, cfg_.step_embed_dim + cfg_.cond_dim);
    global.leftCols(cfg_.step_embed_dim) = step_fc2.forward(nn::silu<T>(sh));
    global.rightCols(cfg_.cond_dim) = cond;
    const Mat<T> gact = nn::silu<T>(global);

    std::array<Mat<T>, 3> skips;
    Mat<T> h = x;
    for (std::size_t s = 0; s < 3; ++s) {
      h = down[s][0].forward(h, gact, B, c ? &c->down[s][0] : nullptr);
      h = down[s][1].forward(h, gact, B, c ? &c->down[s][1] : nullptr);
      skips[s] = h;
      if (s < 2) {
        if (c) c->down_in[s] = h;
        h = downsample[s].forward(h, B, c ? &c->down_cols[s] : nullptr);
      }
    }
    for (std::size_t m = 0; m < 2; ++m) h = mid[m].forward(h, gact, B, c ? &c->mid[m] : nullptr);
    for (std::size_t u = 0; u < 2; ++u) {
      const Mat<T>& skip = skips[2 - u];
      Mat<T> cat(h.rows(), h.cols() + skip.cols());
      cat << h, skip;
      h = up[u][0].forward(cat, gact, B, c ? &c->up[u][0] : nullptr);
      h = up[u][1].forward(h, gact, B, c ? &c->up[u][1] : nullptr);
      if (c) c->up_in[u] = h;
      h = upsample[u].forward(h, B);
    }
    h = final_block.forward(h, B, c ? &c->final_block : nullptr);
    Mat<T> y = final_conv.forward(h, B, c ? &c->final_cols : nullptr);
    if (c) {
      c->batch = B;
      c->step_emb = std::move(se);
      c->step_hidden = std::move(sh);
      c->global = std::move(global);
    }
    return y;
  }

  /// Returns d(cond), B x cond_dim.
  Mat<T> backward(const Cache& c, const Mat<T>& dy) {
    const int B = c.batch;
    const int H = cfg_.horizon;
    const auto& d = cfg_.down_dims;
    Mat<T> dgact = Mat<T>::Zero(c.global.rows(), c.global.cols());

    Mat<T> dh = final_conv.backward(c.final_cols, dy, B, H);
    dh = final_block.backward(c.final_block, dh, B);
    std::array<Mat<T>, 3> dskips;
    for (std::size_t s = 0; s < 3; ++s) dskips[s].resize(0, 0);
    for (std::size_t u = 2; u-- > 0;) {
      dh = upsample[u].backward(c.up_in[u], dh, B);
      dh = up[u][1].backward(c.up[u][1], dh, B, dgact);
      dh = up[u][0].backward(c.up[u][0], dh, B, dgact);
      const Eigen::Index wide = d[2 - u];
      dskips[2 - u] = dh.rightCols(wide);
      Mat<T> tmp = dh.leftCols(wide);
      dh = std::move(tmp);
    }
    for (std::size_t m = 2; m-- > 0;) dh = mid[m].backward(c.mid[m], dh, B, dgact);
    for (std::size_t s = 3; s-- > 0;) {
      if (s < 2) {
        const int L = static_cast<int>(c.down_in[s].rows()) / B;
        dh = downsample[s].backward(c.down_cols[s], dh, B, L);
      }
      if (dskips[s].size() > 0) dh += dskips[s];
      dh = down[s][1].backward(c.down[s][1], dh, B, dgact);
      dh = down[s][0].backward(c.down[s][0], dh, B, dgact);
    }
    const Mat<T> dglobal = nn::silu_backward<T>(c.global, dgact);
    const Mat<T> dstep = dglobal.leftCols(cfg_.step_embed_dim);
    const Mat<T> dsh = nn::silu_backward<T>(c.step_hidden,
                                            step_fc2.backward(nn::silu<T>(c.step_hidden), dstep));
    step_fc1.backward(c.step_emb, dsh);
    return dglobal.rightCols(cfg_.cond_dim);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    step_fc1.collect(prefix + ".step_fc1", out);
    step_fc2.collect(prefix + ".step_fc2", out);
    for (std::size_t s = 0; s < 3; ++s) {
      down[s][0].collect(prefix + ".down" + std::to_string(s) + ".res0", out);
      down[s][1].collect(prefix + ".down" + std::to_string(s) + ".res1", out);
      if (s < 2) downsample[s].collect(prefix + ".down" + std::to_string(s) + ".sample", out);
    }
    for (std::size_t m = 0; m < 2; ++m) mid[m].collect(prefix + ".mid" + std::to_string(m), out);
    for (std::size_t u = 0; u < 2; ++u) {
      up[u][0].collect(prefix + ".up" + std::to_string(u) + ".res0", out);
      up[u][1].collect(prefix + ".up" + std::to_string(u) + ".res1", out);
      upsample[u].collect(prefix + ".up" + std::to_string(u) + ".sample", out);
    }
    final_block.collect(prefix + ".final_block", out);
    final_conv.collect(prefix + ".final_conv", out);
  }

  nn::Linear<T> step_fc1, step_fc2;
  std::array<std::array<ResidualBlock<T>, 2>, 3> down;
  std::array<nn::Conv1d<T>, 2> downsample;
  std::array<ResidualBlock<T>, 2> mid;
  std::array<std::array<ResidualBlock<T>, 2>, 2> up;
  std::array<nn::ConvTranspose1d<T>, 2> upsample;
  ConvBlock<T> final_block;
  nn::Conv1d<T> final_conv;

 private:
  UNetConfig cfg_;
};

}  // namespace cmadp
