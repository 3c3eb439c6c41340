#pragma once

// Building blocks with explicit backward passes. Activations are row-major
// matrices; sequence tensors of shape (B, L, C) are stored as (B*L) x C with
// row b*L + l. Backward methods accumulate into Param::grad and return the
// gradient with respect to the layer input.

#include <cmath>
#include <random>
#include <string>

#include "cmadp/nn/param.hpp"

namespace cmadp::nn {

template <typename T>
Mat<T> silu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return v / (T(1) + std::exp(-v)); });
}

template <typename T>
Mat<T> silu_backward(const Mat<T>& x, const Mat<T>& dy) {
  return x.binaryExpr(dy, [](T v, T g) {
    const T s = T(1) / (T(1) + std::exp(-v));
    return g * (s * (T(1) + v * (T(1) - s)));
  });
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng) : weight(out, in), bias(1, out) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in));
    fill_uniform(weight.value, bound, rng);
    fill_uniform(bias.value, bound, rng);
  }

  int in_features() const { return static_cast<int>(weight.value.cols()); }
  int out_features() const { return static_cast<int>(weight.value.rows()); }

  Mat<T> forward(const Mat<T>& x) const {
    if (x.cols() != weight.value.cols()) throw ShapeError("Linear: input width mismatch");
    Mat<T> y = x * weight.value.transpose();
    y.rowwise() += bias.value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) {
    weight.grad.noalias() += dy.transpose() * x;
    bias.grad.row(0) += dy.colwise().sum();
    return dy * weight.value;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

  Param<T> weight;
  Param<T> bias;
};

/// Per-row normalization with learned gain and shift.
template <typename T>
class LayerNorm {
 public:
  struct Cache {
    Mat<T> xhat;
    Vec<T> rstd;
  };

  LayerNorm() = default;
  explicit LayerNorm(int dim) : gamma(1, dim), beta(1, dim) { gamma.value.setOnes(); }

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    const Eigen::Index n = x.cols();
    Vec<T> mean = x.rowwise().mean();
    Mat<T> centered = x.colwise() - mean;
    Vec<T> var = centered.array().square().rowwise().sum() / static_cast<T>(n);
    Vec<T> rstd = (var.array() + kEps).rsqrt();
    Mat<T> xhat = centered.array().colwise() * rstd.array();
    Mat<T> y = xhat.array().rowwise() * gamma.value.row(0).array();
    y.rowwise() += beta.value.row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dy) {
    gamma.grad.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    beta.grad.row(0) += dy.colwise().sum();
    Mat<T> g = dy.array().rowwise() * gamma.value.row(0).array();
    const T n = static_cast<T>(dy.cols());
    Vec<T> mean_g = g.rowwise().mean();
    Vec<T> mean_gx = (g.array() * c.xhat.array()).rowwise().sum() / n;
    Mat<T> dx = g.colwise() - mean_g;
    dx.array() -= c.xhat.array().colwise() * mean_gx.array();
    dx.array().colwise() *= c.rstd.array();
    return dx;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }

  static constexpr T kEps = T(1e-5);
  Param<T> gamma;
  Param<T> beta;
};

/// GroupNorm over (B*L) x C activations: statistics per (sample, group) over
/// the group's channels and all L positions.
template <typename T>
class GroupNorm {
 public:
  struct Cache {
    Mat<T> xhat;
    Mat<T> rstd;  // B x G
  };

  GroupNorm() = default;
  GroupNorm(int channels, int groups) : groups_(groups), gamma(1, channels), beta(1, channels) {
    if (channels % groups != 0) throw ShapeError("GroupNorm: channels not divisible by groups");
    gamma.value.setOnes();
  }

  Mat<T> forward(const Mat<T>& x, int batch, Cache* cache) const {
    const Eigen::Index L = x.rows() / batch;
    const Eigen::Index C = x.cols();
    const Eigen::Index cg = C / groups_;
    Mat<T> xhat(x.rows(), C);
    Mat<T> rstd(batch, groups_);
    const T n = static_cast<T>(L * cg);
    for (int b = 0; b < batch; ++b) {
      for (int g = 0; g < groups_; ++g) {
        auto blk = x.block(b * L, g * cg, L, cg);
        const T mean = blk.sum() / n;
        const T var = (blk.array() - mean).square().sum() / n;
        const T r = T(1) / std::sqrt(var + kEps);
        rstd(b, g) = r;
        xhat.block(b * L, g * cg, L, cg) = (blk.array() - mean) * r;
      }
    }
    Mat<T> y = xhat.array().rowwise() * gamma.value.row(0).array();
    y.rowwise() += beta.value.row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dy, int batch) {
    gamma.grad.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    beta.grad.row(0) += dy.colwise().sum();
    const Eigen::Index L = dy.rows() / batch;
    const Eigen::Index cg = dy.cols() / groups_;
    const T n = static_cast<T>(L * cg);
    Mat<T> g = dy.array().rowwise() * gamma.value.row(0).array();
    Mat<T> dx(dy.rows(), dy.cols());
    for (int b = 0; b < batch; ++b) {
      for (int gi = 0; gi < groups_; ++gi) {
        auto gb = g.block(b * L, gi * cg, L, cg);
        auto xb = c.xhat.block(b * L, gi * cg, L, cg);
        const T mean_g = gb.sum() / n;
        const T mean_gx = (gb.array() * xb.array()).sum() / n;
        dx.block(b * L, gi * cg, L, cg) =
            (gb.array() - mean_g - xb.array() * mean_gx) * c.rstd(b, gi);
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }

  static constexpr T kEps = T(1e-5);

 private:
  int groups_ = 1;

 public:
  Param<T> gamma;
  Param<T> beta;
};

/// 1D convolution over the L axis of (B*L) x Cin activations, zero padding.
/// Weight is Cout x (K*Cin) with column k*Cin + ci.
template <typename T>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(int in, int out, int kernel, int stride, int padding, std::mt19937_64& rng)
      : in_(in), out_(out), kernel_(kernel), stride_(stride), padding_(padding),
        weight(out, kernel * in), bias(1, out) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in * kernel));
    fill_uniform(weight.value, bound, rng);
    fill_uniform(bias.value, bound, rng);
  }

  int out_length(int L) const { return (L + 2 * padding_ - kernel_) / stride_ + 1; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  /// `cols` receives the im2col matrix needed by backward.
  Mat<T> forward(const Mat<T>& x, int batch, Mat<T>* cols_out) const {
    if (x.cols() != in_) throw ShapeError("Conv1d: channel mismatch");
    Mat<T> cols = im2col(x, batch);
    Mat<T> y = cols * weight.value.transpose();
    y.rowwise() += bias.value.row(0);
    if (cols_out) *cols_out = std::move(cols);
    return y;
  }

  Mat<T> backward(const Mat<T>& cols, const Mat<T>& dy, int batch, int L) {
    weight.grad.noalias() += dy.transpose() * cols;
    bias.grad.row(0) += dy.colwise().sum();
    const Mat<T> dcols = dy * weight.value;
    const int Lout = out_length(L);
    Mat<T> dx = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * L, in_);
    for (int b = 0; b < batch; ++b)
      for (int o = 0; o < Lout; ++o)
        for (int k = 0; k < kernel_; ++k) {
          const int i = o * stride_ - padding_ + k;
          if (i < 0 || i >= L) continue;
          dx.row(b * L + i) += dcols.block(b * Lout + o, k * in_, 1, in_);
        }
    return dx;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

 private:
  Mat<T> im2col(const Mat<T>& x, int batch) const {
    const int L = static_cast<int>(x.rows()) / batch;
    const int Lout = out_length(L);
    Mat<T> cols = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * Lout, kernel_ * in_);
    for (int b = 0; b < batch; ++b)
      for (int o = 0; o < Lout; ++o)
        for (int k = 0; k < kernel_; ++k) {
          const int i = o * stride_ - padding_ + k;
          if (i < 0 || i >= L) continue;
          cols.block(b * Lout + o, k * in_, 1, in_) = x.row(b * L + i);
        }
    return cols;
  }

  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;

 public:
  Param<T> weight;
  Param<T> bias;
};

/// Transposed 1D convolution (kernel 4, stride 2, padding 1 doubles L).
/// Weight is Cin x (K*Cout) with column k*Cout + co.
template <typename T>
class ConvTranspose1d {
 public:
  ConvTranspose1d() = default;
  ConvTranspose1d(int in, int out, int kernel, int stride, int padding, std::mt19937_64& rng)
      : in_(in), out_(out), kernel_(kernel), stride_(stride), padding_(padding),
        weight(in, kernel * out), bias(1, out) {
    const T bound = T(1) / std::sqrt(static_cast<T>(out * kernel));
    fill_uniform(weight.value, bound, rng);
    fill_uniform(bias.value, bound, rng);
  }

  int out_length(int L) const { return (L - 1) * stride_ - 2 * padding_ + kernel_; }

  Mat<T> forward(const Mat<T>& x, int batch) const {
    if (x.cols() != in_) throw ShapeError("ConvTranspose1d: channel mismatch");
    const int L = static_cast<int>(x.rows()) / batch;
    const int Lout = out_length(L);
    const Mat<T> z = x * weight.value;
    Mat<T> y = Mat<T>::Zero(static_cast<Eigen::Index>(batch) * Lout, out_);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < L; ++i)
        for (int k = 0; k < kernel_; ++k) {
          const int o = i * stride_ - padding_ + k;
          if (o < 0 || o >= Lout) continue;
          y.row(b * Lout + o) += z.block(b * L + i, k * out_, 1, out_);
        }
    y.rowwise() += bias.value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, int batch) {
    const int L = static_cast<int>(x.rows()) / batch;
    const int Lout = out_length(L);
    bias.grad.row(0) += dy.colwise().sum();
    Mat<T> dz = Mat<T>::Zero(x.rows(), kernel_ * out_);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < L; ++i)
        for (int k = 0; k < kernel_; ++k) {
          const int o = i * stride_ - padding_ + k;
          if (o < 0 || o >= Lout) continue;
          dz.block(b * L + i, k * out_, 1, out_) = dy.row(b * Lout + o);
        }
    weight.grad.noalias() += x.transpose() * dz;
    return dz * weight.value.transpose();
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

 private:
  int in_ = 0, out_ = 0, kernel_ = 4, stride_ = 2, padding_ = 1;

 public:
  Param<T> weight;
  Param<T> bias;
};

}  // namespace cmadp::nn
