#pragma once

// Per-modality encoders into the shared embedding space and assembly of the
// (T*N) x B x D token batch consumed by cross-modality attention.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmadp/nn/layers.hpp"
#include "cmadp/synthworld.hpp"

namespace cmadp {

inline constexpr int kWindow = 2;                            // T
inline constexpr int kTokens = kWindow * kNumModalities;      // T*N
inline constexpr int kEmbedDim = 128;                         // D

enum class Modality { kImg3 = 0, kImgg = 1, kState = 2, kTactile = 3 };

struct EncoderConfig {
  int embed_dim = kEmbedDim;
  std::uint64_t frozen_seed = 20250101;
};

/// Tokens stored token-major: row s*B + b holds slot s of batch element b,
/// i.e. the row-major flattening of a (T*N) x B x D array. Slot order is
/// (t-1: img3, imgg, state, tactile), (t: img3, imgg, state, tactile).
template <typename T>
struct TokenBatch {
  int batch = 0;
  Mat<T> data;

  std::array<Eigen::Index, 3> shape() const {
    return {batch > 0 ? data.rows() / batch : 0, batch, data.cols()};
  }
  auto token(int slot, int b) const { return data.row(static_cast<Eigen::Index>(slot) * batch + b); }
};

/// Three frozen stride-2 3x3 convolution stages (1 -> 8 -> 16 -> 32 channels,
/// SiLU after each) followed by a trainable projection to the embedding
/// space. The convolution weights are drawn once from a dedicated seed and
/// never receive gradient updates.
template <typename T>
class FrozenConvEncoder {
 public:
  static constexpr std::array<int, 4> kChannels = {1, 8, 16, 32};

  FrozenConvEncoder() = default;
  FrozenConvEncoder(int image_size, int embed_dim, std::uint64_t frozen_seed, std::mt19937_64& rng)
      : size_(image_size) {
    std::mt19937_64 frozen_rng(frozen_seed);
    for (int s = 0; s < 3; ++s) {
      const int cin = kChannels[static_cast<std::size_t>(s)];
      const int cout = kChannels[static_cast<std::size_t>(s) + 1];
      // Orthonormal rows (Cout <= 9*Cin at every stage), scaled for SiLU.
      Mat<double> g(9 * cin, cout);
      fill_gaussian(g, frozen_rng);
      Eigen::HouseholderQR<Mat<double>> qr(g);
      Mat<double> q = qr.householderQ() * Mat<double>::Identity(9 * cin, cout);
      stages_[static_cast<std::size_t>(s)] = nn::Param<T>(cout, 9 * cin);
      stages_[static_cast<std::size_t>(s)].value = (std::sqrt(2.0) * q.transpose()).template cast<T>();
      stages_[static_cast<std::size_t>(s)].trainable = false;
    }
    projection = nn::Linear<T>(feature_dim(), embed_dim, rng);
  }

  int image_size() const { return size_; }
  int feature_dim() const { return kChannels[3] * (size_ / 8) * (size_ / 8); }

  /// Frozen feature extraction; `image` holds size*size row-major pixels.
  Vec<T> features(std::span<const float> image) const {
    if (static_cast<int>(image.size()) != size_ * size_)
      throw ShapeError("FrozenConvEncoder: expected " + std::to_string(size_) + "x" +
                       std::to_string(size_) + " image, got " + std::to_string(image.size()) +
                       " pixels");
    int h = size_;
    Mat<T> act(h * h, 1);
    for (int i = 0; i < h * h; ++i) act(i, 0) = static_cast<T>(image[static_cast<std::size_t>(i)]);
    for (int s = 0; s < 3; ++s) {
      const int cin = kChannels[static_cast<std::size_t>(s)];
      const int ho = h / 2;
      Mat<T> cols = Mat<T>::Zero(ho * ho, 9 * cin);
      for (int r = 0; r < ho; ++r)
        for (int c = 0; c < ho; ++c)
          for (int kr = 0; kr < 3; ++kr)
            for (int kc = 0; kc < 3; ++kc) {
              const int ir = 2 * r - 1 + kr;
              const int ic = 2 * c - 1 + kc;
              if (ir < 0 || ir >= h || ic < 0 || ic >= h) continue;
              cols.block(r * ho + c, (kr * 3 + kc) * cin, 1, cin) = act.row(ir * h + ic);
            }
      act = nn::silu<T>(cols * stages_[static_cast<std::size_t>(s)].value.transpose());
      h = ho;
    }
    return Eigen::Map<const Vec<T>>(act.data(), act.size());
  }

  /// Frozen features followed by the trainable projection.
  Vec<T> encode(std::span<const float> image) const {
    Mat<T> f = features(image).transpose();
    return projection.forward(f).row(0).transpose();
  }

  const std::array<nn::Param<T>, 3>& frozen_stages() const { return stages_; }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    for (int s = 0; s < 3; ++s)
      out.push_back({prefix + ".frozen" + std::to_string(s), &stages_[static_cast<std::size_t>(s)]});
    projection.collect(prefix + ".proj", out);
  }

  nn::Linear<T> projection;

 private:
  static void fill_gaussian(Mat<double>& m, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  }

  int size_ = 0;
  std::array<nn::Param<T>, 3> stages_;
};

/// Encoder inputs for a batch of B windows; every matrix has 2B rows with
/// row t*B + b (t = 0 previous frame, t = 1 current frame). Images enter as
/// frozen features so they can be computed once per frame.
template <typename T>
struct EncoderInput {
  int batch = 0;
  Mat<T> img3_features;
  Mat<T> imgg_features;
  Mat<T> state;
  Mat<T> tactile;
};

template <typename T>
class Encoders {
 public:
  struct Cache {
    EncoderInput<T> input;
  };

  Encoders() = default;
  Encoders(const EncoderConfig& cfg, std::mt19937_64& rng)
      : img3(kImg3Size, cfg.embed_dim, cfg.frozen_seed, rng),
        imgg(kImggSize, cfg.embed_dim, cfg.frozen_seed + 1, rng),
        state(kStateDim, cfg.embed_dim, rng),
        tactile(kTactileDim, cfg.embed_dim, rng),
        slots(kTokens, cfg.embed_dim) {
    nn::fill_normal(slots.value, T(0.02), rng);
  }

  int embed_dim() const { return static_cast<int>(slots.value.cols()); }

  Vec<T> encode_state(std::span<const T> s) const { return encode_affine(state, s, "state"); }
  Vec<T> encode_tactile(std::span<const T> s) const { return encode_affine(tactile, s, "tactile"); }

  /// Trainable part: projections, state/tactile maps and slot embeddings.
  TokenBatch<T> forward(const EncoderInput<T>& in, Cache* cache) const {
    const int B = in.batch;
    check_rows(in);
    const Mat<T> e[kNumModalities] = {img3.projection.forward(in.img3_features),
                                      imgg.projection.forward(in.imgg_features),
                                      state.forward(in.state), tactile.forward(in.tactile)};
    TokenBatch<T> tb;
    tb.batch = B;
    tb.data.resize(static_cast<Eigen::Index>(kTokens) * B, embed_dim());
    for (int t = 0; t < kWindow; ++t)
      for (int m = 0; m < kNumModalities; ++m) {
        const int slot = t * kNumModalities + m;
        tb.data.middleRows(static_cast<Eigen::Index>(slot) * B, B) =
            e[m].middleRows(static_cast<Eigen::Index>(t) * B, B).rowwise() + slots.value.row(slot);
      }
    if (cache) cache->input = in;
    return tb;
  }

  void backward(const Cache& c, const Mat<T>& dtokens) {
    const int B = c.input.batch;
    Mat<T> de[kNumModalities];
    for (auto& d : de) d.resize(static_cast<Eigen::Index>(kWindow) * B, embed_dim());
    for (int t = 0; t < kWindow; ++t)
      for (int m = 0; m < kNumModalities; ++m) {
        const int slot = t * kNumModalities + m;
        auto blk = dtokens.middleRows(static_cast<Eigen::Index>(slot) * B, B);
        de[m].middleRows(static_cast<Eigen::Index>(t) * B, B) = blk;
        slots.grad.row(slot) += blk.colwise().sum();
      }
    img3.projection.backward(c.input.img3_features, de[0]);
    imgg.projection.backward(c.input.imgg_features, de[1]);
    state.backward(c.input.state, de[2]);
    tactile.backward(c.input.tactile, de[3]);
  }

  /// Builds the token batch from raw observation windows (each exactly two
  /// frames: previous, current).
  TokenBatch<T> build_tokens(std::span<const std::vector<const Observation*>> windows) const {
    return forward(prepare(windows), nullptr);
  }

  EncoderInput<T> prepare(std::span<const std::vector<const Observation*>> windows) const {
    const int B = static_cast<int>(windows.size());
    EncoderInput<T> in;
    in.batch = B;
    in.img3_features.resize(2 * B, img3.feature_dim());
    in.imgg_features.resize(2 * B, imgg.feature_dim());
    in.state.resize(2 * B, kStateDim);
    in.tactile.resize(2 * B, kTactileDim);
    for (int b = 0; b < B; ++b) {
      const auto& w = windows[static_cast<std::size_t>(b)];
      if (w.size() != static_cast<std::size_t>(kWindow))
        throw ShapeError("observation window must hold exactly " + std::to_string(kWindow) +
                         " frames, got " + std::to_string(w.size()));
      for (int t = 0; t < kWindow; ++t) {
        const Observation& o = *w[static_cast<std::size_t>(t)];
        const int row = t * B + b;
        in.img3_features.row(row) = img3.features(o.img3).transpose();
        in.imgg_features.row(row) = imgg.features(o.imgg).transpose();
        for (int i = 0; i < kStateDim; ++i) in.state(row, i) = static_cast<T>(o.state[static_cast<std::size_t>(i)]);
        for (int i = 0; i < kTactileDim; ++i)
          in.tactile(row, i) = static_cast<T>(o.tactile[static_cast<std::size_t>(i)]);
      }
    }
    return in;
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    img3.collect(prefix + ".img3", out);
    imgg.collect(prefix + ".imgg", out);
    state.collect(prefix + ".state", out);
    tactile.collect(prefix + ".tactile", out);
    out.push_back({prefix + ".slots", &slots});
  }

  FrozenConvEncoder<T> img3;
  FrozenConvEncoder<T> imgg;
  nn::Linear<T> state;
  nn::Linear<T> tactile;
  nn::Param<T> slots;

 private:
  static Vec<T> encode_affine(const nn::Linear<T>& layer, std::span<const T> x, const char* what) {
    if (static_cast<int>(x.size()) != layer.in_features())
      throw ShapeError(std::string(what) + " input has wrong dimension");
    Mat<T> row(1, static_cast<Eigen::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!std::isfinite(static_cast<double>(x[i])))
        throw NumericError(std::string("non-finite ") + what + " input");
      row(0, static_cast<Eigen::Index>(i)) = x[i];
    }
    return layer.forward(row).row(0).transpose();
  }

  void check_rows(const EncoderInput<T>& in) const {
    const Eigen::Index rows = static_cast<Eigen::Index>(kWindow) * in.batch;
    if (in.img3_features.rows() != rows || in.imgg_features.rows() != rows ||
        in.state.rows() != rows || in.tactile.rows() != rows)
      throw ShapeError("encoder input rows must equal 2*B");
  }
};

}  // namespace cmadp
