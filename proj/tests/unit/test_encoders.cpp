#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "cmadp/encoders.hpp"
#include "cmadp/synthworld.hpp"
#include "gradcheck.hpp"

using namespace cmadp;

namespace {

Encoders<float> make(std::uint64_t seed = 1, int dim = kEmbedDim) {
  std::mt19937_64 rng(seed);
  EncoderConfig cfg;
  cfg.embed_dim = dim;
  return Encoders<float>(cfg, rng);
}

std::vector<std::vector<const Observation*>> windows(const std::vector<Observation>& obs, int B) {
  std::vector<std::vector<const Observation*>> w;
  for (int b = 0; b < B; ++b)
    w.push_back({&obs[static_cast<std::size_t>(b) % obs.size()], &obs[(static_cast<std::size_t>(b) + 1) % obs.size()]});
  return w;
}

}  // namespace

TEST(EncodeState, ZeroInputZeroBiasGivesZero) {
  auto enc = make();
  enc.state.bias.value.setZero();
  const std::vector<float> s(6, 0.0f);
  EXPECT_TRUE(enc.encode_state(s).isZero(0.0f));
}

TEST(EncodeState, ZeroInputReturnsBias) {
  auto enc = make();
  const std::vector<float> s(6, 0.0f);
  EXPECT_EQ(enc.encode_state(s), enc.state.bias.value.row(0).transpose());
}

TEST(EncodeState, IdentityPaddedWeights) {
  auto enc = make();
  enc.state.weight.value.setZero();
  for (int i = 0; i < 6; ++i) enc.state.weight.value(i, i) = 1.0f;
  enc.state.bias.value.setZero();
  const std::vector<float> s = {1, 2, 3, 4, 5, 6};
  const VecF e = enc.encode_state(s);
  ASSERT_EQ(e.size(), 128);
  for (int i = 0; i < 128; ++i) EXPECT_EQ(e(i), i < 6 ? static_cast<float>(i + 1) : 0.0f);
}

TEST(EncodeState, RejectsNonFiniteAndWrongSize) {
  auto enc = make();
  std::vector<float> s(6, 0.0f);
  s[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(enc.encode_state(s), NumericError);
  s[3] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(enc.encode_state(s), NumericError);
  EXPECT_THROW(enc.encode_state(std::vector<float>(5, 0.0f)), ShapeError);
}

TEST(EncodeTactile, ZeroBiasAndIdentityCases) {
  auto enc = make();
  const std::vector<float> z(4, 0.0f);
  EXPECT_EQ(enc.encode_tactile(z), enc.tactile.bias.value.row(0).transpose());
  enc.tactile.bias.value.setZero();
  EXPECT_TRUE(enc.encode_tactile(z).isZero(0.0f));
  enc.tactile.weight.value.setZero();
  for (int i = 0; i < 4; ++i) enc.tactile.weight.value(i, i) = 1.0f;
  const std::vector<float> t = {0.5f, -1.0f, 2.0f, 3.0f};
  const VecF e = enc.encode_tactile(t);
  for (int i = 0; i < 128; ++i) EXPECT_EQ(e(i), i < 4 ? t[static_cast<std::size_t>(i)] : 0.0f);
  std::vector<float> bad = t;
  bad[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(enc.encode_tactile(bad), NumericError);
}

TEST(EncodeImage, ZeroImageZeroBiasGivesZero) {
  auto enc = make();
  enc.img3.projection.bias.value.setZero();
  enc.imgg.projection.bias.value.setZero();
  const std::vector<float> a(32 * 32, 0.0f), b(16 * 16, 0.0f);
  EXPECT_TRUE(enc.img3.encode(a).isZero(0.0f));
  EXPECT_TRUE(enc.imgg.encode(b).isZero(0.0f));
}

TEST(EncodeImage, PureAndShapeChecked) {
  const auto enc = make();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> img(32 * 32);
  for (auto& p : img) p = u(rng);
  EXPECT_EQ(enc.img3.encode(img), enc.img3.encode(img));
  EXPECT_EQ(enc.img3.feature_dim(), 512);
  EXPECT_EQ(enc.imgg.feature_dim(), 128);
  EXPECT_THROW(enc.img3.encode(std::vector<float>(16 * 16)), ShapeError);
  EXPECT_THROW(enc.imgg.encode(std::vector<float>(32 * 32)), ShapeError);
}

TEST(FrozenStages, OrthonormalRowsScaledAndSeedDependent) {
  const auto a = make(1), b = make(2);
  for (int s = 0; s < 3; ++s) {
    const MatF& w = a.img3.frozen_stages()[static_cast<std::size_t>(s)].value;
    const MatF gram = w * w.transpose();
    EXPECT_TRUE(gram.isApprox(2.0f * MatF::Identity(w.rows(), w.rows()), 1e-5f));
    EXPECT_FALSE(a.img3.frozen_stages()[static_cast<std::size_t>(s)].trainable);
    // Frozen weights depend on frozen_seed only, not on the init rng.
    EXPECT_EQ(w, b.img3.frozen_stages()[static_cast<std::size_t>(s)].value);
  }
  EXPECT_NE(a.img3.frozen_stages()[0].value, a.imgg.frozen_stages()[0].value);
  EXPECT_NE(a.img3.projection.weight.value, b.img3.projection.weight.value);
}

TEST(BuildTokens, ShapesForBatchOneAndThirtyTwo) {
  const auto enc = make();
  const Trajectory tr = generate_trajectory(3, GenConfig{});
  for (int B : {1, 32}) {
    const auto w = windows(tr.observations, B);
    const TokenBatch<float> tb = enc.build_tokens(w);
    EXPECT_EQ(tb.shape(), (std::array<Eigen::Index, 3>{8, B, 128}));
  }
}

TEST(BuildTokens, ZeroEverythingGivesZeroTokens) {
  auto enc = make();
  enc.slots.value.setZero();
  for (auto* l : {&enc.img3.projection, &enc.imgg.projection, &enc.state, &enc.tactile}) l->bias.value.setZero();
  const std::vector<Observation> obs(2);
  const auto w = windows(obs, 3);
  EXPECT_TRUE(enc.build_tokens(w).data.isZero(0.0f));
}

TEST(BuildTokens, FixedSlotOrder) {
  auto enc = make();
  const Trajectory tr = generate_trajectory(4, GenConfig{});
  const std::vector<std::vector<const Observation*>> w = {{&tr.observations[10], &tr.observations[11]}};
  const TokenBatch<float> tb = enc.build_tokens(w);
  const Observation& prev = tr.observations[10];
  const Observation& cur = tr.observations[11];
  const std::vector<float> ps(prev.state.begin(), prev.state.end()), cs(cur.state.begin(), cur.state.end());
  const std::vector<float> pt(prev.tactile.begin(), prev.tactile.end()), ct(cur.tactile.begin(), cur.tactile.end());
  const VecF expect[8] = {enc.img3.encode(prev.img3), enc.imgg.encode(prev.imgg), enc.encode_state(ps),
                          enc.encode_tactile(pt),     enc.img3.encode(cur.img3),  enc.imgg.encode(cur.imgg),
                          enc.encode_state(cs),       enc.encode_tactile(ct)};
  for (int s = 0; s < 8; ++s) {
    const VecF tok = tb.token(s, 0).transpose();
    EXPECT_TRUE(tok.isApprox(expect[s] + enc.slots.value.row(s).transpose(), 1e-5f)) << "slot " << s;
  }
}

TEST(BuildTokens, RejectsWrongWindowLength) {
  const auto enc = make();
  const std::vector<Observation> obs(3);
  const std::vector<std::vector<const Observation*>> one = {{&obs[0]}};
  const std::vector<std::vector<const Observation*>> three = {{&obs[0], &obs[1], &obs[2]}};
  EXPECT_THROW(enc.build_tokens(one), ShapeError);
  EXPECT_THROW(enc.build_tokens(three), ShapeError);
}

template <typename T>
check::GradCheckReport encoder_gradcheck(T eps) {
  std::mt19937_64 rng(5);
  EncoderConfig cfg;
  cfg.embed_dim = 8;
  Encoders<T> enc(cfg, rng);
  const Trajectory tr = generate_trajectory(6, GenConfig{});
  std::vector<std::vector<const Observation*>> w;
  for (int b = 0; b < 3; ++b) w.push_back({&tr.observations[static_cast<std::size_t>(100 + b)], &tr.observations[static_cast<std::size_t>(101 + b)]});
  const EncoderInput<T> in = enc.prepare(w);
  const Mat<T> r = check::projection_weights<T>(8 * 3, 8, 17);

  nn::ParamList<T> params;
  enc.collect("enc", params);
  nn::zero_grads(params);
  typename Encoders<T>::Cache cache;
  enc.forward(in, &cache);
  enc.backward(cache, r);
  auto loss = [&] {
    const Mat<T> t = enc.forward(in, nullptr).data;
    return (t.template cast<double>().array() * r.template cast<double>().array()).sum();
  };
  return check::check_gradients<T>(check::probes(params), loss, eps);
}

TEST(EncoderGradient, TrainableProjectionsFloat) {
  const auto r = encoder_gradcheck<float>(1e-2f);
  EXPECT_LT(r.rel_error, 1e-3) << "worst: " << r.worst;
}

TEST(EncoderGradient, TrainableProjectionsDouble) {
  const auto r = encoder_gradcheck<double>(1e-6);
  EXPECT_LT(r.rel_error, 1e-5) << "worst: " << r.worst;
}

TEST(EncoderParams, FrozenStagesAreListedButNotTrainable) {
  auto enc = make();
  nn::ParamList<float> params;
  enc.collect("enc", params);
  int frozen = 0;
  for (const auto& p : params) frozen += p.param->trainable ? 0 : 1;
  EXPECT_EQ(frozen, 6);
}
