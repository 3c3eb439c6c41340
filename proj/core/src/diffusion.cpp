#include "cmadp/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cmadp {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("noise schedule needs K >= 2");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    betas[static_cast<std::size_t>(k)] =
        beta_start + (beta_end - beta_start) * static_cast<double>(k) / (steps - 1);
  return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
  NoiseSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    s.alpha_.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar_.push_back(prod);
  }
  s.beta_ = std::move(betas);
  return s;
}

MatF q_sample(const MatF& x0, int k, const MatF& eps, const NoiseSchedule& sched) {
  if (k < 0 || k >= sched.steps()) throw std::out_of_range("diffusion step index out of range");
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols())
    throw ShapeError("q_sample: eps must match x0 in shape");
  const double ab = sched.alpha_bar()[static_cast<std::size_t>(k)];
  return static_cast<float>(std::sqrt(ab)) * x0 + static_cast<float>(std::sqrt(1.0 - ab)) * eps;
}

NoiseDraw draw_noise(int batch, int horizon, int action_dim, int K, std::mt19937_64& rng) {
  NoiseDraw d;
  std::uniform_int_distribution<int> step(0, K - 1);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  d.steps.resize(static_cast<std::size_t>(batch));
  d.eps.resize(static_cast<Eigen::Index>(batch) * horizon, action_dim);
  for (int b = 0; b < batch; ++b) {
    d.steps[static_cast<std::size_t>(b)] = step(rng);
    for (int r = 0; r < horizon; ++r)
      for (int c = 0; c < action_dim; ++c) d.eps(b * horizon + r, c) = normal(rng);
  }
  return d;
}

MatF noised_batch(const MatF& x0, const NoiseDraw& draw, const NoiseSchedule& sched) {
  const auto B = static_cast<Eigen::Index>(draw.steps.size());
  if (B == 0 || x0.rows() % B != 0) throw ShapeError("noised_batch: rows not divisible by batch");
  const Eigen::Index H = x0.rows() / B;
  MatF xk(x0.rows(), x0.cols());
  for (Eigen::Index b = 0; b < B; ++b)
    xk.middleRows(b * H, H) = q_sample(x0.middleRows(b * H, H), draw.steps[static_cast<std::size_t>(b)],
                                       draw.eps.middleRows(b * H, H), sched);
  return xk;
}

double diffusion_loss(const EpsModel& model, const MatF& x0, const MatF& cond, int horizon,
                      const NoiseSchedule& sched, std::mt19937_64& rng) {
  const int B = static_cast<int>(x0.rows()) / horizon;
  const NoiseDraw draw = draw_noise(B, horizon, static_cast<int>(x0.cols()), sched.steps(), rng);
  const MatF eps_hat = model(noised_batch(x0, draw, sched), draw.steps, cond);
  if (eps_hat.rows() != draw.eps.rows() || eps_hat.cols() != draw.eps.cols())
    throw ShapeError("eps model output has wrong shape");
  return (eps_hat - draw.eps).cast<double>().squaredNorm() / static_cast<double>(draw.eps.size());
}

MatF ddpm_sample(const EpsModel& model, const MatF& cond, int horizon, int action_dim,
                 const NoiseSchedule& sched, std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  MatF x(horizon, action_dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  for (int k = sched.steps() - 1; k >= 0; --k) {
    const int step[1] = {k};
    const MatF eps = model(x, step, cond);
    const auto ku = static_cast<std::size_t>(k);
    const double beta = sched.beta()[ku];
    const double coef = beta / std::sqrt(1.0 - sched.alpha_bar()[ku]);
    MatF mean = (x - static_cast<float>(coef) * eps) / static_cast<float>(std::sqrt(sched.alpha()[ku]));
    if (k > 0) {
      const auto sigma = static_cast<float>(std::sqrt(beta));
      for (Eigen::Index i = 0; i < mean.size(); ++i) mean.data()[i] += sigma * normal(rng);
    }
    x = std::move(mean);
  }
  return x;
}

ActionNormalizer ActionNormalizer::fit(std::span<const float> rows, int dim) {
  if (dim < 1 || rows.size() % static_cast<std::size_t>(dim) != 0 || rows.empty())
    throw ShapeError("normalizer: data size must be a positive multiple of dim");
  ActionNormalizer n;
  n.lo.assign(static_cast<std::size_t>(dim), std::numeric_limits<float>::infinity());
  n.hi.assign(static_cast<std::size_t>(dim), -std::numeric_limits<float>::infinity());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto d = i % static_cast<std::size_t>(dim);
    n.lo[d] = std::min(n.lo[d], rows[i]);
    n.hi[d] = std::max(n.hi[d], rows[i]);
  }
  return n;
}

float ActionNormalizer::normalize(float v, int d) const {
  const auto i = static_cast<std::size_t>(d);
  const float range = hi[i] - lo[i];
  if (range <= 0.0f) return 0.0f;
  return 2.0f * (v - lo[i]) / range - 1.0f;
}

float ActionNormalizer::denormalize(float v, int d) const {
  const auto i = static_cast<std::size_t>(d);
  const float range = hi[i] - lo[i];
  if (range <= 0.0f) return lo[i];
  return (v + 1.0f) * 0.5f * range + lo[i];
}

MatF ActionNormalizer::normalize(const MatF& a) const {
  MatF out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) out(r, c) = normalize(a(r, c), static_cast<int>(c));
  return out;
}

MatF ActionNormalizer::denormalize(const MatF& a) const {
  MatF out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) out(r, c) = denormalize(a(r, c), static_cast<int>(c));
  return out;
}

}  // namespace cmadp
