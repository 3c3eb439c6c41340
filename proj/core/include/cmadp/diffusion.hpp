#pragma once

// DDPM machinery over action chunks: linear noise schedule, forward noising,
// epsilon-prediction loss and ancestral sampling.

#include <functional>
#include <random>
#include <span>
#include <vector>

#include "cmadp/common.hpp"

namespace cmadp {

class NoiseSchedule {
 public:
  /// Linear betas from 1e-4 to 0.02 inclusive over K >= 2 steps.
  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);
  /// Arbitrary betas in (0, 1); used for synthetic schedules in tests.
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }
  const std::vector<double>& beta() const { return beta_; }
  const std::vector<double>& alpha() const { return alpha_; }
  const std::vector<double>& alpha_bar() const { return alpha_bar_; }

 private:
  std::vector<double> beta_, alpha_, alpha_bar_;
};

/// x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps. Throws on out-of-range k or
/// shape mismatch.
MatF q_sample(const MatF& x0, int k, const MatF& eps, const NoiseSchedule& sched);

/// Noise predictor: (x_k rows for B chunks stacked, per-chunk step, B x cond)
/// -> eps_hat with the shape of x_k.
using EpsModel = std::function<MatF(const MatF& xk, std::span<const int> steps, const MatF& cond)>;

/// Draws a step and unit Gaussian noise for every chunk of a batch.
struct NoiseDraw {
  std::vector<int> steps;
  MatF eps;
};

NoiseDraw draw_noise(int batch, int horizon, int action_dim, int K, std::mt19937_64& rng);

/// Applies q_sample chunk-wise: chunk b occupies rows [b*H, (b+1)*H).
MatF noised_batch(const MatF& x0, const NoiseDraw& draw, const NoiseSchedule& sched);

/// Mean squared epsilon-prediction error over all batch elements and entries.
double diffusion_loss(const EpsModel& model, const MatF& x0, const MatF& cond, int horizon,
                      const NoiseSchedule& sched, std::mt19937_64& rng);

/// Ancestral DDPM sampling of one chunk from x_K ~ N(0, I); sigma_k =
/// sqrt(beta_k) and no noise at the final step.
MatF ddpm_sample(const EpsModel& model, const MatF& cond, int horizon, int action_dim,
                 const NoiseSchedule& sched, std::mt19937_64& rng);

/// Per-dimension min/max normalization of actions into [-1, 1]. Dimensions
/// with zero range map to 0.
struct ActionNormalizer {
  std::vector<float> lo, hi;

  static ActionNormalizer fit(std::span<const float> rows, int dim);
  float normalize(float v, int d) const;
  float denormalize(float v, int d) const;
  MatF normalize(const MatF& a) const;
  MatF denormalize(const MatF& a) const;
};

}  // namespace cmadp
