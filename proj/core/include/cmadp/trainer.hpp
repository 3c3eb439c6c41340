#pragma once

// Diffusion-policy training: whole-trajectory or single-primitive mode,
// Adam with global-norm clipping, EMA shadow weights, and validation on
// fixed noise draws so losses are comparable across checkpoints.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmadp/config.hpp"
#include "cmadp/policy.hpp"

namespace cmadp {

struct MetricsRow {
  std::int64_t step = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  std::vector<MetricsRow> split(const std::string& name) const;
  std::string to_csv() const;
  static MetricsLog from_csv(const std::string& text);
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const nn::ParamList<float>& params);
  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<MatF> m_, v_;
};

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const nn::ParamList<float>& params, double max_norm);

/// shadow <- decay * shadow + (1 - decay) * live, parameter-wise.
void ema_update(const nn::ParamList<float>& shadow, const nn::ParamList<float>& live, double decay);

/// A frozen set of (frame, step, noise) draws.
struct ValidationSet {
  std::vector<FrameRef> frames;
  NoiseDraw draw;

  /// FNV-1a digest over frames, steps and noise bytes.
  std::uint64_t hash() const;
};

ValidationSet make_validation_set(const FrameTable& table, std::span<const int> trajs, int primitive,
                                  int draws, std::uint64_t seed, int horizon, int diffusion_steps);

/// Seed of the validation draws for whole mode (primitive = -1) or one
/// primitive; shared by training logs and budget comparisons.
std::uint64_t validation_seed(std::uint64_t base, int primitive);

/// Noise prediction for noised chunks of the given frames.
using FrameNoiseModel =
    std::function<MatF(const MatF& xk, std::span<const int> steps, std::span<const FrameRef> refs)>;

/// Mean diffusion loss over the set, evaluated in fixed-size chunks.
double validate(Policy& policy, const FrameTable& table, const ValidationSet& set);
double validate(const FrameNoiseModel& model, const FrameTable& table, const ValidationSet& set,
                const NoiseSchedule& schedule, int horizon);

struct TrainResult {
  Policy policy;  // EMA shadow when enabled, else live weights
  MetricsLog log;
  std::int64_t steps = 0;
  std::array<double, kNumPrimitives> final_primitive_val{};  // whole mode only; NaN otherwise
  double final_val = 0.0;
};

using ProgressFn = std::function<void(std::int64_t step, double train_loss)>;

/// Builds the frame table itself (action normalizer fit on the train split).
TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Dataset& ds,
                  std::uint64_t seed, const ProgressFn& progress = {});

/// Reuses a prebuilt table; `normalizer` must be the one the table was built with.
TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Dataset& ds,
                  const FrameTable& table, const ActionNormalizer& normalizer, std::uint64_t seed,
                  const ProgressFn& progress = {});

ActionNormalizer fit_normalizer(const Dataset& ds);

/// Per-primitive validation losses of one policy on the canonical
/// per-primitive validation sets.
std::array<double, kNumPrimitives> primitive_validation(Policy& policy, const FrameTable& table,
                                                        const Dataset& ds, const TrainConfig& cfg);

struct BudgetRow {
  int primitive = 0;
  double whole_val_loss = 0.0;
  double primitive_val_loss = 0.0;
  std::string winner;
};

struct BudgetReport {
  std::vector<BudgetRow> rows;
  MetricsLog whole_log;
  std::array<MetricsLog, kNumPrimitives> primitive_logs;

  int primitive_wins() const;
  nlohmann::json to_json() const;
};

/// Throws ConfigError unless 6 * per_primitive_steps == whole_steps.
void check_matched_budget(std::int64_t whole_steps, std::int64_t per_primitive_steps);

BudgetRow make_budget_row(int primitive, double whole_loss, double primitive_loss);

/// Trains one whole-trajectory policy (unless `whole` is supplied) and six
/// primitive policies at matched budgets, comparing validation losses on
/// identical per-primitive draws.
BudgetReport compare_budgets(const Dataset& ds, const TrainConfig& base, const ModelConfig& model,
                             std::uint64_t seed, std::int64_t whole_steps,
                             std::int64_t per_primitive_steps, const TrainResult* whole = nullptr,
                             const ProgressFn& progress = {});

}  // namespace cmadp
