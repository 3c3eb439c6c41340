#include "cmadp/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace cmadp {

using nlohmann::json;

namespace {

constexpr int kValChunk = 64;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string format_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::vector<MetricsRow> MetricsLog::split(const std::string& name) const {
  std::vector<MetricsRow> out;
  for (const auto& r : rows)
    if (r.split == name) out.push_back(r);
  return out;
}

std::string MetricsLog::to_csv() const {
  std::string s = "step,split,loss\n";
  for (const auto& r : rows) s += std::to_string(r.step) + "," + r.split + "," + format_loss(r.loss) + "\n";
  return s;
}

MetricsLog MetricsLog::from_csv(const std::string& text) {
  MetricsLog log;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "step,split,loss")
    throw DataError("metrics CSV must start with 'step,split,loss'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) throw DataError("malformed metrics row");
    try {
      log.rows.push_back({std::stoll(line.substr(0, c1)), line.substr(c1 + 1, c2 - c1 - 1),
                          std::stod(line.substr(c2 + 1))});
    } catch (const std::exception&) {
      throw DataError("malformed metrics row '" + line + "'");
    }
  }
  return log;
}

void Adam::step(const nn::ParamList<float>& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(MatF::Zero(p.param->value.rows(), p.param->value.cols()));
      v_.push_back(MatF::Zero(p.param->value.rows(), p.param->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw ShapeError("Adam: parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const auto step = static_cast<float>(lr_ / bc1);
  const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const auto eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].param;
    if (!p.trainable) continue;
    m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
    v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= step * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

double clip_grad_norm(const nn::ParamList<float>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.param->trainable) sq += p.param->grad.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (const auto& p : params)
      if (p.param->trainable) p.param->grad *= scale;
  }
  return norm;
}

void ema_update(const nn::ParamList<float>& shadow, const nn::ParamList<float>& live, double decay) {
  if (shadow.size() != live.size()) throw ShapeError("EMA: parameter lists differ");
  const auto d = static_cast<float>(decay);
  for (std::size_t i = 0; i < shadow.size(); ++i) {
    if (!live[i].param->trainable) continue;
    auto& s = shadow[i].param->value;
    s = d * s + (1.0f - d) * live[i].param->value;
  }
}

std::uint64_t ValidationSet::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : frames) {
    h = fnv1a(h, &f.traj, sizeof f.traj);
    h = fnv1a(h, &f.frame, sizeof f.frame);
  }
  h = fnv1a(h, draw.steps.data(), draw.steps.size() * sizeof(int));
  h = fnv1a(h, draw.eps.data(), static_cast<std::size_t>(draw.eps.size()) * sizeof(float));
  return h;
}

std::uint64_t validation_seed(std::uint64_t base, int primitive) {
  return base + static_cast<std::uint64_t>(primitive + 1);
}

ValidationSet make_validation_set(const FrameTable& table, std::span<const int> trajs, int primitive,
                                  int draws, std::uint64_t seed, int horizon, int diffusion_steps) {
  const std::vector<FrameRef> pool = table.eligible(trajs, primitive);
  if (pool.empty()) throw DataError("validation split has no eligible frames");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  ValidationSet set;
  set.frames.reserve(static_cast<std::size_t>(draws));
  for (int i = 0; i < draws; ++i) set.frames.push_back(pool[pick(rng)]);
  set.draw = draw_noise(draws, horizon, kActionDim, diffusion_steps, rng);
  return set;
}

double validate(const FrameNoiseModel& model, const FrameTable& table, const ValidationSet& set,
                const NoiseSchedule& schedule, int horizon) {
  if (set.frames.empty()) throw DataError("empty validation set");
  const auto n = static_cast<int>(set.frames.size());
  double total = 0.0;
  for (int start = 0; start < n; start += kValChunk) {
    const int count = std::min(kValChunk, n - start);
    const std::span<const FrameRef> refs(set.frames.data() + start, static_cast<std::size_t>(count));
    NoiseDraw d;
    d.steps.assign(set.draw.steps.begin() + start, set.draw.steps.begin() + start + count);
    d.eps = set.draw.eps.middleRows(static_cast<Eigen::Index>(start) * horizon,
                                    static_cast<Eigen::Index>(count) * horizon);
    const MatF eps_hat = model(noised_batch(table.targets(refs), d, schedule), d.steps, refs);
    total += (eps_hat - d.eps).cast<double>().squaredNorm() / static_cast<double>(d.eps.size()) * count;
  }
  return total / n;
}

double validate(Policy& policy, const FrameTable& table, const ValidationSet& set) {
  const FrameNoiseModel model = [&](const MatF& xk, std::span<const int> steps, std::span<const FrameRef> refs) {
    return policy.predict_noise(xk, steps, policy.observe(table.input(refs)).cond);
  };
  return validate(model, table, set, policy.schedule(), policy.config().unet.horizon);
}

ActionNormalizer fit_normalizer(const Dataset& ds) {
  std::vector<float> rows;
  for (int i : ds.indices(Split::kTrain))
    for (const auto& a : ds.trajectories[static_cast<std::size_t>(i)].actions)
      rows.insert(rows.end(), a.begin(), a.end());
  if (rows.empty()) throw DataError("training split is empty");
  return ActionNormalizer::fit(rows, kActionDim);
}

std::array<double, kNumPrimitives> primitive_validation(Policy& policy, const FrameTable& table,
                                                        const Dataset& ds, const TrainConfig& cfg) {
  const std::vector<int> val = ds.indices(Split::kVal);
  std::array<double, kNumPrimitives> out{};
  for (int p = 0; p < kNumPrimitives; ++p) {
    const ValidationSet set =
        make_validation_set(table, val, p, cfg.val_draws, validation_seed(cfg.val_seed, p),
                            policy.config().unet.horizon, policy.config().diffusion_steps);
    out[static_cast<std::size_t>(p)] = validate(policy, table, set);
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Dataset& ds,
                  std::uint64_t seed, const ProgressFn& progress) {
  const ActionNormalizer norm = fit_normalizer(ds);
  Policy probe(model, norm, seed);
  const FrameTable table(ds, probe.encoders, norm, model.unet.horizon);
  return train(cfg, model, ds, table, norm, seed, progress);
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Dataset& ds,
                  const FrameTable& table, const ActionNormalizer& normalizer, std::uint64_t seed,
                  const ProgressFn& progress) {
  cfg.validate();
  model.validate();
  const std::vector<int> train_idx = ds.indices(Split::kTrain);
  const std::vector<int> val_idx = ds.indices(Split::kVal);
  const std::vector<FrameRef> pool = table.eligible(train_idx, cfg.primitive);
  if (pool.empty()) {
    if (cfg.primitive >= 0)
      throw DataError("primitive '" + std::string(primitive_name(cfg.primitive)) +
                      "' is absent from the training split");
    throw DataError("training split is empty");
  }

  Policy live(model, normalizer, seed);
  Policy shadow = live;
  const nn::ParamList<float> live_params = live.params();
  const nn::ParamList<float> shadow_params = shadow.params();
  Adam opt(cfg.lr);
  const int H = model.unet.horizon;

  std::optional<ValidationSet> val_set;
  if (!val_idx.empty())
    val_set = make_validation_set(table, val_idx, cfg.primitive, cfg.val_draws,
                                  validation_seed(cfg.val_seed, cfg.primitive), H,
                                  model.diffusion_steps);
  Policy& evaluated = cfg.use_ema ? shadow : live;

  TrainResult result;
  auto run_validation = [&](std::int64_t step) {
    if (!val_set) return;
    const double v = validate(evaluated, table, *val_set);
    if (!std::isfinite(v)) throw NumericError("non-finite validation loss at step " + std::to_string(step));
    result.log.rows.push_back({step, "val", v});
    result.final_val = v;
  };

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<FrameRef> refs(static_cast<std::size_t>(cfg.batch_size));

  run_validation(0);
  double window_sum = 0.0;
  std::int64_t window_count = 0;
  for (std::int64_t step = 1; step <= cfg.total_steps; ++step) {
    for (auto& r : refs) r = pool[pick(rng)];
    const EncoderInput<float> in = table.input(refs);
    const MatF x0 = table.targets(refs);
    const NoiseDraw draw = draw_noise(cfg.batch_size, H, kActionDim, model.diffusion_steps, rng);

    nn::zero_grads(live_params);
    const double loss = live.loss(in, x0, draw, true);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(step));
    clip_grad_norm(live_params, cfg.grad_clip);
    opt.step(live_params);
    if (cfg.use_ema) ema_update(shadow_params, live_params, cfg.ema_decay);

    window_sum += loss;
    ++window_count;
    if (step % cfg.log_every == 0 || step == cfg.total_steps) {
      result.log.rows.push_back({step, "train", window_sum / static_cast<double>(window_count)});
      window_sum = 0.0;
      window_count = 0;
    }
    if (progress) progress(step, loss);
    if (step % cfg.val_every == 0 || step == cfg.total_steps) run_validation(step);
  }

  result.steps = cfg.total_steps;
  result.final_primitive_val.fill(std::numeric_limits<double>::quiet_NaN());
  if (cfg.primitive < 0 && !val_idx.empty())
    result.final_primitive_val = primitive_validation(evaluated, table, ds, cfg);
  result.policy = cfg.use_ema ? std::move(shadow) : std::move(live);
  return result;
}

void check_matched_budget(std::int64_t whole_steps, std::int64_t per_primitive_steps) {
  if (per_primitive_steps * kNumPrimitives != whole_steps)
    throw ConfigError("matched budget violated: 6 x " + std::to_string(per_primitive_steps) +
                      " != " + std::to_string(whole_steps));
}

BudgetRow make_budget_row(int primitive, double whole_loss, double primitive_loss) {
  return {primitive, whole_loss, primitive_loss, primitive_loss < whole_loss ? "primitive" : "whole"};
}

int BudgetReport::primitive_wins() const {
  int wins = 0;
  for (const auto& r : rows) wins += r.winner == "primitive" ? 1 : 0;
  return wins;
}

json BudgetReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows)
    rows_j.push_back({{"primitive", primitive_name(r.primitive)},
                      {"whole_val_loss", r.whole_val_loss},
                      {"primitive_val_loss", r.primitive_val_loss},
                      {"winner", r.winner}});
  return rows_j;
}

BudgetReport compare_budgets(const Dataset& ds, const TrainConfig& base, const ModelConfig& model,
                             std::uint64_t seed, std::int64_t whole_steps,
                             std::int64_t per_primitive_steps, const TrainResult* whole,
                             const ProgressFn& progress) {
  check_matched_budget(whole_steps, per_primitive_steps);
  if (ds.indices(Split::kVal).empty()) throw DataError("budget comparison needs a validation split");
  const ActionNormalizer norm = fit_normalizer(ds);
  Policy probe(model, norm, seed);
  const FrameTable table(ds, probe.encoders, norm, model.unet.horizon);

  BudgetReport report;
  TrainResult own_whole;
  if (whole == nullptr) {
    TrainConfig wc = base;
    wc.primitive = -1;
    wc.total_steps = whole_steps;
    own_whole = train(wc, model, ds, table, norm, seed, progress);
    whole = &own_whole;
  } else if (whole->steps != whole_steps) {
    throw ConfigError("supplied whole-trajectory run has " + std::to_string(whole->steps) +
                      " steps, expected " + std::to_string(whole_steps));
  }
  report.whole_log = whole->log;
  Policy whole_policy = whole->policy;
  const auto whole_losses = primitive_validation(whole_policy, table, ds, base);

  for (int p = 0; p < kNumPrimitives; ++p) {
    TrainConfig pc = base;
    pc.primitive = p;
    pc.total_steps = per_primitive_steps;
    TrainResult r = train(pc, model, ds, table, norm, seed, progress);
    report.primitive_logs[static_cast<std::size_t>(p)] = r.log;
    report.rows.push_back(make_budget_row(p, whole_losses[static_cast<std::size_t>(p)], r.final_val));
  }
  return report;
}

}  // namespace cmadp
