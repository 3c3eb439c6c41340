#include "cmadp/policy.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "cmadp/array_io.hpp"
#include "cmadp/config.hpp"

namespace cmadp {

namespace fs = std::filesystem;
using nlohmann::json;

Policy::Policy(const ModelConfig& cfg, ActionNormalizer normalizer, std::uint64_t init_seed)
    : cfg_(cfg), normalizer_(std::move(normalizer)) {
  cfg.validate();
  std::mt19937_64 rng(init_seed);
  encoders = Encoders<float>(cfg.encoder, rng);
  cma = Cma<float>(cfg.cma, rng);
  unet = ConditionalUNet1d<float>(cfg.unet, rng);
  schedule_ = NoiseSchedule::linear(cfg.diffusion_steps);
}

nn::ParamList<float> Policy::params() {
  nn::ParamList<float> out;
  encoders.collect("enc", out);
  cma.collect("cma", out);
  unet.collect("unet", out);
  return out;
}

nn::ParamList<float> Policy::trainable_params() {
  nn::ParamList<float> out;
  for (const auto& p : params())
    if (p.param->trainable) out.push_back(p);
  return out;
}

CmaOutput<float> Policy::observe(const EncoderInput<float>& in) const {
  return cma.forward(encoders.forward(in, nullptr), nullptr);
}

double Policy::loss(const EncoderInput<float>& in, const MatF& x0, const NoiseDraw& draw,
                    bool with_grad) {
  const MatF xk = noised_batch(x0, draw, schedule_);
  if (!with_grad) {
    const CmaOutput<float> co = observe(in);
    const MatF eps_hat = unet.forward(xk, draw.steps, co.cond, nullptr);
    return (eps_hat - draw.eps).cast<double>().squaredNorm() / static_cast<double>(draw.eps.size());
  }
  typename Encoders<float>::Cache ec;
  typename Cma<float>::Cache cc;
  typename ConditionalUNet1d<float>::Cache uc;
  const TokenBatch<float> tokens = encoders.forward(in, &ec);
  const CmaOutput<float> co = cma.forward(tokens, &cc);
  const MatF eps_hat = unet.forward(xk, draw.steps, co.cond, &uc);
  const MatF diff = eps_hat - draw.eps;
  const double n = static_cast<double>(diff.size());
  const MatF dy = diff * static_cast<float>(2.0 / n);
  const MatF dcond = unet.backward(uc, dy);
  encoders.backward(ec, cma.backward(cc, dcond));
  return diff.cast<double>().squaredNorm() / n;
}

MatF Policy::predict_noise(const MatF& xk, std::span<const int> steps, const MatF& cond) const {
  return unet.forward(xk, steps, cond, nullptr);
}

MatF Policy::sample_chunk(const EncoderInput<float>& in, std::mt19937_64& rng) const {
  const CmaOutput<float> co = observe(in);
  const MatF cond = co.cond.topRows(1);
  const EpsModel model = [this](const MatF& xk, std::span<const int> steps, const MatF& c) {
    return unet.forward(xk, steps, c, nullptr);
  };
  return ddpm_sample(model, cond, cfg_.unet.horizon, cfg_.unet.action_dim, schedule_, rng);
}

RecedingHorizonExecutor::RecedingHorizonExecutor(Planner planner, int exec_horizon)
    : planner_(std::move(planner)), exec_horizon_(exec_horizon) {
  if (exec_horizon_ < 1) throw ConfigError("exec_horizon must be >= 1");
}

std::array<float, kActionDim> RecedingHorizonExecutor::next() {
  if (queue_.empty()) {
    const MatF chunk = planner_();
    if (chunk.rows() < exec_horizon_ || chunk.cols() != kActionDim)
      throw ShapeError("planner chunk shorter than the execution horizon");
    for (int r = 0; r < exec_horizon_; ++r) {
      std::array<float, kActionDim> a{};
      for (int c = 0; c < kActionDim; ++c) a[static_cast<std::size_t>(c)] = chunk(r, c);
      queue_.push_back(a);
    }
    ++replans_;
  }
  const auto a = queue_.front();
  queue_.pop_front();
  return a;
}

FrameTable::FrameTable(const Dataset& ds, const Encoders<float>& enc, const ActionNormalizer& norm,
                       int horizon)
    : horizon_(horizon) {
  trajs_.reserve(ds.trajectories.size());
  for (const Trajectory& t : ds.trajectories) {
    const int L = t.length();
    Traj tr;
    tr.labels = t.labels;
    tr.img3.resize(L, enc.img3.feature_dim());
    tr.imgg.resize(L, enc.imgg.feature_dim());
    tr.state.resize(L, kStateDim);
    tr.tactile.resize(L, kTactileDim);
    tr.chunks.resize(L, static_cast<Eigen::Index>(horizon) * kActionDim);
    for (int f = 0; f < L; ++f) {
      const Observation& o = t.observations[static_cast<std::size_t>(f)];
      tr.img3.row(f) = enc.img3.features(o.img3).transpose();
      tr.imgg.row(f) = enc.imgg.features(o.imgg).transpose();
      for (int i = 0; i < kStateDim; ++i) tr.state(f, i) = o.state[static_cast<std::size_t>(i)];
      for (int i = 0; i < kTactileDim; ++i) tr.tactile(f, i) = o.tactile[static_cast<std::size_t>(i)];
      for (int h = 0; h < horizon; ++h) {
        const auto& a = t.actions[static_cast<std::size_t>(std::min(f + h, L - 1))];
        for (int d = 0; d < kActionDim; ++d)
          tr.chunks(f, h * kActionDim + d) = norm.normalize(a[static_cast<std::size_t>(d)], d);
      }
    }
    trajs_.push_back(std::move(tr));
  }
}

int FrameTable::label(const FrameRef& r) const {
  return trajs_[static_cast<std::size_t>(r.traj)].labels[static_cast<std::size_t>(r.frame)];
}

EncoderInput<float> FrameTable::input(std::span<const FrameRef> refs) const {
  const int B = static_cast<int>(refs.size());
  EncoderInput<float> in;
  in.batch = B;
  const auto& t0 = trajs_.front();
  in.img3_features.resize(2 * B, t0.img3.cols());
  in.imgg_features.resize(2 * B, t0.imgg.cols());
  in.state.resize(2 * B, kStateDim);
  in.tactile.resize(2 * B, kTactileDim);
  for (int b = 0; b < B; ++b) {
    const FrameRef& r = refs[static_cast<std::size_t>(b)];
    const Traj& tr = trajs_[static_cast<std::size_t>(r.traj)];
    if (r.frame < 0 || r.frame >= static_cast<int>(tr.labels.size()))
      throw std::out_of_range("frame index out of range");
    const int frames[kWindow] = {std::max(r.frame - 1, 0), r.frame};
    for (int t = 0; t < kWindow; ++t) {
      const int row = t * B + b;
      in.img3_features.row(row) = tr.img3.row(frames[t]);
      in.imgg_features.row(row) = tr.imgg.row(frames[t]);
      in.state.row(row) = tr.state.row(frames[t]);
      in.tactile.row(row) = tr.tactile.row(frames[t]);
    }
  }
  return in;
}

MatF FrameTable::targets(std::span<const FrameRef> refs) const {
  const int B = static_cast<int>(refs.size());
  MatF x0(static_cast<Eigen::Index>(B) * horizon_, kActionDim);
  for (int b = 0; b < B; ++b) {
    const FrameRef& r = refs[static_cast<std::size_t>(b)];
    const auto row = trajs_[static_cast<std::size_t>(r.traj)].chunks.row(r.frame);
    x0.middleRows(static_cast<Eigen::Index>(b) * horizon_, horizon_) =
        Eigen::Map<const MatF>(row.data(), horizon_, kActionDim);
  }
  return x0;
}

std::vector<FrameRef> FrameTable::eligible(std::span<const int> trajs, int primitive) const {
  std::vector<FrameRef> out;
  for (int ti : trajs) {
    const auto& labels = trajs_[static_cast<std::size_t>(ti)].labels;
    for (int f = 0; f < static_cast<int>(labels.size()); ++f) {
      if (primitive >= 0) {
        if (labels[static_cast<std::size_t>(f)] != primitive) continue;
        if (f > 0 && labels[static_cast<std::size_t>(f - 1)] != primitive) continue;
      }
      out.push_back({ti, f});
    }
  }
  return out;
}

void save_checkpoint(Policy& policy, const CheckpointMeta& meta, const fs::path& dir) {
  fs::create_directories(dir);
  ArrayBundle b;
  for (const auto& p : policy.params()) {
    const auto& v = p.param->value;
    b.put_f32(p.name, {v.rows(), v.cols()}, std::span<const float>(v.data(), static_cast<std::size_t>(v.size())));
  }
  write_bundle(b, dir);
  const json header = {{"format", "cmadp-checkpoint-v1"},
                       {"model", to_json(policy.config())},
                       {"step", meta.step},
                       {"ema", meta.ema},
                       {"mode", meta.mode},
                       {"seed", meta.seed},
                       {"normalizer", {{"lo", policy.normalizer().lo}, {"hi", policy.normalizer().hi}}}};
  write_text(dir / "header.json", header.dump(2) + "\n");
}

Policy load_checkpoint(const fs::path& dir, CheckpointMeta* meta) {
  json header;
  try {
    header = json::parse(read_text(dir / "header.json"));
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header in '" + dir.string() + "': " + e.what());
  }
  ModelConfig cfg;
  ActionNormalizer norm;
  CheckpointMeta m;
  try {
    cfg = model_config_from_json(header.at("model"));
    norm.lo = header.at("normalizer").at("lo").get<std::vector<float>>();
    norm.hi = header.at("normalizer").at("hi").get<std::vector<float>>();
    m.step = header.at("step").get<std::int64_t>();
    m.ema = header.at("ema").get<bool>();
    m.mode = header.at("mode").get<std::string>();
    m.seed = header.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (norm.lo.size() != kActionDim || norm.hi.size() != kActionDim)
    throw DataError("checkpoint normalizer must have 4 dimensions");
  Policy policy(cfg, norm, 0);
  const ArrayBundle b = read_bundle(dir);
  const auto params = policy.params();
  if (b.names().size() != params.size())
    throw DataError("checkpoint/config mismatch: parameter count differs");
  for (const auto& p : params) {
    auto& v = p.param->value;
    const auto& data = b.f32(p.name, {v.rows(), v.cols()});
    v = Eigen::Map<const MatF>(data.data(), v.rows(), v.cols());
  }
  if (meta) *meta = m;
  return policy;
}

}  // namespace cmadp
