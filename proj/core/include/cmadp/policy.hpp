#pragma once

// The assembled multimodal diffusion policy: encoders -> cross-modality
// attention -> conditional U-Net noise predictor, plus the frame table that
// turns a dataset into training windows and chunk targets.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmadp/cma.hpp"
#include "cmadp/diffusion.hpp"
#include "cmadp/encoders.hpp"
#include "cmadp/synthworld.hpp"
#include "cmadp/unet.hpp"

namespace cmadp {

struct ModelConfig {
  EncoderConfig encoder;
  CmaConfig cma;
  UNetConfig unet;
  int diffusion_steps = 100;
  int exec_horizon = 4;

  void validate() const;
};

class Policy {
 public:
  Policy() = default;
  Policy(const ModelConfig& cfg, ActionNormalizer normalizer, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const ActionNormalizer& normalizer() const { return normalizer_; }

  /// Every parameter, frozen ones included, in a fixed order.
  nn::ParamList<float> params();
  nn::ParamList<float> trainable_params();

  CmaOutput<float> observe(const EncoderInput<float>& in) const;

  /// Mean squared epsilon error for given targets and noise draws; when
  /// `with_grad` is set, gradients are accumulated into the parameters.
  double loss(const EncoderInput<float>& in, const MatF& x0, const NoiseDraw& draw, bool with_grad);

  /// Noise predictor bound to a fixed conditioning batch.
  MatF predict_noise(const MatF& xk, std::span<const int> steps, const MatF& cond) const;

  /// Samples one normalized chunk (horizon x action_dim) for batch element 0.
  MatF sample_chunk(const EncoderInput<float>& in, std::mt19937_64& rng) const;

  Encoders<float> encoders;
  Cma<float> cma;
  ConditionalUNet1d<float> unet;

 private:
  ModelConfig cfg_;
  NoiseSchedule schedule_ = NoiseSchedule::linear(2);
  ActionNormalizer normalizer_;
};

/// Emits a predicted chunk's first `exec_horizon` actions one at a time and
/// asks the planner for a new chunk once they are consumed.
class RecedingHorizonExecutor {
 public:
  using Planner = std::function<MatF()>;

  RecedingHorizonExecutor(Planner planner, int exec_horizon);
  std::array<float, kActionDim> next();
  int replans() const { return replans_; }

 private:
  Planner planner_;
  int exec_horizon_;
  std::deque<std::array<float, kActionDim>> queue_;
  int replans_ = 0;
};

struct FrameRef {
  int traj = 0;
  int frame = 0;
};

/// Per-frame cached inputs: frozen image features, proprioception, tactile,
/// normalized action chunk targets and labels.
class FrameTable {
 public:
  FrameTable(const Dataset& ds, const Encoders<float>& enc, const ActionNormalizer& norm,
             int horizon);

  int num_trajectories() const { return static_cast<int>(trajs_.size()); }
  int length(int traj) const { return static_cast<int>(trajs_[static_cast<std::size_t>(traj)].labels.size()); }
  int label(const FrameRef& r) const;

  /// Window (frame-1, frame); frame 0 duplicates itself.
  EncoderInput<float> input(std::span<const FrameRef> refs) const;
  /// Normalized chunks actions[frame .. frame+H), padded with the last action.
  MatF targets(std::span<const FrameRef> refs) const;

  /// Frames of `trajs`; with `primitive` set, only frames whose window lies
  /// inside a segment of that primitive (or frame 0 of a trajectory).
  std::vector<FrameRef> eligible(std::span<const int> trajs, int primitive = -1) const;

 private:
  struct Traj {
    MatF img3, imgg, state, tactile, chunks;  // per-frame rows; chunks L x (H*A)
    std::vector<std::uint8_t> labels;
  };
  std::vector<Traj> trajs_;
  int horizon_;
};

struct CheckpointMeta {
  std::int64_t step = 0;
  bool ema = false;
  std::string mode = "whole";
  std::uint64_t seed = 0;
};

void save_checkpoint(Policy& policy, const CheckpointMeta& meta, const std::filesystem::path& dir);
Policy load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta = nullptr);

}  // namespace cmadp
