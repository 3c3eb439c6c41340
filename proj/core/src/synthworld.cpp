#include "cmadp/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cmadp/array_io.hpp"
#include "cmadp/common.hpp"

namespace cmadp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kNumPrimitives> kPrimitiveNames = {
    "ReachBase", "GripMoveBase", "ReachLeg", "GripMoveLeg", "Insert", "Screw"};

constexpr double kReachGain = 0.25;
constexpr double kCarryGain = 0.25;
constexpr int kCloseFrames = 8;
constexpr double kApertureRate = 0.2;
constexpr double kHoverOffset = 0.06;
constexpr int kScrewPeriod = 20;
constexpr double kBlobIntensity[3] = {1.0, 0.7, 0.4};  // gripper, base, leg

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
double clip_delta(double v) { return std::clamp(v, -kMaxDelta, kMaxDelta); }

double dist(const Vec2& a, const Vec2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

Vec2 clamp_pos(Vec2 p) { return {clamp01(p[0]), clamp01(p[1])}; }

Vec2 p_control(const Vec2& from, const Vec2& to, double gain) {
  return {clip_delta(gain * (to[0] - from[0])), clip_delta(gain * (to[1] - from[1]))};
}

// Gaussian-blob top-down render into an n x n image. (cx, cy) is the scene
// point at the image center; `scale` is pixels per arena unit.
template <std::size_t N>
void render_view(const WorldState& w, double cx, double cy, int n, double scale, double sigma_px,
                 std::array<float, N>& out) {
  const Vec2 objects[3] = {w.gripper_pos, w.base_pos, w.leg_pos};
  const double inv2s2 = 1.0 / (2.0 * sigma_px * sigma_px);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double x = cx + (c + 0.5 - n / 2.0) / scale;
      const double y = cy + (r + 0.5 - n / 2.0) / scale;
      double v = 0.0;
      for (int o = 0; o < 3; ++o) {
        const double dx = (x - objects[o][0]) * scale;
        const double dy = (y - objects[o][1]) * scale;
        v += kBlobIntensity[o] * std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
      out[static_cast<std::size_t>(r * n + c)] = static_cast<float>(clamp01(v));
    }
  }
}

struct Placement {
  Vec2 gripper, base, leg;
};

Placement sample_placement(std::mt19937_64& rng, const GenConfig& cfg) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  for (int attempt = 0; attempt < cfg.max_placement_attempts; ++attempt) {
    Placement p;
    p.gripper = {u(rng), u(rng)};
    p.base = {u(rng), u(rng)};
    p.leg = {u(rng), u(rng)};
    if (dist(p.gripper, p.base) >= cfg.min_separation &&
        dist(p.gripper, p.leg) >= cfg.min_separation &&
        dist(p.base, p.leg) >= cfg.min_separation)
      return p;
  }
  throw ConfigError("could not place objects with separation >= " +
                    std::to_string(cfg.min_separation) + " in " +
                    std::to_string(cfg.max_placement_attempts) + " attempts");
}

// Contact model. Forces are only produced while the gripper holds or presses
// an object; reaching phases are contact-free.
std::array<double, 4> contact_force(const WorldState& w, int phase, int tau, int duration) {
  std::array<double, 4> f{0, 0, 0, 0};
  const double nearest = std::min(dist(w.gripper_pos, w.base_pos), dist(w.gripper_pos, w.leg_pos));
  if (nearest > kContactRadius) return f;
  const double shear_gain = 5.0;
  switch (phase) {
    case 1:
    case 3:
      f[0] = 1.0 - w.aperture;
      f[1] = shear_gain * w.gripper_vel[0];
      f[2] = shear_gain * w.gripper_vel[1];
      break;
    case 4: {
      const double ramp = duration > 1 ? static_cast<double>(tau) / (duration - 1) : 1.0;
      f[0] = (1.0 - w.aperture) + ramp;
      f[1] = shear_gain * w.gripper_vel[0];
      f[2] = shear_gain * w.gripper_vel[1];
      f[3] = 0.1 + ramp * (0.3 + 0.2 * std::sin(2.0 * std::numbers::pi * tau / 4.0));
      break;
    }
    case 5:
      f[0] = 2.0;
      f[1] = 10.0 * kMaxDelta * std::sin(2.0 * std::numbers::pi * tau / kScrewPeriod);
      f[3] = (tau % kScrewPeriod) < 3 ? 1.0 : 0.2;
      break;
    default:
      break;
  }
  return f;
}

}  // namespace

std::string_view primitive_name(int code) {
  if (code < 0 || code >= kNumPrimitives) throw std::out_of_range("primitive code out of range");
  return kPrimitiveNames[static_cast<std::size_t>(code)];
}

std::optional<int> parse_primitive(std::string_view name) {
  for (int i = 0; i < kNumPrimitives; ++i)
    if (kPrimitiveNames[static_cast<std::size_t>(i)] == name) return i;
  return std::nullopt;
}

std::vector<int> Dataset::indices(Split s) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == s) out.push_back(static_cast<int>(i));
  return out;
}

void render(const WorldState& world, const GenConfig& cfg,
            std::array<float, kImg3Size * kImg3Size>& img3,
            std::array<float, kImggSize * kImggSize>& imgg) {
  render_view(world, 0.5, 0.5, kImg3Size, kImg3Size, cfg.blob_sigma_px, img3);
  // Grip camera: 2x zoom, centered on the gripper. Blob width scales with zoom.
  render_view(world, world.gripper_pos[0], world.gripper_pos[1], kImggSize, 2.0 * kImg3Size,
              2.0 * cfg.blob_sigma_px, imgg);
}

Trajectory generate_trajectory(std::uint64_t seed, const GenConfig& cfg) {
  for (int d : cfg.nominal_durations)
    if (d <= 0) throw ConfigError("primitive durations must be positive");
  if (cfg.duration_jitter < 0.0 || cfg.duration_jitter >= 1.0)
    throw ConfigError("duration_jitter must lie in [0, 1)");

  std::mt19937_64 rng(seed);
  const Placement place = sample_placement(rng, cfg);

  std::array<int, kNumPrimitives> durations{};
  std::uniform_real_distribution<double> jitter(1.0 - cfg.duration_jitter, 1.0 + cfg.duration_jitter);
  for (int p = 0; p < kNumPrimitives; ++p) {
    const double nominal = cfg.nominal_durations[static_cast<std::size_t>(p)];
    const double lo = std::ceil(nominal * (1.0 - cfg.duration_jitter));
    const double hi = std::floor(nominal * (1.0 + cfg.duration_jitter));
    durations[static_cast<std::size_t>(p)] =
        std::max(1, static_cast<int>(std::clamp(std::round(nominal * jitter(rng)), lo, hi)));
  }

  std::normal_distribution<double> tactile_noise(0.0, cfg.tactile_noise);
  std::normal_distribution<double> state_noise(0.0, cfg.state_noise);

  WorldState w;
  w.gripper_pos = place.gripper;
  w.base_pos = place.base;
  w.leg_pos = place.leg;

  Trajectory traj;
  int total = 0;
  for (int d : durations) total += d;
  traj.observations.reserve(static_cast<std::size_t>(total));
  traj.actions.reserve(static_cast<std::size_t>(total));
  traj.labels.reserve(static_cast<std::size_t>(total));

  const Vec2 center{0.5, 0.5};
  for (int phase = 0; phase < kNumPrimitives; ++phase) {
    const int duration = durations[static_cast<std::size_t>(phase)];
    for (int tau = 0; tau < duration; ++tau) {
      w.contact_force = contact_force(w, phase, tau, duration);

      Observation obs;
      render(w, cfg, obs.img3, obs.imgg);
      const double state[kStateDim] = {w.gripper_pos[0], w.gripper_pos[1], w.gripper_vel[0],
                                       w.gripper_vel[1], w.aperture,       w.wrist_angle};
      for (int i = 0; i < kStateDim; ++i)
        obs.state[static_cast<std::size_t>(i)] = static_cast<float>(state[i] + state_noise(rng));
      for (int i = 0; i < kTactileDim; ++i)
        obs.tactile[static_cast<std::size_t>(i)] =
            static_cast<float>(w.contact_force[static_cast<std::size_t>(i)] + tactile_noise(rng));

      // Scripted expert.
      Vec2 delta{0.0, 0.0};
      double dwrist = 0.0;
      double aperture_cmd = 1.0;
      bool carry_base = false;
      bool carry_leg = false;
      switch (phase) {
        case 0:
          delta = p_control(w.gripper_pos, w.base_pos, kReachGain);
          break;
        case 1:
          aperture_cmd = 0.0;
          if (tau >= kCloseFrames) {
            const Vec2 target{center[0] + w.gripper_pos[0] - w.base_pos[0],
                              center[1] + w.gripper_pos[1] - w.base_pos[1]};
            delta = p_control(w.gripper_pos, target, kCarryGain);
            carry_base = true;
          }
          break;
        case 2:
          delta = p_control(w.gripper_pos, w.leg_pos, kReachGain);
          break;
        case 3:
          aperture_cmd = 0.0;
          if (tau >= kCloseFrames) {
            const Vec2 hover = clamp_pos({w.base_pos[0], w.base_pos[1] + kHoverOffset});
            const Vec2 target{hover[0] + w.gripper_pos[0] - w.leg_pos[0],
                              hover[1] + w.gripper_pos[1] - w.leg_pos[1]};
            delta = p_control(w.gripper_pos, target, kCarryGain);
            carry_leg = true;
          }
          break;
        case 4: {
          aperture_cmd = 0.0;
          // Linear descent that reaches the hole on the final insert frame.
          const double remaining = static_cast<double>(duration - tau);
          delta = {clip_delta((w.base_pos[0] - w.leg_pos[0]) / remaining),
                   clip_delta((w.base_pos[1] - w.leg_pos[1]) / remaining)};
          carry_leg = true;
          break;
        }
        case 5:
          aperture_cmd = 0.0;
          dwrist = kMaxDelta * std::sin(2.0 * std::numbers::pi * tau / kScrewPeriod);
          break;
        default:
          break;
      }

      traj.actions.push_back({static_cast<float>(delta[0]), static_cast<float>(delta[1]),
                              static_cast<float>(dwrist), static_cast<float>(aperture_cmd)});
      traj.labels.push_back(static_cast<std::uint8_t>(phase));
      traj.observations.push_back(obs);

      // World step.
      const Vec2 before = w.gripper_pos;
      w.gripper_pos = clamp_pos({w.gripper_pos[0] + delta[0], w.gripper_pos[1] + delta[1]});
      const Vec2 moved{w.gripper_pos[0] - before[0], w.gripper_pos[1] - before[1]};
      w.gripper_vel = moved;
      if (carry_base)
        w.base_pos = clamp_pos({w.base_pos[0] + moved[0], w.base_pos[1] + moved[1]});
      if (carry_leg)
        w.leg_pos = clamp_pos({w.leg_pos[0] + moved[0], w.leg_pos[1] + moved[1]});
      w.wrist_angle += dwrist;
      w.aperture = aperture_cmd > w.aperture ? std::min(aperture_cmd, w.aperture + kApertureRate)
                                             : std::max(aperture_cmd, w.aperture - kApertureRate);
      if (phase == 4 && tau == duration - 1) w.leg_attached = true;
      if (phase == 5) w.screw_progress = static_cast<double>(tau + 1) / duration;
    }
  }
  return traj;
}

Dataset generate_dataset(const GenConfig& cfg) {
  if (cfg.count < 1) throw ConfigError("trajectory count must be >= 1");
  if (cfg.val_count < 0 || cfg.val_count >= cfg.count)
    throw ConfigError("val_count must lie in [0, count)");
  Dataset ds;
  ds.gen_seed = cfg.gen_seed;
  ds.config_hash = config_hash(cfg);
  ds.trajectories.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    ds.trajectories.push_back(generate_trajectory(cfg.gen_seed + static_cast<std::uint64_t>(i), cfg));
    ds.split.push_back(i >= cfg.count - cfg.val_count ? Split::kVal : Split::kTrain);
  }
  return ds;
}

std::string config_hash(const GenConfig& cfg) {
  std::ostringstream ss;
  ss.precision(17);
  ss << cfg.count << ',' << cfg.val_count << ',' << cfg.gen_seed;
  for (int d : cfg.nominal_durations) ss << ',' << d;
  ss << ',' << cfg.duration_jitter << ',' << cfg.tactile_noise << ',' << cfg.state_noise << ','
     << cfg.blob_sigma_px << ',' << cfg.min_separation << ',' << cfg.max_placement_attempts;
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : ss.str()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

std::string traj_dirname(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "traj_%03zu", i);
  return buf;
}

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  json split = json::array();
  for (Split s : ds.split) split.push_back(s == Split::kTrain ? "train" : "val");
  json meta = {{"gen_seed", ds.gen_seed},
               {"count", ds.trajectories.size()},
               {"split", split},
               {"config_hash", ds.config_hash}};
  write_text(dir / "dataset.json", meta.dump(2) + "\n");

  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& t = ds.trajectories[i];
    const auto L = static_cast<std::int64_t>(t.length());
    std::vector<float> img3, imgg, state, tactile, action;
    img3.reserve(static_cast<std::size_t>(L) * kImg3Size * kImg3Size);
    imgg.reserve(static_cast<std::size_t>(L) * kImggSize * kImggSize);
    for (const auto& o : t.observations) {
      img3.insert(img3.end(), o.img3.begin(), o.img3.end());
      imgg.insert(imgg.end(), o.imgg.begin(), o.imgg.end());
      state.insert(state.end(), o.state.begin(), o.state.end());
      tactile.insert(tactile.end(), o.tactile.begin(), o.tactile.end());
    }
    for (const auto& a : t.actions) action.insert(action.end(), a.begin(), a.end());

    ArrayBundle b;
    b.put_f32("img3", {L, kImg3Size, kImg3Size}, img3);
    b.put_f32("imgg", {L, kImggSize, kImggSize}, imgg);
    b.put_f32("state", {L, kStateDim}, state);
    b.put_f32("tactile", {L, kTactileDim}, tactile);
    b.put_f32("action", {L, kActionDim}, action);
    b.put_u8("label", {L}, t.labels);
    write_bundle(b, dir / traj_dirname(i));
  }
}

Dataset read_dataset(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_text(dir / "dataset.json"));
  } catch (const json::exception& e) {
    throw DataError("malformed dataset.json in '" + dir.string() + "': " + e.what());
  }
  Dataset ds;
  std::size_t count = 0;
  try {
    ds.gen_seed = meta.at("gen_seed").get<std::uint64_t>();
    count = meta.at("count").get<std::size_t>();
    ds.config_hash = meta.value("config_hash", std::string{});
    const auto& split = meta.at("split");
    if (split.size() != count) throw DataError("split tag count does not match trajectory count");
    for (const auto& s : split) {
      const auto tag = s.get<std::string>();
      if (tag == "train")
        ds.split.push_back(Split::kTrain);
      else if (tag == "val")
        ds.split.push_back(Split::kVal);
      else
        throw DataError("unknown split tag '" + tag + "'");
    }
  } catch (const json::exception& e) {
    throw DataError("malformed dataset.json: " + std::string(e.what()));
  }

  for (std::size_t i = 0; i < count; ++i) {
    const ArrayBundle b = read_bundle(dir / traj_dirname(i));
    const RawArray& label = b.at("label");
    if (label.dtype != DType::kU8 || label.shape.size() != 1)
      throw ShapeError("label array must be u8 of shape (L)");
    const std::int64_t L = label.shape[0];
    const auto& img3 = b.f32("img3", {L, kImg3Size, kImg3Size});
    const auto& imgg = b.f32("imgg", {L, kImggSize, kImggSize});
    const auto& state = b.f32("state", {L, kStateDim});
    const auto& tactile = b.f32("tactile", {L, kTactileDim});
    const auto& action = b.f32("action", {L, kActionDim});

    Trajectory t;
    t.labels = label.u8;
    t.observations.resize(static_cast<std::size_t>(L));
    t.actions.resize(static_cast<std::size_t>(L));
    for (std::int64_t f = 0; f < L; ++f) {
      auto& o = t.observations[static_cast<std::size_t>(f)];
      std::copy_n(img3.begin() + f * kImg3Size * kImg3Size, kImg3Size * kImg3Size, o.img3.begin());
      std::copy_n(imgg.begin() + f * kImggSize * kImggSize, kImggSize * kImggSize, o.imgg.begin());
      std::copy_n(state.begin() + f * kStateDim, kStateDim, o.state.begin());
      std::copy_n(tactile.begin() + f * kTactileDim, kTactileDim, o.tactile.begin());
      std::copy_n(action.begin() + f * kActionDim, kActionDim,
                  t.actions[static_cast<std::size_t>(f)].begin());
    }
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

}  // namespace cmadp
