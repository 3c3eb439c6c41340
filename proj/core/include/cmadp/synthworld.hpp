#pragma once

// Procedural 2D kinematic assembly world. A scripted expert performs six
// primitives in a fixed order; each primitive has a distinct modality
// signature (contact-free reaching, grasp forces, insertion vibration,
// oscillatory wrist rotation) so that learned attention and embeddings can be
// checked against ground-truth labels.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cmadp {

inline constexpr int kImg3Size = 32;
inline constexpr int kImggSize = 16;
inline constexpr int kStateDim = 6;
inline constexpr int kTactileDim = 4;
inline constexpr int kActionDim = 4;
inline constexpr int kNumPrimitives = 6;
inline constexpr int kNumModalities = 4;
inline constexpr double kContactRadius = 0.03;
inline constexpr double kMaxDelta = 0.05;

enum class Primitive : std::uint8_t {
  kReachBase = 0,
  kGripMoveBase = 1,
  kReachLeg = 2,
  kGripMoveLeg = 3,
  kInsert = 4,
  kScrew = 5,
};

std::string_view primitive_name(int code);
/// Accepts the canonical names (ReachBase, GripMoveBase, ReachLeg,
/// GripMoveLeg, Insert, Screw); returns nullopt otherwise.
std::optional<int> parse_primitive(std::string_view name);

using Vec2 = std::array<double, 2>;

struct WorldState {
  Vec2 gripper_pos{0.5, 0.5};
  Vec2 gripper_vel{0.0, 0.0};
  double aperture = 1.0;
  double wrist_angle = 0.0;
  Vec2 base_pos{0.5, 0.5};
  Vec2 leg_pos{0.5, 0.5};
  bool leg_attached = false;
  double screw_progress = 0.0;
  std::array<double, 4> contact_force{0, 0, 0, 0};  // normal, shear-x, shear-y, vibration
};

struct Observation {
  std::array<float, kImg3Size * kImg3Size> img3{};
  std::array<float, kImggSize * kImggSize> imgg{};
  std::array<float, kStateDim> state{};
  std::array<float, kTactileDim> tactile{};
};

using Action = std::array<float, kActionDim>;  // dx, dy, dwrist, aperture command

struct Trajectory {
  std::vector<Observation> observations;
  std::vector<Action> actions;
  std::vector<std::uint8_t> labels;

  int length() const { return static_cast<int>(labels.size()); }
};

struct GenConfig {
  int count = 50;
  int val_count = 5;
  std::uint64_t gen_seed = 0;
  std::array<int, kNumPrimitives> nominal_durations{50, 40, 50, 50, 40, 70};
  double duration_jitter = 0.2;
  double tactile_noise = 0.01;
  double state_noise = 0.01;
  double blob_sigma_px = 1.5;
  double min_separation = 0.1;
  int max_placement_attempts = 100;
};

enum class Split { kTrain, kVal };

struct Dataset {
  std::uint64_t gen_seed = 0;
  std::vector<Trajectory> trajectories;
  std::vector<Split> split;
  std::string config_hash;

  std::vector<int> indices(Split s) const;
};

/// Renders the third-person and grip-camera images of a world state.
void render(const WorldState& world, const GenConfig& cfg,
            std::array<float, kImg3Size * kImg3Size>& img3,
            std::array<float, kImggSize * kImggSize>& imgg);

/// Runs the scripted expert from a seed-derived initial placement. Throws
/// ConfigError on non-positive durations or when no placement with the
/// required object separation is found within cfg.max_placement_attempts.
Trajectory generate_trajectory(std::uint64_t seed, const GenConfig& cfg);

/// Trajectory i uses seed gen_seed + i; the last val_count are validation.
Dataset generate_dataset(const GenConfig& cfg);

/// Stable hex digest of the generation config (FNV-1a over its JSON form).
std::string config_hash(const GenConfig& cfg);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace cmadp
