#pragma once

// JSON run configuration with strict key validation. Every field has a
// default; unknown keys raise ConfigError.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmadp/policy.hpp"
#include "cmadp/synthworld.hpp"

namespace cmadp {

struct TrainConfig {
  int primitive = -1;  // -1: whole-trajectory mode, else primitive code
  int batch_size = 32;
  std::int64_t total_steps = 12000;
  double lr = 1e-4;
  bool use_ema = true;
  double ema_decay = 0.995;
  double grad_clip = 1.0;
  std::int64_t val_every = 500;
  std::int64_t log_every = 100;  // train-loss rows average this many steps
  int val_draws = 512;
  std::uint64_t val_seed = 1234;

  std::string mode_name() const;  // "whole" or "primitive:<Name>"
  void validate() const;
};

enum class FeatureKind { kEmbedding, kAllocation };

struct AnalysisConfig {
  int k = 6;
  int restarts = 50;
  int smooth_window = 9;
  int boundary_tol = 10;
  FeatureKind feature = FeatureKind::kEmbedding;
  double perplexity = 30.0;
  int tsne_iters = 500;
  std::vector<int> k_sweep{4, 5, 6, 7, 8};

  void validate() const;
};

struct PathsConfig {
  std::string data = "data";
  std::string out = "runs";
};

struct RunConfig {
  GenConfig gen;
  ModelConfig model;
  TrainConfig train;
  AnalysisConfig analysis;
  PathsConfig paths;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parses and validates; missing fields keep their defaults.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const GenConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const AnalysisConfig& c);
nlohmann::json to_json(const RunConfig& c);

GenConfig gen_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
AnalysisConfig analysis_config_from_json(const nlohmann::json& j);

/// Parses "whole" or "primitive:<Name>"; returns -1 for whole.
int parse_mode(const std::string& mode);

}  // namespace cmadp
