#pragma once

// Post-hoc analysis of a trained policy: per-frame attention allocation and
// embeddings, k-means segmentation scored against ground-truth primitives,
// and 2D projections (PCA, exact t-SNE).

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmadp/config.hpp"
#include "cmadp/policy.hpp"

namespace cmadp {

struct FrameFeatures {
  int traj = 0;
  int frame = 0;
  int gt_label = 0;
  VecD embedding;  // mean of the CMA output tokens
  std::array<double, kNumModalities> allocation{};
  MatD attention;  // 8 x 8 head-averaged last-layer weights
};

/// One record per frame of trajectory `traj` of the table, window (t-1, t).
std::vector<FrameFeatures> extract_features(const Policy& policy, const FrameTable& table, int traj);
/// Convenience overload for a standalone trajectory.
std::vector<FrameFeatures> extract_features(const Policy& policy, const Trajectory& traj);

MatD feature_matrix(std::span<const FrameFeatures> feats, FeatureKind kind);

/// CSV with traj, frame, label, four allocation columns, the embedding
/// columns and (optionally) the 64 attention-matrix entries.
std::string features_csv(std::span<const FrameFeatures> feats, bool with_matrix);

struct KMeansResult {
  std::vector<int> ids;
  MatD centroids;
  double inertia = 0.0;
  std::vector<double> restart_inertia;  // final inertia of every restart
  std::vector<double> inertia_trace;    // per-iteration inertia of the best restart
};

/// k-means++ seeding and Lloyd iterations (centroid shift < tol or max_iter),
/// best of `restarts` by inertia. Throws DataError when rows < k.
KMeansResult kmeans(const MatD& x, int k, int restarts, std::uint64_t seed, int max_iter = 300,
                    double tol = 1e-6);

struct LabelMatch {
  std::vector<int> permutation;  // cluster id -> label, -1 when unmatched
  double accuracy = 0.0;
};

/// Exhaustive search over injective cluster->label assignments maximizing
/// frame accuracy. Throws ConfigError for more than 8 clusters.
LabelMatch match_labels(std::span<const int> pred, std::span<const int> gt, int num_clusters,
                        int num_labels = kNumPrimitives);

/// Normalized mutual information I/sqrt(H_pred H_gt); 1 when both labelings
/// are constant, 0 when exactly one is.
double nmi(std::span<const int> pred, std::span<const int> gt);

/// Categorical mode filter with truncated windows at the edges. Ties keep
/// the center value when it is among the modes, else the smallest id.
std::vector<int> mode_smooth(std::span<const int> ids, int window);
std::vector<int> boundaries(std::span<const int> ids);
/// Greedy one-to-one matching within +-tol frames.
double boundary_f1(std::span<const int> pred, std::span<const int> gt, int tol);

double silhouette(const MatD& x, std::span<const int> ids);

MatD pca2(const MatD& x);

struct TsneResult {
  MatD embedding;                       // M x 2
  std::vector<std::pair<int, double>> kl_trace;  // (iteration, KL) every 10 iterations
  double kl_after_exaggeration = 0.0;
  double kl_final = 0.0;
  double effective_perplexity = 0.0;
};

/// Exact t-SNE. Perplexity is capped at (M-1)/3. Throws DataError for
/// M < 10 or all-identical rows.
TsneResult tsne(const MatD& x, double perplexity, int iters, std::uint64_t seed);

struct SegmentationMetrics {
  double frame_accuracy = 0.0;
  double nmi = 0.0;
  double boundary_f1 = 0.0;
};

struct SegmentationResult {
  std::vector<int> gt;
  std::vector<int> cluster_ids;
  std::vector<int> smoothed_ids;
  std::vector<int> boundaries;
  std::vector<int> gt_boundaries;
  std::vector<int> permutation;
  SegmentationMetrics metrics;

  nlohmann::json to_json() const;
};

/// Scores given cluster ids: smoothing, boundaries, matching, NMI, F1.
SegmentationResult score_segmentation(std::span<const int> cluster_ids, std::span<const int> gt, int k,
                                      const AnalysisConfig& cfg);

/// Features -> k-means -> scoring, for one trajectory.
SegmentationResult segment_features(std::span<const FrameFeatures> feats, const AnalysisConfig& cfg,
                                    std::uint64_t seed);
SegmentationResult segment_trajectory(const Policy& policy, const Trajectory& traj, const AnalysisConfig& cfg,
                                      std::uint64_t seed);

struct KSweepRow {
  int k = 0;
  double inertia = 0.0;
  double silhouette = 0.0;
};
std::vector<KSweepRow> k_sweep(const MatD& x, std::span<const int> ks, int restarts, std::uint64_t seed);

/// Mean allocation vector of the frames carrying each label (NaN rows for
/// labels that never occur).
std::array<std::array<double, kNumModalities>, kNumPrimitives> mean_allocation_by_label(
    std::span<const FrameFeatures> feats);

}  // namespace cmadp
