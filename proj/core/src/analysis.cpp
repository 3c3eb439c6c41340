#include "cmadp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace cmadp {

using nlohmann::json;

namespace {

constexpr int kFeatureChunk = 64;
constexpr int kMaxMatchClusters = 8;

void append_num(std::string& s, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  s += buf;
}

double sq_dist(const MatD& a, Eigen::Index i, const MatD& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

}  // namespace

std::vector<FrameFeatures> extract_features(const Policy& policy, const FrameTable& table, int traj) {
  const int L = table.length(traj);
  if (L < 1) throw DataError("trajectory is empty");
  std::vector<FrameFeatures> out;
  out.reserve(static_cast<std::size_t>(L));
  std::vector<FrameRef> refs;
  for (int start = 0; start < L; start += kFeatureChunk) {
    refs.clear();
    for (int f = start; f < std::min(L, start + kFeatureChunk); ++f) refs.push_back({traj, f});
    const CmaOutput<float> co = policy.observe(table.input(refs));
    for (std::size_t b = 0; b < refs.size(); ++b) {
      FrameFeatures ff;
      ff.traj = traj;
      ff.frame = refs[b].frame;
      ff.gt_label = table.label(refs[b]);
      ff.embedding = co.embedding(static_cast<int>(b)).cast<double>();
      ff.attention = co.attention_matrix(static_cast<int>(b)).cast<double>();
      ff.allocation = allocation<double>(ff.attention);
      out.push_back(std::move(ff));
    }
  }
  return out;
}

std::vector<FrameFeatures> extract_features(const Policy& policy, const Trajectory& traj) {
  Dataset ds;
  ds.trajectories.push_back(traj);
  ds.split.push_back(Split::kVal);
  const FrameTable table(ds, policy.encoders, policy.normalizer(), policy.config().unet.horizon);
  return extract_features(policy, table, 0);
}

MatD feature_matrix(std::span<const FrameFeatures> feats, FeatureKind kind) {
  if (feats.empty()) throw DataError("no features");
  const Eigen::Index d =
      kind == FeatureKind::kEmbedding ? feats.front().embedding.size() : kNumModalities;
  MatD x(static_cast<Eigen::Index>(feats.size()), d);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (kind == FeatureKind::kEmbedding)
      x.row(static_cast<Eigen::Index>(i)) = feats[i].embedding.transpose();
    else
      for (int m = 0; m < kNumModalities; ++m)
        x(static_cast<Eigen::Index>(i), m) = feats[i].allocation[static_cast<std::size_t>(m)];
  }
  return x;
}

std::string features_csv(std::span<const FrameFeatures> feats, bool with_matrix) {
  std::string s = "traj,frame,label,alloc_img3,alloc_imgg,alloc_state,alloc_tactile";
  const Eigen::Index d = feats.empty() ? kEmbedDim : feats.front().embedding.size();
  for (Eigen::Index i = 0; i < d; ++i) s += ",emb_" + std::to_string(i);
  if (with_matrix)
    for (int i = 0; i < kTokens * kTokens; ++i) s += ",attn_" + std::to_string(i);
  s += '\n';
  for (const auto& f : feats) {
    s += std::to_string(f.traj) + "," + std::to_string(f.frame) + "," + std::to_string(f.gt_label);
    for (double a : f.allocation) {
      s += ',';
      append_num(s, a);
    }
    for (Eigen::Index i = 0; i < f.embedding.size(); ++i) {
      s += ',';
      append_num(s, f.embedding(i));
    }
    if (with_matrix)
      for (Eigen::Index i = 0; i < f.attention.size(); ++i) {
        s += ',';
        append_num(s, f.attention.data()[i]);
      }
    s += '\n';
  }
  return s;
}

KMeansResult kmeans(const MatD& x, int k, int restarts, std::uint64_t seed, int max_iter, double tol) {
  const Eigen::Index m = x.rows();
  if (k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (m < k) throw DataError("kmeans: fewer points than clusters");
  if (restarts < 1) throw ConfigError("kmeans: restarts must be >= 1");

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  std::vector<int> ids(static_cast<std::size_t>(m));

  auto assign = [&](const MatD& c) {
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      int arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        const double d = sq_dist(x, i, c, j);
        if (d < bd) {
          bd = d;
          arg = j;
        }
      }
      ids[static_cast<std::size_t>(i)] = arg;
      inertia += bd;
    }
    return inertia;
  };

  for (int r = 0; r < restarts; ++r) {
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(r));
    // k-means++ seeding.
    MatD c(k, x.cols());
    std::uniform_int_distribution<Eigen::Index> first(0, m - 1);
    c.row(0) = x.row(first(rng));
    std::vector<double> d2(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) d2[static_cast<std::size_t>(i)] = sq_dist(x, i, c, 0);
    for (int j = 1; j < k; ++j) {
      const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
      Eigen::Index pick = 0;
      if (total > 0.0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double target = u(rng);
        for (pick = 0; pick < m - 1; ++pick) {
          target -= d2[static_cast<std::size_t>(pick)];
          if (target <= 0.0) break;
        }
      } else {
        pick = first(rng);
      }
      c.row(j) = x.row(pick);
      for (Eigen::Index i = 0; i < m; ++i)
        d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], sq_dist(x, i, c, j));
    }

    std::vector<double> trace;
    for (int it = 0; it < max_iter; ++it) {
      trace.push_back(assign(c));
      MatD next = MatD::Zero(k, x.cols());
      std::vector<int> counts(static_cast<std::size_t>(k), 0);
      for (Eigen::Index i = 0; i < m; ++i) {
        next.row(ids[static_cast<std::size_t>(i)]) += x.row(i);
        ++counts[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])];
      }
      double shift = 0.0;
      for (int j = 0; j < k; ++j) {
        if (counts[static_cast<std::size_t>(j)] == 0)
          next.row(j) = c.row(j);
        else
          next.row(j) /= counts[static_cast<std::size_t>(j)];
        shift = std::max(shift, (next.row(j) - c.row(j)).norm());
      }
      c = std::move(next);
      if (shift < tol) break;
    }
    const double inertia = assign(c);
    trace.push_back(inertia);
    best.restart_inertia.push_back(inertia);
    if (inertia < best.inertia) {
      best.inertia = inertia;
      best.ids = ids;
      best.centroids = c;
      best.inertia_trace = std::move(trace);
    }
  }
  return best;
}

LabelMatch match_labels(std::span<const int> pred, std::span<const int> gt, int num_clusters,
                        int num_labels) {
  if (pred.size() != gt.size()) throw DataError("match_labels: length mismatch");
  if (num_clusters > kMaxMatchClusters)
    throw ConfigError("match_labels: at most 8 clusters supported");
  if (num_clusters < 1 || num_labels < 1) throw ConfigError("match_labels: empty label sets");
  // counts[c][l] = frames with cluster c and label l
  std::vector<std::vector<int>> counts(static_cast<std::size_t>(num_clusters),
                                       std::vector<int>(static_cast<std::size_t>(num_labels), 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= num_clusters || gt[i] < 0 || gt[i] >= num_labels)
      throw DataError("match_labels: id out of range");
    ++counts[static_cast<std::size_t>(pred[i])][static_cast<std::size_t>(gt[i])];
  }

  std::vector<int> current(static_cast<std::size_t>(num_clusters), -1);
  std::vector<bool> used(static_cast<std::size_t>(num_labels), false);
  LabelMatch best;
  best.permutation = current;
  int best_hits = -1;
  std::function<void(int, int)> search = [&](int c, int hits) {
    if (c == num_clusters) {
      if (hits > best_hits) {
        best_hits = hits;
        best.permutation = current;
      }
      return;
    }
    for (int l = 0; l < num_labels; ++l) {
      if (used[static_cast<std::size_t>(l)]) continue;
      used[static_cast<std::size_t>(l)] = true;
      current[static_cast<std::size_t>(c)] = l;
      search(c + 1, hits + counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(l)]);
      used[static_cast<std::size_t>(l)] = false;
    }
    current[static_cast<std::size_t>(c)] = -1;
    search(c + 1, hits);
  };
  search(0, 0);
  best.accuracy = pred.empty() ? 1.0 : static_cast<double>(best_hits) / static_cast<double>(pred.size());
  return best;
}

double nmi(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw DataError("nmi: length mismatch");
  if (pred.empty()) return 1.0;
  const auto n = static_cast<double>(pred.size());
  std::map<int, double> pa, pb;
  std::map<std::pair<int, int>, double> pab;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pa[pred[i]] += 1.0;
    pb[gt[i]] += 1.0;
    pab[{pred[i], gt[i]}] += 1.0;
  }
  auto entropy = [n](const std::map<int, double>& m) {
    double h = 0.0;
    for (const auto& [key, c] : m) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double ha = entropy(pa), hb = entropy(pb);
  if (pa.size() == 1 && pb.size() == 1) return 1.0;
  if (pa.size() == 1 || pb.size() == 1) return 0.0;
  double mi = 0.0;
  for (const auto& [key, c] : pab) {
    const double pxy = c / n;
    mi += pxy * std::log(pxy / ((pa[key.first] / n) * (pb[key.second] / n)));
  }
  return std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0);
}

std::vector<int> mode_smooth(std::span<const int> ids, int window) {
  if (window < 1 || window % 2 == 0) throw ConfigError("mode_smooth: window must be odd");
  const int n = static_cast<int>(ids.size());
  const int half = window / 2;
  std::vector<int> out(ids.size());
  std::map<int, int> counts;
  for (int i = 0; i < n; ++i) {
    counts.clear();
    for (int j = std::max(0, i - half); j <= std::min(n - 1, i + half); ++j) ++counts[ids[static_cast<std::size_t>(j)]];
    int best_count = 0;
    for (const auto& [id, c] : counts) best_count = std::max(best_count, c);
    const int center = ids[static_cast<std::size_t>(i)];
    if (counts[center] == best_count) {
      out[static_cast<std::size_t>(i)] = center;
    } else {
      for (const auto& [id, c] : counts)
        if (c == best_count) {
          out[static_cast<std::size_t>(i)] = id;
          break;
        }
    }
  }
  return out;
}

std::vector<int> boundaries(std::span<const int> ids) {
  std::vector<int> b;
  for (std::size_t i = 1; i < ids.size(); ++i)
    if (ids[i] != ids[i - 1]) b.push_back(static_cast<int>(i));
  return b;
}

double boundary_f1(std::span<const int> pred, std::span<const int> gt, int tol) {
  if (pred.empty() && gt.empty()) return 1.0;
  if (pred.empty() || gt.empty()) return 0.0;
  std::vector<bool> taken(gt.size(), false);
  int matched = 0;
  for (int p : pred) {
    int best = -1;
    int best_d = tol + 1;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (taken[j]) continue;
      const int d = std::abs(gt[j] - p);
      if (d <= tol && d < best_d) {
        best_d = d;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      ++matched;
    }
  }
  if (matched == 0) return 0.0;
  const double precision = static_cast<double>(matched) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(matched) / static_cast<double>(gt.size());
  return 2.0 * precision * recall / (precision + recall);
}

double silhouette(const MatD& x, std::span<const int> ids) {
  const Eigen::Index m = x.rows();
  if (static_cast<std::size_t>(m) != ids.size()) throw DataError("silhouette: length mismatch");
  const int k = ids.empty() ? 0 : *std::max_element(ids.begin(), ids.end()) + 1;
  std::vector<int> size(static_cast<std::size_t>(k), 0);
  for (int id : ids) ++size[static_cast<std::size_t>(id)];
  int nonempty = 0;
  for (int s : size) nonempty += s > 0 ? 1 : 0;
  if (nonempty < 2) return 0.0;
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < m; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < m; ++j)
      if (j != i) sums[static_cast<std::size_t>(ids[static_cast<std::size_t>(j)])] += std::sqrt(sq_dist(x, i, x, j));
    const int own = ids[static_cast<std::size_t>(i)];
    if (size[static_cast<std::size_t>(own)] < 2) continue;  // singleton: s = 0
    const double a = sums[static_cast<std::size_t>(own)] / (size[static_cast<std::size_t>(own)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      if (c != own && size[static_cast<std::size_t>(c)] > 0)
        b = std::min(b, sums[static_cast<std::size_t>(c)] / size[static_cast<std::size_t>(c)]);
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(m);
}

MatD pca2(const MatD& x) {
  if (x.rows() < 2) throw DataError("pca2: need at least two rows");
  const MatD centered = x.rowwise() - x.colwise().mean();
  if (x.cols() < 2) {
    MatD out = MatD::Zero(x.rows(), 2);
    out.col(0) = centered.col(0);
    return out;
  }
  const MatD cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<MatD> eig(cov);
  MatD basis(x.cols(), 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(x.cols() - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(c) = v;
  }
  return centered * basis;
}

namespace {

// Conditional affinities with per-point precision found by bisection so the
// row entropy matches log(perplexity).
MatD joint_probabilities(const MatD& d2, double perplexity) {
  const Eigen::Index m = d2.rows();
  MatD p = MatD::Zero(m, m);
  const double target = std::log(perplexity);
  for (Eigen::Index i = 0; i < m; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j)
      if (j != i) dmin = std::min(dmin, d2(i, j));
    Eigen::RowVectorXd row(m);
    for (int it = 0; it < 200; ++it) {
      double sum = 0.0, dot = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        const double v = j == i ? 0.0 : std::exp(-(d2(i, j) - dmin) * beta);
        row(j) = v;
        sum += v;
        dot += (d2(i, j) - dmin) * v;
      }
      const double h = std::log(sum) + beta * dot / sum;
      p.row(i) = row / sum;
      if (std::abs(std::exp(h) - perplexity) < 1e-4) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  MatD joint = (p + p.transpose()) / (2.0 * static_cast<double>(m));
  return joint.cwiseMax(1e-12);
}

double kl_divergence(const MatD& p, const MatD& y) {
  const Eigen::Index m = y.rows();
  MatD num(m, m);
  double z = 0.0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
      z += num(i, j);
    }
  double kl = 0.0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      if (i != j) kl += p(i, j) * std::log(p(i, j) / std::max(num(i, j) / z, 1e-12));
  return kl;
}

}  // namespace

TsneResult tsne(const MatD& x, double perplexity, int iters, std::uint64_t seed) {
  const Eigen::Index m = x.rows();
  if (m < 10) throw DataError("tsne: need at least 10 points");
  if (!x.allFinite()) throw DataError("tsne: non-finite input");
  const MatD centered = x.rowwise() - x.colwise().mean();
  if (centered.squaredNorm() == 0.0) throw DataError("tsne: all points identical");

  constexpr int kExaggerationIters = 100;
  constexpr double kExaggeration = 12.0;
  constexpr double kMomentum = 0.8;

  TsneResult r;
  r.effective_perplexity = std::min(perplexity, static_cast<double>(m - 1) / 3.0);

  MatD d2(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) d2(i, j) = sq_dist(x, i, x, j);
  const MatD p = joint_probabilities(d2, r.effective_perplexity);

  // PCA initialization scaled to a 1e-2 standard deviation; a tiny seeded
  // jitter separates points that coincide in the projection.
  MatD y = pca2(x);
  const double sd = std::sqrt((y.col(0).array() - y.col(0).mean()).square().sum() / static_cast<double>(m));
  y *= sd > 0.0 ? 1e-2 / sd : 1.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 1e-6);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] += jitter(rng);

  const double lr = std::max(static_cast<double>(m) / kExaggeration / 4.0, 50.0);
  MatD vel = MatD::Zero(m, 2);
  MatD gains = MatD::Ones(m, 2);
  MatD num(m, m);
  for (int it = 0; it < iters; ++it) {
    if (it == kExaggerationIters) r.kl_after_exaggeration = kl_divergence(p, y);
    if (it % 10 == 0) r.kl_trace.emplace_back(it, kl_divergence(p, y));
    const double exag = it < kExaggerationIters ? kExaggeration : 1.0;
    double z = 0.0;
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j) {
        num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        z += num(i, j);
      }
    MatD grad = MatD::Zero(m, 2);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j) {
        if (i == j) continue;
        const double w = (exag * p(i, j) - num(i, j) / z) * num(i, j);
        grad.row(i) += 4.0 * w * (y.row(i) - y.row(j));
      }
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      double& g = gains.data()[i];
      g = (grad.data()[i] > 0.0) != (vel.data()[i] > 0.0) ? g + 0.2 : g * 0.8;
      g = std::max(g, 0.01);
      vel.data()[i] = kMomentum * vel.data()[i] - lr * g * grad.data()[i];
    }
    y += vel;
    y = y.rowwise() - y.colwise().mean();
  }
  r.kl_final = kl_divergence(p, y);
  r.kl_trace.emplace_back(iters, r.kl_final);
  if (iters <= kExaggerationIters) r.kl_after_exaggeration = r.kl_final;
  r.embedding = std::move(y);
  return r;
}

json SegmentationResult::to_json() const {
  return {{"frames", cluster_ids.size()},
          {"cluster_ids", cluster_ids},
          {"smoothed_ids", smoothed_ids},
          {"boundaries", boundaries},
          {"gt_labels", gt},
          {"gt_boundaries", gt_boundaries},
          {"permutation", permutation},
          {"metrics",
           {{"frame_accuracy", metrics.frame_accuracy},
            {"nmi", metrics.nmi},
            {"boundary_f1", metrics.boundary_f1}}}};
}

SegmentationResult score_segmentation(std::span<const int> cluster_ids, std::span<const int> gt, int k,
                                      const AnalysisConfig& cfg) {
  if (cluster_ids.size() != gt.size()) throw DataError("segmentation: length mismatch");
  SegmentationResult r;
  r.gt.assign(gt.begin(), gt.end());
  r.cluster_ids.assign(cluster_ids.begin(), cluster_ids.end());
  r.smoothed_ids = mode_smooth(cluster_ids, cfg.smooth_window);
  r.boundaries = boundaries(r.smoothed_ids);
  r.gt_boundaries = boundaries(gt);
  const LabelMatch match = match_labels(r.smoothed_ids, gt, k);
  r.permutation = match.permutation;
  r.metrics.frame_accuracy = match.accuracy;
  r.metrics.nmi = nmi(r.smoothed_ids, gt);
  r.metrics.boundary_f1 = boundary_f1(r.boundaries, r.gt_boundaries, cfg.boundary_tol);
  return r;
}

SegmentationResult segment_features(std::span<const FrameFeatures> feats, const AnalysisConfig& cfg,
                                    std::uint64_t seed) {
  const MatD x = feature_matrix(feats, cfg.feature);
  const KMeansResult km = kmeans(x, cfg.k, cfg.restarts, seed);
  std::vector<int> gt;
  gt.reserve(feats.size());
  for (const auto& f : feats) gt.push_back(f.gt_label);
  return score_segmentation(km.ids, gt, cfg.k, cfg);
}

SegmentationResult segment_trajectory(const Policy& policy, const Trajectory& traj,
                                      const AnalysisConfig& cfg, std::uint64_t seed) {
  return segment_features(extract_features(policy, traj), cfg, seed);
}

std::vector<KSweepRow> k_sweep(const MatD& x, std::span<const int> ks, int restarts, std::uint64_t seed) {
  std::vector<KSweepRow> rows;
  for (int k : ks) {
    if (k > x.rows()) continue;
    const KMeansResult km = kmeans(x, k, restarts, seed);
    rows.push_back({k, km.inertia, silhouette(x, km.ids)});
  }
  return rows;
}

std::array<std::array<double, kNumModalities>, kNumPrimitives> mean_allocation_by_label(
    std::span<const FrameFeatures> feats) {
  std::array<std::array<double, kNumModalities>, kNumPrimitives> sums{};
  std::array<int, kNumPrimitives> counts{};
  for (const auto& f : feats) {
    const auto l = static_cast<std::size_t>(f.gt_label);
    ++counts[l];
    for (std::size_t m = 0; m < kNumModalities; ++m) sums[l][m] += f.allocation[m];
  }
  for (std::size_t l = 0; l < kNumPrimitives; ++l)
    for (std::size_t m = 0; m < kNumModalities; ++m)
      sums[l][m] = counts[l] > 0 ? sums[l][m] / counts[l] : std::numeric_limits<double>::quiet_NaN();
  return sums;
}

}  // namespace cmadp
