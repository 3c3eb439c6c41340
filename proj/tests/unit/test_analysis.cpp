#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "cmadp/analysis.hpp"
#include "cmadp/trainer.hpp"
#include "fixtures.hpp"

using namespace cmadp;

namespace {

MatD two_clouds(int per, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.1);
  MatD x(2 * per, 3);
  for (int i = 0; i < 2 * per; ++i)
    for (int j = 0; j < 3; ++j) x(i, j) = n(rng) + (i < per ? -10.0 : 10.0);
  return x;
}

// Independent NMI from joint counts in long double.
double nmi_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<int, int>, long double> joint;
  std::map<int, long double> pa, pb;
  const long double n = static_cast<long double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1 / n;
    pa[a[i]] += 1 / n;
    pb[b[i]] += 1 / n;
  }
  long double mi = 0, ha = 0, hb = 0;
  for (const auto& [k, p] : joint) mi += p * std::log(p / (pa[k.first] * pb[k.second]));
  for (const auto& [k, p] : pa) ha -= p * std::log(p);
  for (const auto& [k, p] : pb) hb -= p * std::log(p);
  return static_cast<double>(mi / std::sqrt(ha * hb));
}

std::vector<int> balanced_gt(int per) {
  std::vector<int> gt;
  for (int l = 0; l < 6; ++l) gt.insert(gt.end(), static_cast<std::size_t>(per), l);
  return gt;
}

}  // namespace

TEST(KMeans, SingleClusterIsTheMean) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  MatD x(50, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  const auto r = kmeans(x, 1, 5, 0);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  EXPECT_LT((r.centroids.row(0) - mean).cwiseAbs().maxCoeff(), 1e-12);
  const double total = (x.rowwise() - mean).squaredNorm();
  EXPECT_NEAR(r.inertia, total, 1e-9 * total);
}

TEST(KMeans, SeparatesWellSeparatedClouds) {
  std::mt19937_64 rng(2);
  const MatD x = two_clouds(40, rng);
  const auto r = kmeans(x, 2, 10, 3);
  for (int i = 0; i < 80; ++i) {
    EXPECT_EQ(r.ids[static_cast<std::size_t>(i)], r.ids[i < 40 ? 0 : 40]);
    // Brute-force nearest centroid.
    double best = 1e300;
    int arg = -1;
    for (int c = 0; c < 2; ++c) {
      const double d = (x.row(i) - r.centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    EXPECT_EQ(arg, r.ids[static_cast<std::size_t>(i)]);
  }
  EXPECT_NE(r.ids[0], r.ids[40]);
}

TEST(KMeans, InertiaNeverIncreasesAcrossLloydIterations) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  MatD x(300, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  const auto r = kmeans(x, 6, 50, 0);
  ASSERT_GE(r.inertia_trace.size(), 2u);
  for (std::size_t i = 1; i < r.inertia_trace.size(); ++i)
    EXPECT_LE(r.inertia_trace[i], r.inertia_trace[i - 1] * (1 + 1e-12));
  EXPECT_EQ(r.restart_inertia.size(), 50u);
  EXPECT_EQ(r.inertia, *std::min_element(r.restart_inertia.begin(), r.restart_inertia.end()));
}

TEST(KMeans, RejectsFewerPointsThanClusters) {
  EXPECT_THROW(kmeans(MatD::Zero(3, 2), 4, 1, 0), DataError);
  EXPECT_THROW(kmeans(MatD::Zero(3, 2), 0, 1, 0), ConfigError);
}

TEST(MatchLabels, IdentityShiftAndConstant) {
  const std::vector<int> gt = balanced_gt(10);
  auto id = match_labels(gt, gt, 6);
  EXPECT_EQ(id.accuracy, 1.0);
  EXPECT_EQ(id.permutation, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  std::vector<int> shifted(gt.size());
  std::transform(gt.begin(), gt.end(), shifted.begin(), [](int g) { return (g + 1) % 6; });
  EXPECT_EQ(match_labels(shifted, gt, 6).accuracy, 1.0);
  const std::vector<int> constant(gt.size(), 2);
  EXPECT_NEAR(match_labels(constant, gt, 6).accuracy, 1.0 / 6.0, 1e-15);
  EXPECT_THROW(match_labels(constant, gt, 9), ConfigError);
  EXPECT_THROW(match_labels(std::vector<int>{0}, gt, 6), DataError);
}

TEST(MatchLabels, AgreesWithBruteForceOverAll720Bijections) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> u(0, 5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> pred(200), gt(200);
    for (int i = 0; i < 200; ++i) {
      gt[static_cast<std::size_t>(i)] = i * 6 / 200;
      pred[static_cast<std::size_t>(i)] = u(rng) < 3 ? (gt[static_cast<std::size_t>(i)] + trial) % 6 : u(rng);
    }
    std::array<int, 6> perm = {0, 1, 2, 3, 4, 5};
    int best = 0, count = 0;
    do {
      int hits = 0;
      for (int i = 0; i < 200; ++i) hits += perm[static_cast<std::size_t>(pred[static_cast<std::size_t>(i)])] == gt[static_cast<std::size_t>(i)];
      best = std::max(best, hits);
      ++count;
    } while (std::next_permutation(perm.begin(), perm.end()));
    ASSERT_EQ(count, 720);
    const auto m = match_labels(pred, gt, 6);
    EXPECT_NEAR(m.accuracy, best / 200.0, 1e-15);
    int hits = 0;
    for (int i = 0; i < 200; ++i) hits += m.permutation[static_cast<std::size_t>(pred[static_cast<std::size_t>(i)])] == gt[static_cast<std::size_t>(i)];
    EXPECT_EQ(hits, best);
  }
}

TEST(Nmi, IdentityRelabelAndSymmetry) {
  const std::vector<int> gt = balanced_gt(20);
  EXPECT_NEAR(nmi(gt, gt), 1.0, 1e-12);
  std::vector<int> relabeled(gt.size());
  std::transform(gt.begin(), gt.end(), relabeled.begin(), [](int g) { return 7 - g; });
  EXPECT_NEAR(nmi(relabeled, gt), 1.0, 1e-12);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> u(0, 3);
  std::vector<int> noisy(gt.size());
  for (auto& v : noisy) v = u(rng);
  EXPECT_NEAR(nmi(noisy, gt), nmi(gt, noisy), 1e-12);
  EXPECT_NEAR(nmi(noisy, gt), nmi_oracle(noisy, gt), 1e-12);
}

TEST(Nmi, ConstantConventions) {
  const std::vector<int> c(30, 1), d(30, 4);
  EXPECT_EQ(nmi(c, d), 1.0);
  EXPECT_EQ(nmi(c, balanced_gt(5)), 0.0);
  EXPECT_EQ(nmi(balanced_gt(5), c), 0.0);
  EXPECT_THROW(nmi(c, std::vector<int>(29, 1)), DataError);
}

TEST(Nmi, IndependentUniformLabelsNearZeroAtL3000) {
  std::mt19937_64 rng(0);
  std::uniform_int_distribution<int> u(0, 5);
  std::vector<int> a(3000), b(3000);
  for (auto& v : a) v = u(rng);
  for (auto& v : b) v = u(rng);
  const double v = nmi(a, b);
  EXPECT_LT(v, 0.05);
  EXPECT_GE(v, 0.0);
  EXPECT_NEAR(v, nmi_oracle(a, b), 1e-12);
}

TEST(ModeSmooth, ConstantUnchangedAndImpulseRemoved) {
  const std::vector<int> c(20, 3);
  EXPECT_EQ(mode_smooth(c, 9), c);
  EXPECT_TRUE(boundaries(c).empty());
  std::vector<int> impulse(20, 2);
  impulse[10] = 5;
  EXPECT_EQ(mode_smooth(impulse, 9), std::vector<int>(20, 2));
  std::vector<int> edge(20, 2);
  edge[0] = 4;
  EXPECT_EQ(mode_smooth(edge, 9), std::vector<int>(20, 2));
  EXPECT_THROW(mode_smooth(c, 8), ConfigError);
}

TEST(Boundaries, IndicesWhereIdsChange) {
  const std::vector<int> ids = {0, 0, 1, 1, 1, 4, 0};
  EXPECT_EQ(boundaries(ids), (std::vector<int>{2, 5, 6}));
}

TEST(BoundaryF1, MatchingCases) {
  const std::vector<int> gt = {50, 100, 150};
  EXPECT_EQ(boundary_f1(gt, gt, 10), 1.0);
  // One hit within tolerance out of two predictions and three truths: P 1/2, R 1/3.
  const std::vector<int> pred = {58, 130};
  EXPECT_NEAR(boundary_f1(pred, gt, 10), 2.0 * 0.5 / 3.0 / (0.5 + 1.0 / 3.0), 1e-15);
  // Greedy one-to-one: two predictions near one truth count once.
  const std::vector<int> twin = {49, 51};
  const std::vector<int> one = {50};
  EXPECT_NEAR(boundary_f1(twin, one, 10), 2.0 * 0.5 * 1.0 / 1.5, 1e-15);
  EXPECT_EQ(boundary_f1(std::vector<int>{}, gt, 10), 0.0);
}

TEST(Pca2, RecoversCenteredPlanarDataUpToRotation) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  MatD x(40, 2);
  for (int i = 0; i < 40; ++i) {
    x(i, 0) = 3.0 * n(rng);
    x(i, 1) = 0.5 * n(rng);
  }
  x = x.rowwise() - x.colwise().mean();
  const MatD y = pca2(x);
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j)
      EXPECT_NEAR((y.row(i) - y.row(j)).norm(), (x.row(i) - x.row(j)).norm(), 1e-9);
}

TEST(Pca2, ComponentsAreUncorrelated) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  MatD x(100, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  x.col(1) += 2.0 * x.col(0);
  const MatD y = pca2(x);
  const MatD c = y.rowwise() - y.colwise().mean();
  const MatD cov = c.transpose() * c;
  EXPECT_LT(std::abs(cov(0, 1)), 1e-8 * std::sqrt(cov(0, 0) * cov(1, 1)));
  EXPECT_GE(cov(0, 0), cov(1, 1));
}

TEST(Tsne, KlDecreasesAfterExaggeration) {
  std::mt19937_64 rng(0);
  std::normal_distribution<double> n(0.0, 1.0);
  MatD x(90, 5);
  for (int i = 0; i < 90; ++i)
    for (int j = 0; j < 5; ++j) x(i, j) = n(rng) + 6.0 * ((i / 30) == j);
  const auto r = tsne(x, 30.0, 500, 0);
  EXPECT_LT(r.kl_final, r.kl_after_exaggeration);
  EXPECT_EQ(r.embedding.rows(), 90);
  EXPECT_TRUE(r.embedding.allFinite());
  EXPECT_EQ(r.effective_perplexity, 29.0 + 2.0 / 3.0);
  EXPECT_EQ(r.kl_trace.back().first, 500);
}

TEST(Tsne, RejectsDegenerateInputs) {
  EXPECT_THROW(tsne(MatD::Ones(20, 3), 30.0, 10, 0), DataError);
  EXPECT_THROW(tsne(MatD::Random(9, 3), 30.0, 10, 0), DataError);
}

TEST(Silhouette, WellSeparatedCloudsScoreNearOne) {
  std::mt19937_64 rng(8);
  const MatD x = two_clouds(20, rng);
  std::vector<int> ids(40);
  for (int i = 0; i < 40; ++i) ids[static_cast<std::size_t>(i)] = i < 20 ? 0 : 1;
  EXPECT_GT(silhouette(x, ids), 0.99);
}

TEST(Segmentation, GroundTruthIdsScorePerfectly) {
  std::vector<int> gt;
  for (int l = 0; l < 6; ++l) gt.insert(gt.end(), static_cast<std::size_t>(40 + 5 * l), l);
  const auto r = score_segmentation(gt, gt, 6, AnalysisConfig{});
  EXPECT_EQ(r.metrics.frame_accuracy, 1.0);
  EXPECT_NEAR(r.metrics.nmi, 1.0, 1e-12);
  EXPECT_EQ(r.metrics.boundary_f1, 1.0);
  EXPECT_EQ(r.boundaries, r.gt_boundaries);
  EXPECT_EQ(r.to_json()["frames"], gt.size());
}

TEST(Segmentation, KOneGivesZeroNmi) {
  std::vector<int> gt = balanced_gt(30);
  const std::vector<int> ids(gt.size(), 0);
  const auto r = score_segmentation(ids, gt, 1, AnalysisConfig{});
  EXPECT_EQ(r.metrics.nmi, 0.0);
  EXPECT_NEAR(r.metrics.frame_accuracy, 1.0 / 6.0, 1e-15);
}

TEST(ExtractFeatures, OneRecordPerFrameOnTheSimplex) {
  const Dataset ds = check::small_dataset(1, 0);
  const Policy p(check::tiny_model(), fit_normalizer(ds), 2);
  const Trajectory& t = ds.trajectories[0];
  const auto f = extract_features(p, t);
  ASSERT_EQ(static_cast<int>(f.size()), t.length());
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(f[i].frame, static_cast<int>(i));
    EXPECT_EQ(f[i].gt_label, t.labels[i]);
    EXPECT_NEAR(std::accumulate(f[i].allocation.begin(), f[i].allocation.end(), 0.0), 1.0, 1e-5);
    EXPECT_EQ(f[i].embedding.size(), 16);
    EXPECT_EQ(f[i].attention.rows(), 8);
  }
  const auto again = extract_features(p, t);
  EXPECT_EQ(features_csv(f, true), features_csv(again, true));
  const std::string csv = features_csv(f, false);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), t.length() + 1);
  EXPECT_EQ(feature_matrix(f, FeatureKind::kAllocation).cols(), 4);
  EXPECT_EQ(feature_matrix(f, FeatureKind::kEmbedding).rows(), t.length());
}

TEST(ExtractFeatures, UntrainedPolicySegmentationStaysInRange) {
  const Dataset ds = check::small_dataset(1, 0);
  const Policy p(check::tiny_model(), fit_normalizer(ds), 2);
  AnalysisConfig cfg;
  cfg.restarts = 5;
  const auto a = segment_trajectory(p, ds.trajectories[0], cfg, 0);
  const auto b = segment_trajectory(p, ds.trajectories[0], cfg, 0);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  for (double m : {a.metrics.frame_accuracy, a.metrics.nmi, a.metrics.boundary_f1}) {
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
  }
  EXPECT_TRUE(std::is_sorted(a.boundaries.begin(), a.boundaries.end()));
  EXPECT_EQ(std::adjacent_find(a.boundaries.begin(), a.boundaries.end()), a.boundaries.end());
}

TEST(MeanAllocation, MissingLabelsAreNan) {
  std::vector<FrameFeatures> f(2);
  f[0].gt_label = 1;
  f[0].allocation = {0.1, 0.2, 0.3, 0.4};
  f[1].gt_label = 1;
  f[1].allocation = {0.3, 0.2, 0.1, 0.4};
  const auto m = mean_allocation_by_label(f);
  EXPECT_NEAR(m[1][0], 0.2, 1e-15);
  EXPECT_NEAR(m[1][3], 0.4, 1e-15);
  EXPECT_TRUE(std::isnan(m[0][0]));
}
