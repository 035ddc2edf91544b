#include "filterreg/error.hpp"
#include "filterreg/estep.hpp"
#include "filterreg/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>

using namespace filterreg;
using namespace filterreg::testing;
using filterreg::testing::cloud_of;
using filterreg::testing::random_points;

namespace {

GmmConfig isotropic(double sigma, double w) {
  GmmConfig c;
  c.sigma.setConstant(sigma);
  c.outlier_ratio = w;
  return c;
}

}  // namespace

TEST(GmmConfig, Validation) {
  GmmConfig c;
  EXPECT_NO_THROW(c.validate());
  c.outlier_ratio = 1.0;
  EXPECT_THROW(c.validate(), InputError);
  c = GmmConfig{};
  c.sigma = Eigen::Vector3d(0.01, 0.02, 0.01);
  c.update_sigma = true;
  EXPECT_THROW(c.validate(), InputError);
  c = GmmConfig{};
  c.sigma.x() = 0.0;
  EXPECT_THROW(c.validate(), InputError);
  c = GmmConfig{};
  c.correspondence = CorrespondenceMode::feature;
  EXPECT_THROW(c.validate(), InputError);
  c.feature_sigma = Eigen::VectorXd::Constant(2, 0.1);
  EXPECT_NO_THROW(c.validate());
  c.update_sigma = true;
  EXPECT_THROW(c.validate(), InputError);
}

TEST(OutlierConstant, Formula) {
  EXPECT_EQ(outlier_constant(0.0, 10, 20, Eigen::Vector3d::Constant(0.1)), 0.0);
  // Raw c = 1 for w = 0.5, N = M; unit-normalizer sigma isolates it.
  const double unit = 1.0 / std::sqrt(2.0 * M_PI);
  EXPECT_DOUBLE_EQ(outlier_constant(0.5, 7, 7, Eigen::Vector3d::Constant(unit)), 1.0);
  const double s = 0.05;
  EXPECT_NEAR(outlier_constant(0.2, 2000, 1000, Eigen::Vector3d::Constant(s)),
              0.25 * 2.0 * std::pow(2.0 * M_PI * s * s, 1.5), 1e-18);
  EXPECT_THROW(outlier_constant(1.0, 1, 1, Eigen::Vector3d::Ones()), InputError);
}

TEST(OutlierConstant, MatchesNormalizedGmmPosterior) {
  // From-scratch EM with explicitly normalized densities:
  // p(x) = (1-w)/N sum_k N(x; y_k, S) + w / M.
  std::mt19937_64 rng(5);
  const auto y = random_points(2000, rng, 0.15);
  const auto x = random_points(20, rng, 0.15);
  const Eigen::Vector3d sigma = Eigen::Vector3d::Constant(0.05);
  const double w = 0.2;
  const double N = 2000.0, M = 1000.0;
  const double cprime = outlier_constant(w, 2000, 1000, sigma);
  const DirectMoments d = direct_moments(x, y, sigma);
  const double norm = std::pow(2.0 * M_PI, 1.5) * sigma.prod();
  for (std::size_t i = 0; i < x.size(); ++i) {
    double inlier = 0.0;
    Eigen::Vector3d weighted = Eigen::Vector3d::Zero();
    for (const auto& yk : y) {
      const double g = std::exp(-0.5 * (x[i] - yk).squaredNorm() / (0.05 * 0.05)) / norm;
      inlier += (1.0 - w) / N * g;
      weighted += (1.0 - w) / N * g * yk;
    }
    const double posterior_inlier = inlier / (inlier + w / M);
    EXPECT_NEAR(d.m0[i] / (d.m0[i] + cprime), posterior_inlier, 1e-12);
    EXPECT_LT((d.m1[i] / d.m0[i] - weighted / inlier).norm(), 1e-12);
  }
}

TEST(OutlierConstant, LibraryWeightsMatchNormalizedPosterior) {
  std::mt19937_64 rng(7);
  const auto y = random_points(60, rng, 0.1), x = random_points(40, rng, 0.1);
  const double w = 0.3, s = 0.03;
  const MomentField m = compute_moments(cloud_of(x), cloud_of(y), isotropic(s, w), Backend::bruteforce);
  const double norm = std::pow(2.0 * M_PI * s * s, 1.5);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double inlier = 0.0;
    for (const auto& yk : y) inlier += (1.0 - w) / 60.0 * std::exp(-0.5 * (x[i] - yk).squaredNorm() / (s * s)) / norm;
    EXPECT_NEAR(m.weight[i], inlier / (inlier + w / 40.0), 1e-12);
  }
}

TEST(ComputeMoments, SingleCoincidentPoint) {
  const Eigen::Vector3d y(0.1, -0.2, 0.3);
  for (Backend b : {Backend::bruteforce, Backend::lattice}) {
    const MomentField m = compute_moments(cloud_of({y}), cloud_of({y}), isotropic(0.01, 0.0), b);
    if (b == Backend::bruteforce) {
      EXPECT_DOUBLE_EQ(m.m0[0], 1.0);
      EXPECT_LT((m.m1[0] - y).norm(), 1e-15);
    } else {
      EXPECT_NEAR(m.m0[0], 1.0, 0.2);
    }
    EXPECT_LT((m.target(0) - y).norm(), 1e-12);
    EXPECT_EQ(m.weight[0], 1.0);
  }
}

TEST(ComputeMoments, FarPointIsDropped) {
  std::mt19937_64 rng(11);
  const double s = 0.01;
  const auto y = random_points(50, rng, 0.05);
  const Eigen::Vector3d far(0.05 + 10 * s, 0.0, 0.0);
  for (Backend b : {Backend::bruteforce, Backend::lattice}) {
    const MomentField m = compute_moments(cloud_of({far}), cloud_of(y), isotropic(s, 0.1), b);
    EXPECT_LE(m.weight[0], 1e-6);
  }
}

TEST(ComputeMoments, BruteforceMatchesDirectSums) {
  std::mt19937_64 rng(13);
  const auto y = random_points(50, rng, 0.2), x = random_points(20, rng, 0.2);
  GmmConfig cfg = isotropic(0.1, 0.1);
  cfg.second_moment = true;
  const MomentField m = compute_moments(cloud_of(x), cloud_of(y), cfg, Backend::bruteforce);
  const DirectMoments d = direct_moments(x, y, cfg.sigma);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LE(std::abs(m.m0[i] - d.m0[i]), 1e-12 * std::max(1.0, d.m0[i]));
    EXPECT_LE((m.m1[i] - d.m1[i]).norm(), 1e-12 * std::max(1.0, d.m1[i].norm()));
    EXPECT_LE(std::abs(m.m2[i] - d.m2[i]), 1e-12 * std::max(1.0, d.m2[i]));
  }
}

TEST(ComputeMoments, AnisotropicSigmaMatchesDirectSums) {
  std::mt19937_64 rng(17);
  const auto y = random_points(40, rng, 0.2), x = random_points(15, rng, 0.2);
  GmmConfig cfg;
  cfg.sigma = Eigen::Vector3d(0.05, 0.1, 0.2);
  const MomentField m = compute_moments(cloud_of(x), cloud_of(y), cfg, Backend::bruteforce);
  const DirectMoments d = direct_moments(x, y, cfg.sigma);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(m.m0[i], d.m0[i], 1e-12);
}

TEST(ComputeMoments, TruncatedPathMatchesBruteforce) {
  PointCloud obs = sample_shape(Shape::blob, 3000, 3);
  PointCloud model = obs;
  std::mt19937_64 rng(19);
  std::normal_distribution<double> g(0.0, 3e-4);
  for (auto& p : model.points) p += Eigen::Vector3d(g(rng), g(rng), g(rng));
  GmmConfig cfg = isotropic(5e-4, 0.2);
  cfg.second_moment = true;
  const ObservationIndex lattice(obs, cfg, Backend::lattice);
  ASSERT_TRUE(lattice.truncated());
  const MomentField a = lattice.compute(model.points, model.features);
  const MomentField b = compute_moments(model, obs, cfg, Backend::bruteforce);
  for (std::size_t i = 0; i < model.size(); ++i) {
    ASSERT_NEAR(a.m0[i], b.m0[i], 1e-10 * std::max(1.0, b.m0[i]));
    ASSERT_LE((a.m1[i] - b.m1[i]).norm(), 1e-10 * std::max(1.0, b.m1[i].norm()));
    ASSERT_NEAR(a.weight[i], b.weight[i], 1e-10);
  }
}

TEST(ComputeMoments, LatticeAgreesWithBruteforceAtRegistrationScale) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PointCloud obs = sample_shape(Shape::blob, 2000, 100 + seed);
    PointCloud model = sample_shape(Shape::blob, 2000, 200 + seed);
    const double s = 0.05 * obs.diameter();
    const GmmConfig cfg = isotropic(s, 0.1);
    const ObservationIndex index(obs, cfg, Backend::lattice);
    ASSERT_FALSE(index.truncated());
    const MomentField a = index.compute(model.points, model.features);
    const MomentField b = compute_moments(model, obs, cfg, Backend::bruteforce);
    std::vector<double> rel, target;
    for (std::size_t i = 0; i < model.size(); ++i) {
      rel.push_back(std::abs(a.m0[i] - b.m0[i]) / b.m0[i]);
      if (b.m0[i] >= 1e-3) target.push_back((a.target(i) - b.target(i)).norm() / s);
    }
    std::sort(rel.begin(), rel.end());
    std::sort(target.begin(), target.end());
    EXPECT_LE(rel[rel.size() / 2], 0.05) << "seed " << seed;
    EXPECT_LE(target[static_cast<std::size_t>(0.95 * static_cast<double>(target.size()))], 0.1) << "seed " << seed;
  }
}

TEST(ComputeMoments, WeightsAndTargetsAreConvex) {
  std::mt19937_64 rng(23);
  const auto y = random_points(300, rng, 0.1), x = random_points(300, rng, 0.12);
  Eigen::AlignedBox3d box;
  for (const auto& p : y) box.extend(p);
  for (Backend b : {Backend::bruteforce, Backend::lattice}) {
    const MomentField m = compute_moments(cloud_of(x), cloud_of(y), isotropic(0.02, 0.2), b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_GE(m.m0[i], 0.0);
      EXPECT_GE(m.weight[i], 0.0);
      EXPECT_LE(m.weight[i], 1.0);
      if (m.m0[i] > 1e-12) {
        const Eigen::Vector3d t = m.target(i);
        EXPECT_TRUE((t.array() >= box.min().array() - 1e-9).all() && (t.array() <= box.max().array() + 1e-9).all());
      }
    }
  }
}

TEST(ComputeMoments, MonotoneRejection) {
  const Eigen::Vector3d y(0.0, 0.0, 0.0);
  const double s = 0.01;
  std::vector<Eigen::Vector3d> x;
  for (double d : {0.0, 1.0, 2.0, 5.0}) x.emplace_back(d * s, 0.0, 0.0);
  const MomentField m = compute_moments(cloud_of(x), cloud_of({y}), isotropic(s, 0.1), Backend::bruteforce);
  for (std::size_t i = 1; i < x.size(); ++i) EXPECT_LT(m.weight[i], m.weight[i - 1]);
}

TEST(ComputeMoments, FeatureModeWithoutFeaturesEqualsPositionPath) {
  std::mt19937_64 rng(29);
  const auto y = random_points(80, rng, 0.1), x = random_points(30, rng, 0.1);
  GmmConfig cfg = isotropic(0.02, 0.1);
  const MomentField a = compute_moments(cloud_of(x), cloud_of(y), cfg, Backend::bruteforce);
  GmmConfig concat = cfg;
  concat.correspondence = CorrespondenceMode::concatenated;
  concat.feature_sigma = Eigen::VectorXd(0);
  PointCloud mx = cloud_of(x), my = cloud_of(y);
  mx.features = RowMatrix(30, 0);
  my.features = RowMatrix(80, 0);
  EXPECT_THROW(compute_moments(mx, my, concat, Backend::bruteforce), InputError);
  // Unset feature sigma keeps the position path.
  const MomentField b = compute_moments(mx, my, cfg, Backend::bruteforce);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(a.m0[i], b.m0[i]);
    EXPECT_EQ(a.m1[i], b.m1[i]);
    EXPECT_EQ(a.weight[i], b.weight[i]);
  }
}

TEST(ComputeMoments, FeatureCorrespondence) {
  // Features select the partner regardless of position.
  PointCloud obs = cloud_of({Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(1, 0, 0)});
  obs.features = RowMatrix(2, 1);
  obs.features << 0.0, 1.0;
  PointCloud model = cloud_of({Eigen::Vector3d(0.9, 0, 0)});
  model.features = RowMatrix(1, 1);
  model.features << 0.0;
  GmmConfig cfg = isotropic(0.5, 0.0);
  cfg.correspondence = CorrespondenceMode::feature;
  cfg.feature_sigma = Eigen::VectorXd::Constant(1, 0.05);
  const MomentField m = compute_moments(model, obs, cfg, Backend::bruteforce);
  EXPECT_LT(m.target(0).norm(), 1e-9);
  EXPECT_NEAR(m.c_prime, 0.0, 0.0);

  cfg.correspondence = CorrespondenceMode::concatenated;
  const MomentField c = compute_moments(model, obs, cfg, Backend::bruteforce);
  const double expected = std::exp(-0.5 * (0.81 / 0.25));
  EXPECT_NEAR(c.m0[0], expected + std::exp(-0.5 * (0.01 / 0.25 + 1.0 / 0.0025)), 1e-15);

  PointCloud bad = model;
  bad.features = RowMatrix(1, 2);
  EXPECT_THROW(compute_moments(bad, obs, cfg, Backend::bruteforce), InputError);
}

TEST(ComputeMoments, FeatureLatticeAgreesWithBruteforce) {
  std::mt19937_64 rng(31);
  const auto y = random_points(1500, rng, 0.1), x = random_points(500, rng, 0.1);
  PointCloud obs = cloud_of(y), model = cloud_of(x);
  obs.features = RowMatrix(1500, 2);
  model.features = RowMatrix(500, 2);
  for (Eigen::Index i = 0; i < 1500; ++i) obs.features.row(i) << std::sin(40 * y[i].x()), std::cos(40 * y[i].y());
  for (Eigen::Index i = 0; i < 500; ++i) model.features.row(i) << std::sin(40 * x[i].x()), std::cos(40 * x[i].y());
  GmmConfig cfg = isotropic(0.03, 0.1);
  cfg.correspondence = CorrespondenceMode::concatenated;
  cfg.feature_sigma = Eigen::VectorXd::Constant(2, 0.5);
  const MomentField a = compute_moments(model, obs, cfg, Backend::lattice);
  const MomentField b = compute_moments(model, obs, cfg, Backend::bruteforce);
  std::vector<double> rel;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (b.m0[i] > 1e-3) rel.push_back(std::abs(a.m0[i] - b.m0[i]) / b.m0[i]);
  std::sort(rel.begin(), rel.end());
  ASSERT_FALSE(rel.empty());
  EXPECT_LE(rel[rel.size() / 2], 0.1);
}

TEST(ComputeMoments, NormalAveraging) {
  std::mt19937_64 rng(37);
  const auto y = random_points(200, rng, 0.1), x = random_points(100, rng, 0.1);
  PointCloud obs = cloud_of(y);
  const Eigen::Vector3d n = Eigen::Vector3d(1, 2, -2).normalized();
  obs.normals.assign(y.size(), n);
  GmmConfig cfg = isotropic(0.03, 0.1);
  cfg.average_normals = true;
  for (Backend b : {Backend::bruteforce, Backend::lattice}) {
    const MomentField m = compute_moments(cloud_of(x), obs, cfg, b);
    ASSERT_TRUE(m.has_normals());
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (m.m0[i] < 1e-6) continue;
      EXPECT_LT((m.normal[i] - n).norm(), 1e-9);
    }
  }
}

TEST(ComputeMoments, AveragedNormalsAreSubUnit) {
  std::mt19937_64 rng(41);
  const auto y = random_points(200, rng, 0.1), x = random_points(100, rng, 0.1);
  PointCloud obs = cloud_of(y);
  for (std::size_t k = 0; k < y.size(); ++k) obs.normals.push_back(filterreg::testing::random_unit(rng));
  GmmConfig cfg = isotropic(0.03, 0.1);
  cfg.average_normals = true;
  const MomentField m = compute_moments(cloud_of(x), obs, cfg, Backend::bruteforce);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (m.m0[i] > 1e-12) EXPECT_LE(m.normal[i].norm(), 1.0 + 1e-9);
}

TEST(ComputeMoments, Errors) {
  std::mt19937_64 rng(43);
  const auto y = random_points(10, rng);
  GmmConfig cfg = isotropic(0.03, 0.1);
  EXPECT_THROW(compute_moments(cloud_of(y), PointCloud{}, cfg, Backend::bruteforce), InputError);
  cfg.average_normals = true;
  EXPECT_THROW(compute_moments(cloud_of(y), cloud_of(y), cfg, Backend::bruteforce), InputError);
}

TEST(UpdateSigma, ZeroResidualClampsToFloor) {
  std::mt19937_64 rng(47);
  const auto x = random_points(20, rng);
  MomentField m;
  m.c_prime = 0.1;
  for (const auto& p : x) {
    m.m0.push_back(2.0);
    m.m1.push_back(2.0 * p);
    m.m2.push_back(2.0 * p.squaredNorm());
    m.weight.push_back(2.0 / 2.1);
  }
  EXPECT_EQ(update_sigma(m, x), kSigmaFloor);
}

TEST(UpdateSigma, SinglePairDimensionFactor) {
  const double d = 0.02;
  const Eigen::Vector3d x(0, 0, 0), y(d, 0, 0);
  GmmConfig cfg = isotropic(0.03, 0.0);
  cfg.update_sigma = true;
  const MomentField m = compute_moments(cloud_of({x}), cloud_of({y}), cfg, Backend::bruteforce);
  const double closed = update_sigma(m, {x});
  // Q(s) = -(3/2) log(2 pi s^2) - d^2 / (2 s^2) for the single fixed posterior.
  const auto q = [&](double s) { return -1.5 * std::log(2.0 * M_PI * s * s) - d * d / (2.0 * s * s); };
  const double numeric = golden_max(q, 1e-4, 0.1);
  EXPECT_NEAR(closed * closed, d * d / 3.0, 1e-15);
  EXPECT_NEAR(closed, numeric, 1e-6 * numeric);
}

TEST(UpdateSigma, MatchesGoldenSectionQMaximization) {
  std::mt19937_64 rng(53);
  const auto y = random_points(100, rng, 0.05), x = random_points(100, rng, 0.05);
  GmmConfig cfg = isotropic(0.02, 0.2);
  cfg.update_sigma = true;
  const MomentField m = compute_moments(cloud_of(x), cloud_of(y), cfg, Backend::bruteforce);
  // Posteriors P_ik = K_ik / (m0_i + c') held fixed; Q(s) = sum P_ik log N(x_i; y_k, s^2 I).
  std::vector<std::vector<double>> post(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    for (const auto& yk : y)
      post[i].push_back(std::exp(-0.5 * (x[i] - yk).squaredNorm() / (0.02 * 0.02)) / (m.m0[i] + m.c_prime));
  const auto q = [&](double s) {
    double v = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t k = 0; k < y.size(); ++k)
        v += post[i][k] * (-1.5 * std::log(2.0 * M_PI * s * s) - (x[i] - y[k]).squaredNorm() / (2.0 * s * s));
    return v;
  };
  const double numeric = golden_max(q, 1e-4, 0.2);
  const double closed = update_sigma(m, x);
  EXPECT_NEAR(closed, numeric, 1e-6 * numeric);
}

TEST(UpdateSigma, Errors) {
  MomentField m;
  m.m0 = {0.0};
  m.m1 = {Eigen::Vector3d::Zero()};
  m.m2 = {0.0};
  m.weight = {0.0};
  EXPECT_THROW(update_sigma(m, {Eigen::Vector3d::Zero()}), DegenerateError);
  m.m2.clear();
  EXPECT_THROW(update_sigma(m, {Eigen::Vector3d::Zero()}), InputError);
}
