#include "filterreg/error.hpp"
#include "filterreg/mstep.hpp"
#include "filterreg/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/SVD>

#include <cmath>
#include <set>

using namespace filterreg;
using namespace filterreg::testing;
using filterreg::testing::cloud_of;
using filterreg::testing::random_points;
using filterreg::testing::random_transform;
using filterreg::testing::random_unit;

namespace {

RigidTransform kabsch(const std::vector<Eigen::Vector3d>& src, const std::vector<Eigen::Vector3d>& dst,
                      const std::vector<double>& w) {
  double total = 0.0;
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    total += w[i];
    cs += w[i] * src[i];
    cd += w[i] * dst[i];
  }
  cs /= total;
  cd /= total;
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) H += w[i] * (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
  D(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Eigen::Matrix3d R = svd.matrixV() * D * svd.matrixU().transpose();
  return {R, cd - R * cs};
}

void expect_non_increasing(const MStepResult& r) {
  for (std::size_t k = 1; k < r.objective.size(); ++k)
    EXPECT_LE(r.objective[k], r.objective[k - 1] * (1.0 + 1e-12)) << "step " << k;
}

}  // namespace

TEST(AssembleRigid, ZeroResidual) {
  std::mt19937_64 rng(1);
  const auto x = random_points(100, rng);
  ResidualSpec s;
  s.weight.assign(x.size(), 1.0);
  s.target = x;
  const NormalEquations eq = assemble_rigid(s, x);
  EXPECT_TRUE(eq.b.isZero(0.0));
  EXPECT_EQ(eq.objective, 0.0);
  EXPECT_TRUE(gn_solve(eq, 1e-6).delta.isZero(0.0));
}

TEST(AssembleRigid, UniformOffsetIsLinear) {
  std::mt19937_64 rng(2);
  const auto x = random_points(100, rng);
  const Eigen::Vector3d t(0.01, -0.02, 0.005);
  ResidualSpec s;
  s.weight.assign(x.size(), 1.0);
  for (const auto& p : x) s.target.push_back(p + t);
  const Eigen::VectorXd d = gn_solve(assemble_rigid(s, x), 0.0).delta;
  EXPECT_LT(d.head<3>().norm(), 1e-10);
  EXPECT_LT((d.tail<3>() - t).norm(), 1e-10);
}

TEST(AssembleRigid, MatchesDenseJacobianOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_points(200, rng);
    for (ResidualMode mode : {ResidualMode::point_to_point, ResidualMode::point_to_plane}) {
      const ResidualSpec s = random_residuals(rng, x, mode);
      std::vector<Eigen::RowVectorXd> rows;
      std::vector<double> r;
      for (std::size_t i = 0; i < x.size(); ++i) point_rows(s, i, x[i], rows, r, twist_block(x[i]));
      const auto [A, b] = dense_system(rows, r, 6);
      const NormalEquations eq = assemble_rigid(s, x);
      EXPECT_LE(rel(eq.A, A), 1e-10);
      EXPECT_LE(rel(eq.b, b), 1e-10);
      EXPECT_LE((eq.A - eq.A.transpose()).norm(), 1e-9);
    }
  }
}

TEST(AssembleArticulated, SingleFloatingBodyEqualsRigid) {
  std::mt19937_64 rng(4);
  const auto x = random_points(150, rng);
  const ResidualSpec s = random_residuals(rng, x, ResidualMode::point_to_point);
  ArticulatedTree tree(std::vector<Body>(1), true);
  tree.set_binding(std::vector<int>(x.size(), 0));
  const NormalEquations a = assemble_articulated(s, x, tree);
  const NormalEquations r = assemble_rigid(s, x);
  EXPECT_EQ(a.A, r.A);
  EXPECT_EQ(a.b, r.b);
}

TEST(AssembleArticulated, MatchesDenseChainRuleOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ref = random_points(60, rng);
    const ArticulatedTree tree = random_chain_tree(rng, 2 + trial % 6, ref.size());
    const PointCloud cur = forward_points(cloud_of(ref), tree);
    const ResidualSpec s = random_residuals(rng, cur.points, trial % 2 ? ResidualMode::point_to_plane
                                                                      : ResidualMode::point_to_point);
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<double> r;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const Eigen::MatrixXd dx = twist_block(cur.points[i]) * tree.spatial_velocity_jacobian(tree.binding()[i]);
      point_rows(s, i, cur.points[i], rows, r, dx);
    }
    const auto [A, b] = dense_system(rows, r, tree.num_parameters());
    const NormalEquations eq = assemble_articulated(s, cur.points, tree);
    EXPECT_LE(rel(eq.A, A), 1e-9);
    EXPECT_LE(rel(eq.b, b), 1e-9);
  }
}

TEST(AssembleArticulated, TwoLinkOnePointEach) {
  std::vector<Body> b(3);
  b[1].parent = 0;
  b[1].joint = JointType::revolute;
  b[2].parent = 1;
  b[2].joint = JointType::revolute;
  b[2].origin = RigidTransform::from_translation(Eigen::Vector3d(0.3, 0, 0));
  ArticulatedTree tree(b, false);
  tree.set_binding({1, 2});
  tree.set_joint_values(Eigen::Vector2d(0.4, -0.7));
  const PointCloud cur = forward_points(cloud_of({Eigen::Vector3d(0.2, 0, 0), Eigen::Vector3d(0.45, 0, 0)}), tree);
  ResidualSpec s;
  s.weight = {1.0, 0.5};
  s.target = {cur.points[0] + Eigen::Vector3d(0.01, 0.02, 0), cur.points[1] + Eigen::Vector3d(-0.01, 0.03, 0.01)};
  // Planar arm: d x / d q for revolute z joints located at the origin and at elbow e.
  const double a = 0.4, c = -0.7;
  const Eigen::Vector3d elbow(0.3 * std::cos(a), 0.3 * std::sin(a), 0);
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(6, 2);
  const Eigen::Vector3d z = Eigen::Vector3d::UnitZ();
  J.block<3, 1>(0, 0) = z.cross(cur.points[0]);
  J.block<3, 1>(3, 0) = z.cross(cur.points[1]);
  J.block<3, 1>(3, 1) = z.cross(cur.points[1] - elbow);
  (void)c;
  Eigen::VectorXd r(6);
  r << cur.points[0] - s.target[0], std::sqrt(0.5) * (cur.points[1] - s.target[1]);
  J.bottomRows(3) *= std::sqrt(0.5);
  const NormalEquations eq = assemble_articulated(s, cur.points, tree);
  EXPECT_LE(rel(eq.A, J.transpose() * J), 1e-9);
  EXPECT_LE(rel(eq.b, J.transpose() * r), 1e-9);
}

TEST(AssembleArticulated, OffPathJointsGetNothing) {
  // Root with two independent children; points only on child 1.
  std::vector<Body> b(3);
  b[1].parent = 0;
  b[1].joint = JointType::revolute;
  b[2].parent = 0;
  b[2].joint = JointType::prismatic;
  ArticulatedTree tree(b, true);
  std::mt19937_64 rng(6);
  const auto x = random_points(30, rng);
  tree.set_binding(std::vector<int>(x.size(), 1));
  const NormalEquations eq = assemble_articulated(random_residuals(rng, x, ResidualMode::point_to_point), x, tree);
  EXPECT_TRUE(eq.A.row(7).isZero(0.0));
  EXPECT_TRUE(eq.A.col(7).isZero(0.0));
  EXPECT_EQ(eq.b[7], 0.0);
  EXPECT_GT(eq.A(6, 6), 0.0);
}

TEST(AssembleNodeGraph, MatchesDenseOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud ref = sample_shape(Shape::blob, 300, static_cast<std::uint64_t>(trial));
    const NodeGraph g = random_graph(rng, ref, 0.05);
    const PointCloud cur = forward_points(ref, g);
    const ResidualSpec s = random_residuals(rng, cur.points, trial % 2 ? ResidualMode::point_to_plane
                                                                      : ResidualMode::point_to_point);
    const double lambda = trial % 3 == 0 ? 0.0 : 50.0;
    const int p = static_cast<int>(6 * g.num_nodes());
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<double> r;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const PointSkin& skin = g.skinning.points[i];
      if (!skin.bound()) continue;
      Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(3, p);
      for (std::size_t a = 0; a < skin.nodes.size(); ++a)
        dx.middleCols(6 * skin.nodes[a], 6) += skin.weights[a] * twist_block(cur.points[i]);
      point_rows(s, i, cur.points[i], rows, r, dx);
    }
    const double sl = std::sqrt(lambda);
    if (lambda > 0.0) {
      for (const auto& [k, l] : g.edges) {
        for (const auto& [a, c] : {std::make_pair(k, l), std::make_pair(l, k)}) {
          const Eigen::Vector3d& pt = g.positions[static_cast<std::size_t>(c)];
          const Eigen::Vector3d xa = g.transforms[static_cast<std::size_t>(a)] * pt;
          const Eigen::Vector3d xc = g.transforms[static_cast<std::size_t>(c)] * pt;
          Eigen::MatrixXd d = Eigen::MatrixXd::Zero(3, p);
          d.middleCols(6 * a, 6) = sl * twist_block(xa);
          d.middleCols(6 * c, 6) = -sl * twist_block(xc);
          for (int row = 0; row < 3; ++row) {
            rows.push_back(d.row(row));
            r.push_back(sl * (xa - xc)[row]);
          }
        }
      }
    }
    const auto [A, b] = dense_system(rows, r, p);
    const NormalEquations eq = assemble_nodegraph(s, cur.points, g, lambda);
    EXPECT_LE(rel(eq.dense(), A), 1e-9) << trial;
    EXPECT_LE(rel(eq.b, b), 1e-9) << trial;
    EXPECT_LE(rel(Eigen::MatrixXd(eq.sparse()), A), 1e-9);
  }
}

TEST(AssembleNodeGraph, SingleNodeReducesToRigid) {
  std::mt19937_64 rng(8);
  const auto x = random_points(80, rng, 0.02);
  NodeGraph g;
  g.positions = {Eigen::Vector3d::Zero()};
  g.transforms.resize(1);
  g.skinning.points.assign(x.size(), PointSkin{{0}, {1.0}});
  const ResidualSpec s = random_residuals(rng, x, ResidualMode::point_to_point);
  const NormalEquations a = assemble_nodegraph(s, x, g, 0.0);
  const NormalEquations r = assemble_rigid(s, x);
  EXPECT_LE(rel(a.dense(), r.A), 1e-15);
  EXPECT_LE(rel(a.b, r.b), 1e-15);
}

TEST(AssembleNodeGraph, BlockPatternAndEmptyNode) {
  // 3-node path, points co-skinned only by (0,1); node 2 has no data.
  NodeGraph g;
  g.positions = {Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(0.1, 0, 0), Eigen::Vector3d(0.2, 0, 0)};
  g.transforms.resize(3);
  g.edges = {{0, 1}, {1, 2}};
  std::mt19937_64 rng(9);
  std::vector<Eigen::Vector3d> x;
  for (int i = 0; i < 10; ++i) {
    x.emplace_back(0.01 * i, 0.01, 0.0);
    g.skinning.points.push_back(PointSkin{{0, 1}, {0.6, 0.4}});
  }
  const ResidualSpec s = random_residuals(rng, x, ResidualMode::point_to_point);
  const NormalEquations no_reg = assemble_nodegraph(s, x, g, 0.0);
  EXPECT_TRUE(no_reg.dense().bottomRightCorner(6, 6).isZero(0.0));
  std::set<std::pair<int, int>> keys;
  for (const auto& [kl, blk] : no_reg.blocks) keys.insert(kl);
  EXPECT_EQ(keys, (std::set<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}}));

  const NormalEquations reg = assemble_nodegraph(s, x, g, 1.0);
  keys.clear();
  for (const auto& [kl, blk] : reg.blocks) keys.insert(kl);
  EXPECT_EQ(keys, (std::set<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 2}, {2, 1}, {2, 2}}));
  EXPECT_THROW(assemble_nodegraph(s, x, g, -1.0), InputError);
}

TEST(NormalEquations, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    const int kind = trial % 3;
    const ResidualMode mode = (trial / 3) % 2 ? ResidualMode::point_to_plane : ResidualMode::point_to_point;
    PointCloud ref;
    KinematicState state;
    double lambda = 0.0;
    if (kind == 0) {
      ref = cloud_of(random_points(100, rng));
      state = RigidModel{random_transform(rng)};
    } else if (kind == 1) {
      ref = cloud_of(random_points(100, rng));
      state = random_chain_tree(rng, 5, ref.size());
    } else {
      ref = sample_shape(Shape::blob, 300, static_cast<std::uint64_t>(trial));
      state = random_graph(rng, ref, 0.05);
      lambda = 10.0;
    }
    const PointCloud cur = forward_points(ref, state);
    const ResidualSpec s = random_residuals(rng, cur.points, mode);
    const NormalEquations eq = assemble(s, cur.points, state, lambda);
    const int p = parameter_count(state);
    Eigen::VectorXd fd(p);
    for (int c = 0; c < p; ++c) {
      Eigen::VectorXd d = Eigen::VectorXd::Zero(p);
      d[c] = h;
      fd[c] = (total_objective(s, ref, apply_update(state, d), lambda) -
               total_objective(s, ref, apply_update(state, -d), lambda)) /
              (2 * h);
    }
    // Objective is sum r^T r, so b = J^T r is half its gradient.
    const double tol = kind == 2 ? 1e-2 : 1e-4;
    EXPECT_LE((-eq.b - (-0.5 * fd)).norm() / (0.5 * fd).norm(), tol) << "trial " << trial;
    EXPECT_NEAR(eq.objective, total_objective(s, ref, state, lambda), 1e-9 * std::max(1.0, eq.objective));
  }
}

TEST(NormalEquations, ZeroWeightsEqualRemoval) {
  std::mt19937_64 rng(11);
  const auto x = random_points(200, rng);
  ResidualSpec s = random_residuals(rng, x, ResidualMode::point_to_point);
  std::vector<Eigen::Vector3d> kept_x;
  ResidualSpec kept = s;
  kept.weight.clear();
  kept.target.clear();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i % 4 == 0) s.weight[i] = 0.0;
    if (s.weight[i] == 0.0) continue;
    kept_x.push_back(x[i]);
    kept.weight.push_back(s.weight[i]);
    kept.target.push_back(s.target[i]);
  }
  const NormalEquations a = assemble_rigid(s, x), b = assemble_rigid(kept, kept_x);
  EXPECT_EQ(a.A, b.A);
  EXPECT_EQ(a.b, b.b);

  ArticulatedTree tree = random_chain_tree(rng, 4, x.size());
  std::vector<int> kept_binding;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (s.weight[i] != 0.0) kept_binding.push_back(tree.binding()[i]);
  const NormalEquations ta = assemble_articulated(s, x, tree);
  tree.set_binding(kept_binding);
  const NormalEquations tb = assemble_articulated(kept, kept_x, tree);
  EXPECT_EQ(ta.A, tb.A);
  EXPECT_EQ(ta.b, tb.b);
}

TEST(GnSolve, TrivialSystems) {
  NormalEquations eq;
  eq.parameters = 3;
  eq.A = Eigen::Matrix3d::Identity();
  eq.b = Eigen::Vector3d::Zero();
  EXPECT_TRUE(gn_solve(eq, 1e-6).delta.isZero(0.0));
  eq.b = Eigen::Vector3d::UnitX();
  EXPECT_EQ(gn_solve(eq, 0.0).delta, Eigen::VectorXd(-Eigen::Vector3d::UnitX()));
}

TEST(GnSolve, RandomSpdMatchesDenseSolve) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd M(12, 12);
    for (auto& v : M.reshaped()) v = g(rng);
    NormalEquations eq;
    eq.parameters = 12;
    eq.A = M * M.transpose() + 0.1 * Eigen::MatrixXd::Identity(12, 12);
    eq.b = Eigen::VectorXd(12);
    for (auto& v : eq.b) v = g(rng);
    const SolveResult s = gn_solve(eq, 1e-6);
    const Eigen::MatrixXd damped = eq.A + s.damping * Eigen::MatrixXd::Identity(12, 12);
    EXPECT_NEAR(s.damping, 1e-6 * eq.A.trace() / 12, 1e-15);
    const Eigen::VectorXd oracle = damped.fullPivLu().solve(-eq.b);
    EXPECT_LE((s.delta - oracle).norm() / oracle.norm(), 1e-10);

    // Same system stored as 2 x 2 blocks.
    NormalEquations blocks;
    blocks.parameters = 12;
    blocks.block_sparse = true;
    blocks.b = eq.b;
    for (int k = 0; k < 2; ++k)
      for (int l = 0; l < 2; ++l) blocks.blocks[{k, l}] = eq.A.block<6, 6>(6 * k, 6 * l);
    EXPECT_LE((gn_solve(blocks, 1e-6).delta - s.delta).norm() / oracle.norm(), 1e-8);
  }
}

TEST(GnSolve, DampingEscalationAndFailure) {
  NormalEquations eq;
  eq.parameters = 2;
  eq.A = Eigen::Matrix2d::Zero();
  eq.b = Eigen::Vector2d(1.0, 0.0);
  const SolveResult s = gn_solve(eq, 1e-6);
  EXPECT_GE(s.escalations, 1);
  EXPECT_GT(s.damping, 0.0);
  EXPECT_TRUE(s.delta.allFinite());

  eq.A = -Eigen::Matrix2d::Identity();
  EXPECT_THROW(gn_solve(eq, 1e-6), SolverError);
}

TEST(MStep, ZeroResidualReturnsImmediately) {
  std::mt19937_64 rng(13);
  const PointCloud ref = cloud_of(random_points(50, rng));
  ResidualSpec s;
  s.weight.assign(ref.size(), 1.0);
  s.target = ref.points;
  const MStepResult r = m_step(s, ref, RigidModel{}, MStepOptions{});
  EXPECT_EQ(r.gn_iterations, 0);
  EXPECT_EQ(r.objective, std::vector<double>{0.0});
}

TEST(MStep, RigidRecoversKnownTransform) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud ref = cloud_of(random_points(200, rng));
    const RigidTransform truth = random_transform(rng, 0.2, 0.02);
    ResidualSpec s;
    for (const auto& p : ref.points) {
      s.weight.push_back(u(rng));
      s.target.push_back(truth * p);
    }
    s.sigma_inv.setConstant(100.0);
    MStepOptions opt;
    opt.max_gn_iters = 3;
    const MStepResult r = m_step(s, ref, RigidModel{}, opt);
    EXPECT_LE(r.gn_iterations, 3);
    const RigidTransform oracle = kabsch(ref.points, s.target, s.weight);
    const RigidTransform& est = std::get<RigidModel>(r.state).pose;
    double worst = 0.0, worst_oracle = 0.0;
    for (const auto& p : ref.points) {
      worst = std::max(worst, (est * p - truth * p).norm());
      worst_oracle = std::max(worst_oracle, (est * p - oracle * p).norm());
    }
    EXPECT_LE(worst, 1e-6);
    EXPECT_LE(worst_oracle, 1e-6);
    expect_non_increasing(r);
  }
}

TEST(MStep, PointToPlaneOffset) {
  std::mt19937_64 rng(15);
  const PointCloud ref = cloud_of(random_points(300, rng));
  ResidualSpec s;
  s.mode = ResidualMode::point_to_plane;
  for (const auto& p : ref.points) {
    s.weight.push_back(1.0);
    s.target.push_back(p + Eigen::Vector3d(0.3, -0.2, 0.1));
    s.normal.push_back(Eigen::Vector3d::UnitZ());
  }
  MStepOptions opt;
  opt.max_gn_iters = 3;
  const MStepResult r = m_step(s, ref, RigidModel{}, opt);
  ASSERT_GE(r.objective.size(), 2u);
  EXPECT_LE(r.objective.back(), 0.01 * r.objective.front());
  expect_non_increasing(r);
  const Eigen::Vector3d t = std::get<RigidModel>(r.state).pose.translation();
  EXPECT_NEAR(t.z(), 0.1, 1e-6);
  // x / y are unobservable; any motion there comes from damping only.
  EXPECT_LT(t.head<2>().norm(), 0.1);
}

TEST(MStep, ArticulatedAndNodeGraphDescend) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    const PointCloud ref = sample_shape(Shape::blob, 400, static_cast<std::uint64_t>(trial));
    MStepOptions opt;
    opt.max_gn_iters = 5;
    const ArticulatedTree tree = random_chain_tree(rng, 4, ref.size());
    const PointCloud cur = forward_points(ref, tree);
    expect_non_increasing(m_step(random_residuals(rng, cur.points, ResidualMode::point_to_point, 0.005), ref, tree, opt));

    const NodeGraph g = random_graph(rng, ref, 0.05);
    opt.lambda_reg = 10.0;
    const PointCloud gc = forward_points(ref, g);
    const MStepResult r = m_step(random_residuals(rng, gc.points, ResidualMode::point_to_point, 0.005), ref, g, opt);
    expect_non_increasing(r);
    EXPECT_LT(r.objective.back(), r.objective.front());
  }
}

TEST(MStep, Validation) {
  ResidualSpec s;
  s.weight = {1.5};
  s.target = {Eigen::Vector3d::Zero()};
  EXPECT_THROW(m_step(s, cloud_of({Eigen::Vector3d::Zero()}), RigidModel{}, MStepOptions{}), InputError);
  s.weight = {1.0};
  EXPECT_THROW(m_step(s, cloud_of({Eigen::Vector3d::Zero(), Eigen::Vector3d::Ones()}), RigidModel{}, MStepOptions{}),
               InputError);
}
