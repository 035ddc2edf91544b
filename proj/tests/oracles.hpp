#pragma once

// Independent reference computations shared by the unit tests and the acceptance run.

#include "filterreg/mstep.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

namespace filterreg::testing {

// Straight E-step sums, written independently of the library transform.
struct DirectMoments {
  std::vector<double> m0, m2;
  std::vector<Eigen::Vector3d> m1;
};

inline DirectMoments direct_moments(const std::vector<Eigen::Vector3d>& x, const std::vector<Eigen::Vector3d>& y,
                                     const Eigen::Vector3d& sigma) {
  DirectMoments d;
  for (const auto& xi : x) {
    double m0 = 0.0, m2 = 0.0;
    Eigen::Vector3d m1 = Eigen::Vector3d::Zero();
    for (const auto& yk : y) {
      const double e = ((xi - yk).array() / sigma.array()).square().sum();
      const double k = std::exp(-0.5 * e);
      m0 += k;
      m1 += k * yk;
      m2 += k * yk.squaredNorm();
    }
    d.m0.push_back(m0);
    d.m1.push_back(m1);
    d.m2.push_back(m2);
  }
  return d;
}

inline double golden_max(const std::function<double(double)>& f, double lo, double hi) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi, c = b - g * (b - a), d = a + g * (b - a);
  for (int it = 0; it < 300 && b - a > 1e-15 * (1.0 + std::abs(a)); ++it) {
    if (f(c) > f(d)) {
      b = d;
    } else {
      a = c;
    }
    c = b - g * (b - a);
    d = a + g * (b - a);
  }
  return 0.5 * (a + b);
}

inline ResidualSpec random_residuals(std::mt19937_64& rng, const std::vector<Eigen::Vector3d>& points,
                                     ResidualMode mode, double offset = 0.02) {
  std::uniform_real_distribution<double> u(0.0, 1.0), o(-offset, offset);
  ResidualSpec spec;
  spec.mode = mode;
  spec.sigma_inv = Eigen::Vector3d(1.0 / 0.01, 1.0 / 0.015, 1.0 / 0.02);
  for (const auto& p : points) {
    spec.weight.push_back(u(rng) < 0.1 ? 0.0 : u(rng));
    spec.target.push_back(p + Eigen::Vector3d(o(rng), o(rng), o(rng)));
    if (mode == ResidualMode::point_to_plane) spec.normal.push_back(u(rng) < 0.1 ? Eigen::Vector3d::Zero() : random_unit(rng));
  }
  return spec;
}

// Dense residual stack and Jacobian in world twist coordinates of one point.
inline void point_rows(const ResidualSpec& s, std::size_t i, const Eigen::Vector3d& x,
                       std::vector<Eigen::RowVectorXd>& rows, std::vector<double>& r, const Eigen::MatrixXd& dx_dtheta) {
  const double w = s.weight[i];
  if (w == 0.0) return;
  const Eigen::Vector3d diff = x - s.target[i];
  if (s.mode == ResidualMode::point_to_plane && s.normal[i].norm() > 0.5) {
    const double c = std::sqrt(w) * std::cbrt(s.sigma_inv.x() * s.sigma_inv.y() * s.sigma_inv.z());
    rows.push_back(c * s.normal[i].transpose() * dx_dtheta);
    r.push_back(c * s.normal[i].dot(diff));
    return;
  }
  for (int a = 0; a < 3; ++a) {
    const double c = std::sqrt(w) * s.sigma_inv[a];
    rows.push_back(c * dx_dtheta.row(a));
    r.push_back(c * diff[a]);
  }
}

inline Eigen::MatrixXd twist_block(const Eigen::Vector3d& x) {
  Eigen::MatrixXd j(3, 6);
  j << 0, x.z(), -x.y(), 1, 0, 0,  //
      -x.z(), 0, x.x(), 0, 1, 0,   //
      x.y(), -x.x(), 0, 0, 0, 1;
  return j;
}

inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> dense_system(const std::vector<Eigen::RowVectorXd>& rows,
                                                                 const std::vector<double>& r, int p) {
  Eigen::MatrixXd J(static_cast<Eigen::Index>(rows.size()), p);
  Eigen::VectorXd rv(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    J.row(static_cast<Eigen::Index>(k)) = rows[k];
    rv[static_cast<Eigen::Index>(k)] = r[k];
  }
  return {J.transpose() * J, J.transpose() * rv};
}

inline double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

inline ArticulatedTree random_chain_tree(std::mt19937_64& rng, int bodies, std::size_t points) {
  std::vector<Body> b(static_cast<std::size_t>(bodies));
  std::uniform_real_distribution<double> q(-1.0, 1.0);
  for (int j = 1; j < bodies; ++j) {
    auto& body = b[static_cast<std::size_t>(j)];
    body.parent = std::uniform_int_distribution<int>(0, j - 1)(rng);
    body.origin = random_transform(rng, 1.0, 0.1);
    body.joint = j % 3 == 0 ? JointType::prismatic : JointType::revolute;
    body.axis = random_unit(rng);
  }
  ArticulatedTree tree(b, true);
  Eigen::VectorXd v(tree.num_joints());
  for (auto& x : v) x = q(rng);
  tree.set_joint_values(v);
  tree.set_base_pose(random_transform(rng, 1.0, 0.1));
  std::vector<int> binding(points);
  for (auto& x : binding) x = std::uniform_int_distribution<int>(0, bodies - 1)(rng);
  tree.set_binding(binding);
  return tree;
}

inline NodeGraph random_graph(std::mt19937_64& rng, const PointCloud& ref, double spacing) {
  NodeGraph g = build_node_graph(ref, spacing);
  for (auto& t : g.transforms) t = random_transform(rng, 0.02, 0.002);
  return g;
}

}  // namespace filterreg::testing
