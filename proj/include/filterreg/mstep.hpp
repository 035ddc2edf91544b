#pragma once

#include "filterreg/estep.hpp"
#include "filterreg/kinematics.hpp"

#include <Eigen/SparseCore>

#include <map>
#include <utility>
#include <vector>

namespace filterreg {

enum class ResidualMode { point_to_point, point_to_plane };

// Weighted targets of the M step. In point-to-plane mode a zero normal marks
// a point that falls back to the point-to-point residual.
struct ResidualSpec {
  ResidualMode mode = ResidualMode::point_to_point;
  std::vector<double> weight;
  std::vector<Eigen::Vector3d> target;
  Eigen::Vector3d sigma_inv = Eigen::Vector3d::Ones();
  std::vector<Eigen::Vector3d> normal;

  std::size_t size() const { return weight.size(); }
  void validate() const;
  // Scalar scale of the plane residual (geometric mean of sigma_inv).
  double plane_scale() const;
};

// Averaged normals shorter than this are treated as unreliable.
inline constexpr double kMinNormalNorm = 0.1;

ResidualSpec make_residuals(const MomentField& moments, const Eigen::Vector3d& sigma, ResidualMode mode);

// A and b of the Gauss-Newton system for sum r^T r, with b = J^T r (half the
// gradient of the objective). Node graphs store 6x6 blocks by node pair.
struct NormalEquations {
  int parameters = 0;
  Eigen::MatrixXd A;
  std::map<std::pair<int, int>, Matrix6d> blocks;
  bool block_sparse = false;
  Eigen::VectorXd b;
  double objective = 0.0;  // sum r^T r at the linearization point

  Eigen::MatrixXd dense() const;
  Eigen::SparseMatrix<double> sparse() const;
  double trace() const;
};

// Per-point residual rows (up to 3) and their 6-column twist Jacobian.
struct PointResidual {
  int rows = 0;
  Eigen::Vector3d r = Eigen::Vector3d::Zero();
  Matrix36d J = Matrix36d::Zero();
};
PointResidual point_residual(const ResidualSpec& residuals, std::size_t i, const Eigen::Vector3d& x);

double data_objective(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points);
// lambda_reg * sum over edges of |T_k p_l - T_l p_l|^2 + |T_l p_k - T_k p_k|^2.
double regularizer_objective(const NodeGraph& graph, double lambda_reg);

NormalEquations assemble_rigid(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points);

// Lines 1-4 of the articulated assembly: per-body twist-space accumulation.
struct BodyAccumulator {
  Matrix6d JtJ = Matrix6d::Zero();
  Vector6d Jtr = Vector6d::Zero();
  double objective = 0.0;
};
std::vector<BodyAccumulator> accumulate_bodies(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                                               const std::vector<int>& binding, int num_bodies);
NormalEquations assemble_articulated(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                                     const ArticulatedTree& tree);

NormalEquations assemble_nodegraph(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                                   const NodeGraph& graph, double lambda_reg);

NormalEquations assemble(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                         const KinematicState& state, double lambda_reg);

struct SolveResult {
  Eigen::VectorXd delta;
  double damping = 0.0;  // absolute mu added to the diagonal
  int escalations = 0;
};

// Solves (A + mu I) delta = -b with mu = damping * trace(A) / P, escalating mu
// tenfold up to 5 times when the factorization fails. Throws SolverError.
SolveResult gn_solve(const NormalEquations& equations, double damping);

struct MStepOptions {
  int max_gn_iters = 1;
  double damping = 1e-6;
  double step_tolerance = 1e-12;
  int max_halvings = 10;
  double lambda_reg = 0.0;  // node graphs only
};

struct MStepResult {
  KinematicState state;
  std::vector<double> objective;  // initial value, then one per accepted step
  int gn_iterations = 0;
  int halvings = 0;
  int rejected = 0;
  double damping = 0.0;
};

// Objective of `state`: data term over forward points plus the node-graph regularizer.
double total_objective(const ResidualSpec& residuals, const PointCloud& reference, const KinematicState& state,
                       double lambda_reg);

MStepResult m_step(const ResidualSpec& residuals, const PointCloud& reference, const KinematicState& state,
                   const MStepOptions& options);

}  // namespace filterreg
