#include "filterreg/mstep.hpp"

#include "filterreg/error.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <string>

namespace filterreg {

void ResidualSpec::validate() const {
  const std::size_t n = weight.size();
  if (target.size() != n) throw InputError("residual spec: target count mismatch");
  if (mode == ResidualMode::point_to_plane && normal.size() != n) {
    throw InputError("residual spec: point-to-plane needs one normal per point");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(weight[i] >= 0.0 && weight[i] <= 1.0)) throw InputError("residual spec: weights must lie in [0, 1]");
    if (weight[i] > 0.0 && !target[i].allFinite()) throw InputError("residual spec: non-finite target");
  }
  if (!sigma_inv.allFinite() || (sigma_inv.array() <= 0.0).any()) throw InputError("residual spec: bad sigma_inv");
}

double ResidualSpec::plane_scale() const { return std::cbrt(sigma_inv.prod()); }

ResidualSpec make_residuals(const MomentField& moments, const Eigen::Vector3d& sigma, ResidualMode mode) {
  ResidualSpec spec;
  spec.mode = mode;
  spec.weight = moments.weight;
  spec.sigma_inv = sigma.cwiseInverse();
  spec.target.resize(moments.size(), Eigen::Vector3d::Zero());
  for (std::size_t i = 0; i < moments.size(); ++i) {
    if (spec.weight[i] > 0.0) spec.target[i] = moments.target(i);
  }
  if (mode == ResidualMode::point_to_plane) {
    if (!moments.has_normals()) throw InputError("point-to-plane residuals need averaged normals");
    spec.normal.resize(moments.size(), Eigen::Vector3d::Zero());
    for (std::size_t i = 0; i < moments.size(); ++i) {
      const double norm = moments.normal[i].norm();
      if (norm >= kMinNormalNorm) spec.normal[i] = moments.normal[i] / norm;
    }
  }
  return spec;
}

PointResidual point_residual(const ResidualSpec& residuals, std::size_t i, const Eigen::Vector3d& x) {
  PointResidual out;
  const double w = residuals.weight[i];
  if (w <= 0.0) return out;
  const double s = std::sqrt(w);
  const Eigen::Vector3d diff = x - residuals.target[i];
  const Matrix36d jx = point_twist_jacobian(x);
  if (residuals.mode == ResidualMode::point_to_plane && !residuals.normal[i].isZero(0.0)) {
    const Eigen::Vector3d& n = residuals.normal[i];
    const double scale = s * residuals.plane_scale();
    out.rows = 1;
    out.r.x() = scale * n.dot(diff);
    out.J.row(0) = scale * (n.transpose() * jx);
    return out;
  }
  out.rows = 3;
  const Eigen::Vector3d si = s * residuals.sigma_inv;
  out.r = si.cwiseProduct(diff);
  out.J = si.asDiagonal() * jx;
  return out;
}

double data_objective(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points) {
  if (points.size() != residuals.size()) throw InputError("data objective: point count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double w = residuals.weight[i];
    if (w <= 0.0) continue;
    const Eigen::Vector3d diff = points[i] - residuals.target[i];
    if (residuals.mode == ResidualMode::point_to_plane && !residuals.normal[i].isZero(0.0)) {
      const double r = residuals.plane_scale() * residuals.normal[i].dot(diff);
      total += w * r * r;
    } else {
      total += w * residuals.sigma_inv.cwiseProduct(diff).squaredNorm();
    }
  }
  return total;
}

double regularizer_objective(const NodeGraph& graph, double lambda_reg) {
  if (lambda_reg <= 0.0) return 0.0;
  double total = 0.0;
  for (const auto& [k, l] : graph.edges) {
    const RigidTransform& tk = graph.transforms[static_cast<std::size_t>(k)];
    const RigidTransform& tl = graph.transforms[static_cast<std::size_t>(l)];
    const Eigen::Vector3d& pk = graph.positions[static_cast<std::size_t>(k)];
    const Eigen::Vector3d& pl = graph.positions[static_cast<std::size_t>(l)];
    total += (tk * pl - tl * pl).squaredNorm() + (tl * pk - tk * pk).squaredNorm();
  }
  return lambda_reg * total;
}

Eigen::MatrixXd NormalEquations::dense() const {
  if (!block_sparse) return A;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(parameters, parameters);
  for (const auto& [kl, block] : blocks) out.block<6, 6>(6 * kl.first, 6 * kl.second) = block;
  return out;
}

Eigen::SparseMatrix<double> NormalEquations::sparse() const {
  std::vector<Eigen::Triplet<double>> triplets;
  if (block_sparse) {
    triplets.reserve(36 * blocks.size());
    for (const auto& [kl, block] : blocks) {
      for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 6; ++c) triplets.emplace_back(6 * kl.first + r, 6 * kl.second + c, block(r, c));
      }
    }
  } else {
    for (int r = 0; r < parameters; ++r) {
      for (int c = 0; c < parameters; ++c) {
        if (A(r, c) != 0.0) triplets.emplace_back(r, c, A(r, c));
      }
    }
  }
  Eigen::SparseMatrix<double> out(parameters, parameters);
  out.setFromTriplets(triplets.begin(), triplets.end());
  return out;
}

double NormalEquations::trace() const {
  if (!block_sparse) return A.trace();
  double t = 0.0;
  for (const auto& [kl, block] : blocks) {
    if (kl.first == kl.second) t += block.trace();
  }
  return t;
}

NormalEquations assemble_rigid(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points) {
  if (points.size() != residuals.size()) throw InputError("assemble_rigid: point count mismatch");
  Matrix6d A = Matrix6d::Zero();
  Vector6d b = Vector6d::Zero();
  double objective = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const PointResidual pr = point_residual(residuals, i, points[i]);
    if (pr.rows == 0) continue;
    const auto J = pr.J.topRows(pr.rows);
    const auto r = pr.r.head(pr.rows);
    A.noalias() += J.transpose() * J;
    b.noalias() += J.transpose() * r;
    objective += r.squaredNorm();
  }
  NormalEquations eq;
  eq.parameters = 6;
  eq.A = A;
  eq.b = b;
  eq.objective = objective;
  return eq;
}

std::vector<BodyAccumulator> accumulate_bodies(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                                               const std::vector<int>& binding, int num_bodies) {
  if (points.size() != residuals.size() || binding.size() != points.size()) {
    throw InputError("assemble_articulated: point / binding count mismatch");
  }
  std::vector<BodyAccumulator> acc(static_cast<std::size_t>(num_bodies));
  for (std::size_t i = 0; i < points.size(); ++i) {
    const PointResidual pr = point_residual(residuals, i, points[i]);
    if (pr.rows == 0) continue;
    BodyAccumulator& body = acc[static_cast<std::size_t>(binding[i])];
    const auto J = pr.J.topRows(pr.rows);
    const auto r = pr.r.head(pr.rows);
    body.JtJ.noalias() += J.transpose() * J;
    body.Jtr.noalias() += J.transpose() * r;
    body.objective += r.squaredNorm();
  }
  return acc;
}

NormalEquations assemble_articulated(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                                     const ArticulatedTree& tree) {
  const std::vector<BodyAccumulator> acc = accumulate_bodies(residuals, points, tree.binding(), tree.num_bodies());
  const int p = tree.num_parameters();
  NormalEquations eq;
  eq.parameters = p;
  eq.A = Eigen::MatrixXd::Zero(p, p);
  eq.b = Eigen::VectorXd::Zero(p);
  for (int j = 0; j < tree.num_bodies(); ++j) {
    const BodyAccumulator& body = acc[static_cast<std::size_t>(j)];
    if (body.JtJ.isZero(0.0) && body.Jtr.isZero(0.0)) continue;
    const Eigen::Matrix<double, 6, Eigen::Dynamic> js = tree.spatial_velocity_jacobian(j);
    eq.A.noalias() += js.transpose() * body.JtJ * js;
    eq.b.noalias() += js.transpose() * body.Jtr;
    eq.objective += body.objective;
  }
  return eq;
}

NormalEquations assemble_nodegraph(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                                   const NodeGraph& graph, double lambda_reg) {
  if (points.size() != residuals.size() || graph.skinning.points.size() != points.size()) {
    throw InputError("assemble_nodegraph: point / skinning count mismatch");
  }
  if (lambda_reg < 0.0) throw InputError("assemble_nodegraph: lambda_reg must be >= 0");
  const auto n = static_cast<int>(graph.num_nodes());
  NormalEquations eq;
  eq.parameters = 6 * n;
  eq.block_sparse = true;
  eq.b = Eigen::VectorXd::Zero(eq.parameters);
  auto block = [&](int k, int l) -> Matrix6d& {
    auto it = eq.blocks.try_emplace({k, l}, Matrix6d::Zero()).first;
    return it->second;
  };

  for (std::size_t i = 0; i < points.size(); ++i) {
    const PointSkin& skin = graph.skinning.points[i];
    if (!skin.bound()) continue;
    const PointResidual pr = point_residual(residuals, i, points[i]);
    if (pr.rows == 0) continue;
    const auto J = pr.J.topRows(pr.rows);
    const auto r = pr.r.head(pr.rows);
    const Matrix6d JtJ = J.transpose() * J;
    const Vector6d Jtr = J.transpose() * r;
    eq.objective += r.squaredNorm();
    for (std::size_t a = 0; a < skin.nodes.size(); ++a) {
      const int k = skin.nodes[a];
      const double wk = skin.weights[a];
      eq.b.segment<6>(6 * k) += wk * Jtr;
      for (std::size_t c = 0; c < skin.nodes.size(); ++c) {
        block(k, skin.nodes[c]) += wk * skin.weights[c] * JtJ;
      }
    }
  }

  if (lambda_reg > 0.0) {
    const double s = std::sqrt(lambda_reg);
    // Residual r = s (T_a p - T_b p); d r / d zeta_a = s J(T_a p), d r / d zeta_b = -s J(T_b p).
    auto add_term = [&](int a, int b, const Eigen::Vector3d& p) {
      const Eigen::Vector3d xa = graph.transforms[static_cast<std::size_t>(a)] * p;
      const Eigen::Vector3d xb = graph.transforms[static_cast<std::size_t>(b)] * p;
      const Eigen::Vector3d r = s * (xa - xb);
      const Matrix36d ja = s * point_twist_jacobian(xa);
      const Matrix36d jb = -s * point_twist_jacobian(xb);
      block(a, a) += ja.transpose() * ja;
      block(b, b) += jb.transpose() * jb;
      block(a, b) += ja.transpose() * jb;
      block(b, a) += jb.transpose() * ja;
      eq.b.segment<6>(6 * a) += ja.transpose() * r;
      eq.b.segment<6>(6 * b) += jb.transpose() * r;
      eq.objective += r.squaredNorm();
    };
    for (const auto& [k, l] : graph.edges) {
      add_term(k, l, graph.positions[static_cast<std::size_t>(l)]);
      add_term(l, k, graph.positions[static_cast<std::size_t>(k)]);
    }
  }
  return eq;
}

NormalEquations assemble(const ResidualSpec& residuals, const std::vector<Eigen::Vector3d>& points,
                         const KinematicState& state, double lambda_reg) {
  if (std::holds_alternative<RigidModel>(state)) return assemble_rigid(residuals, points);
  if (const auto* tree = std::get_if<ArticulatedTree>(&state)) return assemble_articulated(residuals, points, *tree);
  return assemble_nodegraph(residuals, points, std::get<NodeGraph>(state), lambda_reg);
}

SolveResult gn_solve(const NormalEquations& equations, double damping) {
  const int p = equations.parameters;
  if (equations.b.size() != p) throw InputError("gn_solve: b size mismatch");
  SolveResult out;
  out.delta = Eigen::VectorXd::Zero(p);
  if (p == 0 || equations.b.isZero(0.0)) return out;
  const double mean_diag = equations.trace() / p;
  double mu = damping * mean_diag;
  const double fallback = 1e-12 * (mean_diag > 0.0 ? mean_diag : 1.0);

  for (int attempt = 0; attempt <= 5; ++attempt) {
    bool ok = false;
    if (equations.block_sparse) {
      Eigen::SparseMatrix<double> A = equations.sparse();
      Eigen::SparseMatrix<double> I(p, p);
      I.setIdentity();
      A += mu * I;
      Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(A);
      if (llt.info() == Eigen::Success) {
        out.delta = llt.solve(-equations.b);
        ok = llt.info() == Eigen::Success && out.delta.allFinite();
      }
    } else {
      Eigen::MatrixXd A = equations.A;
      A.diagonal().array() += mu;
      Eigen::LLT<Eigen::MatrixXd> llt(A);
      if (llt.info() == Eigen::Success) {
        out.delta = llt.solve(-equations.b);
        ok = out.delta.allFinite();
      }
    }
    if (ok) {
      out.damping = mu;
      out.escalations = attempt;
      return out;
    }
    mu = std::max(mu * 10.0, fallback);
  }
  throw SolverError("normal equations could not be factorized after damping escalation");
}

double total_objective(const ResidualSpec& residuals, const PointCloud& reference, const KinematicState& state,
                       double lambda_reg) {
  const PointCloud current = forward_points(reference, state);
  double total = data_objective(residuals, current.points);
  if (const auto* graph = std::get_if<NodeGraph>(&state)) total += regularizer_objective(*graph, lambda_reg);
  return total;
}

MStepResult m_step(const ResidualSpec& residuals, const PointCloud& reference, const KinematicState& state,
                   const MStepOptions& options) {
  residuals.validate();
  if (residuals.size() != reference.size()) throw InputError("m_step: residual count does not match the model");
  MStepResult out{state, {}, 0, 0, 0, 0.0};
  double current = total_objective(residuals, reference, out.state, options.lambda_reg);
  out.objective.push_back(current);
  for (int it = 0; it < options.max_gn_iters; ++it) {
    if (current == 0.0) break;
    const PointCloud points = forward_points(reference, out.state);
    const NormalEquations eq = assemble(residuals, points.points, out.state, options.lambda_reg);
    const SolveResult solved = gn_solve(eq, options.damping);
    out.damping = solved.damping;
    if (solved.delta.norm() <= options.step_tolerance) break;
    ++out.gn_iterations;

    Eigen::VectorXd delta = solved.delta;
    bool accepted = false;
    for (int h = 0; h <= options.max_halvings; ++h) {
      KinematicState trial = apply_update(out.state, delta);
      const double value = total_objective(residuals, reference, trial, options.lambda_reg);
      if (value <= current) {
        out.state = std::move(trial);
        current = value;
        accepted = true;
        break;
      }
      ++out.halvings;
      delta *= 0.5;
    }
    if (!accepted) {
      ++out.rejected;
      break;
    }
    out.objective.push_back(current);
  }
  return out;
}

}  // namespace filterreg
