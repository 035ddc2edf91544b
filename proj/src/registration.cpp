#include "filterreg/registration.hpp"

#include "filterreg/error.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>

namespace filterreg {

const char* to_string(Termination t) {
  switch (t) {
    case Termination::converged:
      return "converged";
    case Termination::max_iters:
      return "max_iters";
    case Termination::degenerate:
      return "degenerate";
  }
  return "unknown";
}

void RegistrationConfig::validate() const {
  if (max_em_iters < 1) throw InputError("max_em_iters must be >= 1");
  if (!(twist_tolerance > 0.0)) throw InputError("twist tolerance must be > 0");
  if (mstep.max_gn_iters < 1) throw InputError("max_gn_iters must be >= 1");
  if (!(mstep.damping >= 0.0)) throw InputError("damping must be >= 0");
  if (!auto_sigma) gmm.validate();
}

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

// Curvature-matched regularizer weight: ratio * (sum_i w_i / sigma^2) / (2 |E|).
double auto_lambda_reg(const MomentField& moments, const GmmConfig& gmm, const NodeGraph& graph, double ratio) {
  if (graph.edges.empty()) return 0.0;
  const double inv_sigma2 = gmm.sigma.cwiseInverse().squaredNorm() / 3.0;
  return ratio * moments.inlier_mass() * inv_sigma2 / (2.0 * static_cast<double>(graph.edges.size()));
}

}  // namespace

RegistrationResult register_point_sets(const PointCloud& model_reference, const PointCloud& observation,
                                       const KinematicState& initial, RegistrationConfig config) {
  if (model_reference.empty()) throw InputError("model cloud is empty");
  if (observation.empty()) throw InputError("observation cloud is empty");
  model_reference.validate();
  observation.validate();
  if (config.auto_sigma) config.gmm.sigma = Eigen::Vector3d::Constant(0.05 * observation.diameter());
  config.gmm.average_normals = config.residual == ResidualMode::point_to_plane;
  config.validate();
  config.gmm.validate();
  if (!(config.gmm.sigma.array() > 0.0).all()) throw InputError("sigma must be > 0 (degenerate observation extent?)");

  double diameter = model_reference.diameter();
  if (!(diameter > 0.0)) diameter = 1.0;

  RegistrationResult result;
  result.state = initial;
  std::optional<ObservationIndex> index;
  double lambda_reg = config.mstep.lambda_reg;
  const std::size_t m = model_reference.size();

  for (int it = 0; it < config.max_em_iters; ++it) {
    IterationRecord rec;
    const auto e_start = std::chrono::steady_clock::now();
    if (!index || config.gmm.update_sigma) {
      index.emplace(observation, config.gmm, config.backend);
      ++result.lattice_builds;
    }
    const PointCloud current = forward_points(model_reference, result.state);
    const MomentField moments = index->compute(current.points, current.features);
    rec.sigma = config.gmm.sigma.mean();
    rec.inlier_mass = moments.inlier_mass();
    if (!(rec.inlier_mass >= 1e-9 * static_cast<double>(m))) {
      result.reason = Termination::degenerate;
      result.message = "inlier mass " + std::to_string(rec.inlier_mass) + " below 1e-9 * M";
      break;
    }
    if (config.gmm.update_sigma) {
      config.gmm.sigma = Eigen::Vector3d::Constant(update_sigma(moments, current.points));
    }
    rec.estep_ms = elapsed_ms(e_start);

    const auto m_start = std::chrono::steady_clock::now();
    if (const auto* graph = std::get_if<NodeGraph>(&result.state); graph && lambda_reg < 0.0) {
      lambda_reg = auto_lambda_reg(moments, config.gmm, *graph, config.regularizer_ratio);
    }
    MStepOptions options = config.mstep;
    options.lambda_reg = std::max(lambda_reg, 0.0);
    const ResidualSpec residuals = make_residuals(moments, config.gmm.sigma, config.residual);
    MStepResult step = m_step(residuals, model_reference, result.state, options);
    rec.objective = step.objective.back();
    rec.twist_norm = motion_change_norm(result.state, step.state, diameter);
    result.state = std::move(step.state);
    rec.mstep_ms = elapsed_ms(m_start);

    result.history.push_back(rec);
    result.iterations = it + 1;
    if (rec.twist_norm < config.twist_tolerance) {
      result.reason = Termination::converged;
      break;
    }
  }
  if (result.reason == Termination::max_iters) result.message = "reached max_em_iters";
  result.lambda_reg = std::max(lambda_reg, 0.0);
  return result;
}

double alignment_error(const RigidTransform& T, const RigidTransform& T_gt, const PointCloud& reference) {
  if (reference.empty()) throw InputError("alignment error needs a non-empty reference");
  double total = 0.0;
  for (const auto& x : reference.points) total += (T * x - T_gt * x).norm();
  return total / static_cast<double>(reference.size());
}

double log_likelihood(const PointCloud& model, const PointCloud& observation, const GmmConfig& config) {
  config.validate();
  if (model.empty() || observation.empty()) throw InputError("log-likelihood needs non-empty clouds");
  const Eigen::VectorXd s = kernel_sigma(config);
  const auto dim = s.size();
  auto kernel_row = [&](const PointCloud& c, std::size_t i) {
    Eigen::VectorXd f(dim);
    Eigen::Index at = 0;
    if (config.correspondence != CorrespondenceMode::feature) {
      f.head<3>() = c.points[i];
      at = 3;
    }
    if (config.correspondence != CorrespondenceMode::position) {
      f.tail(dim - at) = c.features.row(static_cast<Eigen::Index>(i)).transpose();
    }
    return Eigen::VectorXd(f.cwiseQuotient(s));
  };
  const double n = static_cast<double>(observation.size());
  const double mm = static_cast<double>(model.size());
  const double w = config.outlier_ratio;
  double log_norm = 0.0;  // log of prod_j sqrt(2 pi) sigma_j
  for (Eigen::Index j = 0; j < dim; ++j) log_norm += 0.5 * std::log(2.0 * M_PI) + std::log(s[j]);

  std::vector<Eigen::VectorXd> ys(observation.size());
  for (std::size_t k = 0; k < observation.size(); ++k) ys[k] = kernel_row(observation, k);
  double total = 0.0;
  std::vector<double> exponents(observation.size());
  for (std::size_t i = 0; i < model.size(); ++i) {
    const Eigen::VectorXd x = kernel_row(model, i);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < ys.size(); ++k) {
      exponents[k] = -0.5 * (x - ys[k]).squaredNorm();
      top = std::max(top, exponents[k]);
    }
    double sum = 0.0;
    for (double e : exponents) sum += std::exp(e - top);
    // log((1-w)/N * exp(top - log_norm) * sum + w/M), evaluated stably.
    const double a = std::log1p(-w) - std::log(n) + top - log_norm + std::log(sum);
    if (w > 0.0) {
      const double b = std::log(w) - std::log(mm);
      const double hi = std::max(a, b);
      total += hi + std::log(std::exp(a - hi) + std::exp(b - hi));
    } else {
      total += a;
    }
  }
  return total;
}

}  // namespace filterreg
