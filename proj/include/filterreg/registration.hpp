#pragma once

#include "filterreg/estep.hpp"
#include "filterreg/kinematics.hpp"
#include "filterreg/mstep.hpp"

#include <string>
#include <vector>

namespace filterreg {

enum class Termination { converged, max_iters, degenerate };

const char* to_string(Termination t);

struct RegistrationConfig {
  GmmConfig gmm;
  // When true, sigma is replaced by 5% of the observation bounding-box diagonal (isotropic).
  bool auto_sigma = true;
  ResidualMode residual = ResidualMode::point_to_point;
  int max_em_iters = 50;
  double twist_tolerance = 1e-4;
  Backend backend = Backend::lattice;
  MStepOptions mstep;
  // Node graphs: when mstep.lambda_reg < 0 the regularizer weight is set so its
  // curvature is this fraction of the data term's (see README).
  double regularizer_ratio = 0.1;

  void validate() const;
};

struct IterationRecord {
  double objective = 0.0;    // M-step objective after the update
  double twist_norm = 0.0;   // |w| + |v| / diameter, max over moving parts
  double sigma = 0.0;        // isotropic sigma used by this E step (mean when anisotropic)
  double inlier_mass = 0.0;  // sum of weights
  double estep_ms = 0.0;
  double mstep_ms = 0.0;
};

struct RegistrationResult {
  KinematicState state;
  int iterations = 0;
  std::vector<IterationRecord> history;
  Termination reason = Termination::max_iters;
  std::string message;
  int lattice_builds = 0;
  double lambda_reg = 0.0;
};

RegistrationResult register_point_sets(const PointCloud& model_reference, const PointCloud& observation,
                                       const KinematicState& initial, RegistrationConfig config);

// (1/M) sum_i |T x_i - T_gt x_i|.
double alignment_error(const RigidTransform& T, const RigidTransform& T_gt, const PointCloud& reference);

// Exact log-likelihood with normalized Gaussians in the configured kernel space:
// sum_i log((1-w)/N sum_k N(x_i; y_k) + w/M).
double log_likelihood(const PointCloud& model, const PointCloud& observation, const GmmConfig& config);

}  // namespace filterreg
