#pragma once

#include "filterreg/geometry.hpp"
#include "filterreg/registration.hpp"

#include <vector>

namespace filterreg {

// Weighted least-squares rigid fit: argmin_T sum_i w_i |T src_i - dst_i|^2 (SVD).
RigidTransform weighted_rigid_fit(const std::vector<Eigen::Vector3d>& src, const std::vector<Eigen::Vector3d>& dst,
                                  const std::vector<double>& weights);

struct TrimmedIcpOptions {
  double trim_fraction = 0.8;  // kept share of nearest-neighbor matches
  int max_iters = 50;
  double twist_tolerance = 1e-4;
};

// Nearest-neighbor matches, keep the best trim_fraction, closed-form update.
// Result state is a RigidModel; history records the trimmed mean squared distance.
RegistrationResult trimmed_icp(const PointCloud& model, const PointCloud& observation, const RigidTransform& initial,
                               const TrimmedIcpOptions& options = {});

}  // namespace filterreg
