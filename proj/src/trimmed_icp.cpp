#include "filterreg/trimmed_icp.hpp"

#include "filterreg/error.hpp"
#include "filterreg/spatial_index.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <chrono>
#include <numeric>

namespace filterreg {

RigidTransform weighted_rigid_fit(const std::vector<Eigen::Vector3d>& src, const std::vector<Eigen::Vector3d>& dst,
                                  const std::vector<double>& weights) {
  if (src.size() != dst.size() || src.size() != weights.size()) throw InputError("rigid fit: size mismatch");
  double total = 0.0;
  Eigen::Vector3d cs = Eigen::Vector3d::Zero();
  Eigen::Vector3d cd = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    total += weights[i];
    cs += weights[i] * src[i];
    cd += weights[i] * dst[i];
  }
  if (!(total > 0.0)) throw DegenerateError("rigid fit: total weight is zero");
  cs /= total;
  cd /= total;
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) H += weights[i] * (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) D(2, 2) = -1.0;
  const Eigen::Matrix3d R = project_to_rotation(svd.matrixV() * D * svd.matrixU().transpose());
  return {R, cd - R * cs};
}

RegistrationResult trimmed_icp(const PointCloud& model, const PointCloud& observation, const RigidTransform& initial,
                               const TrimmedIcpOptions& options) {
  if (model.empty() || observation.empty()) throw InputError("trimmed ICP needs non-empty clouds");
  if (!(options.trim_fraction > 0.0 && options.trim_fraction <= 1.0)) {
    throw InputError("trim fraction must lie in (0, 1]");
  }
  if (options.max_iters < 1) throw InputError("trimmed ICP: max_iters must be >= 1");
  const PointIndex index(observation.points);
  double diameter = model.diameter();
  if (!(diameter > 0.0)) diameter = 1.0;

  RegistrationResult result;
  RigidTransform pose = initial;
  const std::size_t m = model.size();
  const auto keep = std::max<std::size_t>(3, static_cast<std::size_t>(options.trim_fraction * static_cast<double>(m)));
  std::vector<Eigen::Vector3d> moved(m), matched(m);
  std::vector<std::pair<double, std::size_t>> ranked(m);
  for (int it = 0; it < options.max_iters; ++it) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < m; ++i) {
      moved[i] = pose * model.points[i];
      matched[i] = observation.points[index.nearest(moved[i])];
      ranked[i] = {(moved[i] - matched[i]).squaredNorm(), i};
    }
    std::nth_element(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(std::min(keep, m) - 1), ranked.end());
    std::vector<double> weights(m, 0.0);
    double trimmed = 0.0;
    for (std::size_t r = 0; r < std::min(keep, m); ++r) {
      weights[ranked[r].second] = 1.0;
      trimmed += ranked[r].first;
    }
    const RigidTransform step = weighted_rigid_fit(moved, matched, weights);
    const RigidTransform next = step * pose;
    const Twist z = twist_log(step);
    IterationRecord rec;
    rec.objective = trimmed / static_cast<double>(std::min(keep, m));
    rec.twist_norm = z.angular.norm() + z.linear.norm() / diameter;
    rec.inlier_mass = static_cast<double>(std::min(keep, m));
    rec.mstep_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    pose = RigidTransform(project_to_rotation(next.rotation()), next.translation());
    result.history.push_back(rec);
    result.iterations = it + 1;
    if (rec.twist_norm < options.twist_tolerance) {
      result.reason = Termination::converged;
      break;
    }
  }
  result.state = RigidModel{pose};
  if (result.reason == Termination::max_iters) result.message = "reached max_iters";
  return result;
}

}  // namespace filterreg
