#include "filterreg/geometry.hpp"

#include "filterreg/error.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <string>

namespace filterreg {

void PointCloud::validate() const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite()) {
      throw InputError("point " + std::to_string(i) + " has a non-finite coordinate");
    }
  }
  if (!normals.empty()) {
    if (normals.size() != points.size()) {
      throw InputError("normal count " + std::to_string(normals.size()) + " != point count " +
                       std::to_string(points.size()));
    }
    for (std::size_t i = 0; i < normals.size(); ++i) {
      if (!normals[i].allFinite() || std::abs(normals[i].norm() - 1.0) > 1e-6) {
        throw InputError("normal " + std::to_string(i) + " is not a unit vector");
      }
    }
  }
  if (features.cols() > 0) {
    if (static_cast<std::size_t>(features.rows()) != points.size()) {
      throw InputError("feature row count " + std::to_string(features.rows()) +
                       " != point count " + std::to_string(points.size()));
    }
    if (!features.allFinite()) throw InputError("features contain non-finite values");
  }
}

Eigen::AlignedBox3d PointCloud::bounding_box() const {
  Eigen::AlignedBox3d box;
  for (const auto& p : points) box.extend(p);
  return box;
}

double PointCloud::diameter() const {
  if (points.empty()) return 0.0;
  return bounding_box().diagonal().norm();
}

RigidTransform::RigidTransform(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
    : rotation_(rotation), translation_(translation) {
  if (!rotation.allFinite() || !translation.allFinite()) {
    throw InputError("rigid transform has non-finite entries");
  }
  if (orthonormality_error() > 1e-9 || rotation.determinant() < 0.0) {
    throw InputError("rotation is not orthonormal with determinant +1");
  }
}

RigidTransform RigidTransform::from_translation(const Eigen::Vector3d& t) {
  return {Eigen::Matrix3d::Identity(), t};
}

RigidTransform RigidTransform::from_axis_angle(const Eigen::Vector3d& axis, double angle,
                                               const Eigen::Vector3d& t) {
  return {Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix(), t};
}

Eigen::Matrix4d RigidTransform::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

RigidTransform RigidTransform::operator*(const RigidTransform& other) const {
  RigidTransform out;
  out.rotation_ = rotation_ * other.rotation_;
  out.translation_ = rotation_ * other.translation_ + translation_;
  return out;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation_ = rotation_.transpose();
  out.translation_ = -(out.rotation_ * translation_);
  return out;
}

double RigidTransform::orthonormality_error() const {
  return (rotation_.transpose() * rotation_ - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
}

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d s;
  // clang-format off
  s <<    0.0, -v.z(),  v.y(),
        v.z(),    0.0, -v.x(),
       -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
  return u * v.transpose();
}

namespace {

// Coefficients of the SO(3)/SE(3) exponential series:
// a = sin(t)/t, b = (1 - cos t)/t^2, c = (t - sin t)/t^3.
struct ExpCoefficients {
  double a, b, c;
};

ExpCoefficients exp_coefficients(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-4) {
    return {1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0};
  }
  return {std::sin(theta) / theta, (1.0 - std::cos(theta)) / t2, (theta - std::sin(theta)) / (t2 * theta)};
}

}  // namespace

RigidTransform twist_exp(const Twist& zeta) {
  const double theta = zeta.angular.norm();
  const Eigen::Matrix3d w = skew(zeta.angular);
  const Eigen::Matrix3d w2 = w * w;
  const auto [a, b, c] = exp_coefficients(theta);
  const Eigen::Matrix3d r = Eigen::Matrix3d::Identity() + a * w + b * w2;
  const Eigen::Matrix3d v = Eigen::Matrix3d::Identity() + b * w + c * w2;
  return {project_to_rotation(r), v * zeta.linear};
}

Twist twist_log(const RigidTransform& T) {
  const Eigen::AngleAxisd aa(T.rotation());
  const double theta = aa.angle();
  const Eigen::Vector3d omega = aa.axis() * theta;
  const Eigen::Matrix3d w = skew(omega);
  double k;  // V^-1 = I - w/2 + k w^2
  if (theta < 1e-4) {
    k = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    const auto [a, b, c] = exp_coefficients(theta);
    k = (1.0 - a / (2.0 * b)) / (theta * theta);
  }
  const Eigen::Matrix3d v_inv = Eigen::Matrix3d::Identity() - 0.5 * w + k * w * w;
  return {omega, v_inv * T.translation()};
}

RigidTransform apply_twist(const Twist& zeta, const RigidTransform& T) {
  if (zeta.is_zero()) return T;
  const RigidTransform step = twist_exp(zeta);
  const RigidTransform composed = step * T;
  return {project_to_rotation(composed.rotation()), composed.translation()};
}

Matrix36d point_twist_jacobian(const Eigen::Vector3d& x) {
  Matrix36d j;
  j.leftCols<3>() = -skew(x);
  j.rightCols<3>().setIdentity();
  return j;
}

DualQuaternion rigid_to_dq(const RigidTransform& T) {
  DualQuaternion dq;
  dq.real = Eigen::Quaterniond(T.rotation());
  dq.real.normalize();
  const Eigen::Quaterniond t(0.0, T.translation().x(), T.translation().y(), T.translation().z());
  dq.dual = t * dq.real;
  dq.dual.coeffs() *= 0.5;
  return dq;
}

RigidTransform dq_to_rigid(const DualQuaternion& dq) {
  const double n = dq.real.norm();
  Eigen::Quaterniond r = dq.real;
  Eigen::Quaterniond d = dq.dual;
  r.coeffs() /= n;
  d.coeffs() /= n;
  // The scalar part of d (x) conj(r) is the non-unit residue; only the vector part is a translation.
  const Eigen::Vector3d t = 2.0 * (d * r.conjugate()).vec();
  return {project_to_rotation(r.toRotationMatrix()), t};
}

RigidTransform dqb_blend(std::span<const double> weights, std::span<const DualQuaternion> transforms) {
  if (weights.size() != transforms.size() || weights.empty()) {
    throw InputError("dqb_blend: weights and transforms must be non-empty and equally sized");
  }
  bool any_positive = false;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("dqb_blend: weights must be non-negative");
    any_positive = any_positive || w > 0.0;
  }
  if (!any_positive) throw InputError("dqb_blend: at least one weight must be positive");

  Eigen::Vector4d real = Eigen::Vector4d::Zero();
  Eigen::Vector4d dual = Eigen::Vector4d::Zero();
  const Eigen::Vector4d& pivot = transforms.front().real.coeffs();
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double sign = transforms[k].real.coeffs().dot(pivot) < 0.0 ? -1.0 : 1.0;
    real += sign * weights[k] * transforms[k].real.coeffs();
    dual += sign * weights[k] * transforms[k].dual.coeffs();
  }
  if (real.norm() < 1e-12) {
    throw DegenerateError("dqb_blend: blended rotation vanishes (ill-conditioned skinning)");
  }
  DualQuaternion blended;
  blended.real.coeffs() = real;
  blended.dual.coeffs() = dual;
  return dq_to_rigid(blended);
}

}  // namespace filterreg
