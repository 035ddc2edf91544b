#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <span>
#include <vector>

namespace filterreg {

using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;
using Matrix36d = Eigen::Matrix<double, 3, 6>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Positions (meters), optional unit normals, optional per-point feature rows.
struct PointCloud {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector3d> normals;  // empty or one per point
  RowMatrix features;                    // 0 columns or one row per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }
  bool has_features() const { return features.cols() > 0; }
  Eigen::Index feature_dim() const { return features.cols(); }

  // Throws InputError when an invariant is violated.
  void validate() const;

  Eigen::AlignedBox3d bounding_box() const;
  // Bounding-box diagonal length.
  double diameter() const;
};

class RigidTransform {
 public:
  RigidTransform() : rotation_(Eigen::Matrix3d::Identity()), translation_(Eigen::Vector3d::Zero()) {}
  // Throws InputError unless rotation is orthonormal with det +1 (to 1e-9).
  RigidTransform(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Eigen::Vector3d& t);
  static RigidTransform from_axis_angle(const Eigen::Vector3d& axis, double angle,
                                        const Eigen::Vector3d& t = Eigen::Vector3d::Zero());

  const Eigen::Matrix3d& rotation() const { return rotation_; }
  const Eigen::Vector3d& translation() const { return translation_; }
  Eigen::Matrix4d matrix() const;

  Eigen::Vector3d operator*(const Eigen::Vector3d& x) const { return rotation_ * x + translation_; }
  RigidTransform operator*(const RigidTransform& other) const;
  RigidTransform inverse() const;

  // max |R^T R - I| entry.
  double orthonormality_error() const;

 private:
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
};

// Local SE(3) linearization: delta x = angular x x + linear.
struct Twist {
  Eigen::Vector3d angular = Eigen::Vector3d::Zero();
  Eigen::Vector3d linear = Eigen::Vector3d::Zero();

  Twist() = default;
  Twist(const Eigen::Vector3d& w, const Eigen::Vector3d& t) : angular(w), linear(t) {}
  explicit Twist(const Vector6d& v) : angular(v.head<3>()), linear(v.tail<3>()) {}

  Vector6d vector() const {
    Vector6d v;
    v << angular, linear;
    return v;
  }
  bool is_zero() const { return angular.isZero(0.0) && linear.isZero(0.0); }
};

// Unit dual quaternion q = real + eps * dual, dual = 0.5 * t (x) real.
struct DualQuaternion {
  Eigen::Quaterniond real = Eigen::Quaterniond::Identity();
  Eigen::Quaterniond dual = Eigen::Quaterniond(0.0, 0.0, 0.0, 0.0);
};

// skew(v) * b == v.cross(b).
Eigen::Matrix3d skew(const Eigen::Vector3d& v);

// Nearest rotation matrix (polar decomposition), det +1.
Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m);

// Exact SE(3) exponential of the twist, as a transform.
RigidTransform twist_exp(const Twist& zeta);
// Inverse of twist_exp; rotation angle in [0, pi].
Twist twist_log(const RigidTransform& T);

// exp(zeta) * T, re-orthonormalized. A zero twist returns T unchanged.
RigidTransform apply_twist(const Twist& zeta, const RigidTransform& T);

// d x / d zeta = [-skew(x) | I] for delta x = w x x + t.
Matrix36d point_twist_jacobian(const Eigen::Vector3d& x);

DualQuaternion rigid_to_dq(const RigidTransform& T);
RigidTransform dq_to_rigid(const DualQuaternion& dq);

// normalized(sum_k w_k dq_k) as a rigid transform. Quaternions with negative
// real-part dot against the first are sign-flipped before summation.
// Throws DegenerateError when the blended real part vanishes (< 1e-12).
RigidTransform dqb_blend(std::span<const double> weights, std::span<const DualQuaternion> transforms);

}  // namespace filterreg
