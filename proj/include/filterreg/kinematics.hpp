#pragma once

#include "filterreg/geometry.hpp"

#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace filterreg {

struct RigidModel {
  RigidTransform pose;
};

enum class JointType { fixed, revolute, prismatic };

struct Body {
  std::string name;
  int parent = -1;
  RigidTransform origin;  // parent frame -> joint frame at zero joint value
  JointType joint = JointType::fixed;
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();  // joint frame; unit
};

// Kinematic tree rooted at body 0. Parameters are ordered [base twist (6, if
// floating) | one value per revolute/prismatic body in body order]. Reference
// points live in world coordinates at the rest configuration (zero joint
// values, identity base), so a bound point moves by body_pose * rest_pose^-1.
class ArticulatedTree {
 public:
  ArticulatedTree() = default;
  ArticulatedTree(std::vector<Body> bodies, bool floating_base);

  // JSON schema documented in the README. An optional "binding" array gives the
  // body index of every model point.
  static ArticulatedTree from_json(const std::string& text);
  static ArticulatedTree load(const std::string& path);

  int num_bodies() const { return static_cast<int>(bodies_.size()); }
  int num_joints() const { return static_cast<int>(joint_body_.size()); }
  int num_parameters() const { return base_offset() + num_joints(); }
  int base_offset() const { return floating_base_ ? 6 : 0; }
  bool floating_base() const { return floating_base_; }
  const Body& body(int j) const { return bodies_[static_cast<std::size_t>(j)]; }
  // Parameter column of the joint driving body j, or -1.
  int joint_column(int j) const { return joint_column_[static_cast<std::size_t>(j)]; }
  int joint_body(int joint) const { return joint_body_[static_cast<std::size_t>(joint)]; }
  // True when body `ancestor` is on the root path of body j (inclusive).
  bool is_ancestor(int ancestor, int j) const;

  const RigidTransform& base_pose() const { return base_; }
  const Eigen::VectorXd& joint_values() const { return q_; }
  void set_base_pose(const RigidTransform& base);
  void set_joint_values(const Eigen::VectorXd& q);

  const RigidTransform& body_pose(int j) const { return pose_[static_cast<std::size_t>(j)]; }
  const RigidTransform& rest_pose(int j) const { return rest_[static_cast<std::size_t>(j)]; }
  // body_pose(j) * rest_pose(j)^-1.
  RigidTransform point_transform(int j) const;

  // 6 x P map from parameter velocities to body j's world twist (w, v), with
  // the point velocity w x x + v.
  Eigen::Matrix<double, 6, Eigen::Dynamic> spatial_velocity_jacobian(int j) const;

  // Base: T <- exp(delta_base) T. Joints: q <- q + delta_q.
  ArticulatedTree with_update(const Eigen::VectorXd& delta) const;

  const std::vector<int>& binding() const { return binding_; }
  void set_binding(std::vector<int> binding);

 private:
  void forward();

  std::vector<Body> bodies_;
  bool floating_base_ = false;
  RigidTransform base_;
  Eigen::VectorXd q_;
  std::vector<int> joint_column_;
  std::vector<int> joint_body_;
  std::vector<RigidTransform> pose_;
  std::vector<RigidTransform> rest_;
  std::vector<int> binding_;
};

struct PointSkin {
  std::vector<int> nodes;
  std::vector<double> weights;  // >= 0, sum 1
  bool bound() const { return !nodes.empty(); }
};

struct SkinningTable {
  std::vector<PointSkin> points;
  std::size_t unbound = 0;
};

// Nodes carry world-frame transforms applied to reference points.
struct NodeGraph {
  std::vector<Eigen::Vector3d> positions;
  std::vector<RigidTransform> transforms;
  std::vector<std::pair<int, int>> edges;  // k < l, unique
  SkinningTable skinning;

  std::size_t num_nodes() const { return positions.size(); }
  void validate() const;
  // DQB of the point's node transforms; identity for unbound points.
  RigidTransform point_transform(std::size_t i) const;
  // T_k <- exp(delta_k) T_k for every node (6 entries per node).
  NodeGraph with_update(const Eigen::VectorXd& delta) const;
};

inline constexpr int kDefaultSkinningK = 4;

// K nearest nodes within radius, weights exp(-d^2 / (2 (radius/2)^2)) normalized.
// Throws InputError when more than 10% of the points are unbound.
SkinningTable bind_points_to_nodes(const PointCloud& reference, const std::vector<Eigen::Vector3d>& nodes, int k,
                                   double radius);

// Voxel-grid subsample (representative nearest each voxel centroid), thinned so
// nodes are >= spacing apart; edges to <= 8 nearest nodes, symmetrized. Points
// are skinned with K = 4, radius = 2 * spacing.
NodeGraph build_node_graph(const PointCloud& reference, double node_spacing);

using KinematicState = std::variant<RigidModel, ArticulatedTree, NodeGraph>;

int parameter_count(const KinematicState& state);
// Per-point transforms T_i(theta) for a reference cloud of `count` points.
std::vector<RigidTransform> point_transforms(const KinematicState& state, std::size_t count);
// Deformed cloud; normals rotated, features copied.
PointCloud forward_points(const PointCloud& reference, const KinematicState& state);
KinematicState apply_update(const KinematicState& state, const Eigen::VectorXd& delta);
// Max over moving parts (pose / bodies / nodes) of |w| + |v| / diameter for the
// change between two states.
double motion_change_norm(const KinematicState& before, const KinematicState& after, double diameter);

}  // namespace filterreg
