#include "filterreg/kinematics.hpp"

#include "filterreg/error.hpp"
#include "filterreg/spatial_index.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace filterreg {

namespace {

RigidTransform joint_motion(const Body& b, double q) {
  switch (b.joint) {
    case JointType::revolute:
      return RigidTransform::from_axis_angle(b.axis, q);
    case JointType::prismatic:
      return RigidTransform::from_translation(q * b.axis);
    case JointType::fixed:
      break;
  }
  return RigidTransform::identity();
}

}  // namespace

ArticulatedTree::ArticulatedTree(std::vector<Body> bodies, bool floating_base)
    : bodies_(std::move(bodies)), floating_base_(floating_base) {
  if (bodies_.empty()) throw InputError("articulated tree needs at least one body");
  if (bodies_[0].parent != -1) throw InputError("body 0 must be the root (parent -1)");
  joint_column_.assign(bodies_.size(), -1);
  for (std::size_t j = 0; j < bodies_.size(); ++j) {
    Body& b = bodies_[j];
    if (j > 0 && (b.parent < 0 || b.parent >= static_cast<int>(j))) {
      throw InputError("body " + std::to_string(j) + ": parent index must precede the child");
    }
    if (j == 0 && b.joint != JointType::fixed) throw InputError("the root body cannot carry a joint");
    if (b.joint != JointType::fixed) {
      if (!b.axis.allFinite() || std::abs(b.axis.norm() - 1.0) > 1e-9) {
        throw InputError("body " + std::to_string(j) + ": joint axis must be a unit vector");
      }
      joint_column_[j] = base_offset() + static_cast<int>(joint_body_.size());
      joint_body_.push_back(static_cast<int>(j));
    }
  }
  q_ = Eigen::VectorXd::Zero(num_joints());
  forward();
  rest_ = pose_;
}

bool ArticulatedTree::is_ancestor(int ancestor, int j) const {
  for (int b = j; b >= 0; b = bodies_[static_cast<std::size_t>(b)].parent) {
    if (b == ancestor) return true;
  }
  return false;
}

void ArticulatedTree::set_base_pose(const RigidTransform& base) {
  if (!floating_base_) throw InputError("base pose of a fixed-root tree cannot change");
  base_ = base;
  forward();
}

void ArticulatedTree::set_joint_values(const Eigen::VectorXd& q) {
  if (q.size() != num_joints()) throw InputError("joint vector size mismatch");
  if (!q.allFinite()) throw InputError("joint values must be finite");
  q_ = q;
  forward();
}

void ArticulatedTree::forward() {
  pose_.resize(bodies_.size());
  pose_[0] = base_ * bodies_[0].origin;
  for (std::size_t j = 1; j < bodies_.size(); ++j) {
    const Body& b = bodies_[j];
    const double q = joint_column_[j] >= 0 ? q_[joint_column_[j] - base_offset()] : 0.0;
    pose_[j] = pose_[static_cast<std::size_t>(b.parent)] * b.origin * joint_motion(b, q);
  }
}

RigidTransform ArticulatedTree::point_transform(int j) const { return body_pose(j) * rest_pose(j).inverse(); }

Eigen::Matrix<double, 6, Eigen::Dynamic> ArticulatedTree::spatial_velocity_jacobian(int j) const {
  if (j < 0 || j >= num_bodies()) throw InputError("body index out of range");
  Eigen::Matrix<double, 6, Eigen::Dynamic> jac = Eigen::Matrix<double, 6, Eigen::Dynamic>::Zero(6, num_parameters());
  if (floating_base_) jac.leftCols<6>().setIdentity();
  for (int b = j; b > 0; b = bodies_[static_cast<std::size_t>(b)].parent) {
    const int col = joint_column_[static_cast<std::size_t>(b)];
    if (col < 0) continue;
    const RigidTransform& frame = pose_[static_cast<std::size_t>(b)];
    const Eigen::Vector3d a = frame.rotation() * bodies_[static_cast<std::size_t>(b)].axis;
    if (bodies_[static_cast<std::size_t>(b)].joint == JointType::revolute) {
      jac.col(col) << a, frame.translation().cross(a);
    } else {
      jac.col(col) << Eigen::Vector3d::Zero(), a;
    }
  }
  return jac;
}

ArticulatedTree ArticulatedTree::with_update(const Eigen::VectorXd& delta) const {
  if (delta.size() != num_parameters()) throw InputError("articulated update size mismatch");
  ArticulatedTree next = *this;
  if (floating_base_) next.base_ = apply_twist(Twist(Vector6d(delta.head<6>())), base_);
  next.q_ += delta.tail(num_joints());
  next.forward();
  return next;
}

void ArticulatedTree::set_binding(std::vector<int> binding) {
  for (int b : binding) {
    if (b < 0 || b >= num_bodies()) throw InputError("point binding references body " + std::to_string(b));
  }
  binding_ = std::move(binding);
}

namespace {

using nlohmann::json;

Eigen::Vector3d vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw InputError(std::string(what) + ": expected 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

RigidTransform parse_origin(const json& j) {
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  if (j.contains("translation")) t = vec3(j["translation"], "origin.translation");
  if (j.contains("rotation")) {
    const json& m = j["rotation"];
    if (!m.is_array() || m.size() != 9) throw InputError("origin.rotation: expected 9 numbers (row-major)");
    for (int i = 0; i < 9; ++i) r(i / 3, i % 3) = m[static_cast<std::size_t>(i)].get<double>();
  } else if (j.contains("axis_angle")) {
    const json& aa = j["axis_angle"];
    if (!aa.is_array() || aa.size() != 4) throw InputError("origin.axis_angle: expected [x, y, z, radians]");
    const Eigen::Vector3d axis(aa[0].get<double>(), aa[1].get<double>(), aa[2].get<double>());
    r = Eigen::AngleAxisd(aa[3].get<double>(), axis.normalized()).toRotationMatrix();
  }
  return {r, t};
}

}  // namespace

ArticulatedTree ArticulatedTree::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("articulated model: ") + e.what());
  }
  try {
    const bool floating = doc.value("floating_base", false);
    if (!doc.contains("bodies") || !doc["bodies"].is_array()) throw InputError("articulated model: missing bodies");
    std::vector<Body> bodies;
    std::map<std::string, int> by_name;
    for (const json& jb : doc["bodies"]) {
      Body b;
      b.name = jb.value("name", "body" + std::to_string(bodies.size()));
      if (jb.contains("parent")) {
        const json& p = jb["parent"];
        if (p.is_string()) {
          const auto it = by_name.find(p.get<std::string>());
          if (it == by_name.end()) throw InputError("articulated model: unknown parent " + p.get<std::string>());
          b.parent = it->second;
        } else {
          b.parent = p.get<int>();
        }
      }
      if (jb.contains("origin")) b.origin = parse_origin(jb["origin"]);
      const std::string joint = jb.value("joint", "fixed");
      if (joint == "revolute") {
        b.joint = JointType::revolute;
      } else if (joint == "prismatic") {
        b.joint = JointType::prismatic;
      } else if (joint != "fixed") {
        throw InputError("articulated model: unknown joint type " + joint);
      }
      if (jb.contains("axis")) {
        const Eigen::Vector3d axis = vec3(jb["axis"], "axis");
        if (axis.norm() == 0.0) throw InputError("articulated model: zero joint axis");
        b.axis = axis.normalized();
      }
      by_name[b.name] = static_cast<int>(bodies.size());
      bodies.push_back(b);
    }
    ArticulatedTree tree(std::move(bodies), floating);
    if (doc.contains("binding")) tree.set_binding(doc["binding"].get<std::vector<int>>());
    return tree;
  } catch (const json::exception& e) {
    throw ParseError(std::string("articulated model: ") + e.what());
  }
}

ArticulatedTree ArticulatedTree::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void NodeGraph::validate() const {
  if (transforms.size() != positions.size()) throw InputError("node graph: transform count mismatch");
  std::set<std::pair<int, int>> seen;
  for (const auto& [k, l] : edges) {
    if (k < 0 || l < 0 || k >= static_cast<int>(num_nodes()) || l >= static_cast<int>(num_nodes()) || k >= l) {
      throw InputError("node graph: invalid edge");
    }
    if (!seen.insert({k, l}).second) throw InputError("node graph: duplicate edge");
  }
  for (const PointSkin& s : skinning.points) {
    if (s.nodes.size() != s.weights.size()) throw InputError("node graph: skinning size mismatch");
    double sum = 0.0;
    for (std::size_t j = 0; j < s.nodes.size(); ++j) {
      if (s.nodes[j] < 0 || s.nodes[j] >= static_cast<int>(num_nodes())) throw InputError("node graph: bad skin node");
      if (s.weights[j] < 0.0) throw InputError("node graph: negative skinning weight");
      sum += s.weights[j];
    }
    if (s.bound() && std::abs(sum - 1.0) > 1e-9) throw InputError("node graph: skinning weights must sum to 1");
  }
}

RigidTransform NodeGraph::point_transform(std::size_t i) const {
  const PointSkin& s = skinning.points.at(i);
  if (!s.bound()) return RigidTransform::identity();
  std::vector<DualQuaternion> dqs;
  dqs.reserve(s.nodes.size());
  for (int k : s.nodes) dqs.push_back(rigid_to_dq(transforms[static_cast<std::size_t>(k)]));
  return dqb_blend(s.weights, dqs);
}

NodeGraph NodeGraph::with_update(const Eigen::VectorXd& delta) const {
  if (delta.size() != static_cast<Eigen::Index>(6 * num_nodes())) throw InputError("node-graph update size mismatch");
  NodeGraph next = *this;
  for (std::size_t k = 0; k < num_nodes(); ++k) {
    next.transforms[k] = apply_twist(Twist(Vector6d(delta.segment<6>(static_cast<Eigen::Index>(6 * k)))), transforms[k]);
  }
  return next;
}

SkinningTable bind_points_to_nodes(const PointCloud& reference, const std::vector<Eigen::Vector3d>& nodes, int k,
                                   double radius) {
  if (k < 1) throw InputError("skinning K must be >= 1");
  if (nodes.empty()) throw InputError("skinning needs at least one node");
  if (!(radius > 0.0)) throw InputError("skinning radius must be > 0");
  const PointIndex index(nodes);
  const double kernel_sigma = 0.5 * radius;
  SkinningTable table;
  table.points.resize(reference.size());
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const Eigen::Vector3d& x = reference.points[i];
    PointSkin& skin = table.points[i];
    double total = 0.0;
    for (std::size_t n : index.knn(x, static_cast<std::size_t>(k))) {
      const double d2 = (nodes[n] - x).squaredNorm();
      if (d2 > radius * radius) continue;
      skin.nodes.push_back(static_cast<int>(n));
      skin.weights.push_back(std::exp(-d2 / (2.0 * kernel_sigma * kernel_sigma)));
      total += skin.weights.back();
    }
    if (skin.nodes.empty()) {
      ++table.unbound;
      continue;
    }
    for (double& w : skin.weights) w /= total;
  }
  if (10 * table.unbound > reference.size()) {
    throw InputError("node graph too sparse: " + std::to_string(table.unbound) + " of " +
                     std::to_string(reference.size()) + " points have no node within the skinning radius");
  }
  return table;
}

NodeGraph build_node_graph(const PointCloud& reference, double node_spacing) {
  if (reference.empty()) throw InputError("cannot build a node graph from an empty cloud");
  if (!(node_spacing > 0.0)) throw InputError("node spacing must be > 0");
  const Eigen::Vector3d lo = reference.bounding_box().min();

  struct Voxel {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    std::vector<std::size_t> members;
  };
  std::map<std::array<long, 3>, Voxel> voxels;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const Eigen::Vector3d c = (reference.points[i] - lo) / node_spacing;
    const std::array<long, 3> key = {static_cast<long>(std::floor(c.x())), static_cast<long>(std::floor(c.y())),
                                      static_cast<long>(std::floor(c.z()))};
    Voxel& v = voxels[key];
    v.sum += reference.points[i];
    v.members.push_back(i);
  }

  NodeGraph graph;
  const double min_d2 = node_spacing * node_spacing * (1.0 - 1e-9);
  for (const auto& [key, v] : voxels) {
    const Eigen::Vector3d centroid = v.sum / static_cast<double>(v.members.size());
    std::size_t best = v.members.front();
    for (std::size_t i : v.members) {
      if ((reference.points[i] - centroid).squaredNorm() < (reference.points[best] - centroid).squaredNorm()) best = i;
    }
    const Eigen::Vector3d& p = reference.points[best];
    const bool clear = std::none_of(graph.positions.begin(), graph.positions.end(),
                                    [&](const Eigen::Vector3d& q) { return (q - p).squaredNorm() < min_d2; });
    if (clear) graph.positions.push_back(p);
  }
  graph.transforms.assign(graph.positions.size(), RigidTransform::identity());

  if (graph.positions.size() > 1) {
    const PointIndex index(graph.positions);
    std::set<std::pair<int, int>> edges;
    for (std::size_t k = 0; k < graph.positions.size(); ++k) {
      for (std::size_t l : index.knn(graph.positions[k], 9)) {
        if (l == k) continue;
        edges.insert({static_cast<int>(std::min(k, l)), static_cast<int>(std::max(k, l))});
      }
    }
    graph.edges.assign(edges.begin(), edges.end());
  }
  graph.skinning = bind_points_to_nodes(reference, graph.positions, kDefaultSkinningK, 2.0 * node_spacing);
  return graph;
}

int parameter_count(const KinematicState& state) {
  return std::visit(
      [](const auto& s) -> int {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, RigidModel>) {
          return 6;
        } else if constexpr (std::is_same_v<S, ArticulatedTree>) {
          return s.num_parameters();
        } else {
          return static_cast<int>(6 * s.num_nodes());
        }
      },
      state);
}

std::vector<RigidTransform> point_transforms(const KinematicState& state, std::size_t count) {
  std::vector<RigidTransform> out(count);
  if (const auto* rigid = std::get_if<RigidModel>(&state)) {
    std::fill(out.begin(), out.end(), rigid->pose);
  } else if (const auto* tree = std::get_if<ArticulatedTree>(&state)) {
    if (tree->binding().size() != count) throw InputError("articulated binding size does not match the cloud");
    std::vector<RigidTransform> per_body(static_cast<std::size_t>(tree->num_bodies()));
    for (int j = 0; j < tree->num_bodies(); ++j) per_body[static_cast<std::size_t>(j)] = tree->point_transform(j);
    for (std::size_t i = 0; i < count; ++i) out[i] = per_body[static_cast<std::size_t>(tree->binding()[i])];
  } else {
    const auto& graph = std::get<NodeGraph>(state);
    if (graph.skinning.points.size() != count) throw InputError("node-graph skinning size does not match the cloud");
    std::vector<DualQuaternion> dqs;
    dqs.reserve(graph.num_nodes());
    for (const auto& t : graph.transforms) dqs.push_back(rigid_to_dq(t));
    std::vector<DualQuaternion> local;
    for (std::size_t i = 0; i < count; ++i) {
      const PointSkin& s = graph.skinning.points[i];
      if (!s.bound()) continue;
      local.clear();
      for (int k : s.nodes) local.push_back(dqs[static_cast<std::size_t>(k)]);
      out[i] = dqb_blend(s.weights, local);
    }
  }
  return out;
}

PointCloud forward_points(const PointCloud& reference, const KinematicState& state) {
  const std::vector<RigidTransform> transforms = point_transforms(state, reference.size());
  PointCloud out;
  out.points.resize(reference.size());
  for (std::size_t i = 0; i < reference.size(); ++i) out.points[i] = transforms[i] * reference.points[i];
  if (reference.has_normals()) {
    out.normals.resize(reference.size());
    for (std::size_t i = 0; i < reference.size(); ++i) out.normals[i] = transforms[i].rotation() * reference.normals[i];
  }
  out.features = reference.features;
  return out;
}

KinematicState apply_update(const KinematicState& state, const Eigen::VectorXd& delta) {
  if (delta.size() != parameter_count(state)) throw InputError("parameter update size mismatch");
  if (const auto* rigid = std::get_if<RigidModel>(&state)) {
    return RigidModel{apply_twist(Twist(Vector6d(delta)), rigid->pose)};
  }
  if (const auto* tree = std::get_if<ArticulatedTree>(&state)) return tree->with_update(delta);
  return std::get<NodeGraph>(state).with_update(delta);
}

namespace {

double change_norm(const RigidTransform& before, const RigidTransform& after, double diameter) {
  const Twist z = twist_log(after * before.inverse());
  return z.angular.norm() + z.linear.norm() / diameter;
}

}  // namespace

double motion_change_norm(const KinematicState& before, const KinematicState& after, double diameter) {
  if (!(diameter > 0.0)) diameter = 1.0;
  if (before.index() != after.index()) throw InputError("motion_change_norm: kinematic models differ");
  double worst = 0.0;
  if (const auto* a = std::get_if<RigidModel>(&before)) {
    return change_norm(a->pose, std::get<RigidModel>(after).pose, diameter);
  }
  if (const auto* a = std::get_if<ArticulatedTree>(&before)) {
    const auto& b = std::get<ArticulatedTree>(after);
    for (int j = 0; j < a->num_bodies(); ++j) {
      worst = std::max(worst, change_norm(a->body_pose(j), b.body_pose(j), diameter));
    }
    return worst;
  }
  const auto& a = std::get<NodeGraph>(before);
  const auto& b = std::get<NodeGraph>(after);
  for (std::size_t k = 0; k < a.num_nodes(); ++k) {
    worst = std::max(worst, change_norm(a.transforms[k], b.transforms[k], diameter));
  }
  return worst;
}

}  // namespace filterreg
