#pragma once

#include "filterreg/geometry.hpp"
#include "filterreg/kinematics.hpp"

#include <cstdint>
#include <optional>
#include <string>

namespace filterreg {

// sphere: unit sphere without pole caps (|z| <= 0.8); cuboid: box shell with
// sides 1 : 0.6 : 0.4; blob: asymmetric star-shaped surface; strip: 4 : 1 flat
// plate; chain: base box plus two box links (see make_chain_scene).
enum class Shape { sphere, cuboid, blob, strip, chain };

Shape parse_shape(const std::string& name);
const char* to_string(Shape s);

// `n` surface samples with unit normals, centered at the origin and scaled so
// the bounding-box diagonal equals `diameter`.
PointCloud sample_shape(Shape shape, std::size_t n, std::uint64_t seed, double diameter = 0.15);

struct ExperimentSpec {
  std::string source_path;  // optional PLY/XYZ; overrides `shape`
  Shape shape = Shape::blob;
  std::size_t points = 3500;
  double diameter = 0.15;   // builtin shapes only
  double rotation_deg = 50.0;
  double outlier_ratio = 0.0;
  double noise = 0.0;        // stddev as a fraction of the cloud diameter
  double outlier_box_scale = 1.2;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ExperimentPair {
  PointCloud reference;    // clean model points (error evaluation)
  PointCloud model;        // reference + noise + outliers appended
  PointCloud observation;  // T_gt * reference + noise + outliers appended
  RigidTransform ground_truth;  // model -> observation
};

// Trial `trial` of the spec; deterministic in (seed, trial).
ExperimentPair synthesize_pair(const ExperimentSpec& spec, std::uint64_t trial = 0);

// Two-link chain on a floating base. Body 0 is a 0.16 x 0.10 x 0.06 m box, links
// are 0.14 m boxes driven by revolute joints about z. Points are bound to bodies.
struct ChainScene {
  ArticulatedTree tree;
  PointCloud reference;
};
ChainScene make_chain_scene(std::size_t points, std::uint64_t seed);

// Bends the 0.8 x 0.2 m strip (z = 0 plane) onto an arc of the given radius
// about the y axis, plus a mild twist about x.
Eigen::Vector3d strip_warp(const Eigen::Vector3d& p, double radius, double twist_per_meter);

}  // namespace filterreg
