#include "filterreg/synthetic.hpp"

#include "filterreg/cloud_io.hpp"
#include "filterreg/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

namespace filterreg {

Shape parse_shape(const std::string& name) {
  if (name == "sphere") return Shape::sphere;
  if (name == "cuboid") return Shape::cuboid;
  if (name == "blob") return Shape::blob;
  if (name == "strip") return Shape::strip;
  if (name == "chain") return Shape::chain;
  throw InputError("unknown shape '" + name + "' (sphere, cuboid, blob, strip, chain)");
}

const char* to_string(Shape s) {
  switch (s) {
    case Shape::sphere: return "sphere";
    case Shape::cuboid: return "cuboid";
    case Shape::blob: return "blob";
    case Shape::strip: return "strip";
    case Shape::chain: return "chain";
  }
  return "unknown";
}

namespace {

using Rng = std::mt19937_64;

Eigen::Vector3d random_unit(Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    const Eigen::Vector3d v(g(rng), g(rng), g(rng));
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

// Low-order asymmetric base plus a few localized bumps (directions fixed).
double blob_radius(const Eigen::Vector3d& u) {
  struct Bump {
    double x, y, z, amplitude, width;
  };
  static constexpr std::array<Bump, 6> kBumps = {{
      {0.0, 0.0, 1.0, 0.55, 0.35},
      {0.8, 0.6, 0.0, 0.40, 0.30},
      {-0.6, 0.3, 0.74, 0.45, 0.25},
      {-0.3, -0.9, 0.3, 0.35, 0.40},
      {0.5, -0.5, -0.7, 0.30, 0.30},
      {-0.7, -0.2, -0.68, 0.25, 0.45},
  }};
  double r = 1.0 + 0.2 * u.x() * u.y() + 0.15 * u.x() - 0.1 * u.z() * u.z();
  for (const Bump& b : kBumps) {
    const double c = u.dot(Eigen::Vector3d(b.x, b.y, b.z).normalized());
    r += b.amplitude * std::exp(-(1.0 - c) / (b.width * b.width));
  }
  return r;
}

Eigen::Vector3d blob_point(const Eigen::Vector3d& u) { return blob_radius(u) * u; }

Eigen::Vector3d blob_normal(const Eigen::Vector3d& u) {
  const Eigen::Vector3d helper = std::abs(u.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  const Eigen::Vector3d e1 = u.cross(helper).normalized();
  const Eigen::Vector3d e2 = u.cross(e1);
  const double h = 1e-5;
  const Eigen::Vector3d d1 = blob_point((u + h * e1).normalized()) - blob_point((u - h * e1).normalized());
  const Eigen::Vector3d d2 = blob_point((u + h * e2).normalized()) - blob_point((u - h * e2).normalized());
  Eigen::Vector3d n = d1.cross(d2).normalized();
  if (n.dot(u) < 0.0) n = -n;
  return n;
}

// Area-weighted box-shell sample with outward normals.
void sample_box(const Eigen::Vector3d& lo, const Eigen::Vector3d& hi, std::size_t n, Rng& rng, PointCloud& out,
                std::vector<int>* binding = nullptr, int body = 0) {
  const Eigen::Vector3d ext = hi - lo;
  const std::array<double, 3> face_area = {ext.y() * ext.z(), ext.x() * ext.z(), ext.x() * ext.y()};
  const double total = 2.0 * (face_area[0] + face_area[1] + face_area[2]);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double pick = u(rng) * total;
    int axis = 0;
    while (axis < 2 && pick >= 2.0 * face_area[static_cast<std::size_t>(axis)]) pick -= 2.0 * face_area[static_cast<std::size_t>(axis++)];
    const bool upper = u(rng) < 0.5;
    Eigen::Vector3d p(lo.x() + u(rng) * ext.x(), lo.y() + u(rng) * ext.y(), lo.z() + u(rng) * ext.z());
    p[axis] = upper ? hi[axis] : lo[axis];
    Eigen::Vector3d nrm = Eigen::Vector3d::Zero();
    nrm[axis] = upper ? 1.0 : -1.0;
    out.points.push_back(p);
    out.normals.push_back(nrm);
    if (binding) binding->push_back(body);
  }
}

void normalize_extent(PointCloud& cloud, double diameter) {
  const Eigen::AlignedBox3d box = cloud.bounding_box();
  const Eigen::Vector3d center = box.center();
  const double diag = box.diagonal().norm();
  const double s = diag > 0.0 ? diameter / diag : 1.0;
  for (auto& p : cloud.points) p = (p - center) * s;
}

}  // namespace

PointCloud sample_shape(Shape shape, std::size_t n, std::uint64_t seed, double diameter) {
  if (n == 0) throw InputError("sample_shape: point count must be > 0");
  if (!(diameter > 0.0)) throw InputError("sample_shape: diameter must be > 0");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud cloud;
  cloud.points.reserve(n);
  cloud.normals.reserve(n);
  switch (shape) {
    case Shape::sphere:
      for (std::size_t i = 0; i < n; ++i) {
        const double z = -0.8 + 1.6 * u(rng);
        const double phi = 2.0 * M_PI * u(rng);
        const double r = std::sqrt(1.0 - z * z);
        const Eigen::Vector3d p(r * std::cos(phi), r * std::sin(phi), z);
        cloud.points.push_back(p);
        cloud.normals.push_back(p);
      }
      break;
    case Shape::cuboid:
      sample_box({-0.5, -0.3, -0.2}, {0.5, 0.3, 0.2}, n, rng, cloud);
      break;
    case Shape::blob: {
      // Rejection on the dominant r^2 area factor (radius stays below 2.3).
      while (cloud.points.size() < n) {
        const Eigen::Vector3d dir = random_unit(rng);
        const double r = blob_radius(dir);
        if (u(rng) * 2.3 * 2.3 > r * r) continue;
        cloud.points.push_back(blob_point(dir));
        cloud.normals.push_back(blob_normal(dir));
      }
      break;
    }
    case Shape::strip:
      for (std::size_t i = 0; i < n; ++i) {
        cloud.points.emplace_back(-2.0 + 4.0 * u(rng), -0.5 + u(rng), 0.0);
        cloud.normals.emplace_back(0.0, 0.0, 1.0);
      }
      break;
    case Shape::chain:
      cloud = make_chain_scene(n, seed).reference;
      break;
  }
  normalize_extent(cloud, diameter);
  return cloud;
}

void ExperimentSpec::validate() const {
  if (points == 0) throw InputError("experiment: points must be > 0");
  if (!(outlier_ratio >= 0.0 && outlier_ratio <= 1.0)) throw InputError("experiment: outlier ratio must lie in [0, 1]");
  if (!(noise >= 0.0)) throw InputError("experiment: noise must be >= 0");
  if (!(outlier_box_scale > 0.0)) throw InputError("experiment: outlier box scale must be > 0");
  if (!std::isfinite(rotation_deg)) throw InputError("experiment: rotation must be finite");
  if (!(diameter > 0.0)) throw InputError("experiment: diameter must be > 0");
}

namespace {

void add_noise(PointCloud& cloud, double stddev, Rng& rng) {
  if (stddev <= 0.0) return;
  std::normal_distribution<double> g(0.0, stddev);
  for (auto& p : cloud.points) p += Eigen::Vector3d(g(rng), g(rng), g(rng));
}

void add_outliers(PointCloud& cloud, std::size_t count, double box_scale, Rng& rng) {
  const Eigen::AlignedBox3d box = cloud.bounding_box();
  const Eigen::Vector3d center = box.center();
  const Eigen::Vector3d half = 0.5 * box_scale * box.sizes();
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    cloud.points.push_back(center + Eigen::Vector3d(u(rng), u(rng), u(rng)).cwiseProduct(half));
    if (cloud.has_normals()) cloud.normals.push_back(random_unit(rng));
  }
  if (cloud.has_features()) {
    const Eigen::Index old_rows = cloud.features.rows();
    cloud.features.conservativeResize(old_rows + static_cast<Eigen::Index>(count), Eigen::NoChange);
    for (Eigen::Index r = old_rows; r < cloud.features.rows(); ++r) {
      for (Eigen::Index c = 0; c < cloud.features.cols(); ++c) cloud.features(r, c) = u(rng);
    }
  }
}

}  // namespace

ExperimentPair synthesize_pair(const ExperimentSpec& spec, std::uint64_t trial) {
  spec.validate();
  ExperimentPair pair;
  if (!spec.source_path.empty()) {
    PointCloud source = load_cloud(spec.source_path);
    if (source.size() > spec.points) {
      Rng pick(spec.seed);
      std::vector<std::size_t> order(source.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), pick);
      order.resize(spec.points);
      std::sort(order.begin(), order.end());
      PointCloud sub;
      for (std::size_t i : order) {
        sub.points.push_back(source.points[i]);
        if (source.has_normals()) sub.normals.push_back(source.normals[i]);
      }
      if (source.has_features()) {
        sub.features.resize(static_cast<Eigen::Index>(order.size()), source.feature_dim());
        for (std::size_t r = 0; r < order.size(); ++r) {
          sub.features.row(static_cast<Eigen::Index>(r)) = source.features.row(static_cast<Eigen::Index>(order[r]));
        }
      }
      source = std::move(sub);
    }
    pair.reference = std::move(source);
  } else {
    pair.reference = sample_shape(spec.shape, spec.points, spec.seed, spec.diameter);
  }

  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(trial >> 32), 0x5eedu};
  Rng rng(seq);
  const Eigen::Vector3d axis = random_unit(rng);
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : pair.reference.points) centroid += p;
  centroid /= static_cast<double>(pair.reference.size());
  const Eigen::Matrix3d R = Eigen::AngleAxisd(spec.rotation_deg * M_PI / 180.0, axis).toRotationMatrix();
  pair.ground_truth = RigidTransform(R, centroid - R * centroid);

  pair.model = pair.reference;
  pair.observation = pair.reference;
  for (std::size_t i = 0; i < pair.observation.size(); ++i) {
    pair.observation.points[i] = pair.ground_truth * pair.reference.points[i];
    if (pair.observation.has_normals()) pair.observation.normals[i] = R * pair.reference.normals[i];
  }
  const double stddev = spec.noise * pair.reference.diameter();
  add_noise(pair.model, stddev, rng);
  add_noise(pair.observation, stddev, rng);
  const auto outliers = static_cast<std::size_t>(std::llround(spec.outlier_ratio * static_cast<double>(pair.reference.size())));
  add_outliers(pair.model, outliers, spec.outlier_box_scale, rng);
  add_outliers(pair.observation, outliers, spec.outlier_box_scale, rng);
  return pair;
}

ChainScene make_chain_scene(std::size_t points, std::uint64_t seed) {
  if (points < 3) throw InputError("chain scene needs at least 3 points");
  std::vector<Body> bodies(3);
  bodies[0].name = "base";
  bodies[1].name = "link1";
  bodies[1].parent = 0;
  bodies[1].origin = RigidTransform::from_translation({0.08, 0.0, 0.0});
  bodies[1].joint = JointType::revolute;
  bodies[1].axis = Eigen::Vector3d::UnitZ();
  bodies[2].name = "link2";
  bodies[2].parent = 1;
  bodies[2].origin = RigidTransform::from_translation({0.16, 0.0, 0.0});
  bodies[2].joint = JointType::revolute;
  bodies[2].axis = Eigen::Vector3d::UnitZ();

  ChainScene scene{ArticulatedTree(bodies, true), {}};
  Rng rng(seed);
  // Area split: base shell 0.0632 m^2, each link about 0.0240 m^2.
  const auto base_n = static_cast<std::size_t>(std::llround(0.56 * static_cast<double>(points)));
  const std::size_t link_n = (points - base_n) / 2;
  std::vector<int> binding;
  sample_box({-0.08, -0.05, -0.03}, {0.08, 0.05, 0.03}, base_n, rng, scene.reference, &binding, 0);
  sample_box({0.09, -0.02, -0.02}, {0.23, 0.02, 0.02}, link_n, rng, scene.reference, &binding, 1);
  sample_box({0.25, -0.02, -0.02}, {0.39, 0.02, 0.02}, points - base_n - link_n, rng, scene.reference, &binding, 2);
  scene.tree.set_binding(std::move(binding));
  return scene;
}

Eigen::Vector3d strip_warp(const Eigen::Vector3d& p, double radius, double twist_per_meter) {
  const double a = twist_per_meter * p.x();
  const double y = p.y() * std::cos(a) - p.z() * std::sin(a);
  const double z = p.y() * std::sin(a) + p.z() * std::cos(a);
  const double theta = p.x() / radius;
  const Eigen::Vector3d mid(radius * std::sin(theta), y, radius * (1.0 - std::cos(theta)));
  const Eigen::Vector3d normal(-std::sin(theta), 0.0, std::cos(theta));
  return mid + z * normal;
}

}  // namespace filterreg
