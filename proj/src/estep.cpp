#include "filterreg/estep.hpp"

#include "filterreg/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace filterreg {

void GmmConfig::validate() const {
  if (!sigma.allFinite() || (sigma.array() <= 0.0).any()) throw InputError("sigma components must be > 0");
  if (!(outlier_ratio >= 0.0) || !(outlier_ratio < 1.0)) throw InputError("outlier ratio must lie in [0, 1)");
  const bool needs_features = correspondence != CorrespondenceMode::position;
  if (needs_features && feature_sigma.size() == 0) {
    throw InputError("feature correspondence requires feature_sigma");
  }
  if (feature_sigma.size() > 0 && (!feature_sigma.allFinite() || (feature_sigma.array() <= 0.0).any())) {
    throw InputError("feature_sigma components must be > 0");
  }
  if (update_sigma) {
    if (correspondence != CorrespondenceMode::position) {
      throw InputError("update_sigma is only defined for position correspondence");
    }
    if (sigma.x() != sigma.y() || sigma.y() != sigma.z()) throw InputError("update_sigma requires isotropic sigma");
  }
}

double MomentField::inlier_mass() const { return std::accumulate(weight.begin(), weight.end(), 0.0); }

double outlier_constant(double w, std::size_t n_observation, std::size_t m_model,
                        const Eigen::VectorXd& kernel_sigma) {
  if (!(w >= 0.0) || !(w < 1.0)) throw InputError("outlier ratio must lie in [0, 1)");
  if (n_observation == 0 || m_model == 0) throw InputError("outlier constant needs non-empty clouds");
  const double c = w / (1.0 - w) * static_cast<double>(n_observation) / static_cast<double>(m_model);
  double normalizer = 1.0;
  for (Eigen::Index j = 0; j < kernel_sigma.size(); ++j) normalizer *= std::sqrt(2.0 * M_PI) * kernel_sigma[j];
  return c * normalizer;
}

Eigen::VectorXd kernel_sigma(const GmmConfig& config) {
  switch (config.correspondence) {
    case CorrespondenceMode::position:
      return config.sigma;
    case CorrespondenceMode::feature:
      return config.feature_sigma;
    case CorrespondenceMode::concatenated: {
      Eigen::VectorXd s(3 + config.feature_sigma.size());
      s << config.sigma, config.feature_sigma;
      return s;
    }
  }
  return config.sigma;
}

namespace {

RowMatrix kernel_features(const std::vector<Eigen::Vector3d>& points, const RowMatrix& features,
                          CorrespondenceMode mode, Eigen::Index feature_dim) {
  const auto n = static_cast<Eigen::Index>(points.size());
  if (mode != CorrespondenceMode::position && (features.rows() != n || features.cols() != feature_dim)) {
    throw InputError("feature correspondence: expected " + std::to_string(n) + " x " + std::to_string(feature_dim) +
                     " features, got " + std::to_string(features.rows()) + " x " + std::to_string(features.cols()));
  }
  const Eigen::Index pos_cols = mode == CorrespondenceMode::feature ? 0 : 3;
  const Eigen::Index feat_cols = mode == CorrespondenceMode::position ? 0 : feature_dim;
  RowMatrix out(n, pos_cols + feat_cols);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (pos_cols > 0) out.row(i).head<3>() = points[static_cast<std::size_t>(i)].transpose();
    if (feat_cols > 0) out.row(i).tail(feat_cols) = features.row(i);
  }
  return out;
}

RowMatrix truncated_transform(const PointIndex& index, const std::vector<Eigen::Vector3d>& queries,
                              const Eigen::Vector3d& sigma, const RowMatrix& values) {
  const Eigen::Array3d inv = sigma.cwiseInverse().array();
  const double radius = kTruncationRadius * sigma.maxCoeff();
  RowMatrix out = RowMatrix::Zero(static_cast<Eigen::Index>(queries.size()), values.cols());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t k : index.within(queries[i], radius)) {
      const double d2 = ((index.point(k) - queries[i]).array() * inv).matrix().squaredNorm();
      out.row(static_cast<Eigen::Index>(i)) += std::exp(-0.5 * d2) * values.row(static_cast<Eigen::Index>(k));
    }
  }
  return out;
}

RowMatrix divide_columns(const RowMatrix& m, const Eigen::VectorXd& sigma) {
  RowMatrix out = m;
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.col(j) /= sigma[j];
  return out;
}

}  // namespace

double median_spacing(const PointIndex& index) {
  if (index.size() < 2) return 0.0;
  const std::size_t stride = std::max<std::size_t>(1, index.size() / 256);
  std::vector<double> d;
  for (std::size_t i = 0; i < index.size(); i += stride) {
    const auto nn = index.knn(index.point(i), 2);
    d.push_back((index.point(nn[0] == i ? nn[1] : nn[0]) - index.point(i)).norm());
  }
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

ObservationIndex::ObservationIndex(const PointCloud& observation, const GmmConfig& config, Backend backend)
    : config_(config), backend_(backend) {
  config_.validate();
  if (observation.empty()) throw InputError("observation cloud is empty");
  observation.validate();
  if (config_.average_normals && !observation.has_normals()) {
    throw InputError("point-to-plane mode requires observation normals");
  }
  kernel_sigma_ = kernel_sigma(config_);
  obs_features_ = kernel_features(observation.points, observation.features, config_.correspondence,
                                  config_.feature_sigma.size());

  const auto n = static_cast<Eigen::Index>(observation.size());
  const Eigen::Index width = 4 + (config_.wants_m2() ? 1 : 0) + (config_.average_normals ? 3 : 0);
  values_.resize(n, width);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Vector3d& y = observation.points[static_cast<std::size_t>(k)];
    values_(k, 0) = 1.0;
    values_.row(k).segment<3>(1) = y.transpose();
    Eigen::Index c = 4;
    if (config_.wants_m2()) values_(k, c++) = y.squaredNorm();
    if (config_.average_normals) values_.row(k).segment<3>(c) = observation.normals[static_cast<std::size_t>(k)].transpose();
  }

  if (backend_ == Backend::lattice && config_.correspondence == CorrespondenceMode::position) {
    auto index = std::make_shared<const PointIndex>(observation.points);
    if (config_.sigma.maxCoeff() < kSparseKernelSpacing * median_spacing(*index)) neighbors_ = std::move(index);
  }
  if (neighbors_) {
    // truncated direct summation, see kSparseKernelSpacing
  } else if (backend_ == Backend::lattice) {
    lattice_.emplace(build_lattice(obs_features_, values_, kernel_sigma_));
  } else {
    obs_features_ = divide_columns(obs_features_, kernel_sigma_);
  }
}

MomentField ObservationIndex::compute(const std::vector<Eigen::Vector3d>& model_points,
                                      const RowMatrix& model_features) const {
  if (model_points.empty()) throw InputError("model cloud is empty");
  const RowMatrix query =
      kernel_features(model_points, model_features, config_.correspondence, config_.feature_sigma.size());
  RowMatrix raw;
  if (neighbors_) {
    raw = truncated_transform(*neighbors_, model_points, config_.sigma, values_);
  } else if (backend_ == Backend::lattice) {
    raw = lattice_->slice(query);
  } else {
    raw = gaussian_transform_bruteforce(divide_columns(query, kernel_sigma_), obs_features_, values_);
  }

  const std::size_t m = model_points.size();
  MomentField out;
  out.c_prime = outlier_constant(config_.outlier_ratio, observation_size(), m, kernel_sigma_);
  out.m0.resize(m);
  out.m1.resize(m);
  out.weight.resize(m);
  if (config_.wants_m2()) out.m2.resize(m);
  if (config_.average_normals) out.normal.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = raw.row(static_cast<Eigen::Index>(i));
    const double m0 = std::max(row(0), 0.0);
    out.m0[i] = m0;
    out.m1[i] = row.segment<3>(1).transpose();
    out.weight[i] = m0 < kMassFloor ? 0.0 : m0 / (m0 + out.c_prime);
    Eigen::Index c = 4;
    if (config_.wants_m2()) out.m2[i] = row(c++);
    if (config_.average_normals) {
      out.normal[i] = m0 < kMassFloor ? Eigen::Vector3d::Zero() : Eigen::Vector3d(row.segment<3>(c).transpose() / m0);
    }
  }
  return out;
}

MomentField compute_moments(const PointCloud& model, const PointCloud& observation, const GmmConfig& config,
                            Backend backend) {
  const ObservationIndex index(observation, config, backend);
  return index.compute(model.points, model.features);
}

double update_sigma(const MomentField& moments, const std::vector<Eigen::Vector3d>& model_points) {
  if (!moments.has_m2()) throw InputError("update_sigma requires second moments");
  if (moments.size() != model_points.size()) throw InputError("update_sigma: moment/model size mismatch");
  double residual = 0.0;
  double mass = 0.0;
  for (std::size_t i = 0; i < model_points.size(); ++i) {
    const double m0 = moments.m0[i];
    if (m0 < kMassFloor) continue;
    const Eigen::Vector3d& x = model_points[i];
    const double denom = m0 + moments.c_prime;
    residual += (m0 * x.squaredNorm() - 2.0 * x.dot(moments.m1[i]) + moments.m2[i]) / denom;
    mass += m0 / denom;
  }
  if (mass <= kMassFloor) throw DegenerateError("update_sigma: no inlier correspondences");
  const double sigma2 = residual / (3.0 * mass);
  return std::max(std::sqrt(std::max(sigma2, 0.0)), kSigmaFloor);
}

}  // namespace filterreg
