#pragma once

#include "filterreg/geometry.hpp"
#include "filterreg/permutohedral.hpp"
#include "filterreg/spatial_index.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace filterreg {

enum class Backend { lattice, bruteforce };

// Kernel space of the correspondence: 3-D position, per-point feature, or both.
enum class CorrespondenceMode { position, feature, concatenated };

struct GmmConfig {
  Eigen::Vector3d sigma = Eigen::Vector3d::Constant(0.01);  // meters, diagonal std-dev
  double outlier_ratio = 0.1;                                // w in [0, 1)
  Eigen::VectorXd feature_sigma;                             // empty = unset
  bool update_sigma = false;                                 // isotropic sigma only
  CorrespondenceMode correspondence = CorrespondenceMode::position;
  bool average_normals = false;  // accumulate observation normals (point-to-plane)
  bool second_moment = false;    // accumulate m2 even when sigma is fixed

  // Throws InputError on invalid combinations.
  void validate() const;
  bool wants_m2() const { return update_sigma || second_moment; }
};

struct MomentField {
  std::vector<double> m0;
  std::vector<Eigen::Vector3d> m1;
  std::vector<double> m2;                // empty unless requested
  std::vector<Eigen::Vector3d> normal;   // sum K n / m0, not renormalized; empty unless requested
  std::vector<double> weight;            // m0 / (m0 + c')
  double c_prime = 0.0;

  std::size_t size() const { return m0.size(); }
  bool has_m2() const { return !m2.empty(); }
  bool has_normals() const { return !normal.empty(); }
  // m1 / m0; only meaningful when weight > 0.
  Eigen::Vector3d target(std::size_t i) const { return m1[i] / m0[i]; }
  double inlier_mass() const;
};

// Below this kernel mass a model point gets weight 0.
inline constexpr double kMassFloor = 1e-12;
inline constexpr double kSigmaFloor = 1e-5;

// Lattice backend, position correspondence: when max sigma falls below this
// multiple of the median observation spacing the lattice support explodes (every
// point isolated), so the kernel is summed directly over neighbors within
// kTruncationRadius sigma instead (dropped terms <= exp(-24.5) each).
inline constexpr double kSparseKernelSpacing = 2.0;
inline constexpr double kTruncationRadius = 7.0;

// Median distance from a point to its nearest other point (strided sample).
double median_spacing(const PointIndex& index);

// c' = w/(1-w) * N/M * prod_j sqrt(2 pi) sigma_j, the outlier constant expressed
// against unnormalized kernel mass. `kernel_sigma` spans the whole kernel space.
double outlier_constant(double w, std::size_t n_observation, std::size_t m_model,
                        const Eigen::VectorXd& kernel_sigma);

// Kernel-space sigma for the configured correspondence mode.
Eigen::VectorXd kernel_sigma(const GmmConfig& config);

// Class-style E step holding the observation side. With a fixed sigma the
// lattice is built once here and sliced at every model query.
class ObservationIndex {
 public:
  ObservationIndex(const PointCloud& observation, const GmmConfig& config, Backend backend);

  // Moments for model points (current positions) with matching model features.
  MomentField compute(const std::vector<Eigen::Vector3d>& model_points, const RowMatrix& model_features) const;

  const GmmConfig& config() const { return config_; }
  Backend backend() const { return backend_; }
  std::size_t observation_size() const { return values_.rows(); }
  int value_width() const { return static_cast<int>(values_.cols()); }
  // True when the lattice backend fell back to truncated direct summation.
  bool truncated() const { return neighbors_ != nullptr; }

 private:
  RowMatrix model_kernel_features(const std::vector<Eigen::Vector3d>& points, const RowMatrix& features) const;

  GmmConfig config_;
  Backend backend_;
  Eigen::VectorXd kernel_sigma_;
  RowMatrix obs_features_;  // kernel-space coordinates, unscaled
  RowMatrix values_;        // [1, y, (y^T y), (n)]
  std::optional<PermutohedralLattice> lattice_;
  std::shared_ptr<const PointIndex> neighbors_;
};

// One-shot E step: build the observation index and evaluate at `model`.
MomentField compute_moments(const PointCloud& model, const PointCloud& observation, const GmmConfig& config,
                            Backend backend);

// Isotropic sigma maximizing the EM Q-function with posteriors held fixed:
//   sigma^2 = sum_i (m0 x^T x - 2 x^T m1 + m2) / (m0 + c') / (3 sum_i m0 / (m0 + c')).
// Clamped to kSigmaFloor. Throws DegenerateError when no point carries weight.
double update_sigma(const MomentField& moments, const std::vector<Eigen::Vector3d>& model_points);

}  // namespace filterreg
