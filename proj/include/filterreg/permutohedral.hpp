#pragma once

#include "filterreg/geometry.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace filterreg {

// Exact double-loop Gaussian transform:
//   out(i) = sum_k exp(-0.5 |q_i - f_k|^2) * values(k)
// with features already normalized to identity covariance.
RowMatrix gaussian_transform_bruteforce(const RowMatrix& query_features, const RowMatrix& input_features,
                                        const RowMatrix& input_values);

// Lattice-to-Gaussian calibration for one feature dimension. `scale` multiplies
// the sigma-normalized features before embedding; `amplitude` rescales sliced
// output so that the kernel peak matches exp(0) = 1.
struct LatticeCalibration {
  double scale;
  double amplitude;
  int blur_passes = 1;         // repetitions of the [1 2 1]/4 sweep over all d+1 axes
  bool expand_support = true;  // grow keys during blur; false = classic existing-key blur
};

// Frozen per-dimension calibration (d = 1 .. kMaxLatticeDimension). Dimensions
// up to 6 are fitted and use support expansion; above that the support of an
// expanded blur grows like 3^(d+1) per vertex, so the classic existing-key blur
// is used with an extrapolated, mass-matched amplitude (approximate).
LatticeCalibration default_lattice_calibration(int d);

inline constexpr int kMaxLatticeDimension = 12;

// Sparse permutohedral lattice: splat with barycentric weights, blur with
// [1 2 1]/4 along each of the d+1 lattice directions, slice at arbitrary queries.
// Blur inserts neighbor keys of every non-zero vertex before each pass, so the
// stored field equals the blur on the infinite lattice. Consequently the values
// never depend on extra zero-valued splats (the augmented-input identity).
class PermutohedralLattice {
 public:
  PermutohedralLattice(int dimension, int value_width, const Eigen::VectorXd& sigma);
  PermutohedralLattice(int dimension, int value_width, const Eigen::VectorXd& sigma,
                       LatticeCalibration calibration);

  // Vertices of the enclosing simplex and their barycentric weights.
  struct Embedding {
    std::vector<std::int32_t> keys;  // (d+1) vertices x (d+1) coordinates
    std::vector<double> weights;     // d+1 barycentric weights
  };

  void splat(const RowMatrix& features, const RowMatrix& values);
  void blur();
  // Requires blur(). Returns calibrated output, one row per query.
  RowMatrix slice(const RowMatrix& query_features) const;

  Embedding embed(std::span<const double> feature) const;

  int dimension() const { return d_; }
  int value_width() const { return value_width_; }
  bool blurred() const { return blurred_; }
  std::size_t num_keys() const { return num_keys_; }
  // Full (d+1)-coordinate key of stored vertex i.
  std::vector<std::int32_t> key(std::size_t i) const;
  std::span<const double> value(std::size_t i) const;
  const Eigen::VectorXd& sigma() const { return sigma_; }

 private:
  using PackedKey = std::array<std::uint64_t, 4>;

  // Returns index of key, inserting a zero-valued vertex when `create`; -1 when absent.
  std::int64_t find(const std::int32_t* key, bool create);
  std::int64_t find(const std::int32_t* key) const;
  PackedKey pack(const std::int32_t* key) const;
  std::uint64_t hash(const PackedKey& packed) const;
  std::size_t probe(const PackedKey& packed) const;
  void grow();
  void embed_into(const double* feature, std::int32_t* keys, double* weights) const;

  int d_;
  int value_width_;
  Eigen::VectorXd sigma_;
  LatticeCalibration calibration_;
  std::vector<double> scale_factor_;  // per-feature scale incl. 1/sigma
  std::vector<std::int32_t> canonical_;
  bool blurred_ = false;

  std::size_t num_keys_ = 0;
  std::vector<std::int32_t> keys_;   // num_keys_ x (d+1)
  std::vector<double> values_;       // num_keys_ x value_width_
  // Open addressing on the first d coordinates packed into 21-bit fields (the
  // last coordinate is implied by the zero-sum constraint).
  int words_;
  std::vector<std::int64_t> slot_index_;  // -1 = empty
  std::vector<std::uint64_t> slot_key_;   // words_ per slot
};

// Builds the lattice over (features, values), sigma-scaled, and blurs it.
PermutohedralLattice build_lattice(const RowMatrix& input_features, const RowMatrix& input_values,
                                   const Eigen::VectorXd& sigma);

// Augmented-input filtering: splat [F_model, F_obs] with values [0, V_obs],
// blur, slice at the model features.
RowMatrix filter_augmented(const RowMatrix& model_features, const RowMatrix& obs_features,
                           const RowMatrix& obs_values, const Eigen::VectorXd& sigma);

// Lattice-vs-exact comparison of the position E step (values [1, y]) on 3-D
// points with isotropic sigma.
struct FilterAccuracy {
  double median_m0_relative = 0.0;  // over queries with exact m0 > 1e-12
  double p95_target_error = 0.0;    // |m1/m0 difference| / sigma, queries with exact m0 >= mass_floor
  std::size_t evaluated = 0;        // queries entering the target percentile
  double lattice_ms = 0.0;          // build + slice
  double bruteforce_ms = 0.0;
};

FilterAccuracy lattice_accuracy(const RowMatrix& query_points, const RowMatrix& input_points, double sigma,
                                double mass_floor = 1e-3);

}  // namespace filterreg
