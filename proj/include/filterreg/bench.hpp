#pragma once

#include "filterreg/registration.hpp"
#include "filterreg/synthetic.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace filterreg {

// Cartesian grid of experiment settings; all other fields come from `base`.
struct BenchGrid {
  ExperimentSpec base;
  std::vector<double> rotations_deg{50.0};
  std::vector<double> outlier_ratios{0.0};
  std::vector<double> noise_levels{0.0};
  double w = 0.1;            // FilterReg outlier ratio parameter
  double sigma = 0.0;        // FilterReg sigma in meters; 0 = 5% of the observation diagonal
  int max_em_iters = 100;
  double trim_fraction = 0.8;

  std::size_t size() const { return rotations_deg.size() * outlier_ratios.size() * noise_levels.size(); }
};

// JSON object with optional keys: shape, source, points, diameter, rotations,
// outliers, noise, w, sigma, max_iters, trim, outlier_box_scale.
BenchGrid parse_bench_grid(const std::string& json_text);
BenchGrid load_bench_grid(const std::string& path);

// filterreg (lattice, fixed sigma), filterreg-sigma (lattice, updated sigma),
// filterreg-brute (exact E step), tricp (trimmed ICP).
const std::vector<std::string>& bench_methods();

struct BenchRecord {
  std::string method;
  int trial = 0;
  double rotation_deg = 0.0;
  double outlier_ratio = 0.0;
  double noise = 0.0;
  double alignment_error = 0.0;  // meters
  int iterations = 0;
  double time_per_iter_ms = 0.0;
  double total_ms = 0.0;
  std::string termination;

  bool operator==(const BenchRecord&) const = default;
};

struct BenchOptions {
  int trials = 1;
  std::uint64_t seed = 1;
  int jobs = 1;
  bool deterministic = false;  // write timing columns as 0
};

// One record per (grid point, trial, method), ordered by grid point, trial, method.
std::vector<BenchRecord> bench_sweep(const BenchGrid& grid, const std::vector<std::string>& methods,
                                     const BenchOptions& options);

// Single trial of one method on one experiment pair.
BenchRecord run_method(const std::string& method, const ExperimentPair& pair, const BenchGrid& grid);

inline constexpr const char* kBenchCsvHeader =
    "method,trial,rotation_deg,outlier_ratio,noise,alignment_error_m,iterations,time_per_iter_ms,total_ms,termination";

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records);
std::vector<BenchRecord> read_bench_csv(std::istream& in);

struct BenchSummary {
  std::string method;
  double rotation_deg = 0.0;
  double outlier_ratio = 0.0;
  double noise = 0.0;
  int trials = 0;
  double mean_error = 0.0;
  double mean_iterations = 0.0;
  double median_time_per_iter_ms = 0.0;
  int converged = 0;
};
std::vector<BenchSummary> summarize(const std::vector<BenchRecord>& records);

}  // namespace filterreg
