// Fits per-dimension lattice calibration constants against the exact kernel.
//
// For each d, isolated inputs are splatted far apart (no kernel overlap), the
// lattice is blurred, and queries uniformly distributed in a ball around each
// input are sliced. The raw response is fitted to a * exp(-r^2 / (2 s^2)) by
// least squares; the frozen table stores scale = s and amplitude = 1 / a.
#include "filterreg/permutohedral.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <random>

using namespace filterreg;

int main(int argc, char** argv) {
  CLI::App app{"lattice calibration"};
  int dmin = 1, dmax = 6, inputs = 60, queries = 400, passes = 1;
  unsigned seed = 7;
  app.add_option("--dmin", dmin);
  app.add_option("--dmax", dmax);
  app.add_option("--inputs", inputs);
  app.add_option("--queries", queries, "queries per input");
  app.add_option("--seed", seed);
  app.add_option("--passes", passes);
  CLI11_PARSE(app, argc, argv);

  for (int d = dmin; d <= dmax; ++d) {
    std::mt19937_64 rng(seed + d);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double radius = 3.5;
    const double spacing = 16.0;

    RowMatrix feats(inputs, d);
    for (int p = 0; p < inputs; ++p)
      for (int j = 0; j < d; ++j) feats(p, j) = spacing * p + uni(rng) * 3.0 + (j > 0 ? uni(rng) * 50.0 : 0.0);
    RowMatrix vals = RowMatrix::Ones(inputs, 1);

    // Base calibration: the classic factor (table scale 1, amplitude 1).
    const LatticeCalibration base{std::sqrt(2.0 / 3.0) * (d + 1), 1.0, passes};
    PermutohedralLattice lattice(d, 1, Eigen::VectorXd::Ones(d), base);
    lattice.splat(feats, vals);
    lattice.blur();

    RowMatrix q(static_cast<Eigen::Index>(inputs) * queries, d);
    std::vector<double> r2(static_cast<std::size_t>(q.rows()));
    for (int p = 0; p < inputs; ++p) {
      for (int k = 0; k < queries; ++k) {
        Eigen::VectorXd u(d);
        for (int j = 0; j < d; ++j) u[j] = gauss(rng);
        u.normalize();
        const double r = radius * std::pow(uni(rng), 1.0 / d);
        const Eigen::Index row = static_cast<Eigen::Index>(p) * queries + k;
        q.row(row) = feats.row(p) + r * u.transpose();
        r2[static_cast<std::size_t>(row)] = r * r;
      }
    }
    const RowMatrix out = lattice.slice(q);

    double best_s = 0, best_a = 0, best_err = 1e300;
    for (double s = 0.3; s <= 3.0; s += 0.0005) {
      double num = 0, den = 0;
      for (Eigen::Index i = 0; i < q.rows(); ++i) {
        const double g = std::exp(-0.5 * r2[i] / (s * s));
        num += g * out(i, 0);
        den += g * g;
      }
      const double a = num / den;
      double err = 0;
      for (Eigen::Index i = 0; i < q.rows(); ++i) {
        const double e = out(i, 0) - a * std::exp(-0.5 * r2[i] / (s * s));
        err += e * e;
      }
      if (err < best_err) { best_err = err; best_s = s; best_a = a; }
    }
    double total = 0;
    for (Eigen::Index i = 0; i < q.rows(); ++i) total += out(i, 0) * out(i, 0);
    std::printf("d=%2d keys=%zu scale=%.4f amplitude=%.6f residual_fraction=%.4f\n", d, lattice.num_keys(),
                best_s, 1.0 / best_a, std::sqrt(best_err / total));
  }
  return 0;
}
