#include "filterreg/bench.hpp"
#include "filterreg/cloud_io.hpp"
#include "filterreg/error.hpp"
#include "filterreg/registration.hpp"
#include "filterreg/synthetic.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

using namespace filterreg;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

enum ExitCode { kOk = 0, kInput = 2, kDegenerate = 3, kInternal = 4 };

json pose_json(const RigidTransform& T) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(T.rotation()(r, c));
  const Eigen::Vector3d& t = T.translation();
  return {{"rotation", rot}, {"translation", {t.x(), t.y(), t.z()}}};
}

RigidTransform pose_from_json(const json& j) {
  const auto rot = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (rot.size() != 9 || t.size() != 3) throw InputError("pose: rotation needs 9 and translation 3 entries");
  Eigen::Matrix3d r;
  for (int i = 0; i < 9; ++i) r(i / 3, i % 3) = rot[static_cast<std::size_t>(i)];
  return {project_to_rotation(r), Eigen::Vector3d(t[0], t[1], t[2])};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << text;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw InputError("not a number: '" + item + "'");
    }
  }
  return out;
}

struct RegisterArgs {
  std::string model, observation, mode = "rigid", tree, init, out, backend = "lattice", correspondence = "concatenated";
  std::string features;
  double sigma = 0.0, w = 0.1, node_spacing = 0.05, lambda_reg = -1.0, tolerance = 1e-4;
  bool point_to_plane = false, update_sigma = false;
  int max_iters = 50;
};

int run_register(const RegisterArgs& a) {
  std::vector<std::string> warnings;
  const PointCloud model = load_cloud(a.model, CloudFormat::automatic, &warnings);
  const PointCloud observation = load_cloud(a.observation, CloudFormat::automatic, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

  RegistrationConfig config;
  config.max_em_iters = a.max_iters;
  config.twist_tolerance = a.tolerance;
  config.gmm.outlier_ratio = a.w;
  config.gmm.update_sigma = a.update_sigma;
  if (a.sigma > 0.0) {
    config.auto_sigma = false;
    config.gmm.sigma.setConstant(a.sigma);
  }
  config.residual = a.point_to_plane ? ResidualMode::point_to_plane : ResidualMode::point_to_point;
  if (a.backend == "bruteforce") {
    config.backend = Backend::bruteforce;
  } else if (a.backend != "lattice") {
    throw InputError("unknown backend " + a.backend);
  }
  if (!a.features.empty()) {
    const auto fs = parse_list(a.features);
    config.gmm.feature_sigma = Eigen::Map<const Eigen::VectorXd>(fs.data(), static_cast<Eigen::Index>(fs.size()));
    if (a.correspondence == "feature") {
      config.gmm.correspondence = CorrespondenceMode::feature;
    } else if (a.correspondence == "concatenated") {
      config.gmm.correspondence = CorrespondenceMode::concatenated;
    } else {
      throw InputError("unknown correspondence " + a.correspondence);
    }
  }

  KinematicState initial;
  if (a.mode == "rigid") {
    RigidModel rigid;
    if (!a.init.empty()) rigid.pose = pose_from_json(json::parse(read_file(a.init)));
    initial = rigid;
  } else if (a.mode == "articulated") {
    if (a.tree.empty()) throw InputError("articulated mode requires --tree");
    initial = ArticulatedTree::load(a.tree);
  } else if (a.mode == "nodegraph") {
    config.mstep.lambda_reg = a.lambda_reg;
    initial = build_node_graph(model, a.node_spacing);
  } else {
    throw InputError("unknown mode " + a.mode);
  }

  const RegistrationResult result = register_point_sets(model, observation, initial, config);

  json out;
  out["mode"] = a.mode;
  if (const auto* r = std::get_if<RigidModel>(&result.state)) {
    out.update(pose_json(r->pose));
  } else if (const auto* t = std::get_if<ArticulatedTree>(&result.state)) {
    if (t->floating_base()) out["base"] = pose_json(t->base_pose());
    out["joints"] = std::vector<double>(t->joint_values().data(), t->joint_values().data() + t->num_joints());
    json bodies = json::array();
    for (int j = 0; j < t->num_bodies(); ++j) {
      json b = pose_json(t->body_pose(j));
      b["name"] = t->body(j).name;
      bodies.push_back(b);
    }
    out["bodies"] = bodies;
  } else if (const auto* g = std::get_if<NodeGraph>(&result.state)) {
    json nodes = json::array();
    for (std::size_t k = 0; k < g->num_nodes(); ++k) {
      json n = pose_json(g->transforms[k]);
      n["position"] = {g->positions[k].x(), g->positions[k].y(), g->positions[k].z()};
      nodes.push_back(n);
    }
    out["nodes"] = nodes;
    out["edges"] = g->edges;
  }
  json diag;
  diag["iterations"] = result.iterations;
  diag["termination"] = to_string(result.reason);
  if (!result.message.empty()) diag["message"] = result.message;
  diag["lattice_builds"] = result.lattice_builds;
  if (!result.history.empty()) {
    const IterationRecord& last = result.history.back();
    diag["objective"] = last.objective;
    diag["sigma"] = last.sigma;
    diag["inlier_mass"] = last.inlier_mass;
    diag["twist_norm"] = last.twist_norm;
  }
  if (a.mode == "nodegraph") diag["lambda_reg"] = result.lambda_reg;
  out["diagnostics"] = diag;
  write_text(a.out, out.dump(2) + "\n");
  if (result.reason == Termination::degenerate) {
    std::cerr << "degenerate: " << result.message << "\n";
    return kDegenerate;
  }
  return kOk;
}

struct SynthArgs {
  ExperimentSpec spec;
  std::string shape = "blob";
  std::uint64_t trial = 0;
  std::string out_model, out_observation, out_gt;
};

int run_synth(SynthArgs a) {
  a.spec.shape = parse_shape(a.shape);
  const ExperimentPair pair = synthesize_pair(a.spec, a.trial);
  if (a.out_model.empty() || a.out_observation.empty()) throw InputError("synth requires --out-model and --out-observation");
  save_cloud(a.out_model, pair.model);
  save_cloud(a.out_observation, pair.observation);
  if (!a.out_gt.empty()) write_text(a.out_gt, pose_json(pair.ground_truth).dump(2) + "\n");
  return kOk;
}

struct BenchArgs {
  std::string grid, methods = "filterreg,tricp", out;
  BenchOptions options;
};

int run_bench(const BenchArgs& a) {
  const BenchGrid grid = a.grid.empty() ? BenchGrid{} : load_bench_grid(a.grid);
  std::vector<std::string> methods;
  std::stringstream ss(a.methods);
  for (std::string m; std::getline(ss, m, ',');) methods.push_back(m);
  const auto records = bench_sweep(grid, methods, a.options);
  std::ostringstream csv;
  write_bench_csv(csv, records);
  write_text(a.out, csv.str());
  for (const BenchSummary& s : summarize(records)) {
    std::cerr << s.method << " rot " << s.rotation_deg << " outliers " << s.outlier_ratio << " noise " << s.noise
              << ": mean error " << s.mean_error * 1e3 << " mm, iterations " << s.mean_iterations << ", converged "
              << s.converged << "/" << s.trials << "\n";
  }
  return kOk;
}

struct FilterCheckArgs {
  int points = 2000, seeds = 20;
  double sigma_fraction = 0.05;
  std::uint64_t seed = 1;
};

int run_filter_check(const FilterCheckArgs& a) {
  std::vector<double> m0, target;
  for (int s = 0; s < a.seeds; ++s) {
    std::mt19937_64 rng(a.seed + static_cast<std::uint64_t>(s));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RowMatrix obs(a.points, 3), model(a.points, 3);
    for (int i = 0; i < a.points; ++i)
      for (int c = 0; c < 3; ++c) {
        obs(i, c) = u(rng);
        model(i, c) = u(rng);
      }
    const FilterAccuracy acc = lattice_accuracy(model, obs, a.sigma_fraction * std::sqrt(3.0));
    std::cout << "seed " << a.seed + static_cast<std::uint64_t>(s) << ": median m0 rel " << acc.median_m0_relative
              << ", p95 target/sigma " << acc.p95_target_error << ", lattice " << acc.lattice_ms << " ms, bruteforce "
              << acc.bruteforce_ms << " ms\n";
    m0.push_back(acc.median_m0_relative);
    target.push_back(acc.p95_target_error);
  }
  std::sort(m0.begin(), m0.end());
  std::sort(target.begin(), target.end());
  std::cout << "worst median m0 rel " << m0.back() << ", worst p95 target/sigma " << target.back() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FilterReg point-set registration"};
  app.require_subcommand(1);

  RegisterArgs reg;
  auto* rc = app.add_subcommand("register", "register a model cloud to an observation cloud");
  rc->add_option("--model", reg.model, "model cloud (.ply/.xyz)")->required();
  rc->add_option("--observation", reg.observation, "observation cloud (.ply/.xyz)")->required();
  rc->add_option("--mode", reg.mode, "rigid | articulated | nodegraph");
  rc->add_option("--tree", reg.tree, "articulated model JSON");
  rc->add_option("--init", reg.init, "initial rigid pose JSON");
  rc->add_option("--node-spacing", reg.node_spacing, "node-graph spacing in meters");
  rc->add_option("--lambda-reg", reg.lambda_reg, "node-graph regularizer weight (< 0 = automatic)");
  rc->add_option("--sigma", reg.sigma, "kernel sigma in meters (0 = 5% of observation diagonal)");
  rc->add_option("--w", reg.w, "outlier ratio parameter in [0, 1)");
  rc->add_flag("--point-to-plane", reg.point_to_plane, "point-to-plane residual (observation normals)");
  rc->add_option("--features", reg.features, "comma-separated feature sigmas; enables feature correspondence");
  rc->add_option("--correspondence", reg.correspondence, "feature | concatenated (with --features)");
  rc->add_flag("--update-sigma", reg.update_sigma, "re-estimate isotropic sigma every iteration");
  rc->add_option("--backend", reg.backend, "lattice | bruteforce");
  rc->add_option("--max-iters", reg.max_iters, "maximum EM iterations");
  rc->add_option("--tolerance", reg.tolerance, "twist-norm termination tolerance");
  rc->add_option("--out", reg.out, "output JSON (default stdout)");

  SynthArgs syn;
  auto* sc = app.add_subcommand("synth", "write a synthetic model/observation pair");
  sc->add_option("--shape", syn.shape, "sphere | cuboid | blob | strip | chain");
  sc->add_option("--source", syn.spec.source_path, "PLY/XYZ source instead of a builtin shape");
  sc->add_option("--points", syn.spec.points);
  sc->add_option("--diameter", syn.spec.diameter, "bounding-box diagonal in meters");
  sc->add_option("--rotation", syn.spec.rotation_deg, "rotation angle in degrees");
  sc->add_option("--outliers", syn.spec.outlier_ratio, "outlier ratio");
  sc->add_option("--noise", syn.spec.noise, "noise stddev as a fraction of the diameter");
  sc->add_option("--box-scale", syn.spec.outlier_box_scale, "outlier bounding-box expansion");
  sc->add_option("--seed", syn.spec.seed);
  sc->add_option("--trial", syn.trial);
  sc->add_option("--out-model", syn.out_model)->required();
  sc->add_option("--out-observation", syn.out_observation)->required();
  sc->add_option("--out-gt", syn.out_gt, "ground-truth pose JSON");

  BenchArgs bench;
  auto* bc = app.add_subcommand("bench", "sweep methods over an experiment grid");
  bc->add_option("--grid", bench.grid, "grid JSON");
  bc->add_option("--methods", bench.methods, "comma-separated: filterreg, filterreg-sigma, filterreg-brute, tricp");
  bc->add_option("--trials", bench.options.trials);
  bc->add_option("--seed", bench.options.seed);
  bc->add_option("--jobs", bench.options.jobs, "worker threads");
  bc->add_flag("--deterministic", bench.options.deterministic, "write timing columns as 0");
  bc->add_option("--out", bench.out, "CSV output (default stdout)");

  FilterCheckArgs fc;
  auto* fcc = app.add_subcommand("filter-check", "lattice vs brute-force Gaussian transform accuracy");
  fcc->add_option("--points", fc.points);
  fcc->add_option("--seeds", fc.seeds);
  fcc->add_option("--seed", fc.seed);
  fcc->add_option("--sigma-fraction", fc.sigma_fraction, "sigma as a fraction of the cloud extent");

  app.add_subcommand("version", "print the version");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }

  try {
    if (rc->parsed()) return run_register(reg);
    if (sc->parsed()) return run_synth(syn);
    if (bc->parsed()) return run_bench(bench);
    if (fcc->parsed()) return run_filter_check(fc);
    std::cout << "filterreg " << kVersion << "\n";
    return kOk;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kInput;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const DegenerateError& e) {
    std::cerr << "degenerate: " << e.what() << "\n";
    return kDegenerate;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}
