#include "filterreg/bench.hpp"

#include "filterreg/error.hpp"
#include "filterreg/trimmed_icp.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

namespace filterreg {

BenchGrid parse_bench_grid(const std::string& json_text) {
  using nlohmann::json;
  BenchGrid grid;
  try {
    const json doc = json::parse(json_text);
    if (!doc.is_object()) throw InputError("bench grid must be a JSON object");
    if (doc.contains("shape")) grid.base.shape = parse_shape(doc["shape"].get<std::string>());
    if (doc.contains("source")) grid.base.source_path = doc["source"].get<std::string>();
    if (doc.contains("points")) grid.base.points = doc["points"].get<std::size_t>();
    if (doc.contains("diameter")) grid.base.diameter = doc["diameter"].get<double>();
    if (doc.contains("outlier_box_scale")) grid.base.outlier_box_scale = doc["outlier_box_scale"].get<double>();
    if (doc.contains("rotations")) grid.rotations_deg = doc["rotations"].get<std::vector<double>>();
    if (doc.contains("outliers")) grid.outlier_ratios = doc["outliers"].get<std::vector<double>>();
    if (doc.contains("noise")) grid.noise_levels = doc["noise"].get<std::vector<double>>();
    grid.w = doc.value("w", grid.w);
    grid.sigma = doc.value("sigma", grid.sigma);
    grid.max_em_iters = doc.value("max_iters", grid.max_em_iters);
    grid.trim_fraction = doc.value("trim", grid.trim_fraction);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bench grid: ") + e.what());
  }
  if (grid.size() == 0) throw InputError("bench grid has an empty axis");
  return grid;
}

BenchGrid load_bench_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_bench_grid(ss.str());
}

const std::vector<std::string>& bench_methods() {
  static const std::vector<std::string> methods = {"filterreg", "filterreg-sigma", "filterreg-brute", "tricp"};
  return methods;
}

BenchRecord run_method(const std::string& method, const ExperimentPair& pair, const BenchGrid& grid) {
  BenchRecord rec;
  rec.method = method;
  const auto start = std::chrono::steady_clock::now();
  RegistrationResult result;
  if (method == "tricp") {
    TrimmedIcpOptions options;
    options.trim_fraction = grid.trim_fraction;
    options.max_iters = grid.max_em_iters;
    result = trimmed_icp(pair.model, pair.observation, RigidTransform::identity(), options);
  } else if (method == "filterreg" || method == "filterreg-sigma" || method == "filterreg-brute") {
    RegistrationConfig config;
    config.gmm.outlier_ratio = grid.w;
    if (grid.sigma > 0.0) {
      config.auto_sigma = false;
      config.gmm.sigma = Eigen::Vector3d::Constant(grid.sigma);
    }
    config.gmm.update_sigma = method == "filterreg-sigma";
    config.backend = method == "filterreg-brute" ? Backend::bruteforce : Backend::lattice;
    config.max_em_iters = grid.max_em_iters;
    result = register_point_sets(pair.model, pair.observation, RigidModel{}, config);
  } else {
    throw InputError("unknown bench method '" + method + "'");
  }
  rec.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  rec.iterations = result.iterations;
  rec.time_per_iter_ms = result.iterations > 0 ? rec.total_ms / result.iterations : 0.0;
  rec.alignment_error = alignment_error(std::get<RigidModel>(result.state).pose, pair.ground_truth, pair.reference);
  rec.termination = to_string(result.reason);
  return rec;
}

std::vector<BenchRecord> bench_sweep(const BenchGrid& grid, const std::vector<std::string>& methods,
                                     const BenchOptions& options) {
  if (options.trials < 1) throw InputError("bench: trials must be >= 1");
  if (methods.empty()) throw InputError("bench: no methods selected");
  for (const auto& m : methods) {
    if (std::find(bench_methods().begin(), bench_methods().end(), m) == bench_methods().end()) {
      throw InputError("unknown bench method '" + m + "'");
    }
  }

  struct Task {
    ExperimentSpec spec;
    int trial;
  };
  std::vector<Task> tasks;
  for (double rot : grid.rotations_deg) {
    for (double out : grid.outlier_ratios) {
      for (double noise : grid.noise_levels) {
        for (int t = 0; t < options.trials; ++t) {
          ExperimentSpec spec = grid.base;
          spec.rotation_deg = rot;
          spec.outlier_ratio = out;
          spec.noise = noise;
          spec.seed = options.seed;
          spec.validate();
          tasks.push_back({spec, t});
        }
      }
    }
  }

  std::vector<BenchRecord> records(tasks.size() * methods.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t t = next.fetch_add(1);
      if (t >= tasks.size()) return;
      try {
        const ExperimentPair pair = synthesize_pair(tasks[t].spec, static_cast<std::uint64_t>(tasks[t].trial));
        for (std::size_t m = 0; m < methods.size(); ++m) {
          BenchRecord rec = run_method(methods[m], pair, grid);
          rec.trial = tasks[t].trial;
          rec.rotation_deg = tasks[t].spec.rotation_deg;
          rec.outlier_ratio = tasks[t].spec.outlier_ratio;
          rec.noise = tasks[t].spec.noise;
          if (options.deterministic) {
            rec.time_per_iter_ms = 0.0;
            rec.total_ms = 0.0;
          }
          records[t * methods.size() + m] = std::move(rec);
        }
      } catch (...) {
        const std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = tasks.size();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return records;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  out << kBenchCsvHeader << "\n";
  std::ostringstream row;
  row << std::setprecision(17);
  for (const auto& r : records) {
    row.str("");
    row << r.method << ',' << r.trial << ',' << r.rotation_deg << ',' << r.outlier_ratio << ',' << r.noise << ','
        << r.alignment_error << ',' << r.iterations << ',' << r.time_per_iter_ms << ',' << r.total_ms << ','
        << r.termination << '\n';
    out << row.str();
  }
}

namespace {

template <typename T>
T parse_field(const std::string& s, long line) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ParseError("bad CSV field '" + s + "'", line);
  return v;
}

}  // namespace

std::vector<BenchRecord> read_bench_csv(std::istream& in) {
  std::string line;
  long line_no = 1;
  if (!std::getline(in, line) || line != kBenchCsvHeader) throw ParseError("unexpected bench CSV header", 1);
  std::vector<BenchRecord> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw ParseError("expected 10 CSV fields", line_no);
    BenchRecord r;
    r.method = f[0];
    r.trial = parse_field<int>(f[1], line_no);
    r.rotation_deg = parse_field<double>(f[2], line_no);
    r.outlier_ratio = parse_field<double>(f[3], line_no);
    r.noise = parse_field<double>(f[4], line_no);
    r.alignment_error = parse_field<double>(f[5], line_no);
    r.iterations = parse_field<int>(f[6], line_no);
    r.time_per_iter_ms = parse_field<double>(f[7], line_no);
    r.total_ms = parse_field<double>(f[8], line_no);
    r.termination = f[9];
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<BenchSummary> summarize(const std::vector<BenchRecord>& records) {
  using Key = std::tuple<double, double, double, std::string>;
  std::map<Key, std::vector<const BenchRecord*>> groups;
  std::vector<Key> order;
  for (const auto& r : records) {
    const Key key{r.rotation_deg, r.outlier_ratio, r.noise, r.method};
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(&r);
  }
  std::vector<BenchSummary> out;
  for (const Key& key : order) {
    const auto& group = groups[key];
    BenchSummary s;
    std::tie(s.rotation_deg, s.outlier_ratio, s.noise, s.method) = key;
    s.trials = static_cast<int>(group.size());
    std::vector<double> times;
    for (const BenchRecord* r : group) {
      s.mean_error += r->alignment_error;
      s.mean_iterations += r->iterations;
      times.push_back(r->time_per_iter_ms);
      if (r->termination == "converged") ++s.converged;
    }
    s.mean_error /= s.trials;
    s.mean_iterations /= s.trials;
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    s.median_time_per_iter_ms = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    out.push_back(s);
  }
  return out;
}

}  // namespace filterreg
