// SPDX-License-Identifier: Apache-2.0
// nusa: experiment runner, ablation sweeps and the property battery.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "nusa/config.hpp"
#include "nusa/continual.hpp"
#include "nusa/errors.hpp"
#include "nusa/verify.hpp"

namespace fs = std::filesystem;
using namespace nusa;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitProperty = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

bool g_progress = false;

void progress(const std::string& msg) {
  if (g_progress) std::cerr << "[nusa] " << msg << '\n';
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

unsigned worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NUSA_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(v));
  }
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

// Runs every seed; seeds are independent so they fan out over worker threads.
std::vector<RunReport> run_seeds(const ExperimentConfig& cfg) {
  const auto& seeds = cfg.training.seeds;
  std::vector<std::optional<RunReport>> slots(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        slots[i] = run_experiment(cfg, seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = worker_count(seeds.size());
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<RunReport> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

template <typename Writer>
std::string render(Writer&& w) {
  std::ostringstream s;
  w(s);
  return s.str();
}

// Violations of properties that must hold by construction. Excursions past the
// ‖M‖_F bound are reported in the artifacts but do not fail a run.
bool any_violation(const std::vector<RunReport>& reports) {
  return std::any_of(reports.begin(), reports.end(), [](const RunReport& r) {
    return r.checks.nuclear_violations > 0 || r.checks.constraint_violations > 0 || r.checks.trace_violations > 0 ||
           !r.theorem_nuclear_holds;
  });
}

// Writes the run artifacts under `dir` and returns metrics.csv's contents.
std::string emit_run(const ExperimentConfig& cfg, const fs::path& dir, const std::vector<RunReport>& reports) {
  fs::create_directories(dir / "reports");
  const std::string metrics = render([&](std::ostream& o) { write_metrics_csv(o, cfg, reports); });
  write_file(dir / "metrics.csv", metrics);
  write_file(dir / "spectra.csv", render([&](std::ostream& o) { write_spectra_csv(o, reports); }));
  write_file(dir / "ledger.csv", render([&](std::ostream& o) { write_ledger_csv(o, reports); }));
  const std::string stamp = utc_timestamp();
  for (const auto& r : reports) {
    write_file(dir / "reports" / ("seed_" + std::to_string(r.seed) + ".json"),
               render([&](std::ostream& o) { write_report_json(o, cfg, r, stamp); }));
    for (const auto& w : r.warnings) progress("seed " + std::to_string(r.seed) + ": " + w);
  }
  return metrics;
}

ExperimentConfig prepare(const std::string& config_path, const std::string& out, int seeds) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out.empty()) cfg.output_dir = out;
  if (seeds > 0) {
    cfg.training.seeds.clear();
    for (int s = 0; s < seeds; ++s) cfg.training.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  return cfg;
}

int cmd_run(const std::string& config_path, const std::string& out, int seeds) {
  const ExperimentConfig cfg = prepare(config_path, out, seeds);
  progress("running " + std::to_string(cfg.training.seeds.size()) + " seed(s)");
  const auto reports = run_seeds(cfg);
  std::cout << emit_run(cfg, cfg.output_dir, reports);
  if (any_violation(reports)) {
    std::cerr << "nusa: property violation recorded during training (see reports/)\n";
    return kExitProperty;
  }
  return kExitOk;
}

void apply_axis(ExperimentConfig& cfg, const std::string& axis, const std::string& value) {
  const std::string path = "--values '" + value + "'";
  try {
    if (axis == "mode") {
      cfg.adapter.mode = parse_subspace_mode(value);
    } else if (axis == "variant") {
      cfg.adapter.variant = parse_variant(value);
    } else if (axis == "r") {
      std::size_t used = 0;
      const int r = std::stoi(value, &used);
      if (used != value.size() || r < 1) throw ConfigError("r must be a positive integer");
      cfg.adapter.r_max = r;
    } else if (axis == "rho") {
      std::size_t used = 0;
      const double rho = std::stod(value, &used);
      if (used != value.size() || !(rho > 0.0 && rho < 1.0)) throw ConfigError("rho must lie in (0, 1)");
      cfg.adapter.rho = rho;
    } else {
      throw ConfigError("--axis must be one of mode, r, rho, variant");
    }
  } catch (const std::logic_error&) {
    throw ConfigError(path + ": not a number");
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

struct Aggregate {
  double mean = std::nan("");
  double se = std::nan("");
};

Aggregate aggregate(const std::vector<double>& xs) {
  Aggregate a;
  if (xs.empty()) return a;
  double sum = 0.0;
  for (double x : xs) sum += x;
  a.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - a.mean) * (x - a.mean);
    a.se = std::sqrt(ss / static_cast<double>(xs.size() - 1)) / std::sqrt(static_cast<double>(xs.size()));
  }
  return a;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int cmd_sweep(const std::string& config_path, const std::string& out, int seeds, const std::string& axis,
              const std::vector<std::string>& values) {
  const ExperimentConfig base = prepare(config_path, out, seeds);
  std::vector<ExperimentConfig> cfgs;
  for (const auto& v : values) {
    ExperimentConfig c = base;
    apply_axis(c, axis, v);
    c.output_dir = base.output_dir / (axis + "_" + v);
    validate_config(c);
    cfgs.push_back(std::move(c));
  }
  std::ostringstream table;
  table << "axis,value,seeds,status,forgetting_mean,forgetting_se,avg_mean,avg_se,last_mean,last_se,transfer_mean,"
           "transfer_se\n";
  auto flush = [&] {
    fs::create_directories(base.output_dir);
    write_file(base.output_dir / "sweep.csv", table.str());
  };
  bool violated = false;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    progress("sweep " + axis + " = " + values[i]);
    std::vector<RunReport> reports;
    try {
      reports = run_seeds(cfgs[i]);
    } catch (...) {
      table << axis << ',' << values[i] << ',' << cfgs[i].training.seeds.size() << ",failed,nan,nan,nan,nan,nan,nan,nan,nan\n";
      flush();
      throw;
    }
    emit_run(cfgs[i], cfgs[i].output_dir, reports);
    violated = violated || any_violation(reports);
    std::vector<double> f, av, la, tr;
    for (const auto& r : reports) {
      f.push_back(r.summary.forgetting);
      av.push_back(r.summary.avg);
      la.push_back(r.summary.last);
      tr.push_back(r.summary.transfer);
    }
    const Aggregate af = aggregate(f), aa = aggregate(av), al = aggregate(la), at = aggregate(tr);
    table << axis << ',' << values[i] << ',' << reports.size() << ",ok," << num(af.mean) << ',' << num(af.se) << ','
          << num(aa.mean) << ',' << num(aa.se) << ',' << num(al.mean) << ',' << num(al.se) << ',' << num(at.mean) << ','
          << num(at.se) << '\n';
  }
  flush();
  std::cout << table.str();
  return violated ? kExitProperty : kExitOk;
}

int cmd_verify(std::uint64_t seed, int trials, bool halve_bound) {
  if (trials < 1) throw ConfigError("--trials must be >= 1");
  VerifyOptions opts;
  opts.seed = seed;
  opts.trials = trials;
  if (halve_bound) opts.bound_scale = 0.5;
  const auto results = run_verify(opts, [](const std::string& name) { progress("property " + name); });
  std::cout << "property,checks,failures,worst,status\n";
  bool ok = true;
  for (const auto& r : results) {
    std::cout << r.name << ',' << r.checks << ',' << r.failures << ',' << num(r.worst) << ','
              << (r.passed() ? "pass" : "FAIL") << '\n';
    ok = ok && r.passed();
  }
  for (const auto& r : results) {
    if (!r.passed()) {
      std::cerr << "FAILED " << r.name << " seed=" << r.first_failing_seed << " " << r.witness << '\n';
    }
  }
  return ok ? kExitOk : kExitProperty;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Null-space constrained low-rank adaptation: runs, sweeps and property checks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string config_path, out, axis, values_csv;
  int seeds = 0;
  int trials = 1000;
  std::uint64_t verify_seed = 0;
  bool halve_bound = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
    sub->add_option("--out", out, "Output directory (overrides outputs.directory)");
    sub->add_option("--seeds", seeds, "Use seeds 0..N-1 instead of training.seeds")->check(CLI::PositiveNumber);
    sub->add_flag("--progress", g_progress, "Human-readable progress on stderr");
  };
  CLI::App* run = app.add_subcommand("run", "Run one configuration over its seeds");
  add_common(run);
  CLI::App* sweep = app.add_subcommand("sweep", "Run one configuration per value of an axis");
  add_common(sweep);
  sweep->add_option("--axis", axis, "mode | r | rho | variant")->required();
  sweep->add_option("--values", values_csv, "Comma-separated axis values")->required();
  CLI::App* verify = app.add_subcommand("verify", "Run the numerical property battery");
  verify->add_option("--seed", verify_seed, "Base seed");
  verify->add_option("--trials", trials, "Cases per property");
  verify->add_flag("--progress", g_progress, "Human-readable progress on stderr");
  verify->add_flag("--fault-halve-bound", halve_bound)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*run) return cmd_run(config_path, out, seeds);
    if (*sweep) {
      std::vector<std::string> values;
      std::stringstream ss(values_csv);
      for (std::string v; std::getline(ss, v, ',');) {
        if (!v.empty()) values.push_back(v);
      }
      if (values.empty()) throw ConfigError("--values: empty list");
      return cmd_sweep(config_path, out, seeds, axis, values);
    }
    return cmd_verify(verify_seed, trials, halve_bound);
  } catch (const NumericalError& e) {
    std::cerr << "nusa: numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "nusa: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "nusa: " << e.what() << '\n';
    return kExitUsage;
  }
}
