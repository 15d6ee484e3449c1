#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "locvar/locvar.hpp"

namespace fs = std::filesystem;
using namespace locvar;
using namespace locvar::harness;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumeric = 2, kCheckFailed = 3 };

struct Flags {
  std::string config;
  std::string out_dir;
  std::string seed, replicates, n, sigma, theta, kernel_order, phi, format, threads, curve_dumps;
  std::vector<std::string> sets;
  std::string input;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "flat key = value config file");
  sub->add_option("--out-dir", f.out_dir, "output directory");
  sub->add_option("--seed", f.seed, "base seed (u64)");
  sub->add_option("--replicates", f.replicates, "replicates per cell");
  sub->add_option("--n", f.n, "comma separated sample sizes");
  sub->add_option("--sigma", f.sigma, "sine | step | constant:<c>");
  sub->add_option("--theta", f.theta, "0.1 | 0.01 | indep (comma list allowed)");
  sub->add_option("--kernel-order", f.kernel_order, "kernel order (2, 4, 6, 8)");
  sub->add_option("--phi", f.phi, "range of the deviance covariance model");
  sub->add_option("--format", f.format, "csv | json-lines");
  sub->add_option("--threads", f.threads, "worker threads, 0 for all cores");
  sub->add_option("--curve-dumps", f.curve_dumps, "dump estimated curves for the first k replicates");
  sub->add_option("--set", f.sets, "extra key=value config override")->take_all();
}

// Config file first, then command-line values on top. Returns the keys set
// on the command line or in the file.
std::set<std::string> build_config(const Flags& f, ExperimentConfig& c) {
  std::set<std::string> given;
  if (!f.config.empty()) {
    for (const auto& key : load_config_file(f.config, c)) given.insert(key);
  }
  const std::pair<const char*, const std::string*> flags[] = {
      {"seed", &f.seed},     {"replicates", &f.replicates}, {"n", &f.n},          {"sigma", &f.sigma},
      {"theta", &f.theta},   {"kernel_order", &f.kernel_order}, {"phi", &f.phi}, {"format", &f.format},
      {"threads", &f.threads}, {"curve_dumps", &f.curve_dumps}};
  for (const auto& [key, value] : flags) {
    if (value->empty()) continue;
    apply_setting(c, key, *value);
    given.insert(key);
  }
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
    given.insert(trim(kv.substr(0, eq)));
  }
  c.validate();
  return given;
}

fs::path out_dir(const Flags& f) { return f.out_dir.empty() ? fs::path("locvar_out") : fs::path(f.out_dir); }

int cmd_simulate(const Flags& f) {
  ExperimentConfig c;
  build_config(f, c);
  const GridDesign design(c.n_list.front(), c.grid);
  const ProcessSpec spec{FunctionSpec::constant(0.0), c.sigma_function(), parse_theta(c.thetas.front())};
  const GridProcess p = simulate_process(spec, design, c.seed);
  std::ostringstream os;
  os << "i,s,z,true_sd\n";
  for (std::size_t i = 0; i < design.size(); ++i) {
    os << i << ',' << fmt(design[i]) << ',' << fmt(p.values[i]) << ',' << fmt(p.true_sd(design[i]))
       << '\n';
  }
  if (f.out_dir.empty()) {
    std::cout << os.str();
  } else {
    write_file(out_dir(f) / "process.csv", os.str());
  }
  return kOk;
}

// Last column of each data row; a header line is skipped if it does not parse.
std::vector<double> read_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open input " + path);
  std::vector<double> z;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    const std::string field = trim(comma == std::string::npos ? line : line.substr(comma + 1));
    try {
      z.push_back(parse_number<double>("input", field));
    } catch (const ConfigError&) {
      if (!first) throw;
    }
    first = false;
  }
  return z;
}

int cmd_estimate(const Flags& f) {
  ExperimentConfig c;
  build_config(f, c);
  const FunctionSpec truth = c.sigma_function();
  const bool simulated = f.input.empty();
  const GridProcess p = [&] {
    if (simulated) {
      const ProcessSpec spec{FunctionSpec::constant(0.0), truth, parse_theta(c.thetas.front())};
      return simulate_process(spec, GridDesign(c.n_list.front(), c.grid), c.seed);
    }
    std::vector<double> z = read_values(f.input);
    if (z.size() < 20) throw ConfigError("input needs at least 20 values");
    return GridProcess{GridDesign(z.size(), c.grid), std::move(z), ProcessSpec{}, 0, 0.0};
  }();
  const KernelSpec kernel = c.kernel();
  const CandidateGrid grid = CandidateGrid::log_spaced(p.design.spacing(), c.candidates, c.candidate_upper);
  PipelineOptions opt;
  opt.lag = c.lag;
  opt.phi = c.phi;
  opt.max_lag = c.max_lag;
  opt.selection.diagonal = c.diagonal;
  const PipelineResult r = estimate_variance(p, kernel, grid, opt);

  std::printf("n=%zu bandwidth=%.10f theta_hat=%s sigma2_star=%.10f degenerate=%d\n", p.design.size(),
              r.selection.bandwidth, r.fit.degenerate ? "indep" : fmt(r.fit.theta, "%.10f").c_str(),
              r.fit.sigma2_star, r.fit.degenerate ? 1 : 0);
  std::ostringstream os;
  const std::vector<double> s = evaluation_grid();
  if (simulated) {
    const EvaluationReport rep = evaluate(r.variance, truth);
    std::printf("dmse=%.10f max=%.10f max_sd=%.10f\n", rep.dmse, rep.max, rep.max_sd);
    write_curve(os, r.variance.values, truth);
  } else {
    os << "s,estimated_sd\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
      os << fmt(s[i]) << ',' << fmt(std::sqrt(r.variance.values[i])) << '\n';
    }
  }
  write_file(out_dir(f) / "estimate_curve.csv", os.str());
  return kOk;
}

int cmd_experiment(const Flags& f, Mode mode) {
  ExperimentConfig c;
  build_config(f, c);
  c.mode = mode;
  const ExperimentResult r = run_experiment(c, mode);
  write_experiment(out_dir(f), r, c);
  std::cout << table_text(r.summaries, c.sigma);
  for (const auto& msg : r.failures) std::cerr << "batch failure: " << msg << '\n';
  return r.failed() ? kNumeric : kOk;
}

int cmd_moments(const Flags& f) {
  ExperimentConfig c;
  const auto given = build_config(f, c);
  if (!given.count("n")) c.n_list = {200};
  const MomentCheckReport r = moments_check(c);
  const std::string text = moments_text(r);
  std::cout << text;
  if (!f.out_dir.empty()) write_file(out_dir(f) / "moments_check.txt", text);
  return r.passed() ? kOk : kCheckFailed;
}

int cmd_rate(const Flags& f) {
  ExperimentConfig c;
  const auto given = build_config(f, c);
  if (!given.count("n")) c.n_list = {100, 200, 500};
  if (!given.count("mode")) c.mode = Mode::oracle;
  const RateCheckReport r = rate_check(c);
  const std::string text = rate_text(r);
  std::cout << text;
  if (!f.out_dir.empty()) write_file(out_dir(f) / "rate_check.txt", text);
  return r.passed() ? kOk : kCheckFailed;
}

int cmd_table1(const Flags& f) {
  ExperimentConfig base;
  const auto given = build_config(f, base);
  if (!given.count("n")) base.n_list = {100, 200, 500, 1000};
  if (!given.count("theta")) base.thetas = {"0.1", "0.01", "indep"};
  std::vector<std::string> sigmas{"sine", "step"};
  if (given.count("sigma")) sigmas = {base.sigma};
  std::string table;
  bool failed = false;
  for (const auto& sigma : sigmas) {
    ExperimentConfig c = base;
    c.sigma = sigma;
    ExperimentResult all;
    for (Mode mode : {Mode::oracle, Mode::select}) {
      ExperimentResult r = run_experiment(c, mode);
      all.rows.insert(all.rows.end(), r.rows.begin(), r.rows.end());
      all.failures.insert(all.failures.end(), r.failures.begin(), r.failures.end());
    }
    // Within each n, oracle rows before selected rows.
    std::stable_sort(all.rows.begin(), all.rows.end(), [](const RunRecord& a, const RunRecord& b) {
      if (a.n != b.n) return a.n < b.n;
      return a.method == "Diff-oracle" && b.method != "Diff-oracle";
    });
    all.summaries = summarize(all.rows);
    write_experiment(out_dir(f) / sigma, all, c);
    table += table_text(all.summaries, sigma) + "\n";
    for (const auto& msg : all.failures) std::cerr << "batch failure (" << sigma << "): " << msg << '\n';
    failed = failed || all.failed();
  }
  write_file(out_dir(f) / "table1.txt", table);
  std::cout << table;
  return failed ? kNumeric : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local-variogram variance function estimation"};
  app.require_subcommand(1);
  Flags f;
  auto* simulate = app.add_subcommand("simulate", "draw one process and write it as CSV");
  auto* estimate = app.add_subcommand("estimate", "run the full pipeline on one process");
  auto* select = app.add_subcommand("select", "selected-bandwidth experiment");
  auto* oracle = app.add_subcommand("oracle", "oracle-bandwidth experiment");
  auto* moments = app.add_subcommand("moments-check", "Monte Carlo check of squared pseudo-residual moments");
  auto* rate = app.add_subcommand("rate-check", "DMSE trend in n and correlation decay");
  auto* table1 = app.add_subcommand("reproduce-table1", "bandwidth summaries for sine and step sigma");
  for (auto* sub : {simulate, estimate, select, oracle, moments, rate, table1}) add_common(sub, f);
  estimate->add_option("--input", f.input, "data file; last column of each row is read");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*simulate) return cmd_simulate(f);
    if (*estimate) return cmd_estimate(f);
    if (*select) return cmd_experiment(f, Mode::select);
    if (*oracle) return cmd_experiment(f, Mode::oracle);
    if (*moments) return cmd_moments(f);
    if (*rate) return cmd_rate(f);
    if (*table1) return cmd_table1(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DomainError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const Error& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  }
  return kOk;
}
