#pragma once

// Simulation harness: experiment configuration, seeded replicate runs,
// Bandwidth summaries, moment and rate checks, and the output writers
// used by the command-line tool.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "locvar/bandwidth_select.hpp"
#include "locvar/error.hpp"
#include "locvar/gm_kernel.hpp"
#include "locvar/grid_process.hpp"
#include "locvar/local_variogram.hpp"
#include "locvar/variance_pipeline.hpp"

namespace locvar::harness {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

enum class Mode { select, oracle, moments_check, rate_check };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::select: return "select";
    case Mode::oracle: return "oracle";
    case Mode::moments_check: return "moments-check";
    case Mode::rate_check: return "rate-check";
  }
  return "?";
}

inline std::string method_name(Mode m) { return m == Mode::oracle ? "Diff-oracle" : "Diff-selected"; }

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const std::string t = trim(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("invalid value for " + key + ": '" + text + "'");
  }
  return v;
}

inline std::string fmt(double x, const char* spec = "%.17g") {
  if (std::isnan(x)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

}  // namespace detail

using detail::fmt;
using detail::parse_number;
using detail::trim;

// "sine", "step" or "constant:<c>" with c > 0.
inline FunctionSpec parse_sigma(const std::string& text) {
  const std::string t = detail::trim(text);
  if (t == "sine") return FunctionSpec::sine();
  if (t == "step") return FunctionSpec::step();
  if (t.rfind("constant:", 0) == 0) {
    const double c = detail::parse_number<double>("sigma", t.substr(9));
    if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("constant sigma must be positive, got " + t);
    return FunctionSpec::constant(c);
  }
  throw ConfigError("sigma must be sine, step or constant:<c>, got '" + text + "'");
}

// "indep" or a positive range parameter.
inline CorrelationModel parse_theta(const std::string& text) {
  const std::string t = detail::trim(text);
  if (t == "indep" || t == "independent" || t == "0") return CorrelationModel::independent();
  const double th = detail::parse_number<double>("theta", t);
  if (!(th > 0.0) || !std::isfinite(th)) throw ConfigError("theta must be positive or 'indep', got '" + text + "'");
  return CorrelationModel::exponential(th);
}

inline Mode parse_mode(const std::string& text) {
  const std::string t = detail::trim(text);
  if (t == "select") return Mode::select;
  if (t == "oracle") return Mode::oracle;
  if (t == "moments-check" || t == "moments_check") return Mode::moments_check;
  if (t == "rate-check" || t == "rate_check") return Mode::rate_check;
  throw ConfigError("mode must be select, oracle, moments-check or rate-check, got '" + text + "'");
}

struct ExperimentConfig {
  std::string sigma = "sine";
  std::vector<std::string> thetas{"0.1"};
  std::vector<std::size_t> n_list{100};
  int replicates = 100;
  int kernel_order = 6;
  // Window radius is support_scale * lambda.
  double support_scale = 2.0;
  BoundaryPolicy boundary = BoundaryPolicy::renormalize;
  std::size_t candidates = 20;
  double candidate_upper = 0.5;
  double phi = 0.01;
  int lag = 1;
  int max_lag = 10;
  std::uint64_t seed = 1;
  GridConvention grid = GridConvention::endpoint;
  Mode mode = Mode::select;
  DiagonalMode diagonal = DiagonalMode::computed;
  bool variance_scale_dmse = false;
  int threads = 0;  // 0: one per hardware thread
  std::size_t curve_dumps = 0;
  int moment_replicates = 20000;
  std::string format = "csv";

  FunctionSpec sigma_function() const { return parse_sigma(sigma); }

  KernelSpec kernel() const { return build_base_kernel(kernel_order, boundary, support_scale); }

  void validate() const {
    const FunctionSpec f = parse_sigma(sigma);
    for (std::size_t k = 0; k <= 1000; ++k) {
      if (!(f(static_cast<double>(k) / 1000.0) > 0.0)) throw ConfigError("sigma must be positive on [0,1]");
    }
    if (thetas.empty()) throw ConfigError("theta list is empty");
    for (const auto& t : thetas) parse_theta(t);
    if (n_list.empty()) throw ConfigError("n list is empty");
    for (std::size_t n : n_list) {
      if (n < 20) throw ConfigError("every n must be >= 20, got " + std::to_string(n));
    }
    if (replicates < 1) throw ConfigError("replicates must be >= 1");
    if (kernel_order != 2 && kernel_order != 4 && kernel_order != 6 && kernel_order != 8) {
      throw ConfigError("kernel order must be 2, 4, 6 or 8");
    }
    if (!(support_scale > 0.0)) throw ConfigError("kernel_support_scale must be positive");
    if (candidates < 2) throw ConfigError("need at least 2 candidate bandwidths");
    if (!(candidate_upper > 0.0) || candidate_upper > 0.5) throw ConfigError("candidate_upper must lie in (0, 0.5]");
    if (!(phi >= 0.0) || !std::isfinite(phi)) throw ConfigError("phi must be >= 0");
    if (lag < 1) throw ConfigError("lag must be >= 1");
    if (max_lag < 1) throw ConfigError("max_lag must be >= 1");
    if (threads < 0) throw ConfigError("threads must be >= 0");
    if (moment_replicates < 2) throw ConfigError("moment_replicates must be >= 2");
    if (format != "csv" && format != "json-lines") throw ConfigError("format must be csv or json-lines");
  }
};

inline void apply_setting(ExperimentConfig& c, const std::string& key_in, const std::string& value_in) {
  using detail::parse_number;
  const std::string key = detail::trim(key_in);
  const std::string value = detail::trim(value_in);
  if (key == "sigma") {
    parse_sigma(value);
    c.sigma = value;
  } else if (key == "theta") {
    c.thetas = detail::split(value, ',');
    for (const auto& t : c.thetas) parse_theta(t);
  } else if (key == "n") {
    c.n_list.clear();
    for (const auto& t : detail::split(value, ',')) c.n_list.push_back(parse_number<std::size_t>(key, t));
  } else if (key == "replicates") {
    c.replicates = parse_number<int>(key, value);
  } else if (key == "kernel_order") {
    c.kernel_order = parse_number<int>(key, value);
  } else if (key == "kernel_support_scale") {
    c.support_scale = parse_number<double>(key, value);
  } else if (key == "boundary_policy") {
    if (value == "renormalize") c.boundary = BoundaryPolicy::renormalize;
    else if (value == "fixed_bandwidth_edge") c.boundary = BoundaryPolicy::fixed_bandwidth_edge;
    else throw ConfigError("boundary_policy must be renormalize or fixed_bandwidth_edge");
  } else if (key == "candidates") {
    c.candidates = parse_number<std::size_t>(key, value);
  } else if (key == "candidate_upper") {
    c.candidate_upper = parse_number<double>(key, value);
  } else if (key == "phi") {
    c.phi = parse_number<double>(key, value);
  } else if (key == "lag" || key == "h") {
    c.lag = parse_number<int>(key, value);
  } else if (key == "max_lag") {
    c.max_lag = parse_number<int>(key, value);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "grid") {
    if (value == "endpoint") c.grid = GridConvention::endpoint;
    else if (value == "midpoint") c.grid = GridConvention::midpoint;
    else throw ConfigError("grid must be endpoint or midpoint");
  } else if (key == "mode") {
    c.mode = parse_mode(value);
  } else if (key == "diagonal") {
    if (value == "computed") c.diagonal = DiagonalMode::computed;
    else if (value == "literal_k0") c.diagonal = DiagonalMode::literal_k0;
    else throw ConfigError("diagonal must be computed or literal_k0");
  } else if (key == "dmse_scale") {
    if (value == "sd") c.variance_scale_dmse = false;
    else if (value == "variance") c.variance_scale_dmse = true;
    else throw ConfigError("dmse_scale must be sd or variance");
  } else if (key == "threads") {
    c.threads = parse_number<int>(key, value);
  } else if (key == "curve_dumps") {
    c.curve_dumps = parse_number<std::size_t>(key, value);
  } else if (key == "moment_replicates") {
    c.moment_replicates = parse_number<int>(key, value);
  } else if (key == "format") {
    c.format = value;
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

// Flat "key = value" lines; '#' starts a comment. Returns the keys set.
inline std::vector<std::string> load_config(std::istream& in, ExperimentConfig& c) {
  std::vector<std::string> keys;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    try {
      apply_setting(c, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
    keys.push_back(detail::trim(line.substr(0, eq)));
  }
  return keys;
}

inline std::vector<std::string> load_config_file(const std::filesystem::path& path, ExperimentConfig& c) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return load_config(in, c);
}

inline std::string theta_label(const std::string& text) { return parse_theta(text).label(); }

// Runs f(0..count-1) on a small pool. Each index is handled exactly once;
// f must not throw.
template <class F>
void parallel_for(std::size_t count, int threads, F&& f) {
  unsigned t = threads > 0 ? static_cast<unsigned>(threads) : std::max(1u, std::thread::hardware_concurrency());
  t = static_cast<unsigned>(std::min<std::size_t>(t, count));
  if (t <= 1) {
    for (std::size_t i = 0; i < count; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(t);
  for (unsigned k = 0; k < t; ++k) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) f(i);
    });
  }
}

struct RunRecord {
  std::string method;
  std::string sigma;
  std::size_t n = 0;
  std::string theta;
  int replicate = 0;
  std::uint64_t seed = 0;
  double bandwidth = kNaN;
  double theta_hat = kNaN;
  double sigma2_star = kNaN;
  bool degenerate = false;
  double dmse = kNaN;
  double max = kNaN;
  double max_sd = kNaN;
  std::size_t floored = 0;
  double wall_seconds = 0.0;
  std::string error;
  std::vector<double> curve;  // estimated variance on the evaluation grid, when dumped

  bool ok() const { return error.empty(); }
};

struct CellSummary {
  std::string method;
  std::string sigma;
  std::size_t n = 0;
  std::string theta;
  std::size_t count = 0;
  std::size_t errors = 0;
  double mean = kNaN;  // bandwidth
  double sd = kNaN;
  double dmse_mean = kNaN;
  double dmse_median = kNaN;
  double max_mean = kNaN;
  double max_median = kNaN;
  double max_sd_median = kNaN;
};

struct ExperimentResult {
  std::vector<RunRecord> rows;
  std::vector<CellSummary> summaries;
  std::vector<std::string> failures;  // cells with more than 10% failed replicates

  bool failed() const { return !failures.empty(); }
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return kNaN;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

// One (n, theta) combination of an experiment.
struct Cell {
  std::size_t index = 0;
  std::size_t n = 0;
  std::string theta;
};

inline std::vector<Cell> cells_of(const ExperimentConfig& c) {
  std::vector<Cell> out;
  for (std::size_t n : c.n_list) {
    for (const auto& t : c.thetas) out.push_back({out.size(), n, theta_label(t)});
  }
  return out;
}

// Seeds are distinct across (replicate, n, theta) within one run and shared
// between the oracle and selected methods.
inline std::uint64_t replicate_seed(const ExperimentConfig& c, std::size_t cell, int replicate) {
  return c.seed + static_cast<std::uint64_t>(cell) * static_cast<std::uint64_t>(c.replicates) +
         static_cast<std::uint64_t>(replicate);
}

namespace detail {

struct CellContext {
  Cell cell;
  ProcessSpec spec;
  std::optional<ProcessSimulator> simulator;
  std::optional<CandidateGrid> grid;
  std::optional<WhiteningTransform> whitening;
  CorrelationFit known;
  std::string setup_error;
};

inline CellContext make_context(const ExperimentConfig& c, const Cell& cell, Mode mode) {
  CellContext ctx;
  ctx.cell = cell;
  const CorrelationModel model = parse_theta(cell.theta);
  ctx.spec = ProcessSpec{FunctionSpec::constant(0.0), c.sigma_function(), model};
  try {
    const GridDesign design(cell.n, c.grid);
    ctx.simulator.emplace(model, design);
    ctx.grid.emplace(CandidateGrid::log_spaced(design.spacing(), c.candidates, c.candidate_upper));
    ctx.known = CorrelationFit::known(model, design.spacing());
    if (mode == Mode::select) {
      ctx.whitening.emplace(whitening_transform(cell.n - static_cast<std::size_t>(c.lag), c.phi, cell.n));
    }
  } catch (const Error& e) {
    ctx.setup_error = e.what();
  }
  return ctx;
}

inline double dmse_for(const ExperimentConfig& c, const EvaluationReport& r) {
  return c.variance_scale_dmse ? r.dmse_variance : r.dmse;
}

inline void run_replicate(const ExperimentConfig& c, const CellContext& ctx, const KernelSpec& kernel, Mode mode,
                          RunRecord& row) {
  if (!ctx.setup_error.empty()) throw NumericError(ctx.setup_error);
  const GridProcess p = ctx.simulator->draw(ctx.spec, row.seed);
  const std::vector<double> eval = evaluation_grid();
  EstimateCurve variance;
  if (mode == Mode::oracle) {
    const SelectionResult sel =
        oracle_bandwidth(p, kernel, *ctx.grid, ctx.spec.sd, ctx.known, c.lag, kDefaultFloorFraction);
    row.bandwidth = sel.bandwidth;
    const PseudoResidualSeries pres = pseudo_residuals(p, c.lag);
    const EstimateCurve lv = estimate_local_variogram(pres, kernel, sel.bandwidth, eval);
    variance = plugin_variance(lv, ctx.known, c.lag, p.design);
    row.theta_hat = ctx.known.degenerate ? kNaN : ctx.known.theta;
    row.sigma2_star = ctx.known.sigma2_star;
    row.degenerate = ctx.known.degenerate;
  } else {
    PipelineOptions opt;
    opt.lag = c.lag;
    opt.phi = c.phi;
    opt.max_lag = c.max_lag;
    opt.selection.diagonal = c.diagonal;
    const PipelineResult r = estimate_variance(p, kernel, *ctx.grid, *ctx.whitening, opt);
    row.bandwidth = r.selection.bandwidth;
    variance = r.variance;
    row.theta_hat = r.fit.degenerate ? kNaN : r.fit.theta;
    row.sigma2_star = r.fit.sigma2_star;
    row.degenerate = r.fit.degenerate;
  }
  const EvaluationReport rep = evaluate(variance, ctx.spec.sd);
  row.dmse = dmse_for(c, rep);
  row.max = rep.max;
  row.max_sd = rep.max_sd;
  row.floored = variance.metadata.floored_count;
  if (static_cast<std::size_t>(row.replicate) < c.curve_dumps) row.curve = variance.values;
}

}  // namespace detail

inline std::vector<CellSummary> summarize(const std::vector<RunRecord>& rows) {
  std::vector<CellSummary> out;
  std::map<std::tuple<std::string, std::string, std::size_t, std::string>, std::size_t> where;
  std::vector<std::vector<const RunRecord*>> groups;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.method, r.sigma, r.n, r.theta);
    auto it = where.find(key);
    if (it == where.end()) {
      it = where.emplace(key, out.size()).first;
      CellSummary s;
      s.method = r.method;
      s.sigma = r.sigma;
      s.n = r.n;
      s.theta = r.theta;
      out.push_back(s);
      groups.emplace_back();
    }
    groups[it->second].push_back(&r);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    std::vector<double> lam, dm, mx, mxsd;
    for (const RunRecord* r : groups[g]) {
      if (!r->ok()) {
        ++out[g].errors;
        continue;
      }
      lam.push_back(r->bandwidth);
      dm.push_back(r->dmse);
      mx.push_back(r->max);
      mxsd.push_back(r->max_sd);
    }
    CellSummary& s = out[g];
    s.count = lam.size();
    s.mean = mean_of(lam);
    s.sd = sd_of(lam);
    s.dmse_mean = mean_of(dm);
    s.dmse_median = median_of(dm);
    s.max_mean = mean_of(mx);
    s.max_median = median_of(mx);
    s.max_sd_median = median_of(mxsd);
  }
  return out;
}

// Replicate rows come back in (cell, replicate) order whatever order the
// pool finishes them in.
inline ExperimentResult run_experiment(const ExperimentConfig& c, Mode mode) {
  if (mode != Mode::select && mode != Mode::oracle) throw ConfigError("run_experiment needs mode select or oracle");
  c.validate();
  const KernelSpec kernel = c.kernel();
  const std::vector<Cell> cells = cells_of(c);
  std::vector<detail::CellContext> contexts;
  contexts.reserve(cells.size());
  for (const Cell& cell : cells) contexts.push_back(detail::make_context(c, cell, mode));

  const std::size_t reps = static_cast<std::size_t>(c.replicates);
  ExperimentResult result;
  result.rows.resize(cells.size() * reps);
  for (std::size_t k = 0; k < result.rows.size(); ++k) {
    RunRecord& row = result.rows[k];
    const Cell& cell = cells[k / reps];
    row.method = method_name(mode);
    row.sigma = c.sigma;
    row.n = cell.n;
    row.theta = cell.theta;
    row.replicate = static_cast<int>(k % reps);
    row.seed = replicate_seed(c, cell.index, row.replicate);
  }
  parallel_for(result.rows.size(), c.threads, [&](std::size_t k) {
    RunRecord& row = result.rows[k];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      detail::run_replicate(c, contexts[k / reps], kernel, mode, row);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });

  result.summaries = summarize(result.rows);
  for (const auto& s : result.summaries) {
    if (10 * s.errors > reps) {
      result.failures.push_back(s.method + " n=" + std::to_string(s.n) + " theta=" + s.theta + ": " +
                                std::to_string(s.errors) + " of " + std::to_string(reps) + " replicates failed");
    }
  }
  return result;
}

inline ExperimentResult run_experiment(const ExperimentConfig& c) { return run_experiment(c, c.mode); }

// ---------------------------------------------------------------- writers

inline const std::vector<std::string>& run_columns() {
  static const std::vector<std::string> cols{"method", "sigma",      "n",          "theta",     "replicate",
                                             "seed",   "bandwidth",  "theta_hat",  "sigma2_star", "degenerate",
                                             "dmse",   "max",        "max_sd",     "floored",   "error"};
  return cols;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

inline nlohmann::json num_json(double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); }

inline void write_runs(std::ostream& os, const std::vector<RunRecord>& rows, const std::string& format) {
  using detail::fmt;
  if (format == "json-lines") {
    for (const auto& r : rows) {
      nlohmann::ordered_json j;
      j["method"] = r.method;
      j["sigma"] = r.sigma;
      j["n"] = r.n;
      j["theta"] = r.theta;
      j["replicate"] = r.replicate;
      j["seed"] = r.seed;
      j["bandwidth"] = num_json(r.bandwidth);
      j["theta_hat"] = num_json(r.theta_hat);
      j["sigma2_star"] = num_json(r.sigma2_star);
      j["degenerate"] = r.degenerate;
      j["dmse"] = num_json(r.dmse);
      j["max"] = num_json(r.max);
      j["max_sd"] = num_json(r.max_sd);
      j["floored"] = r.floored;
      j["error"] = r.error;
      os << j.dump() << '\n';
    }
    return;
  }
  const auto& cols = run_columns();
  for (std::size_t k = 0; k < cols.size(); ++k) os << (k ? "," : "") << cols[k];
  os << '\n';
  for (const auto& r : rows) {
    os << r.method << ',' << r.sigma << ',' << r.n << ',' << r.theta << ',' << r.replicate << ',' << r.seed << ','
       << fmt(r.bandwidth) << ',' << fmt(r.theta_hat) << ',' << fmt(r.sigma2_star) << ',' << (r.degenerate ? 1 : 0)
       << ',' << fmt(r.dmse) << ',' << fmt(r.max) << ',' << fmt(r.max_sd) << ',' << r.floored << ','
       << csv_escape(r.error) << '\n';
  }
}

// Columns method, n, theta, mean, sd of the bandwidth.
inline void write_summary(std::ostream& os, const std::vector<CellSummary>& s, const std::string& format) {
  using detail::fmt;
  if (format == "json-lines") {
    for (const auto& c : s) {
      nlohmann::ordered_json j;
      j["method"] = c.method;
      j["n"] = c.n;
      j["theta"] = c.theta;
      j["mean"] = num_json(c.mean);
      j["sd"] = num_json(c.sd);
      os << j.dump() << '\n';
    }
    return;
  }
  os << "method,n,theta,mean,sd\n";
  for (const auto& c : s) os << c.method << ',' << c.n << ',' << c.theta << ',' << fmt(c.mean) << ',' << fmt(c.sd) << '\n';
}

inline void write_metrics(std::ostream& os, const std::vector<CellSummary>& s, const std::string& format) {
  using detail::fmt;
  if (format == "json-lines") {
    for (const auto& c : s) {
      nlohmann::ordered_json j;
      j["method"] = c.method;
      j["sigma"] = c.sigma;
      j["n"] = c.n;
      j["theta"] = c.theta;
      j["replicates"] = c.count;
      j["errors"] = c.errors;
      j["dmse_mean"] = num_json(c.dmse_mean);
      j["dmse_median"] = num_json(c.dmse_median);
      j["max_mean"] = num_json(c.max_mean);
      j["max_median"] = num_json(c.max_median);
      j["max_sd_median"] = num_json(c.max_sd_median);
      os << j.dump() << '\n';
    }
    return;
  }
  os << "method,sigma,n,theta,replicates,errors,dmse_mean,dmse_median,max_mean,max_median,max_sd_median\n";
  for (const auto& c : s) {
    os << c.method << ',' << c.sigma << ',' << c.n << ',' << c.theta << ',' << c.count << ',' << c.errors << ','
       << fmt(c.dmse_mean) << ',' << fmt(c.dmse_median) << ',' << fmt(c.max_mean) << ',' << fmt(c.max_median) << ','
       << fmt(c.max_sd_median) << '\n';
  }
}

// Wall times are kept out of the run file so that it is reproducible byte for byte.
inline void write_timings(std::ostream& os, const std::vector<RunRecord>& rows) {
  os << "method,n,theta,replicate,seconds\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.n << ',' << r.theta << ',' << r.replicate << ',' << detail::fmt(r.wall_seconds, "%.6f")
       << '\n';
  }
}

// Columns s, true sd, estimated sd on the evaluation grid.
inline void write_curve(std::ostream& os, const std::vector<double>& curve, const FunctionSpec& truth) {
  const std::vector<double> s = evaluation_grid();
  os << "s,true_sd,estimated_sd\n";
  for (std::size_t i = 0; i < s.size() && i < curve.size(); ++i) {
    os << detail::fmt(s[i]) << ',' << detail::fmt(truth(s[i])) << ',' << detail::fmt(std::sqrt(std::max(curve[i], 0.0)))
       << '\n';
  }
}

// Human-readable summary table: one block per n, one column per theta,
// bandwidth means with standard deviations in parentheses underneath.
inline std::string table_text(const std::vector<CellSummary>& s, const std::string& sigma) {
  std::vector<std::size_t> ns;
  std::vector<std::string> thetas, methods;
  auto add = [](auto& v, const auto& x) {
    if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
  };
  for (const auto& c : s) {
    if (c.sigma != sigma) continue;
    add(ns, c.n);
    add(thetas, c.theta);
    add(methods, c.method);
  }
  auto find = [&](const std::string& m, std::size_t n, const std::string& t) -> const CellSummary* {
    for (const auto& c : s) {
      if (c.sigma == sigma && c.method == m && c.n == n && c.theta == t) return &c;
    }
    return nullptr;
  };
  std::ostringstream os;
  char buf[64];
  os << "Bandwidth selection summary, sigma = " << sigma << "\n";
  std::snprintf(buf, sizeof buf, "%-6s %-14s", "n", "method");
  os << buf;
  for (const auto& t : thetas) {
    std::snprintf(buf, sizeof buf, " %16s", ("theta=" + t).c_str());
    os << buf;
  }
  os << '\n';
  for (std::size_t n : ns) {
    bool first = true;
    for (const auto& m : methods) {
      std::snprintf(buf, sizeof buf, "%-6s %-14s", first ? std::to_string(n).c_str() : "", m.c_str());
      os << buf;
      first = false;
      for (const auto& t : thetas) {
        const CellSummary* c = find(m, n, t);
        std::snprintf(buf, sizeof buf, " %16s", c ? detail::fmt(c->mean, "%.10f").c_str() : "-");
        os << buf;
      }
      os << '\n';
      std::snprintf(buf, sizeof buf, "%-6s %-14s", "", "");
      os << buf;
      for (const auto& t : thetas) {
        const CellSummary* c = find(m, n, t);
        const std::string sd = c && !std::isnan(c->sd) ? "(" + detail::fmt(c->sd, "%.10f") + ")" : "";
        std::snprintf(buf, sizeof buf, " %16s", sd.c_str());
        os << buf;
      }
      os << '\n';
    }
  }
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline std::string extension(const std::string& format) { return format == "json-lines" ? ".jsonl" : ".csv"; }

// runs, summary, metrics, timings, table and any requested curve dumps.
inline void write_experiment(const std::filesystem::path& dir, const ExperimentResult& r, const ExperimentConfig& c) {
  const std::string ext = extension(c.format);
  std::ostringstream runs, summary, metrics, timings;
  write_runs(runs, r.rows, c.format);
  write_summary(summary, r.summaries, c.format);
  write_metrics(metrics, r.summaries, c.format);
  write_timings(timings, r.rows);
  write_file(dir / ("runs" + ext), runs.str());
  write_file(dir / ("summary" + ext), summary.str());
  write_file(dir / ("metrics" + ext), metrics.str());
  write_file(dir / "timings.csv", timings.str());
  write_file(dir / "summary.txt", table_text(r.summaries, c.sigma));
  const FunctionSpec truth = c.sigma_function();
  for (const auto& row : r.rows) {
    if (row.curve.empty()) continue;
    std::ostringstream os;
    write_curve(os, row.curve, truth);
    const std::string name = "curve_" + row.method + "_n" + std::to_string(row.n) + "_theta" + row.theta + "_r" +
                             std::to_string(row.replicate) + ".csv";
    write_file(dir / "curves" / name, os.str());
  }
}

// ---------------------------------------------------------------- moments

inline constexpr double kMomentZLimit = 4.0;
inline constexpr double kIsserlisTolerance = 1e-10;
// |P_exact - P_taylor| must shrink at least this much when n doubles.
inline constexpr double kTaylorShrinkFactor = 4.0;

struct MomentComparison {
  std::string quantity;  // mean, var or cov
  std::size_t i = 0;
  std::size_t j = 0;
  double exact = 0.0;
  double sampled = 0.0;
  double se = 0.0;
  double z = 0.0;
  bool pass = false;
};

struct MomentCheckReport {
  std::string sigma;
  std::string theta;
  std::size_t n = 0;
  int replicates = 0;
  std::vector<MomentComparison> comparisons;
  double max_abs_z = 0.0;
  double max_isserlis_diff = 0.0;
  bool isserlis_pass = false;
  std::optional<double> taylor_error_n;   // |P_exact - P_taylor| at n
  std::optional<double> taylor_error_2n;  // same physical location and offset at 2n - 1 intervals
  std::optional<double> taylor_ratio;
  bool taylor_pass = true;  // not applicable without a continuous correlation

  bool passed() const {
    return isserlis_pass && taylor_pass &&
           std::all_of(comparisons.begin(), comparisons.end(), [](const auto& c) { return c.pass; });
  }
};

namespace detail {

// Zero-based index closest to location s.
inline std::size_t index_near(const GridDesign& d, double s) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < d.size(); ++i) {
    if (std::abs(d[i] - s) < std::abs(d[best] - s)) best = i;
  }
  return best;
}

inline double taylor_error(const ProcessSpec& spec, std::size_t n, GridConvention conv, int h, double s, int offset) {
  const GridDesign d(n, conv);
  const MomentOracle o(spec, d, h);
  const std::size_t i = index_near(d, s);
  return std::abs(o.cross(i, i + static_cast<std::size_t>(offset)) - o.cross_taylor(i));
}

}  // namespace detail

// Monte Carlo moments of squared pseudo-residuals against the closed form,
// the closed form against Isserlis, and the truncation of the P expansion.
inline MomentCheckReport moments_check(const ExperimentConfig& c) {
  c.validate();
  const std::size_t n = c.n_list.front();
  const CorrelationModel model = parse_theta(c.thetas.front());
  const ProcessSpec spec{FunctionSpec::constant(0.0), c.sigma_function(), model};
  const GridDesign design(n, c.grid);
  const MomentOracle oracle(spec, design, c.lag);
  const std::size_t m = oracle.size();

  MomentCheckReport rep;
  rep.sigma = c.sigma;
  rep.theta = model.label();
  rep.n = n;
  rep.replicates = c.moment_replicates;

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i : {std::size_t{0}, m / 4, m / 2, (3 * m) / 4, m - 1}) {
    for (std::size_t k : {0, 1, 2, 5}) {
      const std::size_t j = i + k < m ? i + k : i - k;
      pairs.emplace_back(i, j);
    }
  }
  std::vector<std::size_t> idx;
  for (auto [i, j] : pairs) {
    idx.push_back(i);
    idx.push_back(j);
  }
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  auto col = [&](std::size_t i) {
    return static_cast<Eigen::Index>(std::lower_bound(idx.begin(), idx.end(), i) - idx.begin());
  };

  const ProcessSimulator sim(model, design);
  const auto reps = static_cast<std::size_t>(c.moment_replicates);
  Eigen::MatrixXd sq(static_cast<Eigen::Index>(reps), static_cast<Eigen::Index>(idx.size()));
  parallel_for(reps, c.threads, [&](std::size_t r) {
    const GridProcess p = sim.draw(spec, c.seed + r);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double d = (p.values[idx[k]] - p.values[idx[k] + static_cast<std::size_t>(c.lag)]) / std::sqrt(2.0);
      sq(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = d * d;
    }
  });
  const Eigen::RowVectorXd means = sq.colwise().mean();
  const Eigen::MatrixXd centered = sq.rowwise() - means;
  const double rn = static_cast<double>(reps);

  auto push = [&](std::string q, std::size_t i, std::size_t j, double exact, const Eigen::VectorXd& terms) {
    MomentComparison mc;
    mc.quantity = std::move(q);
    mc.i = i;
    mc.j = j;
    mc.exact = exact;
    mc.sampled = terms.mean();
    const double sdv = std::sqrt((terms.array() - mc.sampled).square().sum() / (rn - 1.0));
    mc.se = sdv / std::sqrt(rn);
    mc.z = mc.se > 0.0 ? (mc.sampled - exact) / mc.se : (mc.sampled == exact ? 0.0 : kNaN);
    mc.pass = std::abs(mc.z) <= kMomentZLimit;
    rep.max_abs_z = std::max(rep.max_abs_z, std::isnan(mc.z) ? std::numeric_limits<double>::infinity() : std::abs(mc.z));
    rep.comparisons.push_back(mc);
  };

  std::vector<std::size_t> seen;
  for (auto [i, j] : pairs) {
    if (std::find(seen.begin(), seen.end(), i) == seen.end()) {
      seen.push_back(i);
      push("mean", i, i, oracle(i, i).mean_i, sq.col(col(i)));
    }
    const Eigen::VectorXd prod = centered.col(col(i)).cwiseProduct(centered.col(col(j)));
    const PseudoResidualMoments mom = oracle(i, j);
    if (i == j) {
      push("var", i, j, mom.var_i, prod);
    } else {
      push("cov", i, j, mom.cov_ij, prod);
    }
    const double a = mom.cov_ij, b = oracle.cov_isserlis(i, j);
    rep.max_isserlis_diff = std::max(rep.max_isserlis_diff, std::abs(a - b) / std::max(1.0, std::abs(b)));
  }
  rep.isserlis_pass = rep.max_isserlis_diff <= kIsserlisTolerance;

  if (!model.is_independent()) {
    // Doubling the number of intervals halves the spacing exactly.
    const std::size_t n2 = c.grid == GridConvention::endpoint ? 2 * n - 1 : 2 * n;
    rep.taylor_error_n = detail::taylor_error(spec, n, c.grid, c.lag, 0.3, 2);
    rep.taylor_error_2n = detail::taylor_error(spec, n2, c.grid, c.lag, 0.3, 2);
    rep.taylor_ratio = *rep.taylor_error_n / *rep.taylor_error_2n;
    rep.taylor_pass = *rep.taylor_ratio >= kTaylorShrinkFactor;
  }
  return rep;
}

inline std::string moments_text(const MomentCheckReport& r) {
  std::ostringstream os;
  char buf[200];
  os << "moments-check sigma=" << r.sigma << " theta=" << r.theta << " n=" << r.n << " replicates=" << r.replicates
     << '\n';
  os << "quantity     i     j              exact            sampled                 se          z  result\n";
  for (const auto& c : r.comparisons) {
    std::snprintf(buf, sizeof buf, "%-8s %5zu %5zu %18.10g %18.10g %18.10g %10.4f  %s\n", c.quantity.c_str(), c.i,
                  c.j, c.exact, c.sampled, c.se, c.z, c.pass ? "ok" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "max |z| = %.4f (limit %.1f)\n", r.max_abs_z, kMomentZLimit);
  os << buf;
  std::snprintf(buf, sizeof buf, "closed form vs Isserlis: max relative difference %.3e (limit %.0e) %s\n",
                r.max_isserlis_diff, kIsserlisTolerance, r.isserlis_pass ? "ok" : "FAIL");
  os << buf;
  if (r.taylor_ratio) {
    std::snprintf(buf, sizeof buf, "P expansion error: %.6e at n, %.6e at 2n, ratio %.4f (need >= %.1f) %s\n",
                  *r.taylor_error_n, *r.taylor_error_2n, *r.taylor_ratio, kTaylorShrinkFactor,
                  r.taylor_pass ? "ok" : "FAIL");
    os << buf;
  } else {
    os << "P expansion check: not applicable for independent errors\n";
  }
  os << (r.passed() ? "PASS" : "FAIL") << '\n';
  return os.str();
}

// ---------------------------------------------------------------- rates

struct RateCheckReport {
  std::string method;
  std::vector<std::size_t> n;
  std::vector<double> mean_dmse;
  double slope = kNaN;
  bool slope_pass = false;
  std::vector<std::size_t> cor_n;
  std::vector<double> cor;  // oracle cor(D_i^2, D_j^2) with j = i + 2 near s = 0.3
  std::vector<double> cor_ratio;
  std::optional<bool> cor_pass;  // empty when the errors are independent
  std::vector<std::string> failures;

  bool passed() const { return slope_pass && cor_pass.value_or(true) && failures.empty(); }
};

inline constexpr double kCorRatioLow = 2.0;
inline constexpr double kCorRatioHigh = 8.0;

inline double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
  }
  return sxy / sxx;
}

inline RateCheckReport rate_check(const ExperimentConfig& c) {
  c.validate();
  if (c.n_list.size() < 3) throw ConfigError("rate-check needs at least 3 values of n");
  const Mode mode = c.mode == Mode::select ? Mode::select : Mode::oracle;
  ExperimentConfig one = c;
  one.thetas = {c.thetas.front()};
  const ExperimentResult res = run_experiment(one, mode);

  RateCheckReport rep;
  rep.method = method_name(mode);
  rep.failures = res.failures;
  std::vector<double> lx, ly;
  for (const auto& s : res.summaries) {
    rep.n.push_back(s.n);
    rep.mean_dmse.push_back(s.dmse_mean);
    lx.push_back(std::log(static_cast<double>(s.n)));
    ly.push_back(std::log(s.dmse_mean));
  }
  rep.slope = least_squares_slope(lx, ly);
  rep.slope_pass = rep.slope < 0.0;

  const CorrelationModel model = parse_theta(c.thetas.front());
  if (!model.is_independent()) {
    const ProcessSpec spec{FunctionSpec::constant(0.0), c.sigma_function(), model};
    const std::size_t n0 = *std::min_element(c.n_list.begin(), c.n_list.end());
    bool ok = true;
    for (std::size_t n : {n0, 2 * n0, 4 * n0}) {
      const GridDesign d(n, c.grid);
      const MomentOracle o(spec, d, c.lag);
      const std::size_t i = detail::index_near(d, 0.3);
      rep.cor_n.push_back(n);
      rep.cor.push_back(o.correlation(i, i + 2));
      if (rep.cor.size() > 1) {
        const double ratio = rep.cor[rep.cor.size() - 2] / rep.cor.back();
        rep.cor_ratio.push_back(ratio);
        ok = ok && ratio >= kCorRatioLow && ratio <= kCorRatioHigh;
      }
    }
    rep.cor_pass = ok;
  }
  return rep;
}

inline std::string rate_text(const RateCheckReport& r) {
  std::ostringstream os;
  char buf[200];
  os << "rate-check method=" << r.method << '\n';
  for (std::size_t k = 0; k < r.n.size(); ++k) {
    std::snprintf(buf, sizeof buf, "n=%-6zu mean DMSE %.10f\n", r.n[k], r.mean_dmse[k]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "slope of log mean DMSE on log n: %.6f (need < 0) %s\n", r.slope,
                r.slope_pass ? "ok" : "FAIL");
  os << buf;
  if (r.cor_pass) {
    for (std::size_t k = 0; k < r.cor_n.size(); ++k) {
      std::snprintf(buf, sizeof buf, "n=%-6zu cor(D_i^2, D_i+2^2) %.6e\n", r.cor_n[k], r.cor[k]);
      os << buf;
    }
    for (double q : r.cor_ratio) {
      std::snprintf(buf, sizeof buf, "successive ratio %.4f (band [%.0f, %.0f])\n", q, kCorRatioLow, kCorRatioHigh);
      os << buf;
    }
    os << "correlation decay " << (*r.cor_pass ? "ok" : "FAIL") << '\n';
  } else {
    os << "correlation decay: not applicable for independent errors\n";
  }
  for (const auto& f : r.failures) os << "batch failure: " << f << '\n';
  os << (r.passed() ? "PASS" : "FAIL") << '\n';
  return os.str();
}

}  // namespace locvar::harness
