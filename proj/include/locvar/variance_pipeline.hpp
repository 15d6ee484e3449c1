#pragma once

// From a selected bandwidth to a variance-function estimate: standardize the
// process by the fitted local variogram, fit an exponential correlation to
// the standardized process, and rescale. Also the simulation-side oracle
// bandwidth and the DMSE / MAX error metrics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "locvar/bandwidth_select.hpp"
#include "locvar/error.hpp"
#include "locvar/gm_kernel.hpp"
#include "locvar/grid_process.hpp"
#include "locvar/local_variogram.hpp"

namespace locvar {

struct StandardizedProcess {
  GridDesign design;
  std::vector<double> values;
  EstimateCurve scaling;
  // False where the scaling value sits on the positivity floor; such points
  // are left out of the correlation fit.
  std::vector<bool> usable;

  std::size_t usable_count() const { return static_cast<std::size_t>(std::count(usable.begin(), usable.end(), true)); }
};

// Z*_i = Z_i / sqrt(gamma_hat(s_i)). The mean is not removed here.
inline StandardizedProcess standardize(const GridProcess& process, const EstimateCurve& curve) {
  if (curve.kind != CurveKind::local_variogram) throw ParameterError("standardize expects a local-variogram curve");
  const auto& s = process.design.locations();
  if (curve.values.size() != s.size() || curve.eval_points.size() != s.size()) {
    throw ParameterError("scaling curve must be evaluated at the grid locations");
  }
  StandardizedProcess out{process.design, std::vector<double>(s.size()), curve, std::vector<bool>(s.size(), true)};
  const bool floored = curve.metadata.floored_count > 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (std::abs(curve.eval_points[i] - s[i]) > 1e-12) {
      throw ParameterError("scaling curve must be evaluated at the grid locations");
    }
    if (!(curve.values[i] > 0.0)) {
      throw NumericError("non-positive local variogram at s=" + std::to_string(s[i]));
    }
    out.values[i] = process.values[i] / std::sqrt(curve.values[i]);
    if (floored && curve.values[i] <= curve.metadata.floor_value) out.usable[i] = false;
  }
  return out;
}

struct CorrelationFit {
  double theta = 0.0;
  // Second moment of Z* about zero.
  double zstar_variance = std::numeric_limits<double>::quiet_NaN();
  // Scale of Z* relative to its model variance 1 / (1 - rho(h)); the factor
  // applied to the local variogram in the plug-in step.
  double sigma2_star = 1.0;
  bool degenerate = false;  // near-independent: rho is taken as 0
  double spacing = 0.0;
  std::vector<double> autocorrelations;  // r(1..max_lag)
  double rss = 0.0;

  double rho(double distance) const {
    if (degenerate) return distance == 0.0 ? 1.0 : 0.0;
    return std::exp(-std::abs(distance) / theta);
  }

  // Known parameters, as used by the oracle bandwidth.
  static CorrelationFit known(const CorrelationModel& model, double spacing) {
    CorrelationFit f;
    f.spacing = spacing;
    f.sigma2_star = 1.0;
    if (model.is_independent()) {
      f.degenerate = true;
    } else {
      f.theta = model.theta();
    }
    return f;
  }
};

struct AcfFit {
  double theta = 0.0;
  double rss = 0.0;
  bool at_floor = false;
};

// Least-squares fit of exp(-k spacing / theta) to r(k), k = 1..acf.size(),
// over log theta in [log(spacing/10), log 10]: coarse scan, then golden
// section around the best scan point.
inline AcfFit fit_exponential_acf(std::span<const double> acf, double spacing) {
  if (acf.empty()) throw ParameterError("no autocorrelations to fit");
  if (!(spacing > 0.0)) throw ParameterError("spacing must be positive");
  auto loss = [&](double log_theta) {
    const double th = std::exp(log_theta);
    double r = 0.0;
    for (std::size_t k = 0; k < acf.size(); ++k) {
      const double e = acf[k] - std::exp(-static_cast<double>(k + 1) * spacing / th);
      r += e * e;
    }
    return r;
  };
  const double lo = std::log(spacing / 10.0), hi = std::log(10.0);
  constexpr int kScan = 400;
  int best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= kScan; ++k) {
    const double x = lo + (hi - lo) * k / kScan;
    const double l = loss(x);
    if (l < best_loss) {
      best_loss = l;
      best = k;
    }
  }
  double a = lo + (hi - lo) * std::max(best - 1, 0) / kScan;
  double b = lo + (hi - lo) * std::min(best + 1, kScan) / kScan;
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = loss(c), fd = loss(d);
  while (b - a > 1e-12) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = loss(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = loss(d);
    }
  }
  double x = 0.5 * (a + b);
  double lx = loss(x);
  if (loss(lo) <= lx) {
    x = lo;
    lx = loss(lo);
  }
  return AcfFit{std::exp(x), lx, x - lo < 1e-6};
}

// Empirical autocorrelation about zero, (mean of z_i z_{i+k}) / (mean of z_i^2),
// over the points (pairs) flagged usable. An empty mask means all points.
inline std::vector<double> zero_mean_autocorrelation(std::span<const double> z, int max_lag,
                                                     const std::vector<bool>& usable = {}) {
  const std::size_t n = z.size();
  auto ok = [&](std::size_t i) { return usable.empty() || usable[i]; };
  double c0 = 0.0;
  std::size_t m0 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!ok(i)) continue;
    c0 += z[i] * z[i];
    ++m0;
  }
  if (m0 == 0 || !(c0 > 0.0)) throw NumericError("autocorrelation of an all-zero series");
  c0 /= static_cast<double>(m0);
  std::vector<double> r(static_cast<std::size_t>(max_lag), 0.0);
  for (int k = 1; k <= max_lag; ++k) {
    double acc = 0.0;
    std::size_t mk = 0;
    for (std::size_t i = 0; i + k < n; ++i) {
      if (!ok(i) || !ok(i + k)) continue;
      acc += z[i] * z[i + k];
      ++mk;
    }
    if (mk > 0) r[k - 1] = acc / static_cast<double>(mk) / c0;
  }
  return r;
}

// Exponential correlation fit to the standardized process. A lag-1
// autocorrelation inside the white-noise band 2/sqrt(n), or a fit landing on
// the search floor, marks the fit degenerate (rho taken as 0).
inline CorrelationFit fit_exponential_theta(const StandardizedProcess& zstar, int max_lag = 10, int h = 1) {
  if (max_lag < 1) throw ParameterError("max_lag must be >= 1");
  const std::size_t n = zstar.usable.empty() ? zstar.values.size() : zstar.usable_count();
  if (n < static_cast<std::size_t>(max_lag) + 30) throw ParameterError("need n - max_lag >= 30 for the correlation fit");
  CorrelationFit fit;
  fit.spacing = zstar.design.spacing();
  double c0 = 0.0;
  for (std::size_t i = 0; i < zstar.values.size(); ++i) {
    if (zstar.usable.empty() || zstar.usable[i]) c0 += zstar.values[i] * zstar.values[i];
  }
  fit.zstar_variance = c0 / static_cast<double>(n);
  if (!(fit.zstar_variance > 0.0)) throw NumericError("standardized process has zero variance");
  fit.autocorrelations = zero_mean_autocorrelation(zstar.values, max_lag, zstar.usable);

  const bool no_signal = std::all_of(fit.autocorrelations.begin(), fit.autocorrelations.end(),
                                     [](double r) { return r <= 0.0; }) ||
                         fit.autocorrelations.front() <= 2.0 / std::sqrt(static_cast<double>(n));
  const AcfFit acf = fit_exponential_acf(fit.autocorrelations, fit.spacing);
  fit.rss = acf.rss;
  if (no_signal || acf.at_floor) {
    fit.degenerate = true;
    fit.theta = fit.spacing / 10.0;
  } else {
    fit.theta = acf.theta;
  }
  fit.sigma2_star = fit.zstar_variance * (1.0 - fit.rho(h * fit.spacing));
  return fit;
}

inline constexpr double kPluginDenominatorFloor = 1e-6;

// sigma^2(s) = gamma_hat(s) sigma2_star / (1 - rho_hat(h)).
inline EstimateCurve plugin_variance(const EstimateCurve& curve, const CorrelationFit& fit, int h,
                                     const GridDesign& design) {
  if (curve.kind != CurveKind::local_variogram) throw ParameterError("plug-in expects a local-variogram curve");
  const double denom = 1.0 - fit.rho(h * design.spacing());
  if (!(denom > kPluginDenominatorFloor)) {
    throw NumericError("1 - rho_hat(h) is too small (" + std::to_string(denom) +
                       "); use the near-independent fit instead");
  }
  EstimateCurve out = curve;
  out.kind = CurveKind::variance;
  const double factor = fit.sigma2_star / denom;
  for (double& v : out.values) v *= factor;
  out.metadata.theta_hat = fit.degenerate ? std::optional<double>() : std::optional<double>(fit.theta);
  out.metadata.sigma2_star = fit.sigma2_star;
  out.metadata.degenerate_fit = fit.degenerate;
  return out;
}

struct EvaluationReport {
  double dmse = 0.0;  // mean of (sqrt(curve) - sigma)^2
  double max = 0.0;   // max of |curve - sigma^2|
  double dmse_variance = 0.0;  // mean of (curve - sigma^2)^2, sensitivity runs only
  double max_sd = 0.0;         // max of |sqrt(curve) - sigma|
  std::vector<double> points;
  std::vector<double> sd_errors;
  std::vector<double> variance_errors;
};

inline EvaluationReport evaluate(const EstimateCurve& curve, const FunctionSpec& truth) {
  if (curve.kind != CurveKind::variance) throw ParameterError("evaluate expects a variance curve");
  EvaluationReport r;
  const std::size_t m = curve.values.size();
  r.points = curve.eval_points;
  r.sd_errors.resize(m);
  r.variance_errors.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double sd = truth(curve.eval_points[i]);
    const double est = curve.values[i];
    r.sd_errors[i] = std::sqrt(std::max(est, 0.0)) - sd;
    r.variance_errors[i] = est - sd * sd;
    r.dmse += r.sd_errors[i] * r.sd_errors[i];
    r.dmse_variance += r.variance_errors[i] * r.variance_errors[i];
    r.max = std::max(r.max, std::abs(r.variance_errors[i]));
    r.max_sd = std::max(r.max_sd, std::abs(r.sd_errors[i]));
  }
  if (m > 0) {
    r.dmse /= static_cast<double>(m);
    r.dmse_variance /= static_cast<double>(m);
  }
  return r;
}

inline constexpr std::size_t kEvaluationPoints = 100;

inline std::vector<double> evaluation_grid() { return linspace01(kEvaluationPoints); }

// Candidate minimizing DMSE of the plug-in estimate under known correlation
// parameters; ties go to the larger bandwidth.
inline SelectionResult oracle_bandwidth(const GridProcess& process, const KernelSpec& kernel,
                                        const CandidateGrid& grid, const FunctionSpec& truth,
                                        const CorrelationFit& known_fit, int h = 1,
                                        double floor_fraction = kDefaultFloorFraction) {
  const PseudoResidualSeries pres = pseudo_residuals(process, h);
  const std::vector<double> eval = evaluation_grid();
  std::vector<CandidateScore> scores;
  for (double lambda : grid.values()) {
    CandidateScore c;
    c.bandwidth = lambda;
    try {
      const EstimateCurve lv = estimate_local_variogram(pres, kernel, lambda, eval, floor_fraction);
      const EstimateCurve var = plugin_variance(lv, known_fit, h, process.design);
      c.score = evaluate(var, truth).dmse;
      c.floored = lv.metadata.floored_count;
    } catch (const Error& e) {
      c.failure = e.what();
    }
    scores.push_back(std::move(c));
  }
  double scale = 0.0;
  for (double s : eval) scale += truth(s) * truth(s);
  return detail::pick_minimum(std::move(scores), detail::kScoreTieRelative * scale / static_cast<double>(eval.size()));
}

struct PipelineOptions {
  int lag = 1;
  double phi = 0.01;
  int max_lag = 10;
  SelectionOptions selection;
};

struct PipelineResult {
  SelectionResult selection;
  EstimateCurve grid_variogram;  // at the observation locations
  CorrelationFit fit;
  EstimateCurve variance;  // on the 100-point evaluation grid
};

// Single pass: select lambda, standardize, fit theta, rescale.
inline PipelineResult estimate_variance(const GridProcess& process, const KernelSpec& kernel,
                                        const CandidateGrid& grid, const WhiteningTransform& whitening,
                                        const PipelineOptions& options = {}) {
  const PseudoResidualSeries pres = pseudo_residuals(process, options.lag);
  PipelineResult r;
  r.selection = select_bandwidth(pres, kernel, grid, whitening, options.selection);
  const double lambda = r.selection.bandwidth;
  r.grid_variogram = estimate_local_variogram(pres, kernel, lambda, process.design.locations(),
                                              options.selection.floor_fraction);
  const StandardizedProcess zstar = standardize(process, r.grid_variogram);
  r.fit = fit_exponential_theta(zstar, options.max_lag, options.lag);
  const EstimateCurve lv =
      estimate_local_variogram(pres, kernel, lambda, evaluation_grid(), options.selection.floor_fraction);
  r.variance = plugin_variance(lv, r.fit, options.lag, process.design);
  return r;
}

inline PipelineResult estimate_variance(const GridProcess& process, const KernelSpec& kernel,
                                        const CandidateGrid& grid, const PipelineOptions& options = {}) {
  const std::size_t len = process.design.size() - static_cast<std::size_t>(options.lag);
  return estimate_variance(process, kernel, grid, whitening_transform(len, options.phi, process.design.size()),
                           options);
}

}  // namespace locvar
