#pragma once

// Pseudo-residuals, the kernel estimator of the local variogram, the true
// local variogram and exact Gaussian moments of squared pseudo-residuals.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "locvar/error.hpp"
#include "locvar/gm_kernel.hpp"
#include "locvar/grid_process.hpp"

namespace locvar {

// D_i = (Z_i - Z_{i+h}) / sqrt(2), centered at t_i = (s_i + s_{i+h}) / 2.
struct PseudoResidualSeries {
  int lag = 1;
  std::size_t n_obs = 0;
  double spacing = 0.0;
  std::vector<double> values;
  std::vector<double> centers;

  std::size_t size() const { return values.size(); }

  std::vector<double> squared() const {
    std::vector<double> sq(values.size());
    std::transform(values.begin(), values.end(), sq.begin(), [](double d) { return d * d; });
    return sq;
  }
};

inline PseudoResidualSeries pseudo_residuals(const GridDesign& design, std::span<const double> z, int h = 1) {
  const std::size_t n = design.size();
  if (z.size() != n) throw ParameterError("process length does not match the design");
  if (h < 1 || static_cast<std::size_t>(h) + 2 > n) {
    throw ParameterError("lag must satisfy 1 <= h <= n-2, got " + std::to_string(h));
  }
  PseudoResidualSeries out;
  out.lag = h;
  out.n_obs = n;
  out.spacing = design.spacing();
  const std::size_t m = n - static_cast<std::size_t>(h);
  out.values.resize(m);
  out.centers.resize(m);
  const auto& s = design.locations();
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (std::size_t i = 0; i < m; ++i) {
    out.values[i] = (z[i] - z[i + h]) * inv_sqrt2;
    out.centers[i] = 0.5 * (s[i] + s[i + h]);
  }
  return out;
}

inline PseudoResidualSeries pseudo_residuals(const GridProcess& process, int h = 1) {
  return pseudo_residuals(process.design, process.values, h);
}

enum class CurveKind { local_variogram, variance };

struct CurveMetadata {
  int kernel_order = 0;
  BoundaryPolicy boundary_policy = BoundaryPolicy::renormalize;
  std::size_t floored_count = 0;
  double floor_value = 0.0;
  std::optional<double> theta_hat;
  std::optional<double> sigma2_star;
  bool degenerate_fit = false;
};

struct EstimateCurve {
  std::vector<double> eval_points;
  std::vector<double> values;
  double bandwidth = 0.0;
  int lag = 1;
  CurveKind kind = CurveKind::local_variogram;
  CurveMetadata metadata;
};

// Default relative floor applied to negative local-variogram estimates.
inline constexpr double kDefaultFloorFraction = 1e-8;

// Replaces values below floor_fraction * max(values) by that floor; returns
// the number of replaced entries.
inline std::size_t apply_positivity_floor(std::vector<double>& values, double floor_fraction, double* floor_out = nullptr) {
  if (values.empty()) return 0;
  const double top = *std::max_element(values.begin(), values.end());
  const double floor = floor_fraction * std::max(top, 0.0);
  std::size_t count = 0;
  for (double& v : values) {
    if (v < floor) {
      v = floor;
      ++count;
    }
  }
  if (floor_out) *floor_out = floor;
  return count;
}

// Kernel average of the squared pseudo-residuals at each evaluation point,
// followed by the positivity floor.
inline EstimateCurve estimate_local_variogram(const PseudoResidualSeries& pres, const KernelSpec& kernel,
                                              double lambda, std::span<const double> eval_points,
                                              double floor_fraction = kDefaultFloorFraction) {
  detail::check_bandwidth(lambda);
  const double delta = detail::uniform_spacing(pres.centers);
  const std::vector<double> sq = pres.squared();
  EstimateCurve curve;
  curve.eval_points.assign(eval_points.begin(), eval_points.end());
  curve.values.resize(eval_points.size());
  curve.bandwidth = lambda;
  curve.lag = pres.lag;
  curve.kind = CurveKind::local_variogram;
  for (std::size_t k = 0; k < eval_points.size(); ++k) {
    const double s = eval_points[k];
    if (!(s >= 0.0 && s <= 1.0)) throw DomainError("evaluation point outside [0,1]: " + std::to_string(s));
    const SmoothingWeights w = detail::gm_weights_unchecked(kernel, lambda, pres.centers, delta, s);
    double acc = 0.0;
    for (std::size_t i = 0; i < sq.size(); ++i) acc += w.weights[i] * sq[i];
    curve.values[k] = acc;
  }
  curve.metadata.kernel_order = kernel.order();
  curve.metadata.boundary_policy = kernel.boundary_policy();
  curve.metadata.floored_count = apply_positivity_floor(curve.values, floor_fraction, &curve.metadata.floor_value);
  return curve;
}

// sigma^2(s) (1 - rho(h * spacing)).
inline double true_local_variogram(const ProcessSpec& spec, double s, int h, const GridDesign& design) {
  const double sd = spec.sd(s);
  return sd * sd * (1.0 - spec.correlation(h * design.spacing()));
}

inline EstimateCurve true_local_variogram_curve(const ProcessSpec& spec, int h, const GridDesign& design,
                                                std::span<const double> eval_points) {
  EstimateCurve c;
  c.eval_points.assign(eval_points.begin(), eval_points.end());
  c.values.resize(eval_points.size());
  for (std::size_t k = 0; k < eval_points.size(); ++k) {
    c.values[k] = true_local_variogram(spec, eval_points[k], h, design);
  }
  c.lag = h;
  c.kind = CurveKind::local_variogram;
  return c;
}

struct PseudoResidualMoments {
  double mean_i = 0.0;  // E D_i^2
  double var_i = 0.0;   // var D_i^2
  double cov_ij = 0.0;  // cov(D_i^2, D_j^2)
};

// Exact first and second moments of squared pseudo-residuals under a
// Gaussian process. Indices are zero-based, i, j in [0, n-h).
class MomentOracle {
 public:
  MomentOracle(ProcessSpec spec, GridDesign design, int h)
      : spec_(std::move(spec)), design_(std::move(design)), h_(h) {
    if (h < 1 || static_cast<std::size_t>(h) + 2 > design_.size()) {
      throw ParameterError("lag must satisfy 1 <= h <= n-2");
    }
    const auto& s = design_.locations();
    mu_ = spec_.mean.sample(s);
    sd_ = spec_.sd.sample(s);
  }

  std::size_t size() const { return design_.size() - static_cast<std::size_t>(h_); }
  int lag() const { return h_; }

  // mu_i - mu_{i+h}
  double delta(std::size_t i) const {
    check(i);
    return mu_[i] - mu_[i + h_];
  }

  // var(sigma_i X_i - sigma_{i+h} X_{i+h})
  double g(std::size_t i) const {
    check(i);
    const double a = sd_[i], b = sd_[i + h_];
    return a * a + b * b - 2.0 * a * b * rho(i, i + h_);
  }

  // cov(sigma_i X_i - sigma_{i+h} X_{i+h}, sigma_j X_j - sigma_{j+h} X_{j+h})
  double cross(std::size_t i, std::size_t j) const {
    check(i);
    check(j);
    const std::size_t ih = i + h_, jh = j + h_;
    return rho(i, j) * sd_[i] * sd_[j] + rho(ih, jh) * sd_[ih] * sd_[jh] - rho(i, jh) * sd_[i] * sd_[jh] -
           rho(ih, j) * sd_[ih] * sd_[j];
  }

  PseudoResidualMoments operator()(std::size_t i, std::size_t j) const {
    const double di = delta(i), dj = delta(j), gi = g(i), p = cross(i, j);
    PseudoResidualMoments m;
    m.mean_i = 0.5 * (di * di + gi);
    m.var_i = di * di * gi + 0.5 * gi * gi;
    m.cov_ij = di * dj * p + 0.5 * p * p;
    return m;
  }

  double correlation(std::size_t i, std::size_t j) const {
    const double vi = (*this)(i, i).var_i, vj = (*this)(j, j).var_i;
    return (*this)(i, j).cov_ij / std::sqrt(vi * vj);
  }

  // Leading Taylor terms of the cross term about s_i:
  //   (h d)^2 sigma'(s_i)^2 - 2 (h d / theta)^2 sigma(s_i)^2, d = grid spacing.
  double cross_taylor(std::size_t i) const {
    check(i);
    const double hd = h_ * design_.spacing();
    const double s = design_[i];
    const double d1 = spec_.sd.derivative(s);
    double out = hd * hd * d1 * d1;
    if (!spec_.correlation.is_independent()) {
      const double th = spec_.correlation.theta();
      out -= 2.0 * hd * hd / (th * th) * sd_[i] * sd_[i];
    }
    return out;
  }

  // cov(D_i^2, D_j^2) by Isserlis' theorem on the exact 4x4 joint law of
  // (Z_i, Z_{i+h}, Z_j, Z_{j+h}); an independent route to cov_ij.
  double cov_isserlis(std::size_t i, std::size_t j) const {
    check(i);
    check(j);
    const std::array<std::size_t, 4> idx{i, i + h_, j, j + h_};
    double c[4][4];
    double m[4];
    for (int a = 0; a < 4; ++a) {
      m[a] = mu_[idx[a]];
      for (int b = 0; b < 4; ++b) c[a][b] = rho(idx[a], idx[b]) * sd_[idx[a]] * sd_[idx[b]];
    }
    auto fourth = [&](int p, int q, int r, int t) {
      return m[p] * m[q] * m[r] * m[t] + c[p][q] * m[r] * m[t] + c[p][r] * m[q] * m[t] + c[p][t] * m[q] * m[r] +
             c[q][r] * m[p] * m[t] + c[q][t] * m[p] * m[r] + c[r][t] * m[p] * m[q] + c[p][q] * c[r][t] +
             c[p][r] * c[q][t] + c[p][t] * c[q][r];
    };
    auto second = [&](int p, int q) { return c[p][q] + m[p] * m[q]; };
    const double u[4] = {1.0, -1.0, 0.0, 0.0};
    const double v[4] = {0.0, 0.0, 1.0, -1.0};
    double e4 = 0.0, eu = 0.0, ev = 0.0;
    for (int p = 0; p < 4; ++p) {
      for (int q = 0; q < 4; ++q) {
        eu += u[p] * u[q] * second(p, q);
        ev += v[p] * v[q] * second(p, q);
        for (int r = 0; r < 4; ++r) {
          for (int t = 0; t < 4; ++t) {
            const double coef = u[p] * u[q] * v[r] * v[t];
            if (coef != 0.0) e4 += coef * fourth(p, q, r, t);
          }
        }
      }
    }
    // D = (.)/sqrt(2), so squares carry a factor 1/2 each.
    return 0.25 * (e4 - eu * ev);
  }

  const ProcessSpec& spec() const { return spec_; }
  const GridDesign& design() const { return design_; }

 private:
  void check(std::size_t i) const {
    if (i >= size()) throw ParameterError("pseudo-residual index out of range: " + std::to_string(i));
  }
  double rho(std::size_t a, std::size_t b) const { return spec_.correlation(design_[a] - design_[b]); }

  ProcessSpec spec_;
  GridDesign design_;
  int h_;
  std::vector<double> mu_;
  std::vector<double> sd_;
};

inline PseudoResidualMoments moment_oracle(const ProcessSpec& spec, const GridDesign& design, int h, std::size_t i,
                                           std::size_t j) {
  return MomentOracle(spec, design, h)(i, j);
}

}  // namespace locvar
