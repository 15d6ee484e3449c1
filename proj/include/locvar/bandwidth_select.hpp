#pragma once

// Cross-validated bandwidth choice for the local-variogram smoother with
// deviances de-correlated by a fixed exponential covariance model.

#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "locvar/error.hpp"
#include "locvar/gm_kernel.hpp"
#include "locvar/local_variogram.hpp"

namespace locvar {

class CandidateGrid {
 public:
  explicit CandidateGrid(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw ParameterError("candidate grid is empty");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!(values_[i] > 0.0) || values_[i] > 0.5) throw ParameterError("candidate bandwidths must lie in (0, 0.5]");
      if (i > 0 && !(values_[i] > values_[i - 1])) throw ParameterError("candidate bandwidths must be increasing");
    }
  }

  // count log-spaced values from 4 * spacing to upper.
  static CandidateGrid log_spaced(double spacing, std::size_t count = 20, double upper = 0.5) {
    const double lower = 4.0 * spacing;
    if (count < 2 || !(lower < upper)) throw ParameterError("invalid candidate grid range");
    std::vector<double> v(count);
    const double a = std::log(lower), b = std::log(upper);
    for (std::size_t i = 0; i < count; ++i) {
      v[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
    }
    v.back() = upper;
    return CandidateGrid(std::move(v));
  }

  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

 private:
  std::vector<double> values_;
};

struct DevianceSeries {
  double bandwidth = 0.0;
  std::vector<double> raw;       // D_i^2 minus the fitted value at t_i
  std::vector<double> diagonal;  // smoothing-matrix diagonal used by the score
  std::vector<double> whitened;  // empty until a whitening transform is applied
  std::size_t floored = 0;       // fitted values that the positivity floor would replace
};

inline DevianceSeries raw_deviances(const PseudoResidualSeries& pres, const KernelSpec& kernel, double lambda,
                                    DiagonalMode mode = DiagonalMode::computed,
                                    double floor_fraction = kDefaultFloorFraction) {
  const Eigen::MatrixXd m = smoothing_matrix(kernel, lambda, pres.centers);
  const std::vector<double> sq = pres.squared();
  Eigen::Map<const Eigen::VectorXd> y(sq.data(), static_cast<Eigen::Index>(sq.size()));
  const Eigen::VectorXd fitted = m * y;
  const Eigen::VectorXd eps = y - fitted;
  const Eigen::VectorXd diag = smoothing_diagonal(m, kernel, lambda, pres.spacing, mode);

  DevianceSeries out;
  out.bandwidth = lambda;
  out.raw.assign(eps.data(), eps.data() + eps.size());
  out.diagonal.assign(diag.data(), diag.data() + diag.size());
  std::vector<double> fv(fitted.data(), fitted.data() + fitted.size());
  out.floored = apply_positivity_floor(fv, floor_fraction);
  return out;
}

// xi = L^{-1} eps with C = L L^T, C_ij = exp(-|i-j| / (phi n)).
class WhiteningTransform {
 public:
  static WhiteningTransform identity(std::size_t length) {
    WhiteningTransform w;
    w.length_ = length;
    return w;
  }

  static WhiteningTransform exponential(std::size_t length, double phi, std::size_t n) {
    if (length < 2) throw ParameterError("whitening needs length >= 2");
    if (phi < 0.0 || !std::isfinite(phi)) throw ParameterError("whitening range phi must be >= 0");
    if (phi == 0.0) return identity(length);
    WhiteningTransform w;
    w.length_ = length;
    w.phi_ = phi;
    const Eigen::MatrixXd c = covariance(length, phi, n);
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() != Eigen::Success) throw NumericError("Cholesky factorization of the deviance covariance failed");
    w.factor_ = llt.matrixL();
    return w;
  }

  static Eigen::MatrixXd covariance(std::size_t length, double phi, std::size_t n) {
    const auto len = static_cast<Eigen::Index>(length);
    Eigen::MatrixXd c(len, len);
    const double scale = 1.0 / (phi * static_cast<double>(n));
    for (Eigen::Index i = 0; i < len; ++i) {
      for (Eigen::Index j = 0; j < len; ++j) c(i, j) = std::exp(-static_cast<double>(std::abs(i - j)) * scale);
    }
    return c;
  }

  bool is_identity() const { return !phi_.has_value(); }
  std::size_t length() const { return length_; }
  std::optional<double> phi() const { return phi_; }
  const Eigen::MatrixXd& factor() const { return factor_; }

  std::vector<double> apply(std::span<const double> eps) const {
    if (eps.size() != length_) throw ParameterError("deviance length does not match the whitening transform");
    if (is_identity()) return {eps.begin(), eps.end()};
    Eigen::Map<const Eigen::VectorXd> e(eps.data(), static_cast<Eigen::Index>(eps.size()));
    const Eigen::VectorXd xi = factor_.triangularView<Eigen::Lower>().solve(e);
    return {xi.data(), xi.data() + xi.size()};
  }

 private:
  std::size_t length_ = 0;
  std::optional<double> phi_;
  Eigen::MatrixXd factor_;
};

inline WhiteningTransform whitening_transform(std::size_t length, double phi, std::size_t n) {
  return WhiteningTransform::exponential(length, phi, n);
}

// sum_i (xi_i / (1 - M_ii))^2
inline double cv_score(std::span<const double> xi, std::span<const double> diagonal) {
  if (xi.size() != diagonal.size()) throw ParameterError("score inputs differ in length");
  double score = 0.0;
  for (std::size_t i = 0; i < xi.size(); ++i) {
    const double d = 1.0 - diagonal[i];
    if (!(d > 0.0)) {
      throw NumericError("degenerate smoother: diagonal entry " + std::to_string(diagonal[i]) + " >= 1");
    }
    const double r = xi[i] / d;
    score += r * r;
  }
  return score;
}

struct CandidateScore {
  double bandwidth = 0.0;
  double score = std::numeric_limits<double>::quiet_NaN();
  std::size_t floored = 0;
  std::string failure;  // empty when the candidate was scored

  bool ok() const { return failure.empty(); }
};

struct SelectionResult {
  double bandwidth = 0.0;
  std::vector<CandidateScore> scores;
};

struct SelectionOptions {
  DiagonalMode diagonal = DiagonalMode::computed;
  double floor_fraction = kDefaultFloorFraction;
};

namespace detail {

// Minimum score; scores within tie_tolerance of the minimum count as ties and
// go to the larger bandwidth.
inline SelectionResult pick_minimum(std::vector<CandidateScore> scores, double tie_tolerance = 0.0) {
  SelectionResult r;
  r.scores = std::move(scores);
  std::optional<double> low;
  for (const auto& c : r.scores) {
    if (c.ok() && (!low || c.score < *low)) low = c.score;
  }
  if (!low) {
    std::ostringstream os;
    os << "no usable bandwidth candidate:";
    for (const auto& c : r.scores) os << " [" << c.bandwidth << ": " << c.failure << "]";
    throw NumericError(os.str());
  }
  for (const auto& c : r.scores) {
    if (c.ok() && c.score <= *low + tie_tolerance) r.bandwidth = std::max(r.bandwidth, c.bandwidth);
  }
  return r;
}

// Relative size below which score differences are treated as round-off.
inline constexpr double kScoreTieRelative = 1e-12;

}  // namespace detail

inline SelectionResult select_bandwidth(const PseudoResidualSeries& pres, const KernelSpec& kernel,
                                        const CandidateGrid& grid, const WhiteningTransform& whitening,
                                        const SelectionOptions& options = {}) {
  std::vector<CandidateScore> scores;
  scores.reserve(grid.size());
  for (double lambda : grid.values()) {
    CandidateScore c;
    c.bandwidth = lambda;
    try {
      DevianceSeries dev = raw_deviances(pres, kernel, lambda, options.diagonal, options.floor_fraction);
      dev.whitened = whitening.apply(dev.raw);
      c.score = cv_score(dev.whitened, dev.diagonal);
      c.floored = dev.floored;
    } catch (const Error& e) {
      c.failure = e.what();
    }
    scores.push_back(std::move(c));
  }
  const std::vector<double> sq = pres.squared();
  const double scale = std::inner_product(sq.begin(), sq.end(), sq.begin(), 0.0);
  return detail::pick_minimum(std::move(scores), detail::kScoreTieRelative * scale);
}

inline SelectionResult select_bandwidth(const PseudoResidualSeries& pres, const KernelSpec& kernel,
                                        const CandidateGrid& grid, double phi, const SelectionOptions& options = {}) {
  const WhiteningTransform w = whitening_transform(pres.size(), phi, pres.n_obs);
  return select_bandwidth(pres, kernel, grid, w, options);
}

}  // namespace locvar
