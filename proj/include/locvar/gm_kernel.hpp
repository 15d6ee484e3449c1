#pragma once

// Polynomial Gasser-Mueller kernels and cell-integrated smoothing weights.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "locvar/error.hpp"

namespace locvar {

enum class BoundaryPolicy {
  renormalize,           // divide by the weight sum when the support leaves the data range
  fixed_bandwidth_edge,  // shrink the window near the edge so it fits (floor radius 2*spacing)
};

inline std::string to_string(BoundaryPolicy p) {
  return p == BoundaryPolicy::renormalize ? "renormalize" : "fixed_bandwidth_edge";
}

// How the smoothing-matrix diagonal is obtained for cross-validation.
enum class DiagonalMode {
  computed,    // the actual cell-integral diagonal
  literal_k0,  // K(0) * spacing / radius
};

// Even polynomial kernel K(u) = sum_k a_k u^(2k) on [-1, 1].
//
// support_scale c sets the radius of the smoothing window for a bandwidth
// lambda to c * lambda, i.e. weights integrate (1/(c lambda)) K((s-u)/(c lambda)).
// c = 1 makes lambda the half-width of the window.
class KernelSpec {
 public:
  KernelSpec(int order, std::vector<double> coefficients,
             BoundaryPolicy policy = BoundaryPolicy::renormalize, double support_scale = 1.0)
      : order_(order), coef_(std::move(coefficients)), policy_(policy), support_scale_(support_scale) {
    if (!(support_scale > 0.0)) throw ParameterError("kernel support scale must be positive");
  }

  int order() const { return order_; }
  const std::vector<double>& coefficients() const { return coef_; }
  BoundaryPolicy boundary_policy() const { return policy_; }
  double support_scale() const { return support_scale_; }

  KernelSpec with_policy(BoundaryPolicy p) const {
    KernelSpec k = *this;
    k.policy_ = p;
    return k;
  }

  KernelSpec with_support_scale(double c) const {
    return KernelSpec(order_, coef_, policy_, c);
  }

  // Window radius for bandwidth lambda.
  double radius(double lambda) const { return support_scale_ * lambda; }

  double operator()(double u) const {
    if (u < -1.0 || u > 1.0) return 0.0;
    const double u2 = u * u;
    double v = 0.0;
    for (auto it = coef_.rbegin(); it != coef_.rend(); ++it) v = v * u2 + *it;
    return v;
  }

  // int_0^u K, with u clamped to [-1, 1]; F(1) - F(-1) = 1.
  double antiderivative(double u) const {
    u = std::clamp(u, -1.0, 1.0);
    const double u2 = u * u;
    double v = 0.0;
    for (std::size_t k = coef_.size(); k-- > 0;) {
      v = v * u2 + coef_[k] / static_cast<double>(2 * k + 1);
    }
    return v * u;
  }

  // Exact int_{-1}^{1} u^j K(u) du.
  double moment(int j) const {
    if (j % 2 != 0) return 0.0;
    double v = 0.0;
    for (std::size_t k = 0; k < coef_.size(); ++k) {
      v += coef_[k] * 2.0 / static_cast<double>(2 * static_cast<int>(k) + j + 1);
    }
    return v;
  }

 private:
  int order_;
  std::vector<double> coef_;
  BoundaryPolicy policy_;
  double support_scale_ = 1.0;
};

// Unique even polynomial of degree m with int K = 1, int u^(2j) K = 0 for
// j = 1..m/2-1 and K(1) = 0.
inline KernelSpec build_base_kernel(int order, BoundaryPolicy policy = BoundaryPolicy::renormalize,
                                    double support_scale = 1.0) {
  if (order != 2 && order != 4 && order != 6 && order != 8) {
    throw ParameterError("kernel order must be one of 2, 4, 6, 8; got " + std::to_string(order));
  }
  const int size = order / 2 + 1;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(size, size);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(size);
  for (int row = 0; row < size - 1; ++row) {
    for (int k = 0; k < size; ++k) a(row, k) = 2.0 / (2.0 * k + 2.0 * row + 1.0);
  }
  b(0) = 1.0;
  a.row(size - 1).setOnes();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible()) throw NumericError("singular moment system for kernel order " + std::to_string(order));
  Eigen::VectorXd x = lu.solve(b);
  return KernelSpec(order, std::vector<double>(x.data(), x.data() + x.size()), policy, support_scale);
}

struct SmoothingWeights {
  double s = 0.0;
  double radius = 0.0;  // window radius actually used, after any edge shrinking
  std::vector<double> weights;
  bool renormalized = false;
};

namespace detail {

inline double uniform_spacing(std::span<const double> centers) {
  if (centers.size() < 2) throw ParameterError("need at least two cell centers");
  const double delta = (centers.back() - centers.front()) / static_cast<double>(centers.size() - 1);
  if (!(delta > 0.0)) throw ParameterError("cell centers must be strictly increasing");
  for (std::size_t i = 1; i < centers.size(); ++i) {
    if (std::abs(centers[i] - centers[i - 1] - delta) > 1e-9 * delta + 1e-12) {
      throw ParameterError("cell centers must be equally spaced");
    }
  }
  return delta;
}

inline void check_bandwidth(double lambda) {
  if (!(lambda > 0.0) || lambda > 0.5) {
    throw ParameterError("bandwidth must lie in (0, 0.5], got " + std::to_string(lambda));
  }
}

// Weights for an already validated grid of centers with spacing delta.
inline SmoothingWeights gm_weights_unchecked(const KernelSpec& kernel, double lambda,
                                             std::span<const double> centers, double delta, double s) {
  const double lo = centers.front() - 0.5 * delta;
  const double hi = centers.back() + 0.5 * delta;
  const double tol = 1e-12;

  double bw = kernel.radius(lambda);
  if (kernel.boundary_policy() == BoundaryPolicy::fixed_bandwidth_edge) {
    const double room = std::min(s - lo, hi - s);
    if (bw > room) bw = std::max(room, 2.0 * delta);
  }

  SmoothingWeights out;
  out.s = s;
  out.radius = bw;
  out.weights.assign(centers.size(), 0.0);

  // Only cells intersecting [s - bw, s + bw] contribute.
  const double first = std::floor((s - bw - lo) / delta) - 1.0;
  const double last = std::ceil((s + bw - lo) / delta) + 1.0;
  const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(centers.size());
  const std::ptrdiff_t i0 = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(first), 0, m);
  const std::ptrdiff_t i1 = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(last), 0, m - 1);

  double sum = 0.0;
  bool any = false;
  for (std::ptrdiff_t i = i0; i <= i1 && i < m; ++i) {
    const double a = centers[i] - 0.5 * delta;
    const double b = centers[i] + 0.5 * delta;
    if (b <= s - bw || a >= s + bw) continue;
    const double w = kernel.antiderivative((s - a) / bw) - kernel.antiderivative((s - b) / bw);
    out.weights[i] = w;
    sum += w;
    any = true;
  }
  if (!any) {
    throw NumericError("empty kernel support at s=" + std::to_string(s) + " with bandwidth " + std::to_string(bw));
  }
  if (s - bw < lo - tol || s + bw > hi + tol) {
    if (!(sum > 1e-12)) {
      throw NumericError("kernel weights have non-positive mass at s=" + std::to_string(s));
    }
    for (double& w : out.weights) w /= sum;
    out.renormalized = true;
  }
  return out;
}

}  // namespace detail

// w_i = int over cell i of (1/r) K((s - u)/r) du with r the window radius,
// cells of width equal to the center spacing.
inline SmoothingWeights gm_weights(const KernelSpec& kernel, double lambda, std::span<const double> centers,
                                   double s) {
  detail::check_bandwidth(lambda);
  const double delta = detail::uniform_spacing(centers);
  return detail::gm_weights_unchecked(kernel, lambda, centers, delta, s);
}

// Row i holds the weights at centers[i].
inline Eigen::MatrixXd smoothing_matrix(const KernelSpec& kernel, double lambda, std::span<const double> centers) {
  detail::check_bandwidth(lambda);
  const double delta = detail::uniform_spacing(centers);
  const std::size_t m = centers.size();
  Eigen::MatrixXd mat(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    const SmoothingWeights w = detail::gm_weights_unchecked(kernel, lambda, centers, delta, centers[i]);
    mat.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(w.weights.data(), m);
  }
  return mat;
}

inline Eigen::VectorXd smoothing_diagonal(const Eigen::MatrixXd& m, const KernelSpec& kernel, double lambda,
                                          double spacing, DiagonalMode mode) {
  if (mode == DiagonalMode::computed) return m.diagonal();
  return Eigen::VectorXd::Constant(m.rows(), kernel(0.0) * spacing / kernel.radius(lambda));
}

}  // namespace locvar
