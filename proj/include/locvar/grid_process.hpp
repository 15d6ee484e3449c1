#pragma once

// Grid designs, mean/sd/correlation specifications and Gaussian simulation
// of the nonstationary model Z(s) = mu(s) + sigma(s) X(s) on [0, 1].

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "locvar/error.hpp"

namespace locvar {

// Name of the random stream used by simulate_process; written into output
// metadata so results can be traced back to the generator.
inline constexpr const char* kRandomStream = "mt19937_64/std::normal_distribution";

enum class GridConvention { midpoint, endpoint };

inline std::string to_string(GridConvention c) {
  return c == GridConvention::midpoint ? "midpoint" : "endpoint";
}

// Equidistant design on [0, 1].
//   midpoint: s_i = (2i - 1) / (2n)
//   endpoint: s_i = (i - 1) / (n - 1)
class GridDesign {
 public:
  explicit GridDesign(std::size_t n, GridConvention convention = GridConvention::midpoint)
      : n_(n), convention_(convention) {
    if (n < 2) throw ParameterError("grid needs at least 2 points, got " + std::to_string(n));
    locations_.resize(n);
    const double dn = static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double k = static_cast<double>(i);
      locations_[i] = convention == GridConvention::midpoint ? (2.0 * k + 1.0) / (2.0 * dn)
                                                             : k / (dn - 1.0);
    }
  }

  std::size_t size() const { return n_; }
  GridConvention convention() const { return convention_; }
  const std::vector<double>& locations() const { return locations_; }
  double operator[](std::size_t i) const { return locations_[i]; }

  double spacing() const {
    return convention_ == GridConvention::midpoint ? 1.0 / static_cast<double>(n_)
                                                   : 1.0 / static_cast<double>(n_ - 1);
  }

  bool operator==(const GridDesign& o) const { return n_ == o.n_ && convention_ == o.convention_; }

 private:
  std::size_t n_;
  GridConvention convention_;
  std::vector<double> locations_;
};

// Deterministic function on [0, 1]: used for both the mean and the
// standard-deviation of the process.
class FunctionSpec {
 public:
  enum class Kind { constant, sine, step, linear, tabulated };

  static FunctionSpec constant(double c) { return FunctionSpec(Kind::constant, c, 0.0); }
  // 2 sin(s / 0.15) + 2.8
  static FunctionSpec sine() { return FunctionSpec(Kind::sine, 0.0, 0.0); }
  // 1 + 1{1/3 < s <= 1}
  static FunctionSpec step() { return FunctionSpec(Kind::step, 0.0, 0.0); }
  static FunctionSpec linear(double a, double b) { return FunctionSpec(Kind::linear, a, b); }
  // Values on the uniform grid k/(m-1), k = 0..m-1, linearly interpolated.
  static FunctionSpec tabulated(std::vector<double> values) {
    if (values.size() < 2) throw ParameterError("tabulated function needs at least 2 values");
    FunctionSpec f(Kind::tabulated, 0.0, 0.0);
    f.table_ = std::move(values);
    return f;
  }

  // Same function multiplied by c.
  FunctionSpec scaled(double c) const {
    FunctionSpec f = *this;
    f.scale_ *= c;
    return f;
  }

  Kind kind() const { return kind_; }
  double scale() const { return scale_; }

  double operator()(double s) const {
    check_domain(s);
    return scale_ * base(s);
  }

  // First derivative; the step function is treated as piecewise constant.
  double derivative(double s) const {
    check_domain(s);
    switch (kind_) {
      case Kind::sine: return scale_ * 2.0 / 0.15 * std::cos(s / 0.15);
      case Kind::linear: return scale_ * b_;
      case Kind::tabulated: {
        const auto [k, frac] = locate(s);
        (void)frac;
        const double h = 1.0 / static_cast<double>(table_.size() - 1);
        return scale_ * (table_[k + 1] - table_[k]) / h;
      }
      default: return 0.0;
    }
  }

  std::vector<double> sample(std::span<const double> points) const {
    std::vector<double> out(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) out[i] = (*this)(points[i]);
    return out;
  }

  std::string label() const {
    std::ostringstream os;
    switch (kind_) {
      case Kind::constant: os << "constant:" << a_; break;
      case Kind::sine: os << "sine"; break;
      case Kind::step: os << "step"; break;
      case Kind::linear: os << "linear:" << a_ << ':' << b_; break;
      case Kind::tabulated: os << "tabulated:" << table_.size(); break;
    }
    if (scale_ != 1.0) os << "*" << scale_;
    return os.str();
  }

 private:
  FunctionSpec(Kind k, double a, double b) : kind_(k), a_(a), b_(b) {}

  static void check_domain(double s) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw DomainError("function evaluated outside [0,1] at s=" + std::to_string(s));
    }
  }

  std::pair<std::size_t, double> locate(double s) const {
    const double pos = s * static_cast<double>(table_.size() - 1);
    std::size_t k = static_cast<std::size_t>(std::floor(pos));
    if (k >= table_.size() - 1) k = table_.size() - 2;
    return {k, pos - static_cast<double>(k)};
  }

  double base(double s) const {
    switch (kind_) {
      case Kind::constant: return a_;
      case Kind::sine: return 2.0 * std::sin(s / 0.15) + 2.8;
      case Kind::step: return (s > 1.0 / 3.0 && s <= 1.0) ? 2.0 : 1.0;
      case Kind::linear: return a_ + b_ * s;
      case Kind::tabulated: {
        const auto [k, frac] = locate(s);
        return table_[k] + frac * (table_[k + 1] - table_[k]);
      }
    }
    return 0.0;
  }

  Kind kind_;
  double a_;
  double b_;
  double scale_ = 1.0;
  std::vector<double> table_;
};

// Stationary correlation of the standardized error process X.
class CorrelationModel {
 public:
  enum class Kind { independent, exponential };

  static CorrelationModel independent() { return CorrelationModel(Kind::independent, 0.0); }
  static CorrelationModel exponential(double theta) {
    if (!(theta > 0.0) || !std::isfinite(theta)) {
      throw ParameterError("exponential correlation needs theta > 0, got " + std::to_string(theta));
    }
    return CorrelationModel(Kind::exponential, theta);
  }

  Kind kind() const { return kind_; }
  bool is_independent() const { return kind_ == Kind::independent; }
  double theta() const { return theta_; }

  // rho(d) = exp(-d/theta); independent: 1 at d = 0, else 0.
  double operator()(double distance) const {
    const double d = std::abs(distance);
    if (kind_ == Kind::independent) return d == 0.0 ? 1.0 : 0.0;
    return std::exp(-d / theta_);
  }

  // Smoothness exponent of the small-distance expansion; reporting only.
  std::optional<double> alpha() const {
    if (kind_ == Kind::exponential) return 1.0;
    return std::nullopt;
  }

  std::string label() const {
    if (kind_ == Kind::independent) return "indep";
    std::ostringstream os;
    os << theta_;
    return os.str();
  }

 private:
  CorrelationModel(Kind k, double theta) : kind_(k), theta_(theta) {}
  Kind kind_;
  double theta_;
};

struct ProcessSpec {
  FunctionSpec mean = FunctionSpec::constant(0.0);
  FunctionSpec sd = FunctionSpec::constant(1.0);
  CorrelationModel correlation = CorrelationModel::independent();

  ProcessSpec with_sd(FunctionSpec f) const {
    ProcessSpec p = *this;
    p.sd = std::move(f);
    return p;
  }
};

inline Eigen::MatrixXd correlation_matrix(const CorrelationModel& model, const GridDesign& design) {
  const std::size_t n = design.size();
  const auto& s = design.locations();
  Eigen::MatrixXd r(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    r(i, i) = 1.0;
    for (std::size_t j = 0; j < i; ++j) {
      const double v = model(s[i] - s[j]);
      r(i, j) = v;
      r(j, i) = v;
    }
  }
  return r;
}

// Independent standard normal draws; a pure function of (seed, count).
inline std::vector<double> standard_normal_draws(std::uint64_t seed, std::size_t count) {
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> w(count);
  for (auto& x : w) x = normal(engine);
  return w;
}

struct GridProcess {
  GridDesign design;
  std::vector<double> values;
  ProcessSpec spec;
  std::uint64_t seed = 0;
  double jitter = 0.0;  // diagonal jitter added before the Cholesky factor succeeded

  // True sd and variance at s (simulation only).
  double true_sd(double s) const { return spec.sd(s); }
  double true_variance(double s) const {
    const double v = spec.sd(s);
    return v * v;
  }
};

// Holds the Cholesky factor of the correlation matrix for one
// (correlation, design) pair and draws replicates from it. Immutable after
// construction, so one instance can serve many threads.
class ProcessSimulator {
 public:
  static constexpr double kMaxJitter = 1e-10;

  ProcessSimulator(CorrelationModel correlation, GridDesign design)
      : correlation_(std::move(correlation)), design_(std::move(design)) {
    if (correlation_.is_independent()) return;
    Eigen::MatrixXd r = correlation_matrix(correlation_, design_);
    Eigen::LLT<Eigen::MatrixXd> llt(r);
    if (llt.info() != Eigen::Success) {
      jitter_ = kMaxJitter;
      Eigen::MatrixXd rj = r;
      rj.diagonal().array() += jitter_;
      llt.compute(rj);
      if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r, Eigen::EigenvaluesOnly);
        std::ostringstream os;
        os << "correlation matrix is not positive definite (smallest eigenvalue estimate "
           << eig.eigenvalues().minCoeff() << ")";
        throw NumericError(os.str());
      }
    }
    factor_ = llt.matrixL();
  }

  const GridDesign& design() const { return design_; }
  const CorrelationModel& correlation() const { return correlation_; }
  double jitter() const { return jitter_; }

  // Lower Cholesky factor; identity for the independent model.
  Eigen::MatrixXd factor() const {
    if (correlation_.is_independent()) {
      return Eigen::MatrixXd::Identity(design_.size(), design_.size());
    }
    return factor_;
  }

  // Standardized error X = L w.
  std::vector<double> standardized_errors(std::uint64_t seed) const {
    std::vector<double> w = standard_normal_draws(seed, design_.size());
    if (correlation_.is_independent()) return w;
    Eigen::Map<const Eigen::VectorXd> wv(w.data(), w.size());
    Eigen::VectorXd x = factor_.triangularView<Eigen::Lower>() * wv;
    return {x.data(), x.data() + x.size()};
  }

  GridProcess draw(const ProcessSpec& spec, std::uint64_t seed) const {
    const auto& s = design_.locations();
    for (double si : s) {
      if (!(spec.sd(si) > 0.0)) throw ParameterError("sd function must be strictly positive on the grid");
    }
    std::vector<double> x = standardized_errors(seed);
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = spec.mean(s[i]) + spec.sd(s[i]) * x[i];
    return GridProcess{design_, std::move(z), spec, seed, jitter_};
  }

 private:
  CorrelationModel correlation_;
  GridDesign design_;
  Eigen::MatrixXd factor_;
  double jitter_ = 0.0;
};

inline GridProcess simulate_process(const ProcessSpec& spec, const GridDesign& design, std::uint64_t seed) {
  return ProcessSimulator(spec.correlation, design).draw(spec, seed);
}

inline double evaluate_function(const FunctionSpec& f, double s) { return f(s); }

// Evenly spaced points on [0, 1] including both endpoints.
inline std::vector<double> linspace01(std::size_t count) {
  if (count < 2) throw ParameterError("need at least 2 evaluation points");
  std::vector<double> p(count);
  for (std::size_t i = 0; i < count; ++i) {
    p[i] = static_cast<double>(i) / static_cast<double>(count - 1);
  }
  return p;
}

}  // namespace locvar
