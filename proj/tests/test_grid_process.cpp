#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "locvar/grid_process.hpp"

using namespace locvar;

TEST(GridDesign, MidpointLocations) {
  GridDesign d(10);
  EXPECT_EQ(d.convention(), GridConvention::midpoint);
  for (std::size_t i = 1; i <= 10; ++i) EXPECT_DOUBLE_EQ(d[i - 1], (2.0 * i - 1.0) / 20.0);
  EXPECT_DOUBLE_EQ(d.spacing(), 0.1);
}

TEST(GridDesign, EndpointLocations) {
  GridDesign d(101, GridConvention::endpoint);
  EXPECT_DOUBLE_EQ(d[0], 0.0);
  EXPECT_DOUBLE_EQ(d[100], 1.0);
  for (std::size_t i = 1; i <= 101; ++i) EXPECT_NEAR(d[i - 1], (i - 1.0) / 100.0, 1e-15);
  EXPECT_DOUBLE_EQ(d.spacing(), 0.01);
}

TEST(GridDesign, StrictlyIncreasingConstantSpacing) {
  for (auto conv : {GridConvention::midpoint, GridConvention::endpoint}) {
    GridDesign d(333, conv);
    for (std::size_t i = 1; i < d.size(); ++i) {
      EXPECT_GT(d[i], d[i - 1]);
      EXPECT_NEAR(d[i] - d[i - 1], d.spacing(), 1e-12);
    }
  }
}

TEST(GridDesign, RejectsTooFewPoints) {
  EXPECT_THROW(GridDesign(1), ParameterError);
  EXPECT_THROW(GridDesign(0, GridConvention::endpoint), ParameterError);
}

TEST(FunctionSpec, SineAndStepFunctions) {
  EXPECT_DOUBLE_EQ(evaluate_function(FunctionSpec::sine(), 0.0), 2.8);
  EXPECT_DOUBLE_EQ(FunctionSpec::sine()(0.5), 2.0 * std::sin(0.5 / 0.15) + 2.8);
  EXPECT_DOUBLE_EQ(FunctionSpec::step()(0.5), 2.0);
  EXPECT_DOUBLE_EQ(FunctionSpec::step()(1.0 / 3.0), 1.0);
  EXPECT_DOUBLE_EQ(FunctionSpec::step()(std::nextafter(1.0 / 3.0, 1.0)), 2.0);
  EXPECT_DOUBLE_EQ(FunctionSpec::step()(1.0), 2.0);
  EXPECT_DOUBLE_EQ(FunctionSpec::step()(0.0), 1.0);
  for (double s : {0.0, 0.37, 1.0}) EXPECT_DOUBLE_EQ(FunctionSpec::constant(1.7)(s), 1.7);
}

TEST(FunctionSpec, PositiveOnUnitInterval) {
  for (int k = 0; k <= 10000; ++k) {
    const double s = k / 10000.0;
    EXPECT_GT(FunctionSpec::sine()(s), 0.0);
    EXPECT_GT(FunctionSpec::step()(s), 0.0);
  }
}

TEST(FunctionSpec, DomainErrors) {
  EXPECT_THROW(FunctionSpec::sine()(-1e-9), DomainError);
  EXPECT_THROW(FunctionSpec::step()(1.0000001), DomainError);
  EXPECT_THROW(evaluate_function(FunctionSpec::constant(1.0), 2.0), DomainError);
  EXPECT_THROW(FunctionSpec::sine()(std::nan("")), DomainError);
}

TEST(FunctionSpec, LinearTabulatedAndScaled) {
  auto lin = FunctionSpec::linear(1.0, 2.0);
  EXPECT_DOUBLE_EQ(lin(0.25), 1.5);
  EXPECT_DOUBLE_EQ(lin.derivative(0.25), 2.0);
  auto tab = FunctionSpec::tabulated({1.0, 3.0, 2.0});
  EXPECT_DOUBLE_EQ(tab(0.0), 1.0);
  EXPECT_DOUBLE_EQ(tab(0.25), 2.0);
  EXPECT_DOUBLE_EQ(tab(0.75), 2.5);
  EXPECT_DOUBLE_EQ(tab(1.0), 2.0);
  EXPECT_THROW(FunctionSpec::tabulated({1.0}), ParameterError);
  EXPECT_DOUBLE_EQ(FunctionSpec::sine().scaled(3.0)(0.2), 3.0 * FunctionSpec::sine()(0.2));
}

TEST(FunctionSpec, SineDerivativeMatchesFiniteDifference) {
  const auto f = FunctionSpec::sine();
  for (double s : {0.1, 0.4, 0.77}) {
    const double e = 1e-6;
    EXPECT_NEAR(f.derivative(s), (f(s + e) - f(s - e)) / (2 * e), 1e-6);
  }
}

TEST(CorrelationModel, Exponential) {
  auto m = CorrelationModel::exponential(0.1);
  EXPECT_DOUBLE_EQ(m(0.0), 1.0);
  EXPECT_DOUBLE_EQ(m(0.01), std::exp(-0.1));
  EXPECT_DOUBLE_EQ(m(-0.01), m(0.01));
  double prev = 1.0;
  for (int k = 1; k < 100; ++k) {
    const double r = m(k * 0.01);
    EXPECT_LT(r, prev);
    EXPECT_GT(r, 0.0);
    prev = r;
  }
  EXPECT_EQ(m.alpha(), 1.0);
  EXPECT_THROW(CorrelationModel::exponential(0.0), ParameterError);
  EXPECT_THROW(CorrelationModel::exponential(-0.1), ParameterError);
}

TEST(CorrelationModel, Independent) {
  auto m = CorrelationModel::independent();
  EXPECT_DOUBLE_EQ(m(0.0), 1.0);
  EXPECT_DOUBLE_EQ(m(1e-9), 0.0);
  EXPECT_FALSE(m.alpha().has_value());
  EXPECT_EQ(m.label(), "indep");
}

TEST(CorrelationMatrix, IndependentIsIdentity) {
  const Eigen::MatrixXd r = correlation_matrix(CorrelationModel::independent(), GridDesign(3));
  EXPECT_TRUE(r.isApprox(Eigen::MatrixXd::Identity(3, 3)));
  EXPECT_EQ(r, Eigen::MatrixXd::Identity(3, 3));
}

TEST(CorrelationMatrix, AdjacentEntryEndpoint) {
  const Eigen::MatrixXd r =
      correlation_matrix(CorrelationModel::exponential(0.1), GridDesign(101, GridConvention::endpoint));
  EXPECT_NEAR(r(0, 1), std::exp(-0.1), 1e-15);
  EXPECT_NEAR(r(0, 1), 0.904837, 1e-6);
}

TEST(CorrelationMatrix, FarEntryAgainstDistanceOracle) {
  const GridDesign d(100);
  const Eigen::MatrixXd r = correlation_matrix(CorrelationModel::exponential(0.01), d);
  // Brute force: distances straight from the midpoint formula.
  for (int i = 1; i <= 100; i += 11) {
    for (int j = 1; j <= 100; j += 7) {
      const double si = (2.0 * i - 1.0) / 200.0, sj = (2.0 * j - 1.0) / 200.0;
      const double expect = std::exp(-std::abs(si - sj) / 0.01);
      EXPECT_NEAR(r(i - 1, j - 1), expect, 1e-14 * std::max(1.0, expect));
    }
  }
  EXPECT_NEAR(r(0, 99) / std::exp(-99.0), 1.0, 1e-10);
  EXPECT_TRUE(r.isApprox(r.transpose(), 0.0));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(r(i, i), 1.0);
}

TEST(Simulator, Reproducible) {
  const ProcessSpec spec{FunctionSpec::constant(0.0), FunctionSpec::sine(), CorrelationModel::exponential(0.1)};
  const GridDesign d(150, GridConvention::endpoint);
  const auto a = simulate_process(spec, d, 42);
  const auto b = simulate_process(spec, d, 42);
  const auto c = simulate_process(spec, d, 43);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
  EXPECT_EQ(a.seed, 42u);
  EXPECT_EQ(a.values.size(), d.size());
  EXPECT_DOUBLE_EQ(a.true_variance(0.0), 2.8 * 2.8);
}

TEST(Simulator, WhitenRoundTripRecoversDraws) {
  const ProcessSpec spec{FunctionSpec::linear(1.0, -0.5), FunctionSpec::sine(), CorrelationModel::exponential(0.05)};
  const GridDesign d(120);
  const ProcessSimulator sim(spec.correlation, d);
  const auto p = sim.draw(spec, 7);
  Eigen::VectorXd x(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) x(i) = (p.values[i] - spec.mean(d[i])) / spec.sd(d[i]);
  const Eigen::VectorXd w = sim.factor().triangularView<Eigen::Lower>().solve(x);
  const auto draws = standard_normal_draws(7, d.size());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(w(i), draws[i], 1e-10);
}

TEST(Simulator, FactorReconstructsCorrelation) {
  const GridDesign d(200, GridConvention::endpoint);
  const auto model = CorrelationModel::exponential(0.1);
  const ProcessSimulator sim(model, d);
  const Eigen::MatrixXd l = sim.factor();
  EXPECT_LT((l * l.transpose() - correlation_matrix(model, d)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(sim.jitter(), 0.0);
}

TEST(Simulator, ScaleEquivariance) {
  const ProcessSpec spec{FunctionSpec::linear(0.3, 1.0), FunctionSpec::sine(), CorrelationModel::exponential(0.1)};
  const GridDesign d(80);
  const auto a = simulate_process(spec, d, 11);
  const auto b = simulate_process(spec.with_sd(spec.sd.scaled(2.5)), d, 11);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double mu = spec.mean(d[i]);
    EXPECT_NEAR(b.values[i] - mu, 2.5 * (a.values[i] - mu), 1e-12);
  }
}

TEST(Simulator, RejectsNonPositiveSd) {
  const ProcessSpec spec{FunctionSpec::constant(0.0), FunctionSpec::linear(-0.1, 1.0), CorrelationModel::independent()};
  EXPECT_THROW(simulate_process(spec, GridDesign(50), 1), ParameterError);
}

TEST(SimulatorMonteCarlo, WhiteNoiseVariance) {
  const ProcessSpec spec{FunctionSpec::constant(0.0), FunctionSpec::constant(1.0), CorrelationModel::independent()};
  const auto p = simulate_process(spec, GridDesign(2000), 2024);
  const double m = std::accumulate(p.values.begin(), p.values.end(), 0.0) / 2000.0;
  double v = 0.0;
  for (double z : p.values) v += (z - m) * (z - m);
  v /= 1999.0;
  EXPECT_GE(v, 0.93);
  EXPECT_LE(v, 1.07);
}

TEST(SimulatorMonteCarlo, LagOneAutocorrelation) {
  const auto model = CorrelationModel::exponential(0.1);
  const GridDesign d(200, GridConvention::endpoint);
  const ProcessSimulator sim(model, d);
  const ProcessSpec spec{FunctionSpec::constant(0.0), FunctionSpec::constant(1.0), model};
  std::vector<double> r1;
  for (int s = 0; s < 500; ++s) {
    const auto p = sim.draw(spec, 1000 + s);
    // Unit variance is known, so the mean lag-1 product is unbiased.
    double num = 0.0;
    for (std::size_t i = 0; i + 1 < d.size(); ++i) num += p.values[i] * p.values[i + 1];
    r1.push_back(num / static_cast<double>(d.size() - 1));
  }
  const double mean = std::accumulate(r1.begin(), r1.end(), 0.0) / r1.size();
  double ss = 0.0;
  for (double r : r1) ss += (r - mean) * (r - mean);
  const double se = std::sqrt(ss / (r1.size() - 1) / r1.size());
  EXPECT_NEAR(mean, std::exp(-d.spacing() / 0.1), 4 * se);
}

TEST(SimulatorMonteCarlo, SineSdAtZero) {
  const ProcessSpec spec{FunctionSpec::constant(0.0), FunctionSpec::sine(), CorrelationModel::exponential(0.1)};
  const GridDesign d(50, GridConvention::endpoint);
  const ProcessSimulator sim(spec.correlation, d);
  double ss = 0.0;
  for (int s = 0; s < 2000; ++s) {
    const double z = sim.draw(spec, 5000 + s).values[0];
    ss += z * z;
  }
  const double sd = std::sqrt(ss / 2000.0);
  EXPECT_GE(sd, 2.65);
  EXPECT_LE(sd, 2.95);
}

TEST(SimulatorMonteCarlo, SampleCovarianceMatchesCorrelation) {
  const auto model = CorrelationModel::exponential(0.1);
  const GridDesign d(12, GridConvention::endpoint);
  const ProcessSimulator sim(model, d);
  const int reps = 6000;
  Eigen::MatrixXd x(reps, d.size());
  for (int r = 0; r < reps; ++r) {
    const auto e = sim.standardized_errors(77 + r);
    for (std::size_t i = 0; i < d.size(); ++i) x(r, i) = e[i];
  }
  const Eigen::MatrixXd r = correlation_matrix(model, d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const Eigen::ArrayXd prod = x.col(i).array() * x.col(j).array();
      const double m = prod.mean();
      const double se = std::sqrt((prod - m).square().sum() / (reps - 1) / reps);
      EXPECT_NEAR(m, r(i, j), 4 * se) << i << "," << j;
    }
  }
}
