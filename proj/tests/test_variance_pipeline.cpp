#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "locvar/variance_pipeline.hpp"

using namespace locvar;

namespace {

const KernelSpec& harness_kernel() {
  static const KernelSpec k = build_base_kernel(6, BoundaryPolicy::renormalize, 2.0);
  return k;
}

ProcessSpec spec_of(FunctionSpec sd, CorrelationModel corr) {
  return ProcessSpec{FunctionSpec::constant(0.0), std::move(sd), std::move(corr)};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

EstimateCurve constant_curve(const GridDesign& d, double value) {
  EstimateCurve c;
  c.eval_points = d.locations();
  c.values.assign(d.size(), value);
  return c;
}

EstimateCurve variance_curve(const std::vector<double>& values) {
  EstimateCurve c;
  c.eval_points = evaluation_grid();
  c.values = values;
  c.kind = CurveKind::variance;
  return c;
}

}  // namespace

TEST(Standardize, UnitCurveIsIdentity) {
  const auto p = simulate_process(spec_of(FunctionSpec::sine(), CorrelationModel::exponential(0.1)),
                                  GridDesign(80, GridConvention::endpoint), 4);
  const auto z = standardize(p, constant_curve(p.design, 1.0));
  EXPECT_EQ(z.values, p.values);
  EXPECT_EQ(z.usable_count(), 80u);
}

TEST(Standardize, Homogeneity) {
  const GridDesign d(80, GridConvention::endpoint);
  const auto a = simulate_process(spec_of(FunctionSpec::sine(), CorrelationModel::exponential(0.1)), d, 4);
  const auto b = simulate_process(spec_of(FunctionSpec::sine().scaled(3.0), CorrelationModel::exponential(0.1)), d, 4);
  const auto curve = true_local_variogram_curve(a.spec, 1, d, d.locations());
  auto curve_b = curve;
  for (double& v : curve_b.values) v *= 9.0;
  const auto za = standardize(a, curve), zb = standardize(b, curve_b);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(za.values[i], zb.values[i], 1e-14 * std::abs(za.values[i]) + 1e-300);
}

TEST(Standardize, MonteCarloVarianceWithTrueCurve) {
  const auto model = CorrelationModel::exponential(0.1);
  const auto spec = spec_of(FunctionSpec::constant(1.5), model);
  const GridDesign d(200, GridConvention::endpoint);
  const ProcessSimulator sim(model, d);
  const auto curve = true_local_variogram_curve(spec, 1, d, d.locations());
  std::vector<double> sq;
  for (int r = 0; r < 2000; ++r) {
    const double z = standardize(sim.draw(spec, 40 + r), curve).values[100];
    sq.push_back(z * z);
  }
  const double m = mean(sq);
  double ss = 0.0;
  for (double x : sq) ss += (x - m) * (x - m);
  const double se = std::sqrt(ss / (sq.size() - 1) / sq.size());
  EXPECT_NEAR(m, 1.0 / (1.0 - std::exp(-d.spacing() / 0.1)), 4 * se);
}

TEST(Standardize, Errors) {
  const auto p = simulate_process(spec_of(FunctionSpec::constant(1.0), CorrelationModel::independent()), GridDesign(50), 1);
  auto c = constant_curve(p.design, 1.0);
  c.values[3] = 0.0;
  EXPECT_THROW(standardize(p, c), NumericError);
  auto v = constant_curve(p.design, 1.0);
  v.kind = CurveKind::variance;
  EXPECT_THROW(standardize(p, v), ParameterError);
  EstimateCurve short_curve;
  short_curve.eval_points = linspace01(10);
  short_curve.values.assign(10, 1.0);
  EXPECT_THROW(standardize(p, short_curve), ParameterError);
}

TEST(Standardize, FlooredPointsMasked) {
  const auto p = simulate_process(spec_of(FunctionSpec::constant(1.0), CorrelationModel::independent()), GridDesign(50), 1);
  auto c = constant_curve(p.design, 1.0);
  c.values[7] = 1e-8;
  c.metadata.floored_count = 1;
  c.metadata.floor_value = 1e-8;
  const auto z = standardize(p, c);
  EXPECT_FALSE(z.usable[7]);
  EXPECT_EQ(z.usable_count(), 49u);
}

TEST(FitTheta, InjectedAutocorrelationRecovered) {
  const double spacing = 1.0 / 999.0;
  std::vector<double> acf;
  for (int k = 1; k <= 10; ++k) acf.push_back(std::exp(-k * spacing / 0.05));
  const auto f = fit_exponential_acf(acf, spacing);
  EXPECT_NEAR(f.theta, 0.05, 1e-6);
  EXPECT_LT(f.rss, 1e-20);
  EXPECT_FALSE(f.at_floor);
}

TEST(FitTheta, ZeroMeanAutocorrelation) {
  const std::vector<double> z{1.0, -1.0, 2.0, 0.5};
  const auto r = zero_mean_autocorrelation(z, 2);
  const double c0 = (1 + 1 + 4 + 0.25) / 4.0;
  EXPECT_NEAR(r[0], ((-1.0) + (-2.0) + 1.0) / 3.0 / c0, 1e-15);
  EXPECT_NEAR(r[1], (2.0 - 0.5) / 2.0 / c0, 1e-15);
  EXPECT_THROW(zero_mean_autocorrelation(std::vector<double>(5, 0.0), 1), NumericError);
}

TEST(FitTheta, RecoversThetaFromStationaryNoise) {
  const auto model = CorrelationModel::exponential(0.1);
  const GridDesign d(1000, GridConvention::endpoint);
  const ProcessSimulator sim(model, d);
  const auto spec = spec_of(FunctionSpec::constant(1.0), model);
  const auto unit = constant_curve(d, 1.0);
  std::vector<double> th;
  for (int r = 0; r < 200; ++r) {
    const auto f = fit_exponential_theta(standardize(sim.draw(spec, 900 + r), unit));
    th.push_back(f.theta);
    EXPECT_GT(f.theta, 0.0);
    EXPECT_GT(f.sigma2_star, 0.0);
  }
  const double med = median(th);
  EXPECT_GE(med, 0.07);
  EXPECT_LE(med, 0.13);
}

TEST(FitTheta, WhiteNoiseFlaggedDegenerate) {
  const auto model = CorrelationModel::independent();
  const GridDesign d(500, GridConvention::endpoint);
  const auto spec = spec_of(FunctionSpec::constant(1.0), model);
  const auto unit = constant_curve(d, 1.0);
  int degenerate = 0;
  for (int r = 0; r < 200; ++r) {
    const auto f = fit_exponential_theta(standardize(simulate_process(spec, d, 7000 + r), unit));
    if (f.degenerate) {
      ++degenerate;
      EXPECT_DOUBLE_EQ(f.theta, d.spacing() / 10.0);
      EXPECT_DOUBLE_EQ(f.sigma2_star, f.zstar_variance);
    }
  }
  EXPECT_GE(degenerate, 100);
}

TEST(FitTheta, Preconditions) {
  const auto p = simulate_process(spec_of(FunctionSpec::constant(1.0), CorrelationModel::independent()), GridDesign(35), 1);
  const auto z = standardize(p, constant_curve(p.design, 1.0));
  EXPECT_THROW(fit_exponential_theta(z, 10), ParameterError);
  EXPECT_THROW(fit_exponential_theta(z, 0), ParameterError);
  EXPECT_NO_THROW(fit_exponential_theta(z, 5));
}

TEST(Plugin, RoundTripWithTrueParameters) {
  const GridDesign d(200, GridConvention::endpoint);
  const auto eval = evaluation_grid();
  for (auto sd : {FunctionSpec::sine(), FunctionSpec::step(), FunctionSpec::constant(2.0)}) {
    for (auto m : {CorrelationModel::exponential(0.1), CorrelationModel::exponential(0.01), CorrelationModel::independent()}) {
      for (int h : {1, 2}) {
        const auto spec = spec_of(sd, m);
        const auto lv = true_local_variogram_curve(spec, h, d, eval);
        const auto var = plugin_variance(lv, CorrelationFit::known(m, d.spacing()), h, d);
        EXPECT_EQ(var.kind, CurveKind::variance);
        for (std::size_t k = 0; k < eval.size(); ++k) {
          const double s2 = sd(eval[k]) * sd(eval[k]);
          EXPECT_NEAR(var.values[k], s2, 1e-12 * s2);
        }
      }
    }
  }
}

TEST(Plugin, DegenerateFitMultipliesBySigmaStar) {
  const GridDesign d(100);
  auto lv = constant_curve(d, 0.7);
  CorrelationFit f;
  f.degenerate = true;
  f.theta = d.spacing() / 10.0;
  f.sigma2_star = 1.3;
  const auto v = plugin_variance(lv, f, 1, d);
  for (double x : v.values) EXPECT_DOUBLE_EQ(x, 0.7 * 1.3);
  EXPECT_TRUE(v.metadata.degenerate_fit);
  EXPECT_FALSE(v.metadata.theta_hat.has_value());
}

TEST(Plugin, TinyDenominatorRejected) {
  const GridDesign d(100);
  CorrelationFit f;
  f.theta = 1e6;
  EXPECT_THROW(plugin_variance(constant_curve(d, 1.0), f, 1, d), NumericError);
}

TEST(Evaluate, ExactTruth) {
  const auto eval = evaluation_grid();
  ASSERT_EQ(eval.size(), 100u);
  EXPECT_EQ(eval.front(), 0.0);
  EXPECT_EQ(eval.back(), 1.0);
  for (auto sd : {FunctionSpec::sine(), FunctionSpec::step()}) {
    std::vector<double> v;
    for (double s : eval) v.push_back(sd(s) * sd(s));
    const auto r = evaluate(variance_curve(v), sd);
    EXPECT_NEAR(r.dmse, 0.0, 1e-28);
    EXPECT_NEAR(r.max, 0.0, 1e-14);
  }
}

TEST(Evaluate, ConstantSdOffset) {
  const auto eval = evaluation_grid();
  for (auto sd : {FunctionSpec::sine(), FunctionSpec::step()}) {
    std::vector<double> v;
    double expected_max = 0.0;
    for (double s : eval) {
      v.push_back(std::pow(sd(s) + 0.1, 2));
      expected_max = std::max(expected_max, std::abs(std::pow(sd(s) + 0.1, 2) - sd(s) * sd(s)));
    }
    const auto r = evaluate(variance_curve(v), sd);
    EXPECT_NEAR(r.dmse, 0.01, 1e-14);
    EXPECT_NEAR(r.max, expected_max, 1e-13);
    EXPECT_NEAR(r.max_sd, 0.1, 1e-13);
  }
}

TEST(Evaluate, ReportConsistency) {
  const auto p = simulate_process(spec_of(FunctionSpec::sine(), CorrelationModel::exponential(0.1)),
                                  GridDesign(200, GridConvention::endpoint), 31);
  const auto r = estimate_variance(p, harness_kernel(), CandidateGrid::log_spaced(p.design.spacing()));
  const auto e = evaluate(r.variance, FunctionSpec::sine());
  double mean_abs = 0.0;
  for (std::size_t i = 0; i < e.variance_errors.size(); ++i) {
    EXPECT_GE(e.max, std::abs(e.variance_errors[i]));
    EXPECT_GE(e.max_sd, std::abs(e.sd_errors[i]));
    mean_abs += std::abs(e.variance_errors[i]) / e.variance_errors.size();
  }
  EXPECT_GE(e.max, mean_abs);
  EXPECT_GE(e.dmse, 0.0);
  EXPECT_LE(e.dmse, e.max_sd * e.max_sd);
  EXPECT_THROW(evaluate(r.grid_variogram, FunctionSpec::sine()), ParameterError);
}

TEST(Oracle, NoiselessTruthPicksLargestCandidate) {
  // Alternating +-a gives squared pseudo-residuals equal to the true local
  // variogram of a constant-sd process, so every bandwidth is exact.
  const auto model = CorrelationModel::exponential(0.1);
  const GridDesign d(100, GridConvention::endpoint);
  const double c = 1.7;
  const double a = c * std::sqrt((1.0 - model(d.spacing())) / 2.0);
  std::vector<double> z(d.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = i % 2 ? -a : a;
  const GridProcess p{d, z, spec_of(FunctionSpec::constant(c), model), 0, 0.0};
  const auto grid = CandidateGrid::log_spaced(d.spacing());
  const auto r = oracle_bandwidth(p, harness_kernel(), grid, FunctionSpec::constant(c),
                                  CorrelationFit::known(model, d.spacing()));
  EXPECT_EQ(r.bandwidth, grid.values().back());
  for (const auto& s : r.scores) EXPECT_LT(s.score, 1e-20);
}

TEST(Oracle, AttainsMinimumDmse) {
  const auto model = CorrelationModel::exponential(0.1);
  const auto p = simulate_process(spec_of(FunctionSpec::sine(), model), GridDesign(100, GridConvention::endpoint), 12);
  const auto grid = CandidateGrid::log_spaced(p.design.spacing());
  const auto r = oracle_bandwidth(p, harness_kernel(), grid, FunctionSpec::sine(), CorrelationFit::known(model, p.design.spacing()));
  for (const auto& s : r.scores) {
    if (s.bandwidth == r.bandwidth) {
      for (const auto& t : r.scores) EXPECT_LE(s.score, t.score);
    }
  }
}

namespace {

double mean_oracle_bandwidth(FunctionSpec sd, CorrelationModel model, std::size_t n) {
  const GridDesign d(n, GridConvention::endpoint);
  const ProcessSimulator sim(model, d);
  const auto spec = spec_of(sd, model);
  const auto grid = CandidateGrid::log_spaced(d.spacing());
  const auto known = CorrelationFit::known(model, d.spacing());
  double sum = 0.0;
  for (int r = 0; r < 100; ++r) sum += oracle_bandwidth(sim.draw(spec, 1 + r), harness_kernel(), grid, sd, known).bandwidth;
  return sum / 100.0;
}

}  // namespace

TEST(Oracle, ReferenceMeanBandwidthSineTheta01) {
  EXPECT_NEAR(mean_oracle_bandwidth(FunctionSpec::sine(), CorrelationModel::exponential(0.1), 100), 0.203, 0.05);
}

TEST(Oracle, ReferenceMeanBandwidthStepIndependent) {
  EXPECT_NEAR(mean_oracle_bandwidth(FunctionSpec::step(), CorrelationModel::independent(), 100), 0.229, 0.06);
}

TEST(Oracle, ReferenceMedianMaxSineTheta01) {
  const auto model = CorrelationModel::exponential(0.1);
  const GridDesign d(500, GridConvention::endpoint);
  const ProcessSimulator sim(model, d);
  const auto spec = spec_of(FunctionSpec::sine(), model);
  const auto grid = CandidateGrid::log_spaced(d.spacing());
  const auto known = CorrelationFit::known(model, d.spacing());
  const auto eval = evaluation_grid();
  std::vector<double> maxes;
  for (int r = 0; r < 100; ++r) {
    const auto p = sim.draw(spec, 1 + r);
    const double lambda = oracle_bandwidth(p, harness_kernel(), grid, spec.sd, known).bandwidth;
    const auto lv = estimate_local_variogram(pseudo_residuals(p), harness_kernel(), lambda, eval);
    maxes.push_back(evaluate(plugin_variance(lv, known, 1, d), spec.sd).max);
  }
  EXPECT_LT(median(maxes), 1.5);
}

TEST(Pipeline, ScaleEquivariance) {
  const auto model = CorrelationModel::exponential(0.1);
  const GridDesign d(200, GridConvention::endpoint);
  const auto grid = CandidateGrid::log_spaced(d.spacing());
  for (std::uint64_t seed : {3u, 4u}) {
    for (double c : {0.2, 5.0}) {
      const auto a = estimate_variance(simulate_process(spec_of(FunctionSpec::sine(), model), d, seed), harness_kernel(), grid);
      const auto b = estimate_variance(simulate_process(spec_of(FunctionSpec::sine().scaled(c), model), d, seed),
                                       harness_kernel(), grid);
      EXPECT_EQ(a.selection.bandwidth, b.selection.bandwidth);
      EXPECT_NEAR(a.fit.theta, b.fit.theta, 1e-8 * a.fit.theta);
      for (std::size_t k = 0; k < a.variance.values.size(); ++k) {
        EXPECT_NEAR(b.variance.values[k], c * c * a.variance.values[k], 1e-8 * c * c * a.variance.values[k]);
      }
    }
  }
}

TEST(Pipeline, ResultShape) {
  const auto p = simulate_process(spec_of(FunctionSpec::step(), CorrelationModel::exponential(0.01)),
                                  GridDesign(150, GridConvention::endpoint), 8);
  const auto r = estimate_variance(p, harness_kernel(), CandidateGrid::log_spaced(p.design.spacing()));
  EXPECT_EQ(r.variance.kind, CurveKind::variance);
  EXPECT_EQ(r.variance.values.size(), 100u);
  EXPECT_EQ(r.grid_variogram.values.size(), 150u);
  EXPECT_EQ(r.selection.scores.size(), 20u);
  EXPECT_EQ(r.variance.metadata.sigma2_star, r.fit.sigma2_star);
  for (double v : r.variance.values) EXPECT_GT(v, 0.0);
}

TEST(Pipeline, ReferenceMedianDmseSineTheta01N500) {
  const auto model = CorrelationModel::exponential(0.1);
  const GridDesign d(500, GridConvention::endpoint);
  const ProcessSimulator sim(model, d);
  const auto spec = spec_of(FunctionSpec::sine(), model);
  const auto grid = CandidateGrid::log_spaced(d.spacing());
  const auto w = whitening_transform(d.size() - 1, 0.01, d.size());
  std::vector<double> dmse;
  for (int r = 0; r < 100; ++r) {
    const auto res = estimate_variance(sim.draw(spec, 1 + r), harness_kernel(), grid, w);
    dmse.push_back(evaluate(res.variance, spec.sd).dmse);
  }
  EXPECT_LT(median(dmse), 0.5);
}
