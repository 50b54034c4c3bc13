#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_support.hpp"

using namespace bgw;
using bgw::testing::binary_model;
using bgw::testing::doubling_model;
using bgw::testing::shipped_model;

namespace {

ExperimentPlan plan_for(const ProcessModel& m, std::size_t horizon, std::size_t reps, std::uint64_t seed) {
  ExperimentPlan p;
  p.model = m;
  p.horizon = horizon;
  p.replications = reps;
  p.master_seed = seed;
  return p;
}

void expect_same_runs(const EnsembleSummary& a, const EnsembleSummary& b) {
  ASSERT_EQ(a.runs.size(), b.runs.size());
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    const auto& x = a.runs[i];
    const auto& y = b.runs[i];
    EXPECT_EQ(x.index, y.index);
    EXPECT_EQ(x.seed, y.seed);
    EXPECT_EQ(x.status, y.status);
    EXPECT_EQ(x.estimated, y.estimated);
    if (!x.estimated) continue;
    EXPECT_EQ(x.mle, y.mle);
    EXPECT_EQ(x.emp, y.emp);
    EXPECT_EQ(std::isnan(x.chi_emp) ? 0.0 : x.chi_emp, std::isnan(y.chi_emp) ? 0.0 : y.chi_emp);
  }
}

} // namespace

TEST(Ensemble, SingleReplicationOfPointMass) {
  auto p = plan_for(doubling_model(), 5, 1, 42);
  const auto s = run_ensemble(p);
  ASSERT_EQ(s.runs.size(), 1u);
  const auto& r = s.runs.front();
  EXPECT_TRUE(r.estimated);
  EXPECT_EQ(r.err_mle, 0.0);
  EXPECT_EQ(r.err_emp, 0.0);
  EXPECT_EQ(r.mle(0, 0), 2.0);
  EXPECT_TRUE(std::isnan(r.chi_emp));
  EXPECT_TRUE(std::isnan(r.trace_emp));
  EXPECT_EQ(s.survival_fraction, 1.0);
}

TEST(Ensemble, DeterministicAndThreadInvariant) {
  auto p = plan_for(shipped_model("symmetric_rho2_2d"), 8, 60, 7);
  p.hypothesis = truth_hypothesis(p.model);
  const auto a = run_ensemble(p);
  const auto b = run_ensemble(p);
  p.threads = 3;
  const auto c = run_ensemble(p);
  expect_same_runs(a, b);
  expect_same_runs(a, c);
  EXPECT_EQ(a.errors.at("mle").mean, c.errors.at("mle").mean);
  EXPECT_EQ(a.chi_emp.ks, c.chi_emp.ks);
  EXPECT_EQ(a.coverage->inside, c.coverage->inside);
}

TEST(Ensemble, SurvivorTargetIsThreadInvariant) {
  auto p = plan_for(binary_model(), 10, 100000, 8);
  p.survivor_target = 150;
  const auto a = run_ensemble(p);
  p.threads = 4;
  const auto b = run_ensemble(p);
  expect_same_runs(a, b);
  EXPECT_EQ(a.surviving, 150u);
  EXPECT_TRUE(a.runs.back().surviving());
  for (std::size_t i = 0; i < a.runs.size(); ++i) EXPECT_EQ(a.runs[i].index, i);
}

TEST(Summarize, IndependentOfRunOrder) {
  auto p = plan_for(shipped_model("symmetric_rho2_2d"), 8, 80, 9);
  p.hypothesis = truth_hypothesis(p.model);
  const auto s = run_ensemble(p);
  auto shuffled = s.runs;
  std::mt19937 g(1);
  std::shuffle(shuffled.begin(), shuffled.end(), g);
  const auto t = summarize(p, shuffled);
  EXPECT_EQ(s.errors.at("mle").mean, t.errors.at("mle").mean);
  EXPECT_EQ(s.errors.at("empirical").variance, t.errors.at("empirical").variance);
  EXPECT_EQ(s.chi_qsl.mean, t.chi_qsl.mean);
  EXPECT_EQ(s.trace_variance_ratio, t.trace_variance_ratio);
  EXPECT_EQ(s.qsl_series_mle, t.qsl_series_mle);
  EXPECT_EQ(s.coverage->inside, t.coverage->inside);
  for (std::size_t i = 0; i < t.runs.size(); ++i) EXPECT_EQ(t.runs[i].index, i);
}

TEST(Ensemble, SurvivalFractionOfBinaryLaw) {
  auto p = plan_for(binary_model(), 20, 3000, 10);
  p.condition_on_survival = false;
  p.caps.max_total_population = 1u << 20;
  const auto s = run_ensemble(p);
  EXPECT_NEAR(s.survival_fraction, 2.0 / 3.0, 0.03);
  EXPECT_LE(s.survival_ci.lo, s.survival_fraction);
  EXPECT_GE(s.survival_ci.hi, s.survival_fraction);
  EXPECT_EQ(s.surviving + s.extinct, s.replications);
}

TEST(Ensemble, ConditioningRestrictsToSurvivors) {
  auto p = plan_for(binary_model(), 10, 400, 11);
  const auto cond = run_ensemble(p);
  std::size_t estimated = 0;
  for (const auto& r : cond.runs) {
    if (r.estimated) ++estimated;
    EXPECT_EQ(r.estimated, r.surviving());
  }
  EXPECT_EQ(estimated, cond.surviving);
  p.condition_on_survival = false;
  const auto all = run_ensemble(p);
  std::size_t estimated_all = 0;
  for (const auto& r : all.runs) estimated_all += r.estimated;
  EXPECT_GT(estimated_all, estimated);
}

TEST(Ensemble, MleErrorShrinksGeometrically) {
  // Median error scales like rho^{-n/2}.
  std::vector<double> med;
  for (std::size_t n : {8u, 10u, 12u}) {
    auto p = plan_for(binary_model(), n, 100000, 12);
    p.survivor_target = 2000;
    med.push_back(run_ensemble(p).errors.at("mle").median);
  }
  EXPECT_GT(med[0], med[1]);
  EXPECT_GT(med[1], med[2]);
  const double slope = (std::log(med[2]) - std::log(med[0])) / 4.0;
  EXPECT_NEAR(slope, -0.5 * std::log(1.5), 0.05);
}

TEST(QslSeries, DegenerateCovarianceThrows) {
  Stream rng(1);
  const auto t = simulate_trajectory(doubling_model(), 5, Caps{}, rng, ObservationLevel::Totals);
  EXPECT_THROW(qsl_series(mean_path(t), doubling_model(), CovarianceChoice::Qsl), SingularBlockError);
}

TEST(QslSeries, MatchesDirectSumOnOneType) {
  const auto m = binary_model();
  const auto t = bgw::testing::surviving_paths(m, 10, 1, 13).front();
  const auto s = qsl_series(mean_path(t), m, CovarianceChoice::Qsl);
  double acc = 0.0, cum_x = 0.0, cum_y = 0.0;
  for (std::size_t k = 1; k <= 10; ++k) {
    cum_x += static_cast<double>(t.generations[k - 1].x[0]);
    cum_y += static_cast<double>(t.generations[k].x[0]);
    const double dev = cum_y / cum_x - 1.5;
    acc += cum_x * dev * dev / 0.75;
    EXPECT_NEAR(s[k - 1], acc / static_cast<double>(k), 1e-10);
  }
}

TEST(QslSeries, TerminalValueNearDimensionSquared) {
  auto p = plan_for(shipped_model("symmetric_rho2_2d"), 12, 100000, 14);
  p.survivor_target = 1000;
  const auto s = run_ensemble(p);
  EXPECT_NEAR(s.qsl_terminal_mle.median, 4.0, 1.0);
  EXPECT_NEAR(s.qsl_terminal_emp.median, 4.0, 1.0);
  EXPECT_EQ(s.qsl_series_mle.size(), 12u);
}

TEST(QslSeries, VarianceRatioReflectsEfficiency) {
  auto p = plan_for(binary_model(), 15, 100000, 15);
  p.survivor_target = 2000;
  const auto s = run_ensemble(p);
  EXPECT_DOUBLE_EQ(s.efficiency, 5.0);
  EXPECT_GE(s.qsl_variance_ratio, 3.0);
  EXPECT_LE(s.qsl_variance_ratio, 8.0);
  EXPECT_DOUBLE_EQ(s.lil_constant_emp, 2.0);
  EXPECT_DOUBLE_EQ(s.lil_constant_mle, 2.0 * std::sqrt(5.0));
}

TEST(Lil, ScaledFluctuationByHand) {
  const std::vector<double> series = {10.0, 10.0, 2.0, 1.5, 1.0};
  const double expected = std::max({std::sqrt(3.0 / std::log(std::log(3.0))) * 1.0,
                                    std::sqrt(4.0 / std::log(std::log(4.0))) * 0.5, 0.0});
  EXPECT_DOUBLE_EQ(lil_scaled_fluctuation(series, 1.0), expected);
}

TEST(Asclt, SkippedForDegenerateLaw) {
  Stream rng(1);
  const auto t = simulate_trajectory(doubling_model(), 5, Caps{}, rng, ObservationLevel::Totals);
  EXPECT_TRUE(asclt_check(mean_path(t), doubling_model()).skipped);
}

TEST(Asclt, WeightsSumToOneOnSlowGrowth) {
  const auto m = shipped_model("slow_1d");
  const auto t = bgw::testing::surviving_paths(m, 60, 1, 16).front();
  const auto a = asclt_check(mean_path(t), m);
  EXPECT_FALSE(a.skipped);
  EXPECT_EQ(a.points, 60u);
  EXPECT_NEAR(a.weight_sum, 1.0, 1e-12);
  EXPECT_GE(a.ks, 0.0);
  EXPECT_LE(a.ks, 1.0);
}

TEST(Ks, HandComputedDistances) {
  auto uniform = [](double x) { return std::clamp(x, 0.0, 1.0); };
  EXPECT_DOUBLE_EQ(ks_distance(std::vector<double>{0.5}, uniform), 0.5);
  EXPECT_DOUBLE_EQ(ks_distance(std::vector<double>{0.25, 0.75}, uniform), 0.25);
  EXPECT_DOUBLE_EQ(ks_distance({{0.1, 0.9}, {0.9, 0.1}}, uniform), 0.8);
}

TEST(Coverage, NearlyCertainLevelsCoverTheTruth) {
  auto p = plan_for(shipped_model("symmetric_rho2_2d"), 10, 100000, 17);
  p.survivor_target = 200;
  p.hypothesis = truth_hypothesis(p.model);
  p.levels = {1e-9, 1e-9};
  const auto c = coverage_experiment(p);
  EXPECT_EQ(c.total, 200u);
  EXPECT_GE(c.rate, 0.97);
}

TEST(Coverage, ShiftedMeansAreRejected) {
  auto p = plan_for(shipped_model("symmetric_rho2_2d"), 12, 100000, 18);
  p.survivor_target = 300;
  auto h = truth_hypothesis(p.model);
  h.means.array() += 1.0;
  p.hypothesis = h;
  p.levels = split_joint_level(0.95);
  const auto c = coverage_experiment(p);
  EXPECT_LT(c.rate, 0.05);
}

TEST(ClopperPearson, ClosedFormsAtTheEdges) {
  const double a = 0.05;
  for (std::size_t n : {1u, 5u, 40u}) {
    const auto zero = clopper_pearson(0, n);
    EXPECT_EQ(zero.lo, 0.0);
    EXPECT_NEAR(zero.hi, 1.0 - std::pow(a / 2, 1.0 / static_cast<double>(n)), 1e-12);
    const auto all = clopper_pearson(n, n);
    EXPECT_EQ(all.hi, 1.0);
    EXPECT_NEAR(all.lo, std::pow(a / 2, 1.0 / static_cast<double>(n)), 1e-12);
  }
  const auto mid = clopper_pearson(5, 10);
  EXPECT_NEAR(mid.lo, 1.0 - mid.hi, 1e-12);
  // Single trial with one success: lower bound solves p = alpha / 2.
  EXPECT_NEAR(clopper_pearson(1, 1).lo, 0.025, 1e-12);
}

TEST(SampleStats, TypeSevenQuantilesAndMoments) {
  const auto s = sample_stats({4.0, 1.0, 3.0, 2.0, kNaN});
  EXPECT_EQ(s.count, 4u);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.variance, 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.q05, 1.15);
  EXPECT_DOUBLE_EQ(s.q95, 3.85);
  EXPECT_DOUBLE_EQ(s.skewness, 0.0);
}

TEST(Plan, ValidationErrors) {
  auto p = plan_for(binary_model(), 1, 10, 1);
  EXPECT_THROW(validate_plan(p), ConfigError);
  p.horizon = 5;
  p.replications = 0;
  EXPECT_THROW(validate_plan(p), ConfigError);
  p.replications = 10;
  EXPECT_NO_THROW(validate_plan(p));

  p.model = shipped_model("type_swap_2d");
  EXPECT_THROW(validate_plan(p), NotPrimitiveError);
  p.model = ProcessModel::build("sub", {OffspringLaw(1, {{{0}, 0.5}, {{1}, 0.5}})});
  EXPECT_THROW(validate_plan(p), AssumptionError);

  p.model = shipped_model("lse_2d");
  p.level = ObservationLevel::Counts;
  EXPECT_THROW(validate_plan(p), ConfigError);
  p.estimators = {false, false, true};
  EXPECT_NO_THROW(validate_plan(p));

  p.level = ObservationLevel::Totals;
  p.hypothesis = truth_hypothesis(binary_model());
  EXPECT_THROW(validate_plan(p), ConfigError);
}

TEST(Ensemble, CountsLevelLeastSquares) {
  auto p = plan_for(shipped_model("lse_2d"), 8, 50, 19);
  p.level = ObservationLevel::Counts;
  p.estimators = {false, false, true};
  const auto s = run_ensemble(p);
  EXPECT_EQ(s.errors.count("mle"), 0u);
  EXPECT_LT(s.max_lse_closed_form_gap, 1e-8);
  EXPECT_LT(s.errors.at("lse").mean, 0.15);
}

TEST(Coverage, BinaryLawAtTheTruth) {
  auto p = plan_for(binary_model(), 20, 100000, 21);
  p.survivor_target = 1000;
  p.hypothesis = truth_hypothesis(p.model);
  p.levels = split_joint_level(0.95);
  const auto c = coverage_experiment(p);
  EXPECT_EQ(c.total, 1000u);
  EXPECT_GE(c.rate, 0.90);
}
