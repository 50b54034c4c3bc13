#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include <boost/math/distributions/chi_squared.hpp>

#include "test_support.hpp"

using namespace bgw;
using bgw::testing::binary_model;
using bgw::testing::doubling_model;
using bgw::testing::shipped_model;

TEST(LawMoments, BinaryLaw) {
  const auto m = law_moments(OffspringLaw(1, {{{0}, 0.25}, {{2}, 0.75}}));
  EXPECT_DOUBLE_EQ(m.mean(0), 1.5);
  EXPECT_DOUBLE_EQ(m.cov(0, 0), 0.75);
}

TEST(LawMoments, PointMass) {
  const auto m = law_moments(OffspringLaw::point_mass({3, 1}));
  EXPECT_EQ(m.mean(0), 3);
  EXPECT_EQ(m.mean(1), 1);
  EXPECT_EQ(m.cov.norm(), 0.0);
}

TEST(LawMoments, ProductLaw) {
  // Own type uniform on {2,4}, other type uniform on {0,1}, independent.
  const OffspringLaw law(2, {{{2, 0}, 0.25}, {{2, 1}, 0.25}, {{4, 0}, 0.25}, {{4, 1}, 0.25}});
  const auto m = law_moments(law);
  EXPECT_DOUBLE_EQ(m.mean(0), 3.0);
  EXPECT_DOUBLE_EQ(m.mean(1), 0.5);
  EXPECT_DOUBLE_EQ(m.cov(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(m.cov(1, 1), 0.25);
  EXPECT_DOUBLE_EQ(m.cov(0, 1), 0.0);
}

TEST(OffspringLawValidation, RejectsBadLaws) {
  EXPECT_THROW(OffspringLaw(1, {}), ConfigError);
  EXPECT_THROW(OffspringLaw(1, {{{0}, 0.5}, {{2}, 0.4}}), ConfigError);
  EXPECT_THROW(OffspringLaw(1, {{{0}, 0.5}, {{0}, 0.5}}), ConfigError);
  EXPECT_THROW(OffspringLaw(1, {{{0}, 0.0}, {{1}, 1.0}}), ConfigError);
  EXPECT_THROW(OffspringLaw(2, {{{0}, 1.0}}), ConfigError);
  EXPECT_THROW(OffspringLaw(1, {{{1}, 0.5}, {{2}, 0.5 + 1e-9}}), ConfigError);
}

TEST(OffspringLawValidation, RenormalizesTinyDeviation) {
  const OffspringLaw law(1, {{{1}, 0.5}, {{2}, 0.5 + 5e-13}});
  double sum = 0.0;
  for (const auto& a : law.atoms()) sum += a.probability;
  EXPECT_NEAR(sum, 1.0, 1e-15);
}

TEST(ProcessModelBuild, FlagsAndMoments) {
  const auto m = shipped_model("lse_2d");
  EXPECT_DOUBLE_EQ(m.mean_matrix(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(m.mean_matrix(1, 0), 0.5);
  EXPECT_NEAR(m.cov_blocks[1](1, 1), 0.1, 1e-15);
  EXPECT_NEAR(m.cov_blocks[1](0, 0), 0.25, 1e-15);
  EXPECT_NEAR(m.cov_blocks[1](0, 1), 0.05, 1e-15);
  EXPECT_TRUE(m.primitive);
  EXPECT_TRUE(m.supercritical);
  EXPECT_TRUE(m.covariances_invertible);
  EXPECT_NEAR(m.perron->rho, 3.5, 1e-10);
  EXPECT_EQ(m.x0, (Counts{20, 0}));
  EXPECT_EQ(shipped_model("symmetric_rho2_2d").x0, (Counts{1, 1}));

  const auto d = doubling_model();
  EXPECT_TRUE(d.regular_supercritical());
  EXPECT_FALSE(d.covariances_invertible);

  const auto swap = shipped_model("type_swap_2d");
  EXPECT_FALSE(swap.primitive);
  EXPECT_FALSE(swap.perron.has_value());
  EXPECT_THROW(swap.perron_data(), NotPrimitiveError);
  EXPECT_NEAR(swap.spectral_radius(), 1.5, 1e-10);
}

TEST(ProcessModelBuild, SymmetricModel) {
  const auto m = shipped_model("symmetric_rho2_2d");
  EXPECT_DOUBLE_EQ(m.mean_matrix(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(m.mean_matrix(0, 1), 0.5);
  EXPECT_NEAR(m.perron->rho, 2.0, 1e-10);
  EXPECT_DOUBLE_EQ(m.cov_blocks[0](0, 0), 1.25);
  EXPECT_DOUBLE_EQ(m.cov_blocks[0](1, 1), 0.25);
  EXPECT_TRUE(m.covariances_invertible);
}

TEST(SimulateGeneration, ZeroParents) {
  Stream rng(1);
  const auto rec = simulate_generation(binary_model(), {0}, rng, ObservationLevel::Full);
  EXPECT_EQ(rec.x, Counts{0});
  EXPECT_EQ(rec.y, std::vector<Counts>{Counts{0}});
  EXPECT_TRUE(rec.detail[0].empty());
}

TEST(SimulateGeneration, PointMass) {
  Stream rng(1);
  const auto rec = simulate_generation(doubling_model(), {5}, rng, ObservationLevel::Totals);
  EXPECT_EQ(rec.y[0], Counts{10});
  EXPECT_EQ(rec.x, Counts{10});
}

TEST(SimulateGeneration, SingleParentFrequencies) {
  const auto m = binary_model();
  Stream rng(2024);
  const int n = 100000;
  int twos = 0;
  for (int i = 0; i < n; ++i) {
    const auto rec = simulate_generation(m, {1}, rng, ObservationLevel::Totals);
    ASSERT_TRUE(rec.x[0] == 0 || rec.x[0] == 2);
    twos += rec.x[0] == 2;
  }
  const double se = std::sqrt(0.75 * 0.25 / n);
  EXPECT_NEAR(static_cast<double>(twos) / n, 0.75, 3 * se);
}

TEST(SimulateGeneration, LevelsAndAdditivity) {
  const auto m = shipped_model("symmetric_rho2_2d");
  for (auto level : {ObservationLevel::Counts, ObservationLevel::Totals, ObservationLevel::Full}) {
    Stream rng(7);
    const Counts prev{37, 12};
    const auto rec = simulate_generation(m, prev, rng, level);
    if (level == ObservationLevel::Counts) {
      EXPECT_TRUE(rec.y.empty());
    } else {
      for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(rec.x[i], rec.y[0][i] + rec.y[1][i]);
    }
    if (level == ObservationLevel::Full) {
      for (std::size_t j = 0; j < 2; ++j) {
        ASSERT_EQ(rec.detail[j].size(), prev[j]);
        Counts sum(2, 0);
        for (const auto& xi : rec.detail[j])
          for (std::size_t i = 0; i < 2; ++i) sum[i] += xi[i];
        EXPECT_EQ(sum, rec.y[j]);
      }
    } else {
      EXPECT_TRUE(rec.detail.empty());
    }
  }
}

TEST(SimulateGeneration, Deterministic) {
  const auto m = shipped_model("symmetric_rho2_2d");
  Stream a(99), b(99);
  for (int i = 0; i < 20; ++i) {
    const auto ra = simulate_generation(m, {500, 300}, a, ObservationLevel::Totals);
    const auto rb = simulate_generation(m, {500, 300}, b, ObservationLevel::Totals);
    EXPECT_EQ(ra.x, rb.x);
    EXPECT_EQ(ra.y, rb.y);
  }
}

TEST(SimulateGeneration, BatchedDrawMatchesLawMoments) {
  // Above the per-parent limit the totals come from one multinomial draw;
  // the first two moments of Y must still be x * mean and x * variance.
  const auto m = binary_model();
  const Count parents = 5000;
  Stream rng(11);
  const int reps = 4000;
  double s = 0.0, s2 = 0.0;
  for (int r = 0; r < reps; ++r) {
    const double y = static_cast<double>(simulate_generation(m, {parents}, rng, ObservationLevel::Totals).x[0]);
    s += y;
    s2 += y * y;
  }
  const double mean = s / reps;
  const double var = s2 / reps - mean * mean;
  const double true_mean = 1.5 * parents, true_var = 0.75 * parents;
  EXPECT_NEAR(mean, true_mean, 4 * std::sqrt(true_var / reps));
  EXPECT_NEAR(var / true_var, 1.0, 0.1);
}

TEST(Binomial, MatchesExactLawSmallAndLarge) {
  Stream rng(5);
  // Chi-square goodness of fit against the exact pmf, n = 200 > splitting threshold.
  const std::uint64_t n = 200;
  const double p = 0.3;
  const int reps = 40000;
  std::map<std::uint64_t, int> hist;
  for (int r = 0; r < reps; ++r) ++hist[rng.binomial(n, p)];
  double chi = 0.0;
  int cells = 0;
  double tail_obs = 0.0, tail_exp = 0.0;
  for (std::uint64_t k = 0; k <= n; ++k) {
    const double logpmf = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                          static_cast<double>(k) * std::log(p) + static_cast<double>(n - k) * std::log1p(-p);
    const double expect = reps * std::exp(logpmf);
    const double obs = hist.count(k) ? hist[k] : 0;
    if (expect < 5.0) {
      tail_obs += obs;
      tail_exp += expect;
      continue;
    }
    chi += (obs - expect) * (obs - expect) / expect;
    ++cells;
  }
  chi += (tail_obs - tail_exp) * (tail_obs - tail_exp) / tail_exp;
  // cells + 1 bins, one constraint.
  EXPECT_LT(chi, boost::math::quantile(boost::math::chi_squared(cells), 0.999));

  double s = 0.0;
  const std::uint64_t big = 10'000'000'000ULL;
  for (int r = 0; r < 2000; ++r) s += static_cast<double>(rng.binomial(big, 0.25));
  EXPECT_NEAR(s / 2000 / big, 0.25, 1e-5);
  EXPECT_EQ(rng.binomial(1000, 0.0), 0u);
  EXPECT_EQ(rng.binomial(1000, 1.0), 1000u);
}

TEST(SimulateTrajectory, DoublingPath) {
  Stream rng(1);
  const auto t = simulate_trajectory(doubling_model(), 5, Caps{}, rng, ObservationLevel::Totals);
  ASSERT_EQ(t.horizon(), 5u);
  for (std::size_t n = 0; n <= 5; ++n) EXPECT_EQ(t.generations[n].x[0], Count{1} << n);
  EXPECT_EQ(t.status_string(), "alive");
}

TEST(SimulateTrajectory, ImmediateExtinction) {
  const auto m = ProcessModel::build("sterile", {OffspringLaw::point_mass({0})});
  Stream rng(1);
  const auto t = simulate_trajectory(m, 10, Caps{}, rng, ObservationLevel::Totals);
  EXPECT_EQ(t.status_string(), "extinct-at-1");
  EXPECT_EQ(t.horizon(), 1u);
  EXPECT_FALSE(t.surviving());
}

TEST(SimulateTrajectory, CapsAreStatusesNotErrors) {
  Stream rng(1);
  Caps caps;
  caps.max_total_population = 20;
  const auto t = simulate_trajectory(doubling_model(), 10, caps, rng, ObservationLevel::Totals);
  EXPECT_EQ(t.status_string(), "capped-at-5");  // X_5 = 32 > 20
  EXPECT_TRUE(t.surviving());
  Caps gen;
  gen.max_generation = 3;
  Stream rng2(1);
  const auto u = simulate_trajectory(doubling_model(), 10, gen, rng2, ObservationLevel::Totals);
  EXPECT_EQ(u.status_string(), "capped-at-3");
  EXPECT_EQ(u.horizon(), 3u);
}

TEST(SimulateTrajectory, InvariantsHold) {
  const auto m = shipped_model("symmetric_rho2_2d");
  Stream root(3);
  for (int s = 0; s < 200; ++s) {
    Stream rng = root.child(s);
    const auto t = simulate_trajectory(m, 12, Caps{}, rng, ObservationLevel::Full);
    for (std::size_t n = 1; n < t.generations.size(); ++n) {
      const auto& g = t.generations[n];
      for (std::size_t i = 0; i < 2; ++i) ASSERT_EQ(g.x[i], g.y[0][i] + g.y[1][i]);
      for (std::size_t j = 0; j < 2; ++j) ASSERT_EQ(g.detail[j].size(), t.generations[n - 1].x[j]);
    }
    for (std::size_t n = 0; n + 1 < t.generations.size(); ++n) ASSERT_GT(total(t.generations[n].x), 0u);
  }
}

TEST(SimulateTrajectory, ExtinctionFraction) {
  const auto m = binary_model();
  Stream root(20240601);
  int extinct = 0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) {
    Stream rng = root.child(s);
    extinct += !simulate_trajectory(m, 20, Caps{}, rng, ObservationLevel::Counts).surviving();
  }
  EXPECT_NEAR(static_cast<double>(extinct) / n, 1.0 / 3.0, 0.02);
}

TEST(ExtinctionProbability, Examples) {
  EXPECT_NEAR(extinction_probability(binary_model())(0), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(extinction_probability(shipped_model("lse_2d")), Vector::Zero(2));
  const auto sub = ProcessModel::build("sub", {OffspringLaw(1, {{{0}, 0.5}, {{1}, 0.5}})});
  EXPECT_EQ(extinction_probability(sub), Vector::Ones(1));
}

TEST(ExtinctionProbability, MonotoneIteratesAndFixedPoint) {
  const auto m = shipped_model("symmetric_rho2_2d");
  Vector prev = Vector::Zero(2);
  bool monotone = true;
  const Vector q = extinction_probability(m, 1e-14, [&](const Vector& it) {
    monotone = monotone && (it.array() >= prev.array()).all();
    prev = it;
  });
  EXPECT_TRUE(monotone);
  // q is a fixed point of the generating functions.
  for (std::size_t j = 0; j < 2; ++j) {
    double f = 0.0;
    for (const auto& a : m.laws[j].atoms())
      f += a.probability * std::pow(q(0), static_cast<double>(a.offspring[0])) *
           std::pow(q(1), static_cast<double>(a.offspring[1]));
    EXPECT_NEAR(f, q(static_cast<Eigen::Index>(j)), 1e-12);
  }
  EXPECT_GT(q.minCoeff(), 0.0);
  EXPECT_LT(q.maxCoeff(), 1.0);
}

TEST(GrowthDiagnostics, DoublingAndExtinct) {
  Stream rng(1);
  const auto m = doubling_model();
  const auto t = simulate_trajectory(m, 8, Caps{}, rng, ObservationLevel::Counts);
  for (double w : growth_diagnostics(t, *m.perron)) EXPECT_DOUBLE_EQ(w, 1.0);

  const auto b = binary_model();
  Stream root(4);
  for (int s = 0;; ++s) {
    Stream r = root.child(s);
    const auto e = simulate_trajectory(b, 30, Caps{}, r, ObservationLevel::Counts);
    if (e.surviving()) continue;
    EXPECT_EQ(growth_diagnostics(e, *b.perron).back(), 0.0);
    break;
  }
}

TEST(GrowthDiagnostics, StabilizesOnSurvivingPaths) {
  const auto m = shipped_model("symmetric_rho2_2d");
  const auto paths = bgw::testing::surviving_paths(m, 12, 500, 77, ObservationLevel::Counts);
  std::vector<double> rel;
  for (const auto& t : paths) {
    const auto w = growth_diagnostics(t, *m.perron);
    double mean = 0.0;
    for (std::size_t n = 8; n <= 12; ++n) mean += w[n] / 5.0;
    double var = 0.0;
    for (std::size_t n = 8; n <= 12; ++n) var += (w[n] - mean) * (w[n] - mean) / 4.0;
    rel.push_back(std::sqrt(var) / mean);
  }
  std::sort(rel.begin(), rel.end());
  EXPECT_LT(rel[rel.size() / 2], 0.10);
}

TEST(MomentFidelity, SampleMeanWithinFourStandardErrors) {
  const auto m = shipped_model("symmetric_rho2_2d");
  const int runs = 200;
  const Count n = 2000;
  int good = 0;
  Stream root(8);
  for (int r = 0; r < runs; ++r) {
    Stream rng = root.child(r);
    for (std::size_t j = 0; j < 2; ++j) {
      Vector sum = Vector::Zero(2);
      for (Count k = 0; k < n; ++k) {
        Counts prev(2, 0);
        prev[j] = 1;
        sum += to_vector(simulate_generation(m, prev, rng, ObservationLevel::Counts).x);
      }
      const Vector err = sum / static_cast<double>(n) - m.mean_matrix.col(static_cast<Eigen::Index>(j));
      good += err.norm() <= 4.0 * std::sqrt(m.cov_blocks[j].trace() / static_cast<double>(n));
    }
  }
  EXPECT_GE(good, static_cast<int>(0.99 * 2 * runs));
}
