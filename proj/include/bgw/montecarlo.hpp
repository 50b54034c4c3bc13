#pragma once

// Seeded replication harness. Every replication owns the stream derived from
// (master seed, index); results are stored by index and all aggregates are
// computed from sorted copies, so a summary does not depend on the order in
// which replications finished.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "bgw/blockmat.hpp"
#include "bgw/error.hpp"
#include "bgw/estimators.hpp"
#include "bgw/inference.hpp"
#include "bgw/process.hpp"
#include "bgw/rng.hpp"

namespace bgw {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Path diagnostics

/// s_k = (1/k) sum_{m<=k} || K^{-1/2} N_m^{1/2} (est_m - A) ||^2 with the true
/// K and A, where (N, est) is (S_{m-1}, MLE) or (X_{m-1}, empirical).
inline std::vector<double> qsl_series(const MeanPath& path, const ProcessModel& model, CovarianceChoice choice) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  std::vector<Matrix> roots;
  for (const auto& k : model.cov_blocks) roots.push_back(sym_inv_sqrt(k));
  const auto& est = choice == CovarianceChoice::Qsl ? path.mle : path.emp;
  const auto& weights = choice == CovarianceChoice::Qsl ? path.s_prev : path.x_prev;
  std::vector<double> out;
  out.reserve(path.horizon());
  double acc = 0.0;
  for (std::size_t m = 0; m < path.horizon(); ++m) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const double w = weights[m](j);
      if (w <= 0.0) continue;
      acc += w * (roots[static_cast<std::size_t>(j)] * (est[m].col(j) - model.mean_matrix.col(j))).squaredNorm();
    }
    out.push_back(acc / static_cast<double>(m + 1));
  }
  return out;
}

/// max over k >= 3 of sqrt(k / ln ln k) |s_k - d^2|; reported next to the
/// almost-sure limsup constant, never gated.
inline double lil_scaled_fluctuation(const std::vector<double>& series, double d2) {
  double best = 0.0;
  for (std::size_t k = 3; k <= series.size(); ++k) {
    const double kk = static_cast<double>(k);
    best = std::max(best, std::sqrt(kk / std::log(std::log(kk))) * std::abs(series[k - 1] - d2));
  }
  return best;
}

/// Kolmogorov-Smirnov distance between a weighted sample and a continuous CDF.
template <class Cdf>
double ks_distance(std::vector<std::pair<double, double>> weighted, Cdf cdf) {
  std::sort(weighted.begin(), weighted.end());
  double prev = 0.0;
  double acc = 0.0;
  double dist = 0.0;
  for (const auto& [x, w] : weighted) {
    acc += w;
    const double f = cdf(x);
    dist = std::max({dist, std::abs(acc - f), std::abs(prev - f)});
    prev = acc;
  }
  return dist;
}

template <class Cdf>
double ks_distance(const std::vector<double>& sample, Cdf cdf) {
  std::vector<std::pair<double, double>> w;
  w.reserve(sample.size());
  for (double x : sample) w.emplace_back(x, 1.0 / static_cast<double>(sample.size()));
  return ks_distance(std::move(w), cdf);
}

struct AscltDiagnostic {
  bool skipped = false;
  std::size_t points = 0;
  double weight_sum = 0.0;
  double cdf_end = 0.0;
  double ks = kNaN;
};

/// Path-averaged empirical law of the first standardized pivot coordinate,
/// K_1^{-1/2} S_{k-1}(1)^{1/2} (a_k^1 - a^1), compared with N(0,1).
inline AscltDiagnostic asclt_check(const MeanPath& path, const ProcessModel& model) {
  AscltDiagnostic out;
  Matrix root;
  try {
    root = sym_inv_sqrt(model.cov_blocks.front());
  } catch (const SingularBlockError&) {
    out.skipped = true;
    return out;
  }
  const std::size_t n = path.horizon();
  std::vector<std::pair<double, double>> pts;
  pts.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = path.s_prev[k](0);
    const Vector z = root * (std::sqrt(s) * (path.mle[k].col(0) - model.mean_matrix.col(0)));
    pts.emplace_back(z(0), 1.0 / static_cast<double>(n));
  }
  out.points = n;
  for (const auto& p : pts) out.weight_sum += p.second;
  out.cdf_end = out.weight_sum;
  out.ks = ks_distance(std::move(pts), normal_cdf);
  return out;
}

// ---------------------------------------------------------------------------
// Plans and results

struct EstimatorSelection {
  bool mle = true;
  bool empirical = true;
  bool lse = false;
};

struct ExperimentPlan {
  ProcessModel model;
  std::size_t horizon = 12;
  std::size_t replications = 1000;
  std::uint64_t master_seed = 0;
  ObservationLevel level = ObservationLevel::Totals;
  Caps caps;
  EstimatorSelection estimators;
  CovarianceChoice covariance = CovarianceChoice::Empirical;
  std::optional<Hypothesis> hypothesis;
  RegionLevels levels;
  bool condition_on_survival = true;
  std::optional<std::size_t> survivor_target;  ///< stop at the first index reaching this many survivors
  unsigned threads = 1;
};

struct ReplicationResult {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  TrajectoryStatus status = TrajectoryStatus::Alive;
  std::size_t status_generation = 0;
  std::size_t horizon = 0;
  bool estimated = false;

  double err_mle = kNaN;
  double err_emp = kNaN;
  double err_lse = kNaN;
  double lse_closed_form_gap = kNaN;
  Matrix mle;
  Matrix emp;
  Matrix lse;
  std::vector<Matrix> qsl_cov;
  std::vector<Matrix> emp_cov;

  // Pivots at the generating parameters.
  double chi_qsl = kNaN;
  double chi_emp = kNaN;
  double trace_qsl = kNaN;
  double trace_emp = kNaN;
  double trace_dev_qsl = kNaN;  ///< sum_j tr(K^{-1/2} K-hat_j K^{-1/2}) - d^2
  double trace_dev_emp = kNaN;
  double ratio = kNaN;

  // Path averages at the generating parameters.
  double qsl_terminal_mle = kNaN;
  double qsl_terminal_emp = kNaN;
  double lil_mle = kNaN;
  double lil_emp = kNaN;
  std::vector<double> qsl_path_mle;
  std::vector<double> qsl_path_emp;

  std::optional<RegionReport> region;

  bool surviving() const noexcept { return status != TrajectoryStatus::Extinct; }
};

namespace detail {

inline double frobenius_error(const Matrix& est, const Matrix& truth) { return (est - truth).norm(); }

template <class F>
double guarded(F&& f) {
  try {
    return f();
  } catch (const SingularBlockError&) {
    return kNaN;
  }
}

} // namespace detail

inline ReplicationResult run_replication(const ExperimentPlan& plan, std::size_t index) {
  ReplicationResult r;
  r.index = index;
  r.seed = child_seed(plan.master_seed, index);
  Stream rng(r.seed);
  const Trajectory traj = simulate_trajectory(plan.model, plan.horizon, plan.caps, rng, plan.level);
  r.status = traj.status;
  r.status_generation = traj.status_generation;
  r.horizon = traj.horizon();
  if (!traj.surviving() && plan.condition_on_survival) return r;
  if (traj.horizon() < 1) return r;

  const ProcessModel& m = plan.model;
  const Matrix& a = m.mean_matrix;
  const double d2 = static_cast<double>(m.dim() * m.dim());
  r.estimated = true;

  if (plan.estimators.lse) {
    const auto lp = lse_path(traj);
    r.lse = lp.estimates.back();
    r.err_lse = detail::frobenius_error(r.lse, a);
    r.lse_closed_form_gap = (r.lse - lse_closed_form(traj)).cwiseAbs().maxCoeff();
  }
  if (plan.level == ObservationLevel::Counts || !(plan.estimators.mle || plan.estimators.empirical)) return r;

  const MeanPath path = mean_path(traj);
  EstimateSet est;
  est.horizon = path.horizon();
  est.mle_means = path.mle.back();
  est.mle_defined = path.mle_defined.back();
  est.emp_means = path.emp.back();
  est.qsl_cov = qsl_covariance(path);
  est.emp_cov = empirical_covariance(path);
  est.s_prev = path.s_prev.back();
  est.x_prev = path.x_prev.back();

  r.mle = est.mle_means;
  r.emp = est.emp_means;
  r.qsl_cov = est.qsl_cov;
  r.emp_cov = est.emp_cov;
  r.err_mle = detail::frobenius_error(est.mle_means, a);
  r.err_emp = detail::frobenius_error(est.emp_means, a);
  r.ratio = rho_ratio(traj);

  r.chi_qsl = detail::guarded([&] { return mean_pivot(est, a, CovarianceChoice::Qsl); });
  r.chi_emp = detail::guarded([&] { return mean_pivot(est, a, CovarianceChoice::Empirical); });
  r.trace_dev_qsl = detail::guarded([&] { return trace_deviation(est, m.cov_blocks, CovarianceChoice::Qsl); });
  r.trace_dev_emp = detail::guarded([&] { return trace_deviation(est, m.cov_blocks, CovarianceChoice::Empirical); });
  r.trace_qsl = detail::guarded([&] { return trace_stat(traj, est, m.cov_blocks, CovarianceChoice::Qsl, r.ratio); });
  r.trace_emp = detail::guarded([&] { return trace_stat(traj, est, m.cov_blocks, CovarianceChoice::Empirical); });

  if (m.covariances_invertible) {
    r.qsl_path_mle = qsl_series(path, m, CovarianceChoice::Qsl);
    r.qsl_path_emp = qsl_series(path, m, CovarianceChoice::Empirical);
    r.qsl_terminal_mle = r.qsl_path_mle.back();
    r.qsl_terminal_emp = r.qsl_path_emp.back();
    r.lil_mle = lil_scaled_fluctuation(r.qsl_path_mle, d2);
    r.lil_emp = lil_scaled_fluctuation(r.qsl_path_emp, d2);
  }

  if (plan.hypothesis) {
    try {
      r.region = confidence_region(traj, est, *plan.hypothesis, plan.levels, plan.covariance);
    } catch (const SingularBlockError&) {
      r.region.reset();
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Aggregation

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

/// Exact Clopper-Pearson interval for `k` successes in `n` trials.
inline Interval clopper_pearson(std::size_t k, std::size_t n, double confidence = 0.95) {
  if (n == 0) return {0.0, 1.0};
  const double alpha = 1.0 - confidence;
  const double kk = static_cast<double>(k);
  const double nn = static_cast<double>(n);
  Interval ci;
  ci.lo = k == 0 ? 0.0 : boost::math::ibeta_inv(kk, nn - kk + 1.0, alpha / 2.0);
  ci.hi = k == n ? 1.0 : boost::math::ibeta_inv(kk + 1.0, nn - kk, 1.0 - alpha / 2.0);
  return ci;
}

struct SampleStats {
  std::size_t count = 0;
  double mean = kNaN;
  double variance = kNaN;  ///< unbiased
  double skewness = kNaN;
  double median = kNaN;
  double q05 = kNaN;
  double q95 = kNaN;
  double ks = kNaN;  ///< distance to the limit target, when one applies
};

/// Type-7 quantile of sorted data.
inline double sorted_quantile(const std::vector<double>& s, double p) {
  if (s.empty()) return kNaN;
  const double h = (static_cast<double>(s.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

/// Finite entries, sorted. Sorting first makes every sum below independent
/// of the input order.
inline std::vector<double> finite_sorted(std::vector<double> v) {
  std::erase_if(v, [](double x) { return !std::isfinite(x); });
  std::sort(v.begin(), v.end());
  return v;
}

inline SampleStats sample_stats(std::vector<double> values) {
  const auto s = finite_sorted(std::move(values));
  SampleStats st;
  st.count = s.size();
  if (s.empty()) return st;
  const double n = static_cast<double>(s.size());
  double sum = 0.0;
  for (double x : s) sum += x;
  st.mean = sum / n;
  double m2 = 0.0;
  double m3 = 0.0;
  for (double x : s) {
    const double c = x - st.mean;
    m2 += c * c;
    m3 += c * c * c;
  }
  st.variance = s.size() > 1 ? m2 / (n - 1.0) : 0.0;
  st.skewness = m2 > 0.0 ? (m3 / n) / std::pow(m2 / n, 1.5) : 0.0;
  st.median = sorted_quantile(s, 0.5);
  st.q05 = sorted_quantile(s, 0.05);
  st.q95 = sorted_quantile(s, 0.95);
  return st;
}

struct CoverageResult {
  std::size_t inside = 0;
  std::size_t total = 0;
  double rate = kNaN;
  Interval ci;
};

struct EnsembleSummary {
  std::size_t replications = 0;
  std::size_t surviving = 0;
  std::size_t extinct = 0;
  std::size_t capped = 0;
  double survival_fraction = kNaN;
  Interval survival_ci;

  std::map<std::string, SampleStats> errors;  ///< Frobenius error by estimator
  double max_lse_closed_form_gap = kNaN;

  SampleStats chi_qsl, chi_emp;      ///< KS against chi-square(d^2)
  SampleStats trace_qsl, trace_emp;  ///< KS against N(0,1)
  SampleStats trace_dev_qsl, trace_dev_emp;
  SampleStats ratio;
  double trace_variance_ratio = kNaN;  ///< var(trace_dev_qsl) / var(trace_dev_emp)

  std::vector<Matrix> median_qsl_cov;  ///< entrywise medians over estimated replications
  std::vector<Matrix> median_emp_cov;

  std::vector<double> qsl_series_mle;  ///< mean over replications of s_k, k = 1..n
  std::vector<double> qsl_series_emp;
  SampleStats qsl_terminal_mle, qsl_terminal_emp;
  double qsl_variance_ratio = kNaN;   ///< var sqrt(n)(s_n - d^2): MLE over empirical normalizer
  SampleStats lil_mle, lil_emp;
  double lil_constant_mle = kNaN;
  double lil_constant_emp = kNaN;
  double efficiency = kNaN;  ///< (rho+1)/(rho-1)

  std::optional<CoverageResult> coverage;
  std::vector<ReplicationResult> runs;  ///< indexed by replication
};

/// Aggregates replication results. Independent of the order of `runs`.
inline EnsembleSummary summarize(const ExperimentPlan& plan, std::vector<ReplicationResult> runs) {
  std::sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  EnsembleSummary s;
  const double d2 = static_cast<double>(plan.model.dim() * plan.model.dim());
  s.replications = runs.size();
  for (const auto& r : runs) {
    switch (r.status) {
      case TrajectoryStatus::Alive: ++s.surviving; break;
      case TrajectoryStatus::Capped: ++s.capped; break;
      case TrajectoryStatus::Extinct: ++s.extinct; break;
    }
  }
  s.surviving += s.capped;
  // "surviving" counts alive and capped paths; capped is also reported on its own.
  if (s.replications) s.survival_fraction = static_cast<double>(s.surviving) / static_cast<double>(s.replications);
  s.survival_ci = clopper_pearson(s.surviving, s.replications);

  auto collect = [&](auto member) {
    std::vector<double> v;
    for (const auto& r : runs)
      if (r.estimated) v.push_back(r.*member);
    return v;
  };
  if (plan.estimators.mle && plan.level != ObservationLevel::Counts)
    s.errors["mle"] = sample_stats(collect(&ReplicationResult::err_mle));
  if (plan.estimators.empirical && plan.level != ObservationLevel::Counts)
    s.errors["empirical"] = sample_stats(collect(&ReplicationResult::err_emp));
  if (plan.estimators.lse) {
    s.errors["lse"] = sample_stats(collect(&ReplicationResult::err_lse));
    const auto gaps = finite_sorted(collect(&ReplicationResult::lse_closed_form_gap));
    s.max_lse_closed_form_gap = gaps.empty() ? kNaN : gaps.back();
  }

  auto chi_cdf = [d2](double x) { return chi2_cdf(d2, x); };
  s.chi_qsl = sample_stats(collect(&ReplicationResult::chi_qsl));
  s.chi_qsl.ks = ks_distance(finite_sorted(collect(&ReplicationResult::chi_qsl)), chi_cdf);
  s.chi_emp = sample_stats(collect(&ReplicationResult::chi_emp));
  s.chi_emp.ks = ks_distance(finite_sorted(collect(&ReplicationResult::chi_emp)), chi_cdf);
  s.trace_qsl = sample_stats(collect(&ReplicationResult::trace_qsl));
  s.trace_qsl.ks = ks_distance(finite_sorted(collect(&ReplicationResult::trace_qsl)), normal_cdf);
  s.trace_emp = sample_stats(collect(&ReplicationResult::trace_emp));
  s.trace_emp.ks = ks_distance(finite_sorted(collect(&ReplicationResult::trace_emp)), normal_cdf);
  s.trace_dev_qsl = sample_stats(collect(&ReplicationResult::trace_dev_qsl));
  s.trace_dev_emp = sample_stats(collect(&ReplicationResult::trace_dev_emp));
  s.trace_variance_ratio = s.trace_dev_qsl.variance / s.trace_dev_emp.variance;
  s.ratio = sample_stats(collect(&ReplicationResult::ratio));

  // Entrywise medians of the covariance estimates.
  auto median_blocks = [&](auto member) {
    std::vector<Matrix> out;
    const ReplicationResult* first = nullptr;
    for (const auto& r : runs)
      if (r.estimated && !(r.*member).empty()) {
        first = &r;
        break;
      }
    if (!first) return out;
    for (std::size_t j = 0; j < (first->*member).size(); ++j) {
      Matrix med((first->*member)[j].rows(), (first->*member)[j].cols());
      for (Eigen::Index a = 0; a < med.rows(); ++a)
        for (Eigen::Index b = 0; b < med.cols(); ++b) {
          std::vector<double> v;
          for (const auto& r : runs)
            if (r.estimated && !(r.*member).empty()) v.push_back((r.*member)[j](a, b));
          med(a, b) = sorted_quantile(finite_sorted(std::move(v)), 0.5);
        }
      out.push_back(std::move(med));
    }
    return out;
  };
  s.median_qsl_cov = median_blocks(&ReplicationResult::qsl_cov);
  s.median_emp_cov = median_blocks(&ReplicationResult::emp_cov);

  auto mean_path_series = [&](auto member) {
    std::vector<double> out;
    for (std::size_t k = 0;; ++k) {
      std::vector<double> v;
      for (const auto& r : runs)
        if (r.estimated && (r.*member).size() > k) v.push_back((r.*member)[k]);
      if (v.empty()) break;
      const auto st = sample_stats(std::move(v));
      out.push_back(st.mean);
    }
    return out;
  };
  s.qsl_series_mle = mean_path_series(&ReplicationResult::qsl_path_mle);
  s.qsl_series_emp = mean_path_series(&ReplicationResult::qsl_path_emp);
  s.qsl_terminal_mle = sample_stats(collect(&ReplicationResult::qsl_terminal_mle));
  s.qsl_terminal_emp = sample_stats(collect(&ReplicationResult::qsl_terminal_emp));
  s.qsl_variance_ratio = s.qsl_terminal_mle.variance / s.qsl_terminal_emp.variance;
  s.lil_mle = sample_stats(collect(&ReplicationResult::lil_mle));
  s.lil_emp = sample_stats(collect(&ReplicationResult::lil_emp));
  if (plan.model.perron && plan.model.perron->rho > 1.0) {
    const double rho = plan.model.perron->rho;
    const double d = static_cast<double>(plan.model.dim());
    s.efficiency = (rho + 1.0) / (rho - 1.0);
    s.lil_constant_mle = 2.0 * d * std::sqrt(s.efficiency);
    s.lil_constant_emp = 2.0 * d;
  }

  if (plan.hypothesis) {
    CoverageResult c;
    for (const auto& r : runs) {
      if (!r.estimated || !r.region || !r.surviving()) continue;
      ++c.total;
      if (r.region->inside) ++c.inside;
    }
    if (c.total) c.rate = static_cast<double>(c.inside) / static_cast<double>(c.total);
    c.ci = clopper_pearson(c.inside, c.total);
    s.coverage = c;
  }
  s.runs = std::move(runs);
  return s;
}

inline void validate_plan(const ExperimentPlan& plan) {
  if (plan.replications < 1) throw ConfigError("plan: replications must be at least 1");
  if (plan.horizon < 2) throw ConfigError("plan: horizon must be at least 2");
  if (!plan.model.primitive) throw NotPrimitiveError("plan: model '" + plan.model.name + "' has a non-primitive mean matrix");
  if (!plan.model.supercritical) throw AssumptionError("plan: model '" + plan.model.name + "' is not supercritical");
  if (plan.hypothesis) {
    const auto d = static_cast<Eigen::Index>(plan.model.dim());
    if (plan.hypothesis->means.rows() != d || plan.hypothesis->means.cols() != d ||
        plan.hypothesis->covs.size() != plan.model.dim())
      throw ConfigError("plan: hypothesis does not match the model dimension");
  }
  if (plan.level == ObservationLevel::Counts && (plan.estimators.mle || plan.estimators.empirical) &&
      !plan.estimators.lse)
    throw ConfigError("plan: counts-level observation only supports the least-squares estimator");
}

/// Runs the replications of `plan` (in parallel when threads > 1) and
/// aggregates them. With a survivor target the ensemble is the shortest
/// index prefix containing that many surviving paths.
inline EnsembleSummary run_ensemble(const ExperimentPlan& plan) {
  validate_plan(plan);
  const unsigned threads = std::max(1u, plan.threads);
  std::vector<ReplicationResult> results;
  std::size_t survivors = 0;
  const std::size_t batch = plan.survivor_target ? std::max<std::size_t>(64, 16 * threads) : plan.replications;

  for (std::size_t start = 0; start < plan.replications; start += batch) {
    const std::size_t stop = std::min(plan.replications, start + batch);
    std::vector<ReplicationResult> chunk(stop - start);
    auto work = [&](unsigned w) {
      for (std::size_t i = start + w; i < stop; i += threads) chunk[i - start] = run_replication(plan, i);
    };
    if (threads == 1) {
      work(0);
    } else {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
    }
    for (auto& r : chunk) {
      if (plan.survivor_target && survivors >= *plan.survivor_target) break;
      if (r.surviving()) ++survivors;
      results.push_back(std::move(r));
    }
    if (plan.survivor_target && survivors >= *plan.survivor_target) break;
  }
  return summarize(plan, std::move(results));
}

/// Coverage of the joint region when the hypothesis is the generating model.
inline CoverageResult coverage_experiment(const ExperimentPlan& plan) {
  if (!plan.hypothesis) throw ConfigError("coverage_experiment: plan has no hypothesis");
  return *run_ensemble(plan).coverage;
}

inline Hypothesis truth_hypothesis(const ProcessModel& m) { return {m.mean_matrix, m.cov_blocks}; }

} // namespace bgw
