#pragma once

// Asymptotic pivots for the means and covariances, their quantiles, and the
// joint confidence region / hypothesis test built from them.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bgw/blockmat.hpp"
#include "bgw/error.hpp"
#include "bgw/estimators.hpp"
#include "bgw/process.hpp"

namespace bgw {

// ---------------------------------------------------------------------------
// Distribution functions and quantiles

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Upper tail 1 - Phi(x), accurate far into the tail.
inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

/// Inverse of the standard normal CDF by bisection on the lower tail.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("normal_quantile: p must lie in (0, 1)");
  if (p > 0.5) return -normal_quantile(1.0 - p);
  if (p == 0.5) return 0.0;
  double lo = -40.0;
  double hi = 0.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    (normal_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace detail {

/// Series for the regularized lower incomplete gamma P(a, x), x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 100000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

/// Modified Lentz continued fraction for the upper tail Q(a, x), x >= a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 100000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

} // namespace detail

inline double gamma_p(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw DomainError("gamma_p: requires a > 0 and x >= 0");
  if (x == 0.0) return 0.0;
  return x < a + 1.0 ? detail::gamma_p_series(a, x) : 1.0 - detail::gamma_q_fraction(a, x);
}

inline double gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw DomainError("gamma_q: requires a > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  return x < a + 1.0 ? 1.0 - detail::gamma_p_series(a, x) : detail::gamma_q_fraction(a, x);
}

inline double chi2_cdf(double df, double x) { return x <= 0.0 ? 0.0 : gamma_p(0.5 * df, 0.5 * x); }
inline double chi2_sf(double df, double x) { return x <= 0.0 ? 1.0 : gamma_q(0.5 * df, 0.5 * x); }

/// Inverse chi-square CDF by bracketing bisection. The upper tail is used for
/// p > 1/2 so that the relative accuracy holds near p = 1.
inline double chi2_quantile(double df, double p) {
  if (!(df >= 1.0)) throw DomainError("chi2_quantile: df must be at least 1");
  if (!(p > 0.0 && p < 1.0)) throw DomainError("chi2_quantile: p must lie in (0, 1)");
  const bool upper = p > 0.5;
  const double target = upper ? 1.0 - p : p;
  // Monotone increasing in x in both branches.
  auto below = [&](double x) { return upper ? chi2_sf(df, x) > target : chi2_cdf(df, x) < target; };
  double lo = 0.0;
  double hi = std::max(1.0, df);
  while (below(hi)) {
    lo = hi;
    hi *= 2.0;
  }
  for (int it = 0; it < 300 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (below(mid) ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Statistics

enum class CovarianceChoice { Qsl, Empirical };

inline const char* to_string(CovarianceChoice c) { return c == CovarianceChoice::Qsl ? "qsl" : "empirical"; }

inline CovarianceChoice parse_covariance_choice(const std::string& s) {
  if (s == "qsl") return CovarianceChoice::Qsl;
  if (s == "empirical") return CovarianceChoice::Empirical;
  throw ConfigError("unknown covariance choice '" + s + "' (expected qsl or empirical)");
}

inline const std::vector<Matrix>& chosen_cov(const EstimateSet& est, CovarianceChoice c) {
  return c == CovarianceChoice::Qsl ? est.qsl_cov : est.emp_cov;
}

/// <X_n, 1> / (<X_n, 1> + 2 <S_{n-1}, 1>), a consistent estimate of (rho-1)/(rho+1).
inline double rho_ratio(const Trajectory& traj) {
  const std::size_t n = traj.horizon();
  if (n < 1) throw DomainError("rho_ratio: horizon must be at least 1");
  const double last = static_cast<double>(total(traj.generations[n].x));
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += static_cast<double>(total(traj.generations[k].x));
  const double denom = last + 2.0 * s;
  if (!(denom > 0.0)) throw DomainError("rho_ratio: zero denominator");
  return last / denom;
}

/// sum_j S_{n-1}(j) || (K_j)^{-1/2} (a_n^j - a0^j) ||^2 with K_j the chosen
/// covariance estimate. Asymptotically chi-square with d^2 degrees of freedom.
inline double mean_pivot(const EstimateSet& est, const Matrix& a0, CovarianceChoice choice) {
  const Eigen::Index d = est.mle_means.rows();
  if (a0.rows() != d || a0.cols() != d) throw ShapeError("mean_pivot: hypothesis has the wrong shape");
  const auto& cov = chosen_cov(est, choice);
  double stat = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const Matrix r = sym_inv_sqrt(cov[static_cast<std::size_t>(j)]);
    stat += est.s_prev(j) * (r * (est.mle_means.col(j) - a0.col(j))).squaredNorm();
  }
  return stat;
}

/// sum_j tr(K0_j^{-1/2} K_j K0_j^{-1/2}) - d^2.
inline double trace_deviation(const EstimateSet& est, const std::vector<Matrix>& k0, CovarianceChoice choice) {
  const auto& cov = chosen_cov(est, choice);
  if (k0.size() != cov.size()) throw ShapeError("trace statistic: wrong number of hypothesized blocks");
  const auto d = static_cast<double>(cov.size());
  double tr = 0.0;
  for (std::size_t j = 0; j < cov.size(); ++j) {
    const Matrix r = sym_inv_sqrt(k0[j]);
    tr += (r * cov[j] * r).trace();
  }
  return tr - d * d;
}

/// Standardized trace statistic, asymptotically N(0,1) under the hypothesized
/// blocks. The QSL variant is scaled by sqrt(n r / (2 d^2)) with r the
/// data-driven ratio (or `ratio_override`), the empirical one by sqrt(n / (2 d^2)).
inline double trace_stat(const Trajectory& traj, const EstimateSet& est, const std::vector<Matrix>& k0,
                         CovarianceChoice choice, std::optional<double> ratio_override = std::nullopt) {
  const double d2 = static_cast<double>(k0.size() * k0.size());
  const double n = static_cast<double>(est.horizon);
  double scale = n / (2.0 * d2);
  if (choice == CovarianceChoice::Qsl) scale *= ratio_override ? *ratio_override : rho_ratio(traj);
  return std::sqrt(scale) * trace_deviation(est, k0, choice);
}

// ---------------------------------------------------------------------------
// Confidence region

struct Hypothesis {
  Matrix means;             ///< column j: hypothesized mean of law j
  std::vector<Matrix> covs; ///< hypothesized covariance of law j
};

struct RegionLevels {
  double alpha_trace = 0.0253;
  double alpha_chi = 0.0253;

  double joint_confidence() const { return (1.0 - alpha_trace) * (1.0 - alpha_chi); }
};

/// Equal marginal levels whose product rule gives the `joint` confidence.
inline RegionLevels split_joint_level(double joint) {
  if (!(joint > 0.0 && joint < 1.0)) throw DomainError("split_joint_level: joint level must lie in (0, 1)");
  const double alpha = 1.0 - std::sqrt(joint);
  return {alpha, alpha};
}

struct RegionReport {
  std::size_t horizon = 0;
  CovarianceChoice which_cov = CovarianceChoice::Empirical;
  double trace_stat = 0.0;
  double chi_stat = 0.0;
  double z_threshold = 0.0;
  double chi_threshold = 0.0;
  RegionLevels levels;
  bool trace_inside = false;
  bool chi_inside = false;
  bool inside = false;
  double ratio_estimate = 0.0;
};

inline RegionReport confidence_region(const Trajectory& traj, const EstimateSet& est, const Hypothesis& h,
                                      const RegionLevels& levels, CovarianceChoice choice) {
  const auto d = static_cast<double>(est.mle_means.rows());
  RegionReport r;
  r.horizon = est.horizon;
  r.which_cov = choice;
  r.levels = levels;
  r.ratio_estimate = rho_ratio(traj);
  r.trace_stat = trace_stat(traj, est, h.covs, choice, r.ratio_estimate);
  r.chi_stat = mean_pivot(est, h.means, choice);
  r.z_threshold = normal_quantile(1.0 - levels.alpha_trace / 2.0);
  r.chi_threshold = chi2_quantile(d * d, 1.0 - levels.alpha_chi);
  r.trace_inside = std::abs(r.trace_stat) <= r.z_threshold;
  r.chi_inside = r.chi_stat <= r.chi_threshold;
  r.inside = r.trace_inside && r.chi_inside;
  return r;
}

// ---------------------------------------------------------------------------
// Limit covariances

enum class LimitTarget { MeanPivot, CovQsl, CovEmp, TraceQsl, TraceEmp };

struct LimitCovariance {
  LimitTarget target;
  Matrix matrix;       ///< empty for scalar targets
  double variance = 0; ///< scalar targets only
  bool scalar() const { return target == LimitTarget::TraceQsl || target == LimitTarget::TraceEmp; }
};

/// K (x) K + blocktranspose(Vect K Vect K^T): covariance of the vectorized
/// Gaussian matrix limit attached to one covariance block.
inline Matrix covariance_fluctuation_block(const Matrix& k) {
  const Vector vk = vect(k);
  return kron(k, k) + blocktranspose(vk * vk.transpose(), k.rows());
}

inline LimitCovariance limit_covariance(LimitTarget target, const ProcessModel& model) {
  LimitCovariance out{target, Matrix{}, 0.0};
  const double d2 = static_cast<double>(model.dim() * model.dim());
  auto efficiency = [&] {
    const double rho = model.perron_data().rho;
    return (rho + 1.0) / (rho - 1.0);
  };
  switch (target) {
    case LimitTarget::MeanPivot:
      out.matrix = model.stacked_covariance();
      break;
    case LimitTarget::CovEmp:
    case LimitTarget::CovQsl: {
      std::vector<Matrix> blocks;
      for (const auto& k : model.cov_blocks) blocks.push_back(covariance_fluctuation_block(k));
      out.matrix = block_diag(std::span<const Matrix>(blocks));
      if (target == LimitTarget::CovQsl) out.matrix *= efficiency();
      break;
    }
    case LimitTarget::TraceEmp:
      out.variance = 2.0 * d2;
      break;
    case LimitTarget::TraceQsl:
      out.variance = 2.0 * d2 * efficiency();
      break;
  }
  return out;
}

} // namespace bgw
