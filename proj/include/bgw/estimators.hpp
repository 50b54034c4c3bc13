#pragma once

// Estimators of the reproduction means (maximum likelihood, single-generation
// empirical ratio, least squares on the counts) and the two covariance
// estimators built from the path of mean estimates.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "bgw/blockmat.hpp"
#include "bgw/error.hpp"
#include "bgw/process.hpp"

namespace bgw {

/// Mean estimates at every intermediate horizon k = 1..n together with the
/// normalizers they use. Index k-1 holds horizon k.
struct MeanPath {
  std::vector<Matrix> mle;            ///< column j: cumulative ratio sum_p Y_p^j / S_{k-1}(j)
  std::vector<Matrix> emp;            ///< column j: Y_k^j / X_{k-1}(j), zero when X_{k-1}(j) = 0
  std::vector<Vector> s_prev;         ///< S_{k-1}(j) = sum_{p<k} X_p(j)
  std::vector<Vector> x_prev;         ///< X_{k-1}(j)
  std::vector<std::vector<bool>> mle_defined;

  std::size_t horizon() const noexcept { return mle.size(); }
};

/// One pass over the trajectory accumulating running sums.
inline MeanPath mean_path(const Trajectory& traj) {
  traj.require_level(ObservationLevel::Totals, "mean estimators");
  const std::size_t d = traj.dim();
  const auto di = static_cast<Eigen::Index>(d);
  const std::size_t n = traj.horizon();
  MeanPath p;
  p.mle.reserve(n);
  p.emp.reserve(n);
  p.s_prev.reserve(n);
  p.x_prev.reserve(n);

  Vector s = Vector::Zero(di);
  Matrix y_sum = Matrix::Zero(di, di);
  for (std::size_t k = 1; k <= n; ++k) {
    const Vector xprev = to_vector(traj.generations[k - 1].x);
    s += xprev;
    const auto& rec = traj.generations[k];
    if (rec.y.size() != d) throw ObservationLevelError("mean estimators: generation lacks per-type totals");
    Matrix emp = Matrix::Zero(di, di);
    Matrix mle = Matrix::Zero(di, di);
    std::vector<bool> defined(d, false);
    for (Eigen::Index j = 0; j < di; ++j) {
      const Vector yj = to_vector(rec.y[static_cast<std::size_t>(j)]);
      y_sum.col(j) += yj;
      if (xprev(j) > 0.0) emp.col(j) = yj / xprev(j);
      if (s(j) > 0.0) {
        mle.col(j) = y_sum.col(j) / s(j);
        defined[static_cast<std::size_t>(j)] = true;
      }
    }
    p.mle.push_back(std::move(mle));
    p.emp.push_back(std::move(emp));
    p.s_prev.push_back(s);
    p.x_prev.push_back(xprev);
    p.mle_defined.push_back(std::move(defined));
  }
  return p;
}

struct MleMeans {
  Matrix means;
  std::vector<bool> defined;  ///< false for a type that never had a parent
};

inline MleMeans mle_means(const Trajectory& traj) {
  if (traj.horizon() < 1) throw DomainError("mle_means: horizon must be at least 1");
  auto p = mean_path(traj);
  return {std::move(p.mle.back()), std::move(p.mle_defined.back())};
}

inline Matrix empirical_means(const Trajectory& traj) {
  if (traj.horizon() < 1) throw DomainError("empirical_means: horizon must be at least 1");
  return mean_path(traj).emp.back();
}

namespace detail {

inline std::vector<Matrix> weighted_deviation_cov(std::span<const Matrix> path, std::span<const Vector> weights) {
  const std::size_t n = path.size();
  const Eigen::Index d = path.back().rows();
  std::vector<Matrix> out(static_cast<std::size_t>(d), Matrix::Zero(d, d));
  const Matrix& last = path.back();
  for (std::size_t k = 0; k < n; ++k)
    for (Eigen::Index j = 0; j < d; ++j) {
      const double w = weights[k](j);
      if (w <= 0.0) continue;
      const Vector dev = path[k].col(j) - last.col(j);
      const Matrix outer = dev * dev.transpose();
      out[static_cast<std::size_t>(j)] += w * outer;
    }
  for (auto& m : out) m /= static_cast<double>(n);
  return out;
}

} // namespace detail

/// K-hat: (1/n) sum_k S_{k-1}(j) (a_k^j - a_n^j)(a_k^j - a_n^j)^T over the MLE path.
inline std::vector<Matrix> qsl_covariance(const MeanPath& p) {
  if (p.horizon() == 0) throw DomainError("qsl_covariance: empty path");
  return detail::weighted_deviation_cov(p.mle, p.s_prev);
}

/// K-check: the same average over the empirical-estimator path weighted by X_{k-1}(j).
inline std::vector<Matrix> empirical_covariance(const MeanPath& p) {
  if (p.horizon() == 0) throw DomainError("empirical_covariance: empty path");
  return detail::weighted_deviation_cov(p.emp, p.x_prev);
}

inline std::vector<Matrix> qsl_covariance(const Trajectory& traj) { return qsl_covariance(mean_path(traj)); }
inline std::vector<Matrix> empirical_covariance(const Trajectory& traj) {
  return empirical_covariance(mean_path(traj));
}

/// Observed offspring vectors per parent type with their multiplicities.
struct LawEstimate {
  std::vector<std::map<Counts, Count>> counts;
  std::vector<Count> parents;  ///< number of type-j parents observed, S_{n-1}(j)

  std::size_t dim() const noexcept { return counts.size(); }

  /// Estimated probability of offspring vector `l` for a type-j parent.
  double probability(std::size_t j, const Counts& l) const {
    const auto it = counts.at(j).find(l);
    return it == counts[j].end() || parents[j] == 0 ? 0.0
                                                    : static_cast<double>(it->second) / static_cast<double>(parents[j]);
  }
};

inline LawEstimate mle_distribution(const Trajectory& traj) {
  traj.require_level(ObservationLevel::Full, "mle_distribution");
  const std::size_t d = traj.dim();
  LawEstimate out{std::vector<std::map<Counts, Count>>(d), std::vector<Count>(d, 0)};
  for (std::size_t k = 1; k <= traj.horizon(); ++k) {
    const auto& rec = traj.generations[k];
    if (rec.detail.size() != d) throw ObservationLevelError("mle_distribution: generation lacks offspring detail");
    for (std::size_t j = 0; j < d; ++j) {
      if (rec.detail[j].size() != traj.generations[k - 1].x[j])
        throw ConfigError("mle_distribution: detail count does not match the parent population");
      for (const auto& xi : rec.detail[j]) ++out.counts[j][xi];
      out.parents[j] += rec.detail[j].size();
    }
  }
  return out;
}

/// Mean vector of each estimated law; columns of types never observed are zero.
/// Sums run over integer counts, so the result equals the MLE bit for bit.
inline Matrix law_estimate_means(const LawEstimate& est) {
  const auto d = static_cast<Eigen::Index>(est.dim());
  Matrix m = Matrix::Zero(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    if (est.parents[jj] == 0) continue;
    for (const auto& [l, c] : est.counts[jj]) m.col(j) += static_cast<double>(c) * to_vector(l);
    m.col(j) /= static_cast<double>(est.parents[jj]);
  }
  return m;
}

/// Least-squares path: estimates[k-1] is A~_k. q_prev is I + sum_{p<n} X_p X_p^T.
struct LsePath {
  std::vector<Matrix> estimates;
  Matrix q_prev;
};

/// Recursive least squares on the count sequence,
///   A_{k+1} = A_k + (X_{k+1} - A_k X_k) X_k^T Q_k^{-1},  Q_k = I + sum_{p<=k} X_p X_p^T,
/// from A_0 = 0. Q_k^{-1} is updated by Sherman-Morrison and refreshed by a
/// full solve every `resolve_every` steps.
inline LsePath lse_path(const Trajectory& traj, std::size_t resolve_every = 64) {
  const std::size_t n = traj.horizon();
  if (n < 1) throw DomainError("lse_means: horizon must be at least 1");
  const auto d = static_cast<Eigen::Index>(traj.dim());
  LsePath out;
  out.estimates.reserve(n);
  Matrix a = Matrix::Zero(d, d);
  Matrix q = Matrix::Identity(d, d);
  Matrix q_inv = Matrix::Identity(d, d);
  for (std::size_t k = 0; k < n; ++k) {
    const Vector x = to_vector(traj.generations[k].x);
    const Vector x_next = to_vector(traj.generations[k + 1].x);
    q += x * x.transpose();
    if (resolve_every > 0 && (k + 1) % resolve_every == 0) {
      q_inv = q.llt().solve(Matrix::Identity(d, d));
    } else {
      const Vector qx = q_inv * x;
      q_inv -= (qx * qx.transpose()) / (1.0 + x.dot(qx));
    }
    q_inv = 0.5 * (q_inv + q_inv.transpose());
    a += (x_next - a * x) * (x.transpose() * q_inv);
    out.estimates.push_back(a);
  }
  out.q_prev = std::move(q);
  return out;
}

inline Matrix lse_means(const Trajectory& traj) { return lse_path(traj).estimates.back(); }

/// Ridge normal-equation solution (sum_k X_k X_{k-1}^T)(I + sum_{k<n} X_k X_k^T)^{-1}.
inline Matrix lse_closed_form(const Trajectory& traj) {
  const std::size_t n = traj.horizon();
  const auto d = static_cast<Eigen::Index>(traj.dim());
  Matrix b = Matrix::Zero(d, d);
  Matrix q = Matrix::Identity(d, d);
  for (std::size_t k = 1; k <= n; ++k) {
    const Vector prev = to_vector(traj.generations[k - 1].x);
    b += to_vector(traj.generations[k].x) * prev.transpose();
    q += prev * prev.transpose();
  }
  return q.llt().solve(b.transpose()).transpose();
}

/// One-type least-squares variance estimate
///   (1/n) sum_k T_{k-1}^{-1} Q_{k-1}^2 (a~_k - a~_n)^2,
/// T_m = sum_{p<=m} X_p^3, Q_m = sum_{p<=m} X_p^2.
inline double lse_variance_1d(const Trajectory& traj, std::span<const double> lse_path_values) {
  if (traj.dim() != 1) throw ShapeError("lse_variance_1d: one-type trajectories only");
  const std::size_t n = traj.horizon();
  if (lse_path_values.size() != n) throw ShapeError("lse_variance_1d: path length differs from the horizon");
  double t = 0.0;
  double q = 0.0;
  double acc = 0.0;
  const double last = lse_path_values[n - 1];
  for (std::size_t k = 1; k <= n; ++k) {
    const double x = static_cast<double>(traj.generations[k - 1].x[0]);
    t += x * x * x;
    q += x * x;
    if (t <= 0.0) continue;
    const double dev = lse_path_values[k - 1] - last;
    acc += q * q / t * dev * dev;
  }
  return acc / static_cast<double>(n);
}

inline double lse_variance_1d(const Trajectory& traj) {
  const auto p = lse_path(traj);
  std::vector<double> vals;
  vals.reserve(p.estimates.size());
  for (const auto& m : p.estimates) vals.push_back(m(0, 0));
  return lse_variance_1d(traj, vals);
}

/// Every estimate available from one trajectory at its final horizon.
struct EstimateSet {
  std::size_t horizon = 0;
  Matrix mle_means;
  std::vector<bool> mle_defined;
  Matrix emp_means;
  std::optional<Matrix> lse_means;
  std::vector<Matrix> qsl_cov;
  std::vector<Matrix> emp_cov;
  Vector s_prev;  ///< S_{n-1}
  Vector x_prev;  ///< X_{n-1}
  std::optional<Matrix> q_prev;  ///< I + sum_{k<n} X_k X_k^T
};

inline EstimateSet estimate(const Trajectory& traj, bool with_lse = true) {
  const MeanPath p = mean_path(traj);
  if (p.horizon() == 0) throw DomainError("estimate: horizon must be at least 1");
  EstimateSet e;
  e.horizon = p.horizon();
  e.mle_means = p.mle.back();
  e.mle_defined = p.mle_defined.back();
  e.emp_means = p.emp.back();
  e.qsl_cov = qsl_covariance(p);
  e.emp_cov = empirical_covariance(p);
  e.s_prev = p.s_prev.back();
  e.x_prev = p.x_prev.back();
  if (with_lse) {
    auto lp = lse_path(traj);
    e.lse_means = std::move(lp.estimates.back());
    e.q_prev = std::move(lp.q_prev);
  }
  return e;
}

} // namespace bgw
