#pragma once

// Dense kernels for the block-matrix notation used throughout the estimators:
// column stacking, Kronecker products, the block-wise Kronecker product,
// block transposition, symmetric inverse square roots and the Perron
// decomposition of a primitive nonnegative mean matrix.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bgw/error.hpp"

namespace bgw {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << what << ": expected a square matrix, got " << m.rows() << "x" << m.cols();
    throw ShapeError(os.str());
  }
}

/// Stacks the columns of a square matrix into a single vector.
inline Vector vect(const Matrix& m) {
  require_square(m, "vect");
  Vector out(m.size());
  const Eigen::Index d = m.rows();
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index r = 0; r < d; ++r) out(c * d + r) = m(r, c);
  return out;
}

/// Inverse of vect for a d*d vector.
inline Matrix unvect(const Vector& v) {
  const auto d = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(v.size()))));
  if (d * d != v.size()) throw ShapeError("unvect: length is not a perfect square");
  Matrix out(d, d);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index r = 0; r < d; ++r) out(r, c) = v(c * d + r);
  return out;
}

/// Kronecker product: block (i,j) of the result is a(i,j) * b.
inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// View of a matrix as a `blocks` x `blocks` grid of equally sized blocks.
struct BlockGrid {
  Eigen::Index blocks;
  Eigen::Index block_rows;
  Eigen::Index block_cols;
};

inline BlockGrid block_grid(const Matrix& m, Eigen::Index blocks, const char* what) {
  if (blocks <= 0 || m.rows() % blocks != 0 || m.cols() % blocks != 0) {
    std::ostringstream os;
    os << what << ": a " << m.rows() << "x" << m.cols() << " matrix is not a " << blocks << "x"
       << blocks << " grid of uniform blocks";
    throw ShapeError(os.str());
  }
  return {blocks, m.rows() / blocks, m.cols() / blocks};
}

/// Block-wise Kronecker product of two block matrices sharing the same
/// `blocks` x `blocks` grid. Block (i,j) of the result is the block matrix
/// whose (r,l) block is P(i,j) (x) Q(r,l).
inline Matrix boxkron(const Matrix& p, const Matrix& q, Eigen::Index blocks) {
  const BlockGrid gp = block_grid(p, blocks, "boxkron");
  const BlockGrid gq = block_grid(q, blocks, "boxkron");
  const Eigen::Index kr = gp.block_rows * gq.block_rows;
  const Eigen::Index kc = gp.block_cols * gq.block_cols;
  const Eigen::Index outer_r = blocks * kr;
  const Eigen::Index outer_c = blocks * kc;
  Matrix out(blocks * outer_r, blocks * outer_c);
  for (Eigen::Index i = 0; i < blocks; ++i)
    for (Eigen::Index j = 0; j < blocks; ++j) {
      const Matrix pij = p.block(i * gp.block_rows, j * gp.block_cols, gp.block_rows, gp.block_cols);
      for (Eigen::Index r = 0; r < blocks; ++r)
        for (Eigen::Index l = 0; l < blocks; ++l) {
          const Matrix qrl = q.block(r * gq.block_rows, l * gq.block_cols, gq.block_rows, gq.block_cols);
          out.block(i * outer_r + r * kr, j * outer_c + l * kc, kr, kc) = kron(pij, qrl);
        }
    }
  return out;
}

/// Swaps block (i,j) with block (j,i); the blocks themselves are not transposed.
inline Matrix blocktranspose(const Matrix& c, Eigen::Index blocks) {
  const BlockGrid g = block_grid(c, blocks, "blocktranspose");
  Matrix out(c.rows(), c.cols());
  for (Eigen::Index i = 0; i < blocks; ++i)
    for (Eigen::Index j = 0; j < blocks; ++j)
      out.block(i * g.block_rows, j * g.block_cols, g.block_rows, g.block_cols) =
          c.block(j * g.block_rows, i * g.block_cols, g.block_rows, g.block_cols);
  return out;
}

inline Matrix block_diag(std::span<const Matrix> blocks) {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  for (const auto& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  Matrix out = Matrix::Zero(rows, cols);
  Eigen::Index r = 0;
  Eigen::Index c = 0;
  for (const auto& b : blocks) {
    out.block(r, c, b.rows(), b.cols()) = b;
    r += b.rows();
    c += b.cols();
  }
  return out;
}

inline bool is_symmetric(const Matrix& m, double rel_tol = 1e-10) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

/// Eigenvalues of a symmetric matrix in increasing order.
inline Vector symmetric_eigenvalues(const Matrix& s) {
  require_square(s, "symmetric_eigenvalues");
  if (s.size() == 0) return Vector{};
  Eigen::SelfAdjointEigenSolver<Matrix> solver(s, Eigen::EigenvaluesOnly);
  return solver.eigenvalues();
}

/// Returns R symmetric positive-definite with R S R = I. The smallest
/// eigenvalue of S must exceed `rel_floor` times its largest eigenvalue.
inline Matrix sym_inv_sqrt(const Matrix& s, double rel_floor = 1e-10) {
  require_square(s, "sym_inv_sqrt");
  if (!all_finite(s)) throw SingularBlockError("sym_inv_sqrt: non-finite entries");
  if (!is_symmetric(s)) throw SingularBlockError("sym_inv_sqrt: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (s + s.transpose()));
  const Vector& ev = solver.eigenvalues();
  const double largest = ev.size() ? ev.maxCoeff() : 0.0;
  const double smallest = ev.size() ? ev.minCoeff() : 0.0;
  if (!(largest > 0.0) || !(smallest > rel_floor * largest)) {
    std::ostringstream os;
    os << "sym_inv_sqrt: smallest eigenvalue " << smallest << " is below the floor "
       << rel_floor * largest << " (near-singular covariance)";
    throw SingularBlockError(os.str());
  }
  const Matrix& vecs = solver.eigenvectors();
  return vecs * ev.cwiseSqrt().cwiseInverse().asDiagonal() * vecs.transpose();
}

inline std::vector<std::complex<double>> eigenvalues(const Matrix& a) {
  require_square(a, "eigenvalues");
  std::vector<std::complex<double>> out;
  if (a.size() == 0) return out;
  Eigen::EigenSolver<Matrix> solver(a, false);
  const auto& ev = solver.eigenvalues();
  out.assign(ev.data(), ev.data() + ev.size());
  return out;
}

/// True iff some power A^k with k <= d^2 - 2d + 2 is entrywise positive.
inline bool is_primitive(const Matrix& a) {
  require_square(a, "is_primitive");
  const Eigen::Index d = a.rows();
  if (d == 0) return false;
  if ((a.array() < 0.0).any()) return false;
  using Pattern = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;
  const Pattern base = (a.array() > 0.0).cast<int>();
  Pattern power = base;
  const Eigen::Index bound = d * d - 2 * d + 2;
  for (Eigen::Index k = 1; k <= bound; ++k) {
    if ((power.array() > 0).all()) return true;
    power = ((power * base).array() > 0).cast<int>();
  }
  return false;
}

/// Perron root and eigenvectors of a primitive nonnegative matrix.
struct PerronData {
  double rho = 0.0;
  Vector u;  ///< right eigenvector, <u, v> = 1
  Vector v;  ///< left eigenvector, entries sum to 1
  double gap = 0.0;  ///< rho minus the largest non-principal eigenvalue modulus

  Matrix projector() const { return u * v.transpose(); }
};

namespace detail {

inline Vector power_iterate(const Matrix& m, double tol, long max_iter) {
  const Eigen::Index d = m.rows();
  Vector x = Vector::Constant(d, 1.0 / static_cast<double>(d));
  for (long it = 0; it < max_iter; ++it) {
    Vector y = m * x;
    const double norm = y.sum();
    if (!(norm > 0.0) || !std::isfinite(norm))
      throw ConvergenceError("perron: power iterate collapsed");
    y /= norm;
    const double change = (y - x).cwiseAbs().maxCoeff();
    x = std::move(y);
    if (change < tol) return x;
  }
  throw ConvergenceError("perron: power iteration did not converge within the iteration budget");
}

} // namespace detail

inline PerronData perron(const Matrix& a, double tol = 1e-12, long max_iter = 100000) {
  require_square(a, "perron");
  if (!all_finite(a)) throw DomainError("perron: non-finite entries");
  if (!is_primitive(a)) throw NotPrimitiveError("perron: matrix is not nonnegative and primitive");

  PerronData out;
  Vector u = detail::power_iterate(a, tol, max_iter);
  Vector v = detail::power_iterate(a.transpose(), tol, max_iter);
  v /= v.sum();
  out.rho = v.dot(a * u) / v.dot(u);
  u /= u.dot(v);
  out.u = std::move(u);
  out.v = std::move(v);

  const auto ev = eigenvalues(a);
  std::size_t principal = 0;
  for (std::size_t i = 1; i < ev.size(); ++i)
    if (std::abs(ev[i] - out.rho) < std::abs(ev[principal] - out.rho)) principal = i;
  double second = 0.0;
  for (std::size_t i = 0; i < ev.size(); ++i)
    if (i != principal) second = std::max(second, std::abs(ev[i]));
  out.gap = out.rho - second;
  return out;
}

/// Degree of the minimal polynomial, from the rank of {I, A, ..., A^(d-1)}.
inline Eigen::Index minimal_polynomial_degree(const Matrix& a, double rel_tol = 1e-9) {
  require_square(a, "minimal_polynomial_degree");
  const Eigen::Index d = a.rows();
  Matrix krylov(d * d, d);
  Matrix power = Matrix::Identity(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const Vector col = vect(power);
    const double n = col.norm();
    krylov.col(k) = n > 0.0 ? Vector(col / n) : col;
    power = power * a;
  }
  Eigen::JacobiSVD<Matrix> svd(krylov);
  const Vector& sv = svd.singularValues();
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > rel_tol * sv(0)) ++rank;
  return rank;
}

struct LseApplicability {
  bool ok = false;
  bool spectral_condition = false;  ///< every non-principal |lambda|^2 > rho
  bool nonderogatory = false;
  bool distinct_eigenvalues = false;
  std::vector<std::complex<double>> nonprincipal;
  std::vector<std::string> reasons;
};

/// Checks the hypotheses under which the least-squares mean-matrix estimator
/// is analysed: every non-principal eigenvalue has |lambda|^2 > rho and A is
/// nonderogatory.
inline LseApplicability lse_applicable(const Matrix& a, const PerronData& pd) {
  LseApplicability out;
  auto ev = eigenvalues(a);
  std::size_t principal = 0;
  for (std::size_t i = 1; i < ev.size(); ++i)
    if (std::abs(ev[i] - pd.rho) < std::abs(ev[principal] - pd.rho)) principal = i;
  for (std::size_t i = 0; i < ev.size(); ++i)
    if (i != principal) out.nonprincipal.push_back(ev[i]);

  out.spectral_condition = true;
  for (const auto& lambda : out.nonprincipal) {
    const double m2 = std::norm(lambda);
    if (!(m2 > pd.rho)) {
      out.spectral_condition = false;
      std::ostringstream os;
      os << "non-principal eigenvalue " << lambda.real();
      if (lambda.imag() != 0.0) os << (lambda.imag() > 0 ? "+" : "") << lambda.imag() << "i";
      os << " has |lambda|^2 = " << m2 << " <= rho = " << pd.rho;
      out.reasons.push_back(os.str());
    }
  }

  out.distinct_eigenvalues = true;
  for (std::size_t i = 0; i < ev.size(); ++i)
    for (std::size_t j = i + 1; j < ev.size(); ++j)
      if (std::abs(ev[i] - ev[j]) <= 1e-8 * std::max(1.0, pd.rho)) out.distinct_eigenvalues = false;
  out.nonderogatory =
      out.distinct_eigenvalues || minimal_polynomial_degree(a) == a.rows();
  if (!out.nonderogatory) out.reasons.emplace_back("matrix is derogatory (minimal polynomial degree < d)");

  out.ok = out.spectral_condition && out.nonderogatory;
  return out;
}

} // namespace bgw
