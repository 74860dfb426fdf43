#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sparc/error.hpp"

// Dense linear algebra used by every other module: covariance, symmetric
// eigendecomposition, PCA, orthonormalization and subspace projections.
// All functions are pure and accept arbitrary Eigen dense expressions.

namespace sparc::linalg {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Eigenpairs of a symmetric matrix. Row i of `eigenvectors` is the unit
// eigenvector paired with eigenvalues[i]; eigenvalues are non-increasing.
template <typename Scalar>
struct EigenResult {
  VectorX<Scalar> eigenvalues;
  MatrixX<Scalar> eigenvectors;
};

// A task subspace: affine offset `mean`, orthonormal principal components
// as rows of `components` (rank x source_dim), and their variances.
template <typename Scalar>
struct SubspaceBasis {
  VectorX<Scalar> mean;
  MatrixX<Scalar> components;
  VectorX<Scalar> eigenvalues;
  Eigen::Index source_dim = 0;
  Eigen::Index rank = 0;
};

using EigenResultXd = EigenResult<double>;
using SubspaceBasisXd = SubspaceBasis<double>;

namespace detail {

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) {
    throw ValidationError(std::string(what) + ": non-finite entries");
  }
}

// Eigenvalues below this are treated as zero variance.
inline constexpr double kVarianceFloor = 1e-12;

}  // namespace detail

// Subtracts the column means. Returns the centered matrix and the mean.
template <typename Derived>
std::pair<MatrixX<typename Derived::Scalar>, VectorX<typename Derived::Scalar>>
mean_center(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.rows() < 1 || x.cols() < 1) {
    throw DimensionError("mean_center: empty matrix");
  }
  detail::require_finite(x, "mean_center");
  VectorX<Scalar> mu = x.colwise().mean().transpose();
  MatrixX<Scalar> centered = x.rowwise() - mu.transpose();
  return {std::move(centered), std::move(mu)};
}

// C = (1/N) Xc' Xc for already-centered Xc, symmetrized exactly.
template <typename Derived>
MatrixX<typename Derived::Scalar> covariance(const Eigen::MatrixBase<Derived>& xc) {
  using Scalar = typename Derived::Scalar;
  if (xc.rows() < 1 || xc.cols() < 1) {
    throw DimensionError("covariance: empty matrix");
  }
  detail::require_finite(xc, "covariance");
  MatrixX<Scalar> c = (xc.transpose() * xc) / static_cast<Scalar>(xc.rows());
  MatrixX<Scalar> sym = (c + c.transpose()) / Scalar(2);
  return sym;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Deterministic:
// sweeps visit (p, q) in row order, convergence at off-diagonal Frobenius
// norm <= 1e-10 * ||C||_F, at most 100 sweeps. Eigenvalues are returned in
// non-increasing order (ties keep the original column order) and each
// eigenvector is signed so its largest-magnitude entry is positive.
template <typename Derived>
EigenResult<typename Derived::Scalar> sym_eig(const Eigen::MatrixBase<Derived>& c_in) {
  using Scalar = typename Derived::Scalar;
  if (c_in.rows() != c_in.cols() || c_in.rows() < 1) {
    throw DimensionError("sym_eig: matrix must be square and non-empty");
  }
  detail::require_finite(c_in, "sym_eig");
  if (((c_in - c_in.transpose()).cwiseAbs().maxCoeff()) > Scalar(1e-9)) {
    throw ValidationError("sym_eig: input not symmetric within 1e-9");
  }

  const Eigen::Index n = c_in.rows();
  MatrixX<Scalar> a = c_in;
  MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);  // columns accumulate rotations

  const Scalar norm = a.norm();
  const Scalar target = Scalar(1e-10) * norm;

  auto off_norm = [&a, n]() {
    Scalar s = 0;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) s += a(p, q) * a(p, q);
    }
    return std::sqrt(Scalar(2) * s);
  };

  for (int sweep = 0; sweep < 100 && off_norm() > target; ++sweep) {
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (std::abs(apq) == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= Scalar(0) ? Scalar(1) : Scalar(-1)) /
                         (std::abs(theta) + std::sqrt(Scalar(1) + theta * theta));
        const Scalar cos = Scalar(1) / std::sqrt(Scalar(1) + t * t);
        const Scalar sin = t * cos;

        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar aip = a(i, p), aiq = a(i, q);
          a(i, p) = cos * aip - sin * aiq;
          a(i, q) = sin * aip + cos * aiq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar api = a(p, i), aqi = a(q, i);
          a(p, i) = cos * api - sin * aqi;
          a(q, i) = sin * api + cos * aqi;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar vip = v(i, p), viq = v(i, q);
          v(i, p) = cos * vip - sin * viq;
          v(i, q) = sin * vip + cos * viq;
        }
      }
    }
  }

  // Stable descending sort keeps the original column order on ties.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&a](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

  EigenResult<Scalar> result;
  result.eigenvalues.resize(n);
  result.eigenvectors.resize(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::Index src = order[static_cast<std::size_t>(r)];
    result.eigenvalues(r) = a(src, src);
    VectorX<Scalar> w = v.col(src);
    Eigen::Index imax = 0;
    for (Eigen::Index i = 1; i < n; ++i) {
      if (std::abs(w(i)) > std::abs(w(imax))) imax = i;
    }
    if (w(imax) < Scalar(0)) w = -w;
    result.eigenvectors.row(r) = w.transpose();
  }
  return result;
}

// Principal subspace of X: the top-k eigenvectors of covariance(Xc).
// `retained` (optional) receives the retained variance fraction.
template <typename Derived>
SubspaceBasis<typename Derived::Scalar> pca(const Eigen::MatrixBase<Derived>& x,
                                            Eigen::Index k,
                                            double* retained = nullptr) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (n < 1 || d < 1) {
    throw DimensionError("pca: empty matrix");
  }
  const Eigen::Index k_max = n > 1 ? std::min(n - 1, d) : d;
  if (k < 1 || k > k_max) {
    throw ParameterError("pca: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(k_max) + "]");
  }

  auto [xc, mu] = mean_center(x);
  EigenResult<Scalar> eig = sym_eig(covariance(xc));

  VectorX<Scalar> lambda = eig.eigenvalues.cwiseMax(Scalar(0));
  if (lambda.maxCoeff() < Scalar(detail::kVarianceFloor)) {
    throw DegenerateDataError("pca: data has zero variance in every direction");
  }

  SubspaceBasis<Scalar> basis;
  basis.mean = std::move(mu);
  basis.components = eig.eigenvectors.topRows(k);
  basis.eigenvalues = lambda.head(k);
  basis.source_dim = d;
  basis.rank = k;
  if (retained != nullptr) {
    *retained = static_cast<double>(basis.eigenvalues.sum() / lambda.sum());
  }
  return basis;
}

// Coordinates of X in the subspace: (X - 1 mu') W'.
template <typename Derived, typename Scalar>
MatrixX<Scalar> project(const Eigen::MatrixBase<Derived>& x,
                        const SubspaceBasis<Scalar>& basis) {
  if (x.cols() != basis.source_dim) {
    throw DimensionError("project: X has " + std::to_string(x.cols()) +
                         " cols, basis expects " + std::to_string(basis.source_dim));
  }
  return (x.rowwise() - basis.mean.transpose()) * basis.components.transpose();
}

// Modified Gram-Schmidt with one re-orthogonalization pass. Rows whose
// residual norm falls below 1e-8 are dropped, so the output may have fewer
// rows than the input. All-zero input yields an empty (0 x D) result.
template <typename Derived>
MatrixX<typename Derived::Scalar> orthonormalize(const Eigen::MatrixBase<Derived>& rows) {
  using Scalar = typename Derived::Scalar;
  if (rows.rows() < 1 || rows.cols() < 1) {
    throw DimensionError("orthonormalize: empty matrix");
  }
  detail::require_finite(rows, "orthonormalize");
  constexpr Scalar kResidualFloor = Scalar(1e-8);

  MatrixX<Scalar> q(rows.rows(), rows.cols());
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    VectorX<Scalar> v = rows.row(i).transpose();
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index j = 0; j < r; ++j) {
        v -= q.row(j).dot(v.transpose()) * q.row(j).transpose();
      }
    }
    const Scalar norm = v.norm();
    if (norm < kResidualFloor) continue;
    q.row(r++) = v.transpose() / norm;
  }
  return q.topRows(r);
}

// X minus its projection onto the row space of V: X - (X V') V.
// V must have orthonormal rows; V with zero rows leaves X unchanged.
template <typename DerivedX, typename DerivedV>
MatrixX<typename DerivedX::Scalar> orthogonal_complement(
    const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedV>& v) {
  using Scalar = typename DerivedX::Scalar;
  if (v.rows() == 0) return x;
  if (v.cols() != x.cols()) {
    throw DimensionError("orthogonal_complement: V cols != X cols");
  }
  const MatrixX<Scalar> gram = v * v.transpose();
  if ((gram - MatrixX<Scalar>::Identity(v.rows(), v.rows())).cwiseAbs().maxCoeff() >
      Scalar(1e-6)) {
    throw ValidationError("orthogonal_complement: V rows are not orthonormal");
  }
  return x - (x * v.transpose()) * v;
}

// Number of eigenvalues carrying non-negligible variance.
template <typename Scalar>
Eigen::Index effective_rank(const VectorX<Scalar>& eigenvalues) {
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    if (eigenvalues(i) >= Scalar(detail::kVarianceFloor)) ++r;
  }
  return r;
}

}  // namespace sparc::linalg
