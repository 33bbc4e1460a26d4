#pragma once

// Grassmann manifold Gr(r, m) with points stored as orthonormal m x r
// representatives. Tangent vectors are horizontal: anchor^T * direction = 0.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rgossip/errors.hpp"

namespace rgossip {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// ||B^T B - I||_F.
inline double orthonormality_residual(const Matrix& basis) {
  const Index r = basis.cols();
  return (basis.transpose() * basis - Matrix::Identity(r, r)).norm();
}

/// A point on Gr(r, m), held as one orthonormal representative. Two Subspace
/// values describe the same point iff their principal angles vanish; the
/// representatives themselves are never compared.
class Subspace {
 public:
  static constexpr double kOrthonormalityTol = 1e-10;

  explicit Subspace(Matrix basis) : basis_(std::move(basis)) {
    if (basis_.cols() < 1 || basis_.cols() > basis_.rows()) {
      throw DimensionMismatch("subspace basis must satisfy 1 <= r <= m, got " +
                              shape_str(basis_.rows(), basis_.cols()));
    }
    const double res = orthonormality_residual(basis_);
    if (!(res <= kOrthonormalityTol)) {
      throw RankDeficient("basis is not orthonormal (residual " +
                          std::to_string(res) + ")");
    }
  }

  const Matrix& basis() const noexcept { return basis_; }
  Index ambient_dim() const noexcept { return basis_.rows(); }
  Index dim() const noexcept { return basis_.cols(); }

 private:
  Matrix basis_;
};

inline void require_same_shape(const Subspace& a, const Subspace& b) {
  if (a.ambient_dim() != b.ambient_dim() || a.dim() != b.dim()) {
    throw DimensionMismatch(shape_str(a.ambient_dim(), a.dim()) + " vs " +
                            shape_str(b.ambient_dim(), b.dim()));
  }
}

/// Horizontal tangent vector anchored at a subspace representative.
class TangentVector {
 public:
  /// Horizontality is checked relative to the size of the direction.
  static constexpr double kHorizontalTol = 1e-10;

  TangentVector(Subspace anchor, Matrix direction)
      : anchor_(std::move(anchor)), direction_(std::move(direction)) {
    if (direction_.rows() != anchor_.ambient_dim() ||
        direction_.cols() != anchor_.dim()) {
      throw DimensionMismatch(
          "tangent direction " + shape_str(direction_.rows(), direction_.cols()) +
          " at subspace " + shape_str(anchor_.ambient_dim(), anchor_.dim()));
    }
    const double vert = (anchor_.basis().transpose() * direction_).norm();
    if (!(vert <= kHorizontalTol * std::max(1.0, direction_.norm()))) {
      throw std::invalid_argument("tangent direction is not horizontal (|U^T xi| = " +
                                  std::to_string(vert) + ")");
    }
  }

  const Subspace& anchor() const noexcept { return anchor_; }
  const Matrix& direction() const noexcept { return direction_; }
  double norm() const { return direction_.norm(); }

 private:
  Subspace anchor_;
  Matrix direction_;
};

/// Riemannian metric tr(a^T b) on horizontal vectors at a common anchor.
inline double inner(const TangentVector& a, const TangentVector& b) {
  return (a.direction().array() * b.direction().array()).sum();
}

/// Z - U (U^T Z). Applied twice so the result is horizontal to round-off even
/// when Z has a large vertical component.
inline TangentVector project_tangent(const Subspace& U, const Matrix& Z) {
  if (Z.rows() != U.ambient_dim() || Z.cols() != U.dim()) {
    throw DimensionMismatch("cannot project " + shape_str(Z.rows(), Z.cols()) +
                            " onto tangent space at " +
                            shape_str(U.ambient_dim(), U.dim()));
  }
  const Matrix& B = U.basis();
  Matrix h = Z - B * (B.transpose() * Z);
  h -= B * (B.transpose() * h);
  return TangentVector(U, std::move(h));
}

/// Euclidean gradient -> Riemannian gradient. Same map as project_tangent.
inline TangentVector egrad_to_rgrad(const Subspace& U, const Matrix& egrad) {
  return project_tangent(U, egrad);
}

inline TangentVector scaled(const TangentVector& xi, double s) {
  return TangentVector(xi.anchor(), s * xi.direction());
}

/// Thin QR with R having a positive diagonal; the returned basis spans the
/// column space of `basis`.
inline Subspace reorthonormalize(const Matrix& basis) {
  const Index m = basis.rows();
  const Index r = basis.cols();
  if (r < 1 || r > m) {
    throw DimensionMismatch("cannot orthonormalize " + shape_str(m, r));
  }
  Eigen::HouseholderQR<Matrix> qr(basis);
  Matrix q = qr.householderQ() * Matrix::Identity(m, r);
  const Matrix R = qr.matrixQR().topLeftCorner(r, r).triangularView<Eigen::Upper>();
  const double scale = std::max(R.diagonal().cwiseAbs().maxCoeff(), 0.0);
  for (Index k = 0; k < r; ++k) {
    const double d = R(k, k);
    if (!(std::abs(d) > 1e-12 * scale) || !std::isfinite(d)) {
      throw RankDeficient("basis column " + std::to_string(k) +
                          " is linearly dependent on the previous ones");
    }
    if (d < 0) q.col(k) = -q.col(k);
  }
  // One refinement pass brings the residual to ~1e-16 for tall bases.
  Eigen::HouseholderQR<Matrix> qr2(q);
  Matrix q2 = qr2.householderQ() * Matrix::Identity(m, r);
  for (Index k = 0; k < r; ++k) {
    if (qr2.matrixQR()(k, k) < 0) q2.col(k) = -q2.col(k);
  }
  return Subspace(std::move(q2));
}

inline Subspace reorthonormalize(const Subspace& U) {
  return reorthonormalize(U.basis());
}

/// Geodesic step: U V cos(S) V^T + W sin(S) V^T with W S V^T the thin SVD of
/// scale * xi. The result is re-orthonormalized if drift exceeds 1e-12.
inline Subspace exp_map(const Subspace& U, const TangentVector& xi, double scale) {
  require_same_shape(U, xi.anchor());
  if (U.basis() != xi.anchor().basis()) {
    throw std::invalid_argument("exp_map: tangent vector is anchored at a different point");
  }
  if (scale == 0.0 || xi.direction().isZero(0.0)) return U;
  const Matrix step = scale * xi.direction();
  Eigen::JacobiSVD<Matrix> svd(step, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const Matrix& V = svd.matrixV();
  const Vector c = s.array().cos().matrix();
  const Vector sn = s.array().sin().matrix();
  Matrix out = U.basis() * (V * c.asDiagonal() * V.transpose()) +
               svd.matrixU() * (sn.asDiagonal() * V.transpose());
  if (orthonormality_residual(out) > 1e-12) return reorthonormalize(out);
  return Subspace(std::move(out));
}

/// Smallest singular value of U^T V tolerated by log_map.
inline constexpr double kLogSingularTol = 1e-12;

/// Inverse of exp_map: P atan(S) Q^T with P S Q^T the thin SVD of
/// (V - U U^T V)(U^T V)^{-1}.
inline TangentVector log_map(const Subspace& U, const Subspace& V) {
  require_same_shape(U, V);
  const Matrix& Ub = U.basis();
  const Matrix& Vb = V.basis();
  const Matrix M = Ub.transpose() * Vb;
  Eigen::JacobiSVD<Matrix> msvd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector& ms = msvd.singularValues();
  if (!(ms(ms.size() - 1) >= kLogSingularTol)) {
    throw SubspacesTooFar("smallest singular value of U^T V is " +
                          std::to_string(ms(ms.size() - 1)));
  }
  // M^{-1} = Vm S^{-1} Um^T
  const Matrix Minv = msvd.matrixV() * ms.cwiseInverse().asDiagonal() *
                      msvd.matrixU().transpose();
  const Matrix H = (Vb - Ub * M) * Minv;
  Eigen::JacobiSVD<Matrix> hsvd(H, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector at = hsvd.singularValues().array().atan().matrix();
  Matrix dir = hsvd.matrixU() * at.asDiagonal() * hsvd.matrixV().transpose();
  dir -= Ub * (Ub.transpose() * dir);
  return TangentVector(U, std::move(dir));
}

/// Squared distance with the 0.5 convention: 0.5 * ||Log_U(V)||_F^2.
inline double dist_sq(const Subspace& U, const Subspace& V) {
  return 0.5 * log_map(U, V).direction().squaredNorm();
}

struct PrincipalAngles {
  Vector angles;  // ascending, radians, each in [0, pi/2]

  double sum_sq() const { return angles.squaredNorm(); }
};

/// Principal angles between column spaces. Angles below pi/4 come from the
/// sines (singular values of V - U U^T V); the rest from clamped arccos of
/// the singular values of U^T V.
inline PrincipalAngles principal_angles(const Subspace& U, const Subspace& V) {
  require_same_shape(U, V);
  const Index r = U.dim();
  const Matrix M = U.basis().transpose() * V.basis();
  const Vector cosines = Eigen::JacobiSVD<Matrix>(M).singularValues();  // descending
  const Matrix residual = V.basis() - U.basis() * M;
  const Vector sines = Eigen::JacobiSVD<Matrix>(residual).singularValues();  // descending
  Vector angles(r);
  for (Index k = 0; k < r; ++k) {
    const double c = std::clamp(cosines(k), 0.0, 1.0);
    const double s = std::clamp(sines(r - 1 - k), 0.0, 1.0);
    angles(k) = (c * c >= 0.5) ? std::asin(s) : std::acos(c);
  }
  std::sort(angles.data(), angles.data() + r);
  return PrincipalAngles{std::move(angles)};
}

/// Orthonormalized m x r standard Gaussian matrix (Haar-distributed point).
template <class Rng>
Subspace random_subspace(Index m, Index r, Rng& rng) {
  if (r < 1 || r > m) {
    throw DimensionMismatch("random_subspace requires 1 <= r <= m, got " + shape_str(m, r));
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix g(m, r);
  for (Index j = 0; j < r; ++j)
    for (Index i = 0; i < m; ++i) g(i, j) = gauss(rng);
  return reorthonormalize(g);
}

struct FrechetMeanResult {
  Subspace mean;
  int iterations = 0;
  bool converged = false;
  double final_tangent_norm = 0.0;
};

/// Karcher mean by the fixed-point iteration U <- Exp_U(mean_i Log_U(U_i)),
/// started at the first element.
inline FrechetMeanResult frechet_mean(std::span<const Subspace> subspaces,
                                      double tol = 1e-8, int max_iter = 100) {
  if (subspaces.empty()) throw std::invalid_argument("frechet_mean of an empty list");
  for (const auto& s : subspaces) require_same_shape(subspaces.front(), s);
  Subspace current = subspaces.front();
  const double inv_n = 1.0 / static_cast<double>(subspaces.size());
  for (int it = 0;; ++it) {
    Matrix acc = Matrix::Zero(current.ambient_dim(), current.dim());
    for (const auto& s : subspaces) acc += log_map(current, s).direction();
    acc *= inv_n;
    const double norm = acc.norm();
    if (norm < tol) return {std::move(current), it, true, norm};
    if (it >= max_iter) return {std::move(current), it, false, norm};
    current = exp_map(current, project_tangent(current, acc), 1.0);
  }
}

}  // namespace rgossip
