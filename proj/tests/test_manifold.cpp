#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "rgossip/manifold.hpp"

using namespace rgossip;
using std::numbers::pi;

namespace {

Subspace line(double theta) {
  Matrix b(2, 1);
  b << std::cos(theta), std::sin(theta);
  return Subspace(b);
}

Matrix gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = g(rng);
  return out;
}

TangentVector random_tangent(const Subspace& U, double norm, std::mt19937_64& rng) {
  const Matrix Z = gaussian(U.ambient_dim(), U.dim(), rng);
  const Matrix& B = U.basis();
  Matrix h = Z - B * (B.transpose() * Z);
  h -= B * (B.transpose() * h);
  h *= norm / h.norm();
  return TangentVector(U, h);
}

// Principal angles from the eigenvalues of (U^T V)(U^T V)^T, independent of
// the library's SVD-based routine.
Vector oracle_angles(const Subspace& U, const Subspace& V) {
  const Matrix M = U.basis().transpose() * V.basis();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(M * M.transpose());
  Vector th = eig.eigenvalues();
  for (Index k = 0; k < th.size(); ++k) th(k) = std::acos(std::sqrt(std::clamp(th(k), 0.0, 1.0)));
  std::sort(th.data(), th.data() + th.size());
  return th;
}

Matrix random_orthogonal(Index r, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(r, r, rng));
  return qr.householderQ() * Matrix::Identity(r, r);
}

}  // namespace

TEST(Subspace, RejectsNonOrthonormalBasis) {
  EXPECT_THROW(Subspace(Matrix::Ones(3, 2)), RankDeficient);
  EXPECT_THROW(Subspace(Matrix::Identity(2, 3)), DimensionMismatch);
  EXPECT_NO_THROW(Subspace(Matrix::Identity(4, 2)));
}

TEST(TangentVector, RejectsVerticalDirection) {
  const Subspace U(Matrix::Identity(3, 1));
  Matrix z(3, 1);
  z << 1.0, 0.0, 0.0;
  EXPECT_THROW(TangentVector(U, z), std::invalid_argument);
  EXPECT_THROW(TangentVector(U, Matrix::Zero(3, 2)), DimensionMismatch);
}

TEST(ProjectTangent, HandExample) {
  const Subspace U = line(0.0);
  Matrix z(2, 1);
  z << 3.0, 4.0;
  const auto xi = project_tangent(U, z);
  EXPECT_DOUBLE_EQ(xi.direction()(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(xi.direction()(1, 0), 4.0);
}

TEST(ProjectTangent, VerticalDirectionsVanishAndHorizontalOnesAreFixed) {
  std::mt19937_64 rng(1);
  const Subspace U = random_subspace(12, 3, rng);
  const Matrix M = gaussian(3, 3, rng);
  EXPECT_LT(project_tangent(U, U.basis() * M).norm(), 1e-13);
  const auto xi = random_tangent(U, 1.0, rng);
  const auto again = project_tangent(U, xi.direction());
  EXPECT_LT((again.direction() - xi.direction()).norm(), 1e-14);
  const auto rg = egrad_to_rgrad(U, xi.direction());
  EXPECT_LT((rg.direction() - xi.direction()).norm(), 1e-14);
}

TEST(ProjectTangent, ShapeMismatchThrows) {
  const Subspace U(Matrix::Identity(4, 2));
  EXPECT_THROW(project_tangent(U, Matrix::Zero(4, 3)), DimensionMismatch);
}

TEST(ExpMap, ZeroScaleReturnsSameSubspace) {
  std::mt19937_64 rng(2);
  const Subspace U = random_subspace(10, 3, rng);
  const auto xi = random_tangent(U, 0.7, rng);
  const Subspace V = exp_map(U, xi, 0.0);
  EXPECT_LT(oracle_angles(U, V).maxCoeff(), 1e-7);
}

TEST(ExpMap, PlaneRotation) {
  const Subspace U = line(0.0);
  Matrix d(2, 1);
  d << 0.0, pi / 6;
  const Subspace V = exp_map(U, TangentVector(U, d), 1.0);
  EXPECT_NEAR(std::abs(V.basis()(0, 0)), std::cos(pi / 6), 1e-14);
  EXPECT_NEAR(std::abs(V.basis()(1, 0)), std::sin(pi / 6), 1e-14);
}

TEST(ExpMap, RejectsForeignAnchor) {
  std::mt19937_64 rng(3);
  const Subspace U = random_subspace(6, 2, rng);
  const Subspace V = random_subspace(6, 2, rng);
  EXPECT_THROW(exp_map(U, random_tangent(V, 0.1, rng), 1.0), std::invalid_argument);
}

TEST(LogMap, InvertsExpForSmallTangents) {
  std::mt19937_64 rng(4);
  const Subspace U = random_subspace(20, 4, rng);
  const auto xi = random_tangent(U, 0.3, rng);
  const auto back = log_map(U, exp_map(U, xi, 1.0));
  EXPECT_LT((back.direction() - xi.direction()).norm(), 1e-8);
}

TEST(LogMap, SameSubspaceGivesZero) {
  std::mt19937_64 rng(5);
  const Subspace U = random_subspace(9, 3, rng);
  const Subspace V(U.basis() * random_orthogonal(3, rng));
  EXPECT_LT(log_map(U, V).norm(), 1e-12);
  EXPECT_NEAR(dist_sq(U, V), 0.0, 1e-20);
}

TEST(LogMap, PlaneAngle) {
  EXPECT_NEAR(log_map(line(0.0), line(pi / 4)).norm(), pi / 4, 1e-14);
}

TEST(LogMap, OrthogonalSubspacesAreTooFar) {
  EXPECT_THROW(log_map(line(0.0), line(pi / 2)), SubspacesTooFar);
  EXPECT_THROW(dist_sq(line(0.0), line(pi / 2)), SubspacesTooFar);
}

TEST(LogMap, NormMatchesPrincipalAngles) {
  std::mt19937_64 rng(6);
  for (int k = 0; k < 20; ++k) {
    const Subspace U = random_subspace(15, 3, rng);
    const Subspace V = random_subspace(15, 3, rng);
    EXPECT_NEAR(log_map(U, V).norm(), oracle_angles(U, V).norm(), 1e-8);
  }
}

TEST(DistSq, PlaneValue) {
  EXPECT_NEAR(dist_sq(line(0.0), line(pi / 4)), pi * pi / 32, 1e-14);
}

TEST(DistSq, SymmetricAndMatchesOracleOnRandomPairs) {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 100; ++k) {
    const Subspace U = random_subspace(12, 2, rng);
    const Subspace V = random_subspace(12, 2, rng);
    const double d = dist_sq(U, V);
    EXPECT_NEAR(d, dist_sq(V, U), 1e-8);
    EXPECT_NEAR(d, 0.5 * oracle_angles(U, V).squaredNorm(), 1e-8);
    EXPECT_GE(d, 0.0);
  }
}

TEST(PrincipalAngles, PlaneAndIdentity) {
  const auto pa = principal_angles(line(0.1), line(0.1 + pi / 3));
  ASSERT_EQ(pa.angles.size(), 1);
  EXPECT_NEAR(pa.angles(0), pi / 3, 1e-14);

  std::mt19937_64 rng(8);
  const Subspace U = random_subspace(8, 3, rng);
  const Subspace V(U.basis() * random_orthogonal(3, rng));
  EXPECT_LT(principal_angles(U, V).angles.maxCoeff(), 1e-7);
}

TEST(PrincipalAngles, SortedWithinRangeAndAgreesWithOracle) {
  std::mt19937_64 rng(9);
  for (int k = 0; k < 50; ++k) {
    const Subspace U = random_subspace(10, 4, rng);
    const Subspace V = random_subspace(10, 4, rng);
    const auto pa = principal_angles(U, V);
    for (Index i = 0; i < pa.angles.size(); ++i) {
      EXPECT_GE(pa.angles(i), 0.0);
      EXPECT_LE(pa.angles(i), pi / 2);
      if (i > 0) {
        EXPECT_LE(pa.angles(i - 1), pa.angles(i));
      }
    }
    EXPECT_LT((pa.angles - oracle_angles(U, V)).cwiseAbs().maxCoeff(), 1e-7);
  }
}

TEST(PrincipalAngles, ShapeMismatchThrows) {
  EXPECT_THROW(principal_angles(Subspace(Matrix::Identity(4, 2)), Subspace(Matrix::Identity(4, 1))),
               DimensionMismatch);
}

TEST(RandomSubspace, FullDimensionIsOrthogonal) {
  std::mt19937_64 rng(10);
  const Subspace Q = random_subspace(6, 6, rng);
  EXPECT_LT((Q.basis() * Q.basis().transpose() - Matrix::Identity(6, 6)).norm(), 1e-13);
}

TEST(RandomSubspace, DeterministicPerSeed) {
  std::mt19937_64 a(42), b(42);
  EXPECT_EQ(random_subspace(20, 4, a).basis(), random_subspace(20, 4, b).basis());
}

TEST(RandomSubspace, RejectsRankAboveAmbient) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(random_subspace(3, 4, rng), DimensionMismatch);
}

TEST(RandomSubspace, MeanDistanceBounded) {
  std::mt19937_64 rng(11);
  double acc = 0.0;
  const int draws = 200;
  for (int k = 0; k < draws; ++k) {
    acc += dist_sq(random_subspace(50, 5, rng), random_subspace(50, 5, rng));
  }
  const double mean = acc / draws;
  EXPECT_GT(mean, 0.0);
  EXPECT_LE(mean, 0.5 * 5 * (pi / 2) * (pi / 2));
}

TEST(FrechetMean, IdenticalInputsNeedNoIterations) {
  std::mt19937_64 rng(12);
  const Subspace U = random_subspace(10, 2, rng);
  const std::vector<Subspace> xs{U, Subspace(U.basis() * random_orthogonal(2, rng)), U};
  const auto res = frechet_mean(xs);
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.iterations, 0);
  EXPECT_LT(principal_angles(res.mean, U).angles.maxCoeff(), 1e-7);
}

TEST(FrechetMean, MidpointOfTwoLines) {
  const double theta = 0.9;
  const std::vector<Subspace> xs{line(0.0), line(theta)};
  const auto res = frechet_mean(xs);
  EXPECT_TRUE(res.converged);
  EXPECT_NEAR(principal_angles(res.mean, line(theta / 2)).angles(0), 0.0, 1e-6);
  EXPECT_NEAR(dist_sq(res.mean, xs[0]), dist_sq(res.mean, xs[1]), 1e-6);
}

TEST(FrechetMean, SingleInputAndEmptyList) {
  std::mt19937_64 rng(13);
  const std::vector<Subspace> one{random_subspace(7, 3, rng)};
  EXPECT_LT(principal_angles(frechet_mean(one).mean, one[0]).angles.maxCoeff(), 1e-7);
  EXPECT_THROW(frechet_mean(std::span<const Subspace>()), std::invalid_argument);
}

TEST(FrechetMean, StationaryForRandomCluster) {
  std::mt19937_64 rng(14);
  const Subspace c = random_subspace(20, 3, rng);
  std::vector<Subspace> xs;
  for (int k = 0; k < 5; ++k) xs.push_back(exp_map(c, random_tangent(c, 0.3, rng), 1.0));
  const auto res = frechet_mean(xs);
  ASSERT_TRUE(res.converged);
  Matrix acc = Matrix::Zero(20, 3);
  for (const auto& x : xs) acc += log_map(res.mean, x).direction();
  EXPECT_LT(acc.norm() / 5, 1e-8);
}

TEST(Reorthonormalize, KeepsColumnSpace) {
  std::mt19937_64 rng(15);
  const Subspace U = random_subspace(30, 4, rng);
  EXPECT_LT(principal_angles(reorthonormalize(U), U).angles.maxCoeff(), 1e-7);
  const Subspace S = reorthonormalize(Matrix(2.0 * U.basis()));
  EXPECT_LT(principal_angles(S, U).angles.maxCoeff(), 1e-7);
  EXPECT_LT(orthonormality_residual(S.basis()), 1e-14);
}

TEST(Reorthonormalize, RepairsSmallPerturbation) {
  std::mt19937_64 rng(16);
  const Subspace U = random_subspace(40, 5, rng);
  const Matrix off = U.basis() + 1e-6 * gaussian(40, 5, rng);
  const Subspace S = reorthonormalize(off);
  EXPECT_LT(orthonormality_residual(S.basis()), 1e-14);
  // positive-diagonal convention: S^T off is upper triangular with positive diagonal
  const Matrix R = S.basis().transpose() * off;
  for (Index k = 0; k < 5; ++k) EXPECT_GT(R(k, k), 0.0);
  EXPECT_LT(R.triangularView<Eigen::StrictlyLower>().toDenseMatrix().norm(), 1e-12);
}

TEST(Reorthonormalize, RankDeficientThrows) {
  Matrix b = Matrix::Zero(5, 2);
  b(0, 0) = 1.0;
  b(0, 1) = 2.0;
  EXPECT_THROW(reorthonormalize(b), RankDeficient);
}

// ---------------------------------------------------------------------------
// Properties
// ---------------------------------------------------------------------------

TEST(ManifoldProperty, LogExpInversePair) {
  std::mt19937_64 rng(100);
  for (int k = 0; k < 100; ++k) {
    const Subspace U = random_subspace(25, 3, rng);
    std::uniform_real_distribution<double> len(0.0, 0.5);
    const auto xi = random_tangent(U, len(rng), rng);
    EXPECT_LE((log_map(U, exp_map(U, xi, 1.0)).direction() - xi.direction()).norm(), 1e-8);
  }
}

TEST(ManifoldProperty, UnitSpeedGeodesics) {
  std::mt19937_64 rng(101);
  for (int k = 0; k < 30; ++k) {
    const Subspace U = random_subspace(20, 3, rng);
    const auto xi = random_tangent(U, 1.0, rng);
    for (double t : {0.05, 0.2, 0.35, 0.5}) {
      const double expect = 0.5 * t * t;
      EXPECT_NEAR(dist_sq(U, exp_map(U, xi, t)) / expect, 1.0, 1e-6);
    }
  }
}

TEST(ManifoldProperty, OutputsStayHorizontal) {
  std::mt19937_64 rng(102);
  for (int k = 0; k < 30; ++k) {
    const Subspace U = random_subspace(18, 4, rng);
    const Subspace V = random_subspace(18, 4, rng);
    EXPECT_LE((U.basis().transpose() * log_map(U, V).direction()).norm(), 1e-10);
    const Matrix Z = 1e3 * gaussian(18, 4, rng);
    EXPECT_LE((U.basis().transpose() * project_tangent(U, Z).direction()).norm(), 1e-10);
  }
}

TEST(ManifoldProperty, OrthonormalAfterThousandSteps) {
  std::mt19937_64 rng(103);
  Subspace U = random_subspace(50, 5, rng);
  for (int k = 1; k <= 1000; ++k) {
    U = exp_map(U, random_tangent(U, 0.05, rng), 1.0);
    if (k % 100 == 0) U = reorthonormalize(U);
    ASSERT_LE(orthonormality_residual(U.basis()), 1e-10) << "step " << k;
  }
}

TEST(ManifoldProperty, DistanceMatchesAngleOracle) {
  std::mt19937_64 rng(104);
  int used = 0;
  while (used < 100) {
    const Subspace U = random_subspace(50, 5, rng);
    const Subspace V = random_subspace(50, 5, rng);
    const Vector th = oracle_angles(U, V);
    if (th.maxCoeff() >= pi / 2 - 0.1) continue;
    EXPECT_NEAR(2.0 * dist_sq(U, V), th.squaredNorm(), 1e-8);
    ++used;
  }
}
