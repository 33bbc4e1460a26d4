#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rgossip/manifold.hpp"
#include "rgossip/problems.hpp"

using namespace rgossip;

namespace {

Matrix gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = g(rng);
  return out;
}

TangentVector random_tangent(const Subspace& U, std::mt19937_64& rng) {
  const Matrix Z = gaussian(U.ambient_dim(), U.dim(), rng);
  Matrix h = Z - U.basis() * (U.basis().transpose() * Z);
  return TangentVector(U, h / h.norm());
}

// Observed mask and values of a random dense matrix with roughly `fill` of
// the entries kept (plus the first r rows so every column is solvable).
struct DenseShard {
  Matrix Y;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask;
  std::vector<Entry> entries;
};

DenseShard dense_shard(Index m, Index n, Index r, double fill, std::mt19937_64& rng) {
  DenseShard d;
  d.Y = gaussian(m, r, rng) * gaussian(r, n, rng) + 0.1 * gaussian(m, n, rng);
  d.mask.setConstant(m, n, false);
  std::bernoulli_distribution keep(fill);
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < m; ++i) {
      if (i < r || keep(rng)) {
        d.mask(i, j) = true;
        d.entries.push_back({i, j, d.Y(i, j)});
      }
    }
  }
  return d;
}

Matrix masked(const Matrix& A, const DenseShard& d) {
  Matrix out = Matrix::Zero(A.rows(), A.cols());
  for (Index j = 0; j < A.cols(); ++j)
    for (Index i = 0; i < A.rows(); ++i)
      if (d.mask(i, j)) out(i, j) = A(i, j);
  return out;
}

template <class Task>
double value_at(const Task& task, const Subspace& U) {
  return task_cost(task, U.basis(), task_solve(task, U.basis()));
}

template <class Task>
void expect_gradient_matches_differences(const Task& task, const Subspace& U, int trials,
                                         std::mt19937_64& rng) {
  const auto sol = task_solve(task, U.basis());
  const TangentVector g = egrad_to_rgrad(U, task_egrad(task, U.basis(), sol));
  for (int k = 0; k < trials; ++k) {
    const auto xi = random_tangent(U, rng);
    const double h = 1e-6;
    const double fd =
        (value_at(task, exp_map(U, xi, h)) - value_at(task, exp_map(U, xi, -h))) / (2 * h);
    const double an = inner(g, xi);
    EXPECT_NEAR(an, fd, 1e-5 * std::max(std::abs(an), std::abs(fd))) << "trial " << k;
  }
}

TaskGroup random_group(Index m, Index r, int tasks, Index d, double lambda, std::mt19937_64& rng) {
  const Matrix Us = random_subspace(m, r, rng).basis();
  std::vector<RegressionTask> ts;
  for (int t = 0; t < tasks; ++t) {
    Matrix X = gaussian(d, m, rng);
    Vector y = X * (Us * gaussian(r, 1, rng)) + 0.1 * gaussian(d, 1, rng);
    ts.push_back({std::move(X), std::move(y)});
  }
  return TaskGroup(m, std::move(ts), lambda);
}

}  // namespace

// ---------------------------------------------------------------------------
// McShard
// ---------------------------------------------------------------------------

TEST(McShard, RegroupsTripletsByColumn) {
  const McShard s(4, 3, {{2, 1, 5.0}, {0, 1, 4.0}, {3, 0, 1.0}, {1, 2, 2.0}}, 0.0);
  ASSERT_EQ(s.column_rows(1).size(), 2u);
  EXPECT_EQ(s.column_rows(1)[0], 0);
  EXPECT_EQ(s.column_rows(1)[1], 2);
  EXPECT_EQ(s.column_values(1)[0], 4.0);
  EXPECT_EQ(s.column_values(1)[1], 5.0);
  EXPECT_EQ(s.observed(), 4u);
}

TEST(McShard, RejectsBadInput) {
  EXPECT_THROW(McShard(3, 2, {{0, 0, 1.0}, {0, 0, 2.0}, {1, 1, 1.0}}, 0.0), DataError);
  EXPECT_THROW(McShard(3, 2, {{3, 0, 1.0}, {1, 1, 1.0}}, 0.0), DataError);
  EXPECT_THROW(McShard(3, 2, {{0, 0, 1.0}}, 0.0), DataError);  // empty column at lambda 0
  EXPECT_NO_THROW(McShard(3, 2, {{0, 0, 1.0}}, 0.1));
  EXPECT_THROW(McShard(3, 1, {{0, 0, 1.0}}, -0.1), DataError);
}

// ---------------------------------------------------------------------------
// MC inner solve, cost, gradient
// ---------------------------------------------------------------------------

TEST(McInnerSolve, FullyObservedColumnIsProjection) {
  std::mt19937_64 rng(1);
  const Subspace U = random_subspace(8, 3, rng);
  const Vector y = gaussian(8, 1, rng);
  std::vector<Entry> e;
  for (Index i = 0; i < 8; ++i) e.push_back({i, 0, y(i)});
  const McShard s(8, 1, e, 0.0);
  const auto sol = mc_inner_solve(U, s);
  EXPECT_LT((sol.coeffs.row(0).transpose() - U.basis().transpose() * y).norm(), 1e-12);
}

TEST(McInnerSolve, LambdaOneIsRestrictedProjection) {
  std::mt19937_64 rng(2);
  const Subspace U = random_subspace(10, 3, rng);
  const std::vector<Index> rows{1, 4, 7};
  Vector expect = Vector::Zero(3);
  std::vector<Entry> e;
  for (Index i : rows) {
    const double v = 0.5 * static_cast<double>(i) - 1.0;
    e.push_back({i, 0, v});
    expect += v * U.basis().row(i).transpose();
  }
  const auto sol = mc_inner_solve(U, McShard(10, 1, e, 1.0));
  EXPECT_LT((sol.coeffs.row(0).transpose() - expect).norm(), 1e-12);
}

TEST(McInnerSolve, MatchesGenericQuadraticMinimizer) {
  std::mt19937_64 rng(3);
  const Subspace U = random_subspace(20, 5, rng);
  const double lam = 0.01;
  std::vector<Entry> e;
  Vector y(20);
  std::vector<Index> obs;
  for (Index i = 0; i < 20; ++i) {
    y(i) = std::sin(1.0 + i);
    if (i % 5 != 0 && i % 7 != 3) obs.push_back(i);
  }
  for (Index i : obs) e.push_back({i, 0, y(i)});
  ASSERT_NEAR(static_cast<double>(obs.size()) / 20.0, 0.6, 0.11);
  Matrix Uo(static_cast<Index>(obs.size()), 5);
  Vector yo(static_cast<Index>(obs.size()));
  for (std::size_t k = 0; k < obs.size(); ++k) {
    Uo.row(static_cast<Index>(k)) = U.basis().row(obs[k]);
    yo(static_cast<Index>(k)) = y(obs[k]);
  }
  auto objective = [&](const Vector& w) {
    return (Uo * w - yo).squaredNorm() + lam * (w.squaredNorm() - (Uo * w).squaredNorm());
  };
  // Recover the quadratic's Hessian and linear term by polarization.
  const Vector zero = Vector::Zero(5);
  const double f0 = objective(zero);
  Matrix H(5, 5);
  Vector g(5);
  for (Index a = 0; a < 5; ++a) {
    const Vector ea = Vector::Unit(5, a);
    g(a) = 0.5 * (objective(ea) - objective(-ea));
    for (Index b = 0; b < 5; ++b) {
      const Vector eb = Vector::Unit(5, b);
      H(a, b) = objective(ea + eb) - objective(ea) - objective(eb) + f0;
    }
  }
  const Vector w_star = H.fullPivLu().solve(-g);
  const auto sol = mc_inner_solve(U, McShard(20, 1, e, lam));
  EXPECT_LT((sol.coeffs.row(0).transpose() - w_star).norm(), 1e-8);
}

TEST(McInnerSolve, StationaryPerColumn) {
  std::mt19937_64 rng(4);
  const auto d = dense_shard(15, 10, 3, 0.5, rng);
  const Subspace U = random_subspace(15, 3, rng);
  for (double lam : {0.0, 0.05, 0.5}) {
    const McShard s(15, 10, d.entries, lam);
    const auto sol = mc_inner_solve(U, s);
    for (Index j = 0; j < 10; ++j) {
      Vector grad = Vector::Zero(3);
      Vector yj = Vector::Zero(15);
      for (Index i = 0; i < 15; ++i) {
        if (!d.mask(i, j)) continue;
        const double pred = U.basis().row(i).dot(sol.coeffs.row(j));
        grad += 2.0 * (pred - d.Y(i, j)) * U.basis().row(i).transpose();
        grad -= 2.0 * lam * pred * U.basis().row(i).transpose();
        yj(i) = d.Y(i, j);
      }
      grad += 2.0 * lam * sol.coeffs.row(j).transpose();
      EXPECT_LE(grad.norm(), 1e-8 * (1.0 + yj.norm()));
    }
  }
}

TEST(McCost, ExactFitIsZero) {
  std::mt19937_64 rng(5);
  const Subspace U = random_subspace(12, 2, rng);
  const Matrix W = gaussian(6, 2, rng);
  const Matrix Y = U.basis() * W.transpose();
  std::vector<Entry> e;
  for (Index j = 0; j < 6; ++j)
    for (Index i = j % 3; i < 12; i += 2) e.push_back({i, j, Y(i, j)});
  const McShard s(12, 6, e, 0.0);
  const auto sol = mc_inner_solve(U, s);
  EXPECT_NEAR(mc_cost(U, s, sol), 0.0, 1e-20);
  EXPECT_LT(mc_egrad(U, s, sol).norm(), 1e-12);
}

TEST(McCost, SingleResidualOfTwo) {
  // U = e_1, column observed at rows 0 and 1 with values (3, 2): w = 3,
  // residual -2 in row 1.
  const Subspace U(Matrix::Identity(2, 1));
  const McShard s(2, 1, {{0, 0, 3.0}, {1, 0, 2.0}}, 0.0);
  const auto sol = mc_inner_solve(U, s);
  EXPECT_DOUBLE_EQ(sol.coeffs(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(mc_cost(U, s, sol), 2.0);
}

TEST(McCost, MatchesDenseFormula) {
  std::mt19937_64 rng(6);
  const auto d = dense_shard(10, 8, 2, 0.5, rng);
  const Subspace U = random_subspace(10, 2, rng);
  const double lam = 0.01;
  const McShard s(10, 8, d.entries, lam);
  const auto sol = mc_inner_solve(U, s);
  const Matrix P = U.basis() * sol.coeffs.transpose();
  const double dense = 0.5 * masked(P - d.Y, d).squaredNorm() + lam * (P - masked(P, d)).squaredNorm();
  EXPECT_NEAR(mc_cost(U, s, sol), dense, 1e-10 * dense);
  EXPECT_GE(mc_cost(U, s, sol), 0.0);
}

TEST(McCost, StaleSolutionRejected) {
  std::mt19937_64 rng(7);
  const auto d = dense_shard(10, 8, 2, 0.5, rng);
  const McShard s(10, 8, d.entries, 0.0);
  const auto sol = mc_inner_solve(random_subspace(10, 2, rng), s);
  EXPECT_THROW(mc_cost(random_subspace(10, 3, rng), s, sol), DimensionMismatch);
}

TEST(McEgrad, LambdaZeroIsResidualTimesW) {
  std::mt19937_64 rng(8);
  const auto d = dense_shard(12, 9, 3, 0.6, rng);
  const Subspace U = random_subspace(12, 3, rng);
  const McShard s(12, 9, d.entries, 0.0);
  const auto sol = mc_inner_solve(U, s);
  const Matrix expect = masked(U.basis() * sol.coeffs.transpose() - d.Y, d) * sol.coeffs;
  EXPECT_LT((mc_egrad(U, s, sol) - expect).norm(), 1e-10 * expect.norm());
}

TEST(McEgrad, FiniteDifferencesLambdaPositive) {
  std::mt19937_64 rng(9);
  const auto d = dense_shard(20, 15, 3, 0.5, rng);
  const McShard s(20, 15, d.entries, 0.01);
  expect_gradient_matches_differences(s, random_subspace(20, 3, rng), 10, rng);
}

TEST(McEgrad, FiniteDifferencesLambdaZero) {
  std::mt19937_64 rng(10);
  const auto d = dense_shard(20, 15, 3, 0.5, rng);
  const McShard s(20, 15, d.entries, 0.0);
  expect_gradient_matches_differences(s, random_subspace(20, 3, rng), 10, rng);
}

TEST(PredictMc, MatchesDenseProduct) {
  std::mt19937_64 rng(11);
  const auto d = dense_shard(9, 7, 2, 0.5, rng);
  const Subspace U = random_subspace(9, 2, rng);
  const McShard s(9, 7, d.entries, 0.0);
  const auto sol = mc_inner_solve(U, s);
  const Matrix P = U.basis() * sol.coeffs.transpose();
  std::vector<CellQuery> q{{0, 0}, {8, 6}, {3, 4}};
  const auto out = predict_mc(U, s, sol, q);
  for (std::size_t k = 0; k < q.size(); ++k) EXPECT_NEAR(out[k], P(q[k].row, q[k].col), 1e-14);
  const std::vector<CellQuery> bad{{9, 0}};
  EXPECT_THROW(predict_mc(U, s, sol, bad), std::out_of_range);
}

TEST(PredictMc, ExactFitReproducesObservations) {
  Matrix u(3, 1);
  u << 1.0, 2.0, 2.0;
  const Subspace U(u / 3.0);
  const McShard s(3, 1, {{0, 0, 2.0}, {2, 0, 4.0}}, 0.0);
  const auto sol = mc_inner_solve(U, s);
  const std::vector<CellQuery> q{{0, 0}, {2, 0}, {1, 0}};
  const auto out = predict_mc(U, s, sol, q);
  EXPECT_NEAR(out[0], 2.0, 1e-14);
  EXPECT_NEAR(out[1], 4.0, 1e-14);
  EXPECT_NEAR(out[2], 4.0, 1e-14);  // rank-1: u_1 * w
}

// ---------------------------------------------------------------------------
// MTL
// ---------------------------------------------------------------------------

TEST(MtlInnerSolve, ExactRecovery) {
  std::mt19937_64 rng(20);
  const Subspace U = random_subspace(10, 3, rng);
  Matrix X = gaussian(7, 10, rng);
  Vector w(3);
  w << 1.5, -0.5, 2.0;
  const TaskGroup g(10, {{X, X * U.basis() * w}}, 0.0);
  const auto sol = mtl_inner_solve(U, g);
  EXPECT_LT((sol.coeffs.row(0).transpose() - w).norm(), 1e-10);
  EXPECT_NEAR(mtl_cost(U, g, sol), 0.0, 1e-18);
  EXPECT_LT(mtl_egrad(U, g, sol).norm(), 1e-9);
}

TEST(MtlInnerSolve, RidgePathShrinksMonotonically) {
  std::mt19937_64 rng(21);
  const Subspace U = random_subspace(8, 2, rng);
  const TaskGroup base = random_group(8, 2, 3, 6, 0.0, rng);
  std::vector<double> prev(3, std::numeric_limits<double>::infinity());
  for (double lam : {0.0, 0.1, 1.0, 10.0, 100.0, 1e4}) {
    const TaskGroup g(8, base.tasks(), lam);
    const auto sol = mtl_inner_solve(U, g);
    for (Index t = 0; t < 3; ++t) {
      const double n = sol.coeffs.row(t).norm();
      EXPECT_LT(n, prev[static_cast<std::size_t>(t)]);
      prev[static_cast<std::size_t>(t)] = n;
    }
  }
  for (double p : prev) EXPECT_LT(p, 1e-2);
}

TEST(MtlInnerSolve, SingleSampleScalarRidge) {
  // r = 1, one sample: w = (a y) / (a^2 + lambda) with a = x . u.
  Matrix u(3, 1);
  u << 2.0, 1.0, 2.0;
  const Subspace U(u / 3.0);
  Matrix x(1, 3);
  x << 1.0, 4.0, -2.0;
  const double y = 5.0;
  const double a = (1.0 * 2.0 + 4.0 * 1.0 - 2.0 * 2.0) / 3.0;
  const TaskGroup g(3, {{x, Vector::Constant(1, y)}}, 0.1);
  EXPECT_NEAR(mtl_inner_solve(U, g).coeffs(0, 0), a * y / (a * a + 0.1), 1e-14);
}

TEST(MtlInnerSolve, SingularAtLambdaZeroThrows) {
  std::mt19937_64 rng(22);
  const Subspace U = random_subspace(6, 3, rng);
  const TaskGroup g(6, {{gaussian(2, 6, rng), gaussian(2, 1, rng)}}, 0.0);
  EXPECT_THROW(mtl_inner_solve(U, g), RankDeficient);
}

TEST(MtlCost, IdentityDesignIsProjectionResidual) {
  std::mt19937_64 rng(23);
  const Subspace U = random_subspace(7, 2, rng);
  const Vector y = gaussian(7, 1, rng);
  const TaskGroup g(7, {{Matrix::Identity(7, 7), y}}, 0.0);
  const Vector resid = y - U.basis() * (U.basis().transpose() * y);
  EXPECT_NEAR(mtl_cost(U, g, mtl_inner_solve(U, g)), 0.5 * resid.squaredNorm(), 1e-12);
}

TEST(MtlEgrad, FiniteDifferences) {
  std::mt19937_64 rng(24);
  for (double lam : {0.0, 0.1}) {
    const TaskGroup g = random_group(30, 4, 5, 12, lam, rng);
    expect_gradient_matches_differences(g, random_subspace(30, 4, rng), 10, rng);
  }
}

TEST(TaskGroup, RejectsInconsistentTasks) {
  EXPECT_THROW(TaskGroup(3, {{Matrix::Zero(2, 4), Vector::Zero(2)}}, 0.0), DataError);
  EXPECT_THROW(TaskGroup(3, {{Matrix::Zero(2, 3), Vector::Zero(3)}}, 0.0), DataError);
  EXPECT_THROW(TaskGroup(3, {{Matrix::Zero(0, 3), Vector::Zero(0)}}, 0.0), DataError);
}

// ---------------------------------------------------------------------------
// Properties
// ---------------------------------------------------------------------------

template <class Task>
void expect_quadratic_remainder(const Task& task, const Subspace& U, std::mt19937_64& rng) {
  const auto sol = task_solve(task, U.basis());
  const double f0 = task_cost(task, U.basis(), sol);
  const TangentVector g = egrad_to_rgrad(U, task_egrad(task, U.basis(), sol));
  const auto xi = random_tangent(U, rng);
  const double slope = inner(g, xi);
  std::vector<double> ts{1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
  std::vector<double> rem;
  for (double t : ts) rem.push_back(std::abs(value_at(task, exp_map(U, xi, t)) - f0 - t * slope));
  // log-log slope of the remainder is 2
  const double p = std::log(rem[3] / rem[0]) / std::log(ts[3] / ts[0]);
  EXPECT_NEAR(p, 2.0, 0.25);
  for (std::size_t k = 0; k < ts.size(); ++k) EXPECT_LE(rem[k], 10.0 * rem.back() * std::pow(ts[k] / ts.back(), 2) + 1e-12);
}

TEST(ProblemsProperty, EnvelopeFirstOrderModel) {
  std::mt19937_64 rng(30);
  const auto d = dense_shard(20, 15, 3, 0.5, rng);
  for (double lam : {0.0, 0.01}) {
    expect_quadratic_remainder(McShard(20, 15, d.entries, lam), random_subspace(20, 3, rng), rng);
  }
  expect_quadratic_remainder(random_group(15, 3, 4, 10, 0.1, rng), random_subspace(15, 3, rng), rng);
}

TEST(ProblemsProperty, RotationInvariance) {
  std::mt19937_64 rng(31);
  const auto d = dense_shard(14, 9, 3, 0.5, rng);
  const Subspace U = random_subspace(14, 3, rng);
  Eigen::HouseholderQR<Matrix> qr(gaussian(3, 3, rng));
  const Matrix O = qr.householderQ() * Matrix::Identity(3, 3);
  const Subspace UO(U.basis() * O);
  for (double lam : {0.0, 0.01}) {
    const McShard s(14, 9, d.entries, lam);
    const auto a = mc_inner_solve(U, s);
    const auto b = mc_inner_solve(UO, s);
    EXPECT_NEAR(mc_cost(U, s, a), mc_cost(UO, s, b), 1e-10);
    EXPECT_LT((a.coeffs * O - b.coeffs).norm(), 1e-10);
  }
  const TaskGroup g = random_group(14, 3, 4, 9, 0.1, rng);
  const auto a = mtl_inner_solve(U, g);
  const auto b = mtl_inner_solve(UO, g);
  EXPECT_NEAR(mtl_cost(U, g, a), mtl_cost(UO, g, b), 1e-10);
  EXPECT_LT((a.coeffs * O - b.coeffs).norm(), 1e-10);
}

TEST(ProblemsProperty, MetricIsGramOfCoefficients) {
  std::mt19937_64 rng(32);
  const auto d = dense_shard(14, 9, 3, 0.5, rng);
  const Subspace U = random_subspace(14, 3, rng);
  const auto sol = mc_inner_solve(U, McShard(14, 9, d.entries, 0.0));
  EXPECT_LT((sol.metric - sol.coeffs.transpose() * sol.coeffs).norm(), 1e-12);
  const auto msol = mtl_inner_solve(U, random_group(14, 3, 4, 9, 0.1, rng));
  for (const auto& M : {sol.metric, msol.metric}) {
    EXPECT_LT((M - M.transpose()).norm(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(M);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
    Matrix shifted = M;
    shifted.diagonal().array() += 1e-3;
    EXPECT_EQ(Eigen::LLT<Matrix>(shifted).info(), Eigen::Success);
  }
}

TEST(ProblemsProperty, CostDecomposesOverColumnBlocks) {
  std::mt19937_64 rng(33);
  const auto d = dense_shard(12, 10, 2, 0.5, rng);
  const Subspace U = random_subspace(12, 2, rng);
  const double lam = 0.01;
  const McShard whole(12, 10, d.entries, lam);
  const double total = mc_cost(U, whole, mc_inner_solve(U, whole));
  double sum = 0.0;
  for (auto [b, e] : {std::pair<Index, Index>{0, 3}, {3, 7}, {7, 10}}) {
    std::vector<Entry> part;
    for (const auto& x : d.entries)
      if (x.col >= b && x.col < e) part.push_back({x.row, x.col - b, x.value});
    const McShard s(12, e - b, part, lam);
    sum += mc_cost(U, s, mc_inner_solve(U, s));
  }
  EXPECT_NEAR(sum, total, 1e-10 * total);
}
