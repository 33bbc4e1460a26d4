#pragma once

// Local subspace-learning tasks: matrix completion shards and multitask
// regression groups. Each exposes an inner closed-form solve for the
// coefficients given a basis U, the outer cost, and its exact Euclidean
// gradient with respect to U.
//
// The cores take an arbitrary full-column-rank m x r matrix so the
// Euclidean-geometry baseline can reuse them. With an orthonormal basis they
// reduce to the Grassmann formulas.

#include <Eigen/Dense>

#include <algorithm>
#include <concepts>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rgossip/errors.hpp"
#include "rgossip/manifold.hpp"

namespace rgossip {

/// One observed matrix entry. Indices are 0-based.
struct Entry {
  Index row = 0;
  Index col = 0;
  double value = 0.0;

  friend bool operator==(const Entry&, const Entry&) = default;
};

/// Coefficients of the inner problem plus the r x r Gram term used by the
/// preconditioner.
struct InnerSolution {
  Matrix coeffs;  // one row per local column (MC) or per task (MTL)
  Matrix metric;  // coeffs^T coeffs
};

namespace detail {

/// rcond threshold below which a normal-equation system counts as singular.
inline constexpr double kSingularRcond = 1e-12;

inline Vector spd_solve(const Matrix& A, const Vector& b, bool* singular = nullptr) {
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() == Eigen::Success && llt.rcond() > kSingularRcond) {
    if (singular) *singular = false;
    return llt.solve(b);
  }
  if (singular) *singular = true;
  return Eigen::CompleteOrthogonalDecomposition<Matrix>(A).solve(b);
}

inline void check_basis(const Matrix& U, Index m, const char* who) {
  if (U.rows() != m || U.cols() < 1) {
    throw DimensionMismatch(std::string(who) + ": basis " + shape_str(U.rows(), U.cols()) +
                            " does not match ambient dimension " + std::to_string(m));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix completion
// ---------------------------------------------------------------------------

/// Observed entries of an m x n_i column block with a compressed per-column
/// index. Local column indices are 0-based.
class McShard {
 public:
  McShard(Index m, Index n_cols, std::vector<Entry> triplets, double lambda)
      : m_(m), n_(n_cols), lambda_(lambda), triplets_(std::move(triplets)) {
    if (m < 1 || n_cols < 0) throw DataError("McShard: invalid shape " + shape_str(m, n_cols));
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw DataError("McShard: lambda must lie in [0, 1], got " + std::to_string(lambda));
    }
    col_ptr_.assign(static_cast<std::size_t>(n_) + 1, 0);
    for (const auto& e : triplets_) {
      if (e.row < 0 || e.row >= m_ || e.col < 0 || e.col >= n_) {
        throw DataError("McShard: entry (" + std::to_string(e.row) + ", " +
                        std::to_string(e.col) + ") outside " + shape_str(m_, n_));
      }
      ++col_ptr_[static_cast<std::size_t>(e.col) + 1];
    }
    for (std::size_t j = 0; j < static_cast<std::size_t>(n_); ++j) col_ptr_[j + 1] += col_ptr_[j];
    rows_.resize(triplets_.size());
    values_.resize(triplets_.size());
    std::vector<std::size_t> fill(col_ptr_.begin(), col_ptr_.end() - 1);
    for (const auto& e : triplets_) {
      const auto pos = fill[static_cast<std::size_t>(e.col)]++;
      rows_[pos] = e.row;
      values_[pos] = e.value;
    }
    for (Index j = 0; j < n_; ++j) {
      const auto b = col_ptr_[static_cast<std::size_t>(j)];
      const auto e = col_ptr_[static_cast<std::size_t>(j) + 1];
      std::vector<std::size_t> order(e - b);
      for (std::size_t k = 0; k < order.size(); ++k) order[k] = b + k;
      std::sort(order.begin(), order.end(),
                [&](std::size_t x, std::size_t y) { return rows_[x] < rows_[y]; });
      std::vector<Index> r(order.size());
      std::vector<double> v(order.size());
      for (std::size_t k = 0; k < order.size(); ++k) {
        r[k] = rows_[order[k]];
        v[k] = values_[order[k]];
        if (k > 0 && r[k] == r[k - 1]) {
          throw DataError("McShard: duplicate entry (" + std::to_string(r[k]) + ", " +
                          std::to_string(j) + ")");
        }
      }
      std::copy(r.begin(), r.end(), rows_.begin() + static_cast<std::ptrdiff_t>(b));
      std::copy(v.begin(), v.end(), values_.begin() + static_cast<std::ptrdiff_t>(b));
      if (lambda_ == 0.0 && b == e) {
        throw DataError("McShard: local column " + std::to_string(j) +
                        " has no observed entries; its coefficients are undetermined at lambda = 0");
      }
    }
  }

  Index rows() const noexcept { return m_; }
  Index cols() const noexcept { return n_; }
  double lambda() const noexcept { return lambda_; }
  std::size_t observed() const noexcept { return triplets_.size(); }
  const std::vector<Entry>& triplets() const noexcept { return triplets_; }

  std::span<const Index> column_rows(Index j) const {
    const auto b = col_ptr_[static_cast<std::size_t>(j)];
    const auto e = col_ptr_[static_cast<std::size_t>(j) + 1];
    return {rows_.data() + b, e - b};
  }
  std::span<const double> column_values(Index j) const {
    const auto b = col_ptr_[static_cast<std::size_t>(j)];
    const auto e = col_ptr_[static_cast<std::size_t>(j) + 1];
    return {values_.data() + b, e - b};
  }

 private:
  Index m_;
  Index n_;
  double lambda_;
  std::vector<Entry> triplets_;
  std::vector<std::size_t> col_ptr_;
  std::vector<Index> rows_;
  std::vector<double> values_;
};

namespace detail {

struct ColumnSystem {
  Matrix gram;  // U_O^T U_O
  Vector rhs;   // U_O^T y
};

inline ColumnSystem column_system(const Matrix& U, std::span<const Index> rows,
                                  std::span<const double> vals) {
  const Index r = U.cols();
  ColumnSystem s{Matrix::Zero(r, r), Vector::Zero(r)};
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto u = U.row(rows[k]).transpose();
    s.gram.noalias() += u * u.transpose();
    s.rhs += vals[k] * u;
  }
  return s;
}

inline void check_mc_solution(const McShard& shard, const Matrix& U, const InnerSolution& sol) {
  if (sol.coeffs.rows() != shard.cols() || sol.coeffs.cols() != U.cols()) {
    throw DimensionMismatch("stale MC inner solution: coefficients " +
                            shape_str(sol.coeffs.rows(), sol.coeffs.cols()) + ", expected " +
                            shape_str(shard.cols(), U.cols()));
  }
}

}  // namespace detail

/// Per local column j, minimizes ||U_O w - y||^2 + lambda (w^T U^T U w - ||U_O w||^2)
/// over w, where O are the rows observed in column j. The closed form is
/// ((1 - lambda) U_O^T U_O + lambda U^T U) w = U_O^T y; with orthonormal U the
/// second term is lambda I.
inline InnerSolution mc_inner_solve(const Matrix& U, const McShard& shard) {
  detail::check_basis(U, shard.rows(), "mc_inner_solve");
  const Index r = U.cols();
  const double lam = shard.lambda();
  const Matrix C = (lam > 0.0) ? Matrix(U.transpose() * U) : Matrix::Zero(r, r);
  InnerSolution sol{Matrix::Zero(shard.cols(), r), Matrix()};
  for (Index j = 0; j < shard.cols(); ++j) {
    const auto rows = shard.column_rows(j);
    if (rows.empty()) continue;  // lambda > 0: w_j = 0
    auto sys = detail::column_system(U, rows, shard.column_values(j));
    Matrix A = (1.0 - lam) * sys.gram + lam * C;
    sol.coeffs.row(j) = detail::spd_solve(A, sys.rhs).transpose();
  }
  sol.metric = sol.coeffs.transpose() * sol.coeffs;
  return sol;
}

inline InnerSolution mc_inner_solve(const Subspace& U, const McShard& shard) {
  return mc_inner_solve(U.basis(), shard);
}

/// 0.5 ||P_O(U W^T) - P_O(Y)||^2 + lambda (||U W^T||^2 - ||P_O(U W^T)||^2),
/// evaluated from the observed entries and the r x r Gram matrices only.
inline double mc_cost(const Matrix& U, const McShard& shard, const InnerSolution& sol) {
  detail::check_basis(U, shard.rows(), "mc_cost");
  detail::check_mc_solution(shard, U, sol);
  const double lam = shard.lambda();
  double fit = 0.0;
  double pred_sq = 0.0;
  for (Index j = 0; j < shard.cols(); ++j) {
    const auto rows = shard.column_rows(j);
    const auto vals = shard.column_values(j);
    const auto w = sol.coeffs.row(j);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const double pred = U.row(rows[k]).dot(w);
      fit += (pred - vals[k]) * (pred - vals[k]);
      pred_sq += pred * pred;
    }
  }
  double cost = 0.5 * fit;
  if (lam > 0.0) {
    const double full = (U.transpose() * U).cwiseProduct(sol.metric).sum();  // ||U W^T||_F^2
    cost += lam * (full - pred_sq);
  }
  return cost;
}

inline double mc_cost(const Subspace& U, const McShard& shard, const InnerSolution& sol) {
  return mc_cost(U.basis(), shard, sol);
}

/// Total derivative of mc_cost(U, shard, mc_inner_solve(U, shard)) with
/// respect to U. For lambda = 0 this is (P_O(U W^T) - P_O(Y)) W. For
/// lambda > 0 the inner minimizer is not stationary for the outer cost (the
/// regularizer is weighted differently in the two), so an adjoint term
/// accounts for dW/dU.
inline Matrix mc_egrad(const Matrix& U, const McShard& shard, const InnerSolution& sol) {
  detail::check_basis(U, shard.rows(), "mc_egrad");
  detail::check_mc_solution(shard, U, sol);
  const Index r = U.cols();
  const double lam = shard.lambda();
  Matrix E = Matrix::Zero(U.rows(), r);
  if (lam == 0.0) {
    for (Index j = 0; j < shard.cols(); ++j) {
      const auto rows = shard.column_rows(j);
      const auto vals = shard.column_values(j);
      const auto w = sol.coeffs.row(j);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const double res = U.row(rows[k]).dot(w) - vals[k];
        E.row(rows[k]) += res * w;
      }
    }
    return E;
  }

  const Matrix C = U.transpose() * U;
  Matrix Z = Matrix::Zero(shard.cols(), r);
  for (Index j = 0; j < shard.cols(); ++j) {
    const auto rows = shard.column_rows(j);
    if (rows.empty()) continue;
    const auto vals = shard.column_values(j);
    const Vector w = sol.coeffs.row(j).transpose();
    auto sys = detail::column_system(U, rows, vals);
    const Matrix A = (1.0 - lam) * sys.gram + lam * C;
    // d(column cost)/dw
    const Vector g = sys.gram * w - sys.rhs + 2.0 * lam * (C * w - sys.gram * w);
    const Vector z = detail::spd_solve(A, g);
    Z.row(j) = z.transpose();
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto u = U.row(rows[k]);
      const double pred = u.dot(w);
      const double res = pred - vals[k];
      const double uz = u.dot(z);
      E.row(rows[k]) += (res - 2.0 * lam * pred - (1.0 - lam) * uz) * w.transpose() +
                        (vals[k] - (1.0 - lam) * pred) * z.transpose();
    }
  }
  const Matrix WtZ = sol.coeffs.transpose() * Z;
  E += 2.0 * lam * U * sol.metric - lam * U * (WtZ + WtZ.transpose());
  return E;
}

inline Matrix mc_egrad(const Subspace& U, const McShard& shard, const InnerSolution& sol) {
  return mc_egrad(U.basis(), shard, sol);
}

struct CellQuery {
  Index row = 0;
  Index col = 0;  // local column
};

/// Entries of U W^T at the query positions.
inline std::vector<double> predict_mc(const Matrix& U, const McShard& shard,
                                      const InnerSolution& sol,
                                      std::span<const CellQuery> queries) {
  detail::check_mc_solution(shard, U, sol);
  std::vector<double> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    if (q.row < 0 || q.row >= shard.rows() || q.col < 0 || q.col >= shard.cols()) {
      throw std::out_of_range("predict_mc: query (" + std::to_string(q.row) + ", " +
                              std::to_string(q.col) + ") outside " +
                              shape_str(shard.rows(), shard.cols()));
    }
    out.push_back(U.row(q.row).dot(sol.coeffs.row(q.col)));
  }
  return out;
}

inline std::vector<double> predict_mc(const Subspace& U, const McShard& shard,
                                      const InnerSolution& sol,
                                      std::span<const CellQuery> queries) {
  return predict_mc(U.basis(), shard, sol, queries);
}

// ---------------------------------------------------------------------------
// Multitask feature learning
// ---------------------------------------------------------------------------

/// Training data of one regression task: X is d_t x m, y has d_t entries.
struct RegressionTask {
  Matrix X;
  Vector y;
};

/// Tasks handled by one agent, sharing the feature dimension m.
class TaskGroup {
 public:
  TaskGroup(Index m, std::vector<RegressionTask> tasks, double lambda)
      : m_(m), lambda_(lambda), tasks_(std::move(tasks)) {
    if (m < 1) throw DataError("TaskGroup: feature dimension must be positive");
    if (!(lambda >= 0.0)) throw DataError("TaskGroup: lambda must be nonnegative");
    for (std::size_t t = 0; t < tasks_.size(); ++t) {
      const auto& task = tasks_[t];
      if (task.X.cols() != m_ || task.X.rows() != task.y.size() || task.X.rows() < 1) {
        throw DataError("TaskGroup: task " + std::to_string(t) + " has X " +
                        shape_str(task.X.rows(), task.X.cols()) + " and " +
                        std::to_string(task.y.size()) + " labels (m = " + std::to_string(m_) +
                        ")");
      }
    }
  }

  Index rows() const noexcept { return m_; }
  double lambda() const noexcept { return lambda_; }
  std::size_t size() const noexcept { return tasks_.size(); }
  const std::vector<RegressionTask>& tasks() const noexcept { return tasks_; }

 private:
  Index m_;
  double lambda_;
  std::vector<RegressionTask> tasks_;
};

namespace detail {

inline void check_mtl_solution(const TaskGroup& group, const Matrix& U, const InnerSolution& sol) {
  if (sol.coeffs.rows() != static_cast<Index>(group.size()) || sol.coeffs.cols() != U.cols()) {
    throw DimensionMismatch("stale MTL inner solution: weights " +
                            shape_str(sol.coeffs.rows(), sol.coeffs.cols()) + ", expected " +
                            shape_str(static_cast<Index>(group.size()), U.cols()));
  }
}

}  // namespace detail

/// Ridge solve per task: w_t = (U^T X^T X U + lambda I)^{-1} U^T X^T y.
inline InnerSolution mtl_inner_solve(const Matrix& U, const TaskGroup& group) {
  detail::check_basis(U, group.rows(), "mtl_inner_solve");
  const Index r = U.cols();
  InnerSolution sol{Matrix::Zero(static_cast<Index>(group.size()), r), Matrix()};
  for (std::size_t t = 0; t < group.size(); ++t) {
    const auto& task = group.tasks()[t];
    const Matrix XU = task.X * U;
    Matrix A = XU.transpose() * XU;
    A.diagonal().array() += group.lambda();
    bool singular = false;
    const Vector w = detail::spd_solve(A, XU.transpose() * task.y, &singular);
    if (singular && group.lambda() == 0.0) {
      throw RankDeficient("mtl_inner_solve: task " + std::to_string(t) +
                          " has a singular system at lambda = 0");
    }
    sol.coeffs.row(static_cast<Index>(t)) = w.transpose();
  }
  sol.metric = sol.coeffs.transpose() * sol.coeffs;
  return sol;
}

inline InnerSolution mtl_inner_solve(const Subspace& U, const TaskGroup& group) {
  return mtl_inner_solve(U.basis(), group);
}

/// sum_t 0.5 ||X_t U w_t - y_t||^2
inline double mtl_cost(const Matrix& U, const TaskGroup& group, const InnerSolution& sol) {
  detail::check_basis(U, group.rows(), "mtl_cost");
  detail::check_mtl_solution(group, U, sol);
  double cost = 0.0;
  for (std::size_t t = 0; t < group.size(); ++t) {
    const auto& task = group.tasks()[t];
    const Vector w = sol.coeffs.row(static_cast<Index>(t)).transpose();
    cost += 0.5 * (task.X * (U * w) - task.y).squaredNorm();
  }
  return cost;
}

inline double mtl_cost(const Subspace& U, const TaskGroup& group, const InnerSolution& sol) {
  return mtl_cost(U.basis(), group, sol);
}

/// Total derivative of the group cost in U. At lambda = 0 this is
/// sum_t X_t^T (X_t U w_t - y_t) w_t^T; for lambda > 0 an adjoint term z_t
/// covers the ridge solution's dependence on U.
inline Matrix mtl_egrad(const Matrix& U, const TaskGroup& group, const InnerSolution& sol) {
  detail::check_basis(U, group.rows(), "mtl_egrad");
  detail::check_mtl_solution(group, U, sol);
  const double lam = group.lambda();
  Matrix E = Matrix::Zero(U.rows(), U.cols());
  for (std::size_t t = 0; t < group.size(); ++t) {
    const auto& task = group.tasks()[t];
    const Vector w = sol.coeffs.row(static_cast<Index>(t)).transpose();
    const Matrix XU = task.X * U;
    const Vector res = XU * w - task.y;
    const Vector xres = task.X.transpose() * res;
    if (lam == 0.0) {
      E.noalias() += xres * w.transpose();
      continue;
    }
    Matrix A = XU.transpose() * XU;
    A.diagonal().array() += lam;
    const Vector z = detail::spd_solve(A, XU.transpose() * res);
    E.noalias() += xres * (w - z).transpose();
    E.noalias() -= (task.X.transpose() * (XU * z)) * w.transpose();
  }
  return E;
}

inline Matrix mtl_egrad(const Subspace& U, const TaskGroup& group, const InnerSolution& sol) {
  return mtl_egrad(U.basis(), group, sol);
}

// ---------------------------------------------------------------------------
// Uniform task interface for the gossip engine (found by ADL).
// ---------------------------------------------------------------------------

inline Index task_ambient_dim(const McShard& s) { return s.rows(); }
inline InnerSolution task_solve(const McShard& s, const Matrix& U) { return mc_inner_solve(U, s); }
inline double task_cost(const McShard& s, const Matrix& U, const InnerSolution& sol) {
  return mc_cost(U, s, sol);
}
inline Matrix task_egrad(const McShard& s, const Matrix& U, const InnerSolution& sol) {
  return mc_egrad(U, s, sol);
}

inline Index task_ambient_dim(const TaskGroup& g) { return g.rows(); }
inline InnerSolution task_solve(const TaskGroup& g, const Matrix& U) { return mtl_inner_solve(U, g); }
inline double task_cost(const TaskGroup& g, const Matrix& U, const InnerSolution& sol) {
  return mtl_cost(U, g, sol);
}
inline Matrix task_egrad(const TaskGroup& g, const Matrix& U, const InnerSolution& sol) {
  return mtl_egrad(U, g, sol);
}

template <class T>
concept LocalTask = requires(const T& task, const Matrix& U, const InnerSolution& sol) {
  { task_ambient_dim(task) } -> std::convertible_to<Index>;
  { task_solve(task, U) } -> std::same_as<InnerSolution>;
  { task_cost(task, U, sol) } -> std::convertible_to<double>;
  { task_egrad(task, U, sol) } -> std::same_as<Matrix>;
};

static_assert(LocalTask<McShard>);
static_assert(LocalTask<TaskGroup>);

}  // namespace rgossip
