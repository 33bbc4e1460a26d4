#pragma once

// Self-check suites run by `rgossip verify`: geometry identities and
// finite-difference gradient checks on small random instances.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rgossip/data.hpp"
#include "rgossip/gossip.hpp"
#include "rgossip/manifold.hpp"
#include "rgossip/problems.hpp"

namespace rgossip::verify {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Random horizontal direction at U with Frobenius norm `norm`.
template <class Rng>
TangentVector random_tangent(const Subspace& U, double norm, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix Z(U.ambient_dim(), U.dim());
  for (Index j = 0; j < Z.cols(); ++j)
    for (Index i = 0; i < Z.rows(); ++i) Z(i, j) = g(rng);
  TangentVector xi = project_tangent(U, Z);
  return scaled(xi, norm / xi.norm());
}

/// Central difference of f(Exp_U(t xi)) at t = 0.
inline double central_difference(const std::function<double(const Subspace&)>& f,
                                 const Subspace& U, const TangentVector& xi, double h) {
  return (f(exp_map(U, xi, h)) - f(exp_map(U, xi, -h))) / (2.0 * h);
}

inline double relative_gap(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline std::vector<Check> geometry_suite(std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<Check> out;

  {
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      const Subspace U = random_subspace(50, 5, rng);
      const TangentVector xi = random_tangent(U, 0.5 * (k + 1) / 100.0, rng);
      const TangentVector back = log_map(U, exp_map(U, xi, 1.0));
      worst = std::max(worst, (back.direction() - xi.direction()).norm());
    }
    out.push_back({"log inverts exp for |xi| <= 0.5", worst <= 1e-8, "max error " + fmt(worst)});
  }

  {
    double worst = 0.0;
    int used = 0;
    while (used < 100) {
      const Subspace U = random_subspace(50, 5, rng);
      const Subspace V = random_subspace(50, 5, rng);
      const auto pa = principal_angles(U, V);
      if (pa.angles.maxCoeff() >= M_PI / 2 - 0.1) continue;
      worst = std::max(worst, std::abs(2.0 * dist_sq(U, V) - pa.sum_sq()));
      ++used;
    }
    out.push_back({"2 dist_sq equals sum of squared principal angles", worst <= 1e-8,
                   "max error " + fmt(worst)});
  }

  {
    Subspace U = random_subspace(50, 5, rng);
    for (int k = 1; k <= 1000; ++k) {
      U = exp_map(U, random_tangent(U, 0.05, rng), 1.0);
      if (k % 100 == 0) U = reorthonormalize(U);
    }
    const double res = orthonormality_residual(U.basis());
    out.push_back({"orthonormality after 1000 exponential steps", res <= 1e-10,
                   "residual " + fmt(res)});
  }

  {
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
      const Subspace U = random_subspace(30, 4, rng);
      const TangentVector xi = random_tangent(U, 1.0, rng);
      for (double t : {0.1, 0.25, 0.5}) {
        const double expect = 0.5 * t * t;
        worst = std::max(worst, relative_gap(dist_sq(U, exp_map(U, xi, t)), expect));
      }
    }
    out.push_back({"unit-speed geodesics", worst <= 1e-6, "max relative error " + fmt(worst)});
  }

  {
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
      const Subspace U = random_subspace(30, 4, rng);
      const Subspace V = random_subspace(30, 4, rng);
      worst = std::max(worst, (U.basis().transpose() * log_map(U, V).direction()).norm());
      Matrix Z = Matrix::Random(30, 4) * 100.0;
      worst = std::max(worst, (U.basis().transpose() * project_tangent(U, Z).direction()).norm());
    }
    out.push_back({"tangent vectors are horizontal", worst <= 1e-10,
                   "max |U^T xi| " + fmt(worst)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

template <LocalTask Task>
double task_value(const Task& task, const Subspace& U) {
  return task_cost(task, U.basis(), task_solve(task, U.basis()));
}

/// Worst relative gap between <rgrad f, xi> and a central difference over
/// `trials` random unit tangents.
template <LocalTask Task, class Rng>
double task_gradient_gap(const Task& task, const Subspace& U, int trials, Rng& rng) {
  const auto sol = task_solve(task, U.basis());
  const TangentVector g = egrad_to_rgrad(U, task_egrad(task, U.basis(), sol));
  double worst = 0.0;
  for (int k = 0; k < trials; ++k) {
    const TangentVector xi = random_tangent(U, 1.0, rng);
    const double fd =
        central_difference([&](const Subspace& V) { return task_value(task, V); }, U, xi, 1e-5);
    worst = std::max(worst, relative_gap(inner(g, xi), fd));
  }
  return worst;
}

template <class Rng>
McShard random_mc_shard(Index m, Index n, Index r, double fill, double lambda, Rng& rng) {
  const Matrix A = detail::gaussian(m, r, rng);
  const Matrix B = detail::gaussian(n, r, rng);
  std::bernoulli_distribution keep(fill);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::vector<Entry> t;
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < m; ++i) {
      if (keep(rng) || i < r) t.push_back({i, j, A.row(i).dot(B.row(j)) + noise(rng)});
    }
  }
  return McShard(m, n, std::move(t), lambda);
}

template <class Rng>
TaskGroup random_task_group(Index m, Index r, int tasks, Index d, double lambda, Rng& rng) {
  const Subspace Us = random_subspace(m, r, rng);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::vector<RegressionTask> ts;
  for (int t = 0; t < tasks; ++t) {
    Matrix X = detail::gaussian(d, m, rng);
    const Vector w = detail::gaussian(r, 1, rng);
    Vector y = X * (Us.basis() * w);
    for (Index k = 0; k < d; ++k) y(k) += noise(rng);
    ts.push_back({std::move(X), std::move(y)});
  }
  return TaskGroup(m, std::move(ts), lambda);
}

inline std::vector<Check> gradient_suite(std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  std::vector<Check> out;
  constexpr double kTol = 1e-5;

  for (double lambda : {0.0, 0.01}) {
    const McShard shard = random_mc_shard(30, 25, 3, 0.5, lambda, rng);
    const Subspace U = random_subspace(30, 3, rng);
    const double gap = task_gradient_gap(shard, U, 20, rng);
    out.push_back({"matrix completion gradient, lambda=" + fmt(lambda), gap <= kTol,
                   "max relative gap " + fmt(gap)});
  }

  for (double lambda : {0.0, 0.1}) {
    const TaskGroup group = random_task_group(30, 4, 5, 12, lambda, rng);
    const Subspace U = random_subspace(30, 4, rng);
    const double gap = task_gradient_gap(group, U, 20, rng);
    out.push_back({"multitask gradient, lambda=" + fmt(lambda), gap <= kTol,
                   "max relative gap " + fmt(gap)});
  }

  {
    std::vector<McShard> shards;
    for (int a = 0; a < 3; ++a) shards.push_back(random_mc_shard(30, 25, 3, 0.5, 0.01, rng));
    const Subspace base = random_subspace(30, 3, rng);
    std::vector<AgentState> agents;
    for (int a = 0; a < 3; ++a) {
      agents.push_back({a + 1, exp_map(base, random_tangent(base, 0.4, rng), 1.0).basis(), 0});
    }
    const double rho = 10.0;
    double worst = 0.0;
    for (int i = 1; i <= 2; ++i) {
      const auto pg = pair_cost_and_grad(std::span<const AgentState>(agents), i, rho,
                                         std::span<const McShard>(shards));
      const Subspace Ua = agents[static_cast<std::size_t>(i - 1)].subspace();
      const Subspace Ub = agents[static_cast<std::size_t>(i)].subspace();
      for (int k = 0; k < 10; ++k) {
        const TangentVector xa = random_tangent(Ua, 1.0, rng);
        const TangentVector xb = random_tangent(Ub, 1.0, rng);
        auto g_at = [&](double t) {
          std::vector<AgentState> moved = agents;
          moved[static_cast<std::size_t>(i - 1)].point = exp_map(Ua, xa, t).basis();
          moved[static_cast<std::size_t>(i)].point = exp_map(Ub, xb, t).basis();
          return pair_cost_and_grad(std::span<const AgentState>(moved), i, rho,
                                    std::span<const McShard>(shards))
              .g_value;
        };
        const double h = 1e-5;
        const double fd = (g_at(h) - g_at(-h)) / (2.0 * h);
        worst = std::max(worst, relative_gap(inner(pg.left, xa) + inner(pg.right, xb), fd));
      }
    }
    out.push_back({"pair cost gradient, rho=10", worst <= kTol, "max relative gap " + fmt(worst)});
  }
  return out;
}

}  // namespace rgossip::verify
