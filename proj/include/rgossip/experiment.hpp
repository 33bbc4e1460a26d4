#pragma once

// Post-run evaluation shared by the command-line tool and the tests.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "rgossip/data.hpp"
#include "rgossip/gossip.hpp"
#include "rgossip/metrics.hpp"

namespace rgossip {

inline double rms(std::span<const Entry> entries) {
  if (entries.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& e : entries) acc += e.value * e.value;
  return std::sqrt(acc / static_cast<double>(entries.size()));
}

/// Per-agent and Frechet-mean metrics for a matrix completion run. Train MSE
/// is measured on the (possibly centered) training values, test metrics on
/// the original scale by adding `offset` to predictions.
inline RunSummary summarize_mc(const RunResult& res, const McPartition& part, double offset) {
  RunSummary s;
  s.slots = res.slots;
  s.offset = offset;
  s.consensus = res.final_consensus;
  std::vector<Entry> pooled_test;
  for (std::size_t i = 0; i < res.agents.size(); ++i) {
    const auto& shard = part.shards[i];
    const Matrix& U = res.agents[i].point;
    const auto sol = mc_inner_solve(U, shard);
    AgentMetrics am;
    am.id = res.agents[i].id;
    am.train_mse = shard.triplets().empty() ? 0.0 : mse_mc(U, shard, sol, shard.triplets());
    if (!part.test[i].empty()) {
      am.test_mse = mse_mc(U, shard, sol, part.test[i], offset);
      am.test_rmse = std::sqrt(*am.test_mse);
    }
    s.agents.push_back(am);
  }
  if (res.mean) {
    s.mean_iterations = res.mean->iterations;
    s.mean_converged = res.mean->converged;
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < part.shards.size(); ++i) {
      if (part.test[i].empty()) continue;
      const auto sol = mc_inner_solve(res.mean->mean, part.shards[i]);
      acc += mse_mc(res.mean->mean, part.shards[i], sol, part.test[i], offset) *
             static_cast<double>(part.test[i].size());
      count += part.test[i].size();
    }
    if (count > 0) {
      s.mean_test_mse = acc / static_cast<double>(count);
      s.mean_test_rmse = std::sqrt(*s.mean_test_mse);
    }
  }
  return s;
}

/// Mean squared residual over every training sample of a task group.
inline double mtl_train_mse(const Matrix& U, const TaskGroup& group, const InnerSolution& sol) {
  double acc = 0.0;
  Index count = 0;
  for (std::size_t t = 0; t < group.size(); ++t) {
    const auto& task = group.tasks()[t];
    acc += (task.X * (U * sol.coeffs.row(static_cast<Index>(t)).transpose()) - task.y)
               .squaredNorm();
    count += task.y.size();
  }
  return count > 0 ? acc / static_cast<double>(count) : 0.0;
}

inline RunSummary summarize_mtl(const RunResult& res, const MtlPartition& part,
                                const std::optional<Subspace>& U_star) {
  RunSummary s;
  s.slots = res.slots;
  s.consensus = res.final_consensus;
  const auto spaces = agent_subspaces(res.agents, Geometry::euclidean);
  for (std::size_t i = 0; i < res.agents.size(); ++i) {
    const auto& group = part.groups[i];
    const Matrix& U = res.agents[i].point;
    const auto sol = mtl_inner_solve(U, group);
    AgentMetrics am;
    am.id = res.agents[i].id;
    am.train_mse = mtl_train_mse(U, group, sol);
    if (!part.test[i].empty()) {
      const auto nm = nmse(U, part.test[i], sol);
      if (nm.evaluated > 0) am.test_nmse = nm.value;
    }
    if (U_star) am.subspace_error = subspace_error(spaces[i], *U_star);
    s.agents.push_back(am);
  }
  if (res.mean) {
    s.mean_iterations = res.mean->iterations;
    s.mean_converged = res.mean->converged;
    double acc = 0.0;
    int evaluated = 0;
    for (std::size_t i = 0; i < part.groups.size(); ++i) {
      if (part.test[i].empty()) continue;
      const auto sol = mtl_inner_solve(res.mean->mean, part.groups[i]);
      const auto nm = nmse(res.mean->mean.basis(), part.test[i], sol);
      if (nm.evaluated > 0) {
        acc += nm.value * nm.evaluated;
        evaluated += nm.evaluated;
      }
    }
    if (evaluated > 0) s.mean_test_nmse = acc / evaluated;
    if (U_star) s.mean_subspace_error = subspace_error(res.mean->mean, *U_star);
  }
  return s;
}

}  // namespace rgossip
