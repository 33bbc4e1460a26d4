#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rgossip/gossip.hpp"
#include "rgossip/manifold.hpp"
#include "rgossip/problems.hpp"

namespace rgossip {

/// Mean squared residual of U W^T + offset over exactly `entries` (local
/// column indices).
inline double mse_mc(const Matrix& U, const McShard& shard, const InnerSolution& sol,
                     std::span<const Entry> entries, double offset = 0.0) {
  if (entries.empty()) throw std::invalid_argument("mse_mc: no entries to evaluate");
  std::vector<CellQuery> q;
  q.reserve(entries.size());
  for (const auto& e : entries) q.push_back({e.row, e.col});
  const auto pred = predict_mc(U, shard, sol, q);
  double acc = 0.0;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const double d = pred[k] + offset - entries[k].value;
    acc += d * d;
  }
  return acc / static_cast<double>(entries.size());
}

inline double mse_mc(const Subspace& U, const McShard& shard, const InnerSolution& sol,
                     std::span<const Entry> entries, double offset = 0.0) {
  return mse_mc(U.basis(), shard, sol, entries, offset);
}

inline double rmse_mc(const Subspace& U, const McShard& shard, const InnerSolution& sol,
                      std::span<const Entry> entries, double offset = 0.0) {
  return std::sqrt(mse_mc(U, shard, sol, entries, offset));
}

struct NmseResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  int evaluated = 0;
  /// Tasks skipped because they have no samples or zero label variance.
  int excluded = 0;
};

/// Per-task MSE over the population variance of that task's labels,
/// averaged over tasks. `sol` holds one weight row per task.
inline NmseResult nmse(const Matrix& U, std::span<const RegressionTask> tasks,
                       const InnerSolution& sol) {
  if (sol.coeffs.rows() != static_cast<Index>(tasks.size()) || sol.coeffs.cols() != U.cols()) {
    throw DimensionMismatch("nmse: weights " + shape_str(sol.coeffs.rows(), sol.coeffs.cols()) +
                            " for " + std::to_string(tasks.size()) + " tasks");
  }
  NmseResult out;
  double acc = 0.0;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = tasks[t];
    const Index d = task.y.size();
    if (d == 0) {
      ++out.excluded;
      continue;
    }
    const double mean = task.y.mean();
    const double var = (task.y.array() - mean).square().sum() / static_cast<double>(d);
    if (!(var > 0.0)) {
      ++out.excluded;
      continue;
    }
    const Vector pred = task.X * (U * sol.coeffs.row(static_cast<Index>(t)).transpose());
    const double mse = (pred - task.y).squaredNorm() / static_cast<double>(d);
    acc += mse / var;
    ++out.evaluated;
  }
  if (out.evaluated > 0) out.value = acc / out.evaluated;
  return out;
}

inline NmseResult nmse(const Subspace& U, const TaskGroup& group, const InnerSolution& sol) {
  return nmse(U.basis(), group.tasks(), sol);
}

/// sqrt(sum of squared principal angles); the geodesic distance.
inline double subspace_error(const Subspace& U, const Subspace& U_star) {
  return std::sqrt(principal_angles(U, U_star).sum_sq());
}

/// dist_sq for every adjacent pair in chain order, +inf where undefined.
inline std::vector<double> consensus_profile(std::span<const Subspace> agents) {
  std::vector<double> d;
  for (std::size_t i = 0; i + 1 < agents.size(); ++i) {
    try {
      d.push_back(dist_sq(agents[i], agents[i + 1]));
    } catch (const SubspacesTooFar&) {
      d.push_back(std::numeric_limits<double>::infinity());
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Trace CSV
// ---------------------------------------------------------------------------

namespace detail {

inline std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string trace_header(int agents) {
  std::string h = "slot,gamma,mode,pair_or_group,g_value";
  for (int i = 1; i < agents; ++i) h += ",d_" + std::to_string(i);
  for (int i = 1; i <= agents; ++i) h += ",cost_" + std::to_string(i);
  return h;
}

inline std::string trace_row(const TraceRecord& rec, int agents) {
  if (rec.consensus.size() + 1 != static_cast<std::size_t>(agents)) {
    throw std::invalid_argument("trace record has " + std::to_string(rec.consensus.size()) +
                                " consensus distances for " + std::to_string(agents) + " agents");
  }
  std::string row = std::to_string(rec.slot) + "," + detail::csv_number(rec.gamma) + "," +
                    rec.mode + "," + rec.pair_or_group + "," + detail::csv_number(rec.g_value);
  for (double d : rec.consensus) row += "," + detail::csv_number(d);
  for (int i = 0; i < agents; ++i) {
    row += ",";
    if (rec.costs) row += detail::csv_number((*rec.costs)[static_cast<std::size_t>(i)]);
  }
  return row;
}

/// Streams trace records to a CSV file; the header is written on open.
class TraceWriter {
 public:
  TraceWriter(const std::filesystem::path& path, int agents)
      : path_(path), agents_(agents), out_(path) {
    if (!out_) throw std::runtime_error("cannot open trace file " + path.string());
    out_ << trace_header(agents_) << '\n';
  }

  void write(const TraceRecord& rec) {
    out_ << trace_row(rec, agents_) << '\n';
    if (!out_) throw std::runtime_error("write failed: " + path_.string());
  }

  void close() {
    out_.close();
    if (out_.fail()) throw std::runtime_error("closing " + path_.string() + " failed");
  }

 private:
  std::filesystem::path path_;
  int agents_;
  std::ofstream out_;
};

inline void write_trace(const std::filesystem::path& path, std::span<const TraceRecord> records,
                        int agents) {
  TraceWriter w(path, agents);
  for (const auto& r : records) w.write(r);
  w.close();
}

// ---------------------------------------------------------------------------
// Summary JSON
// ---------------------------------------------------------------------------

inline constexpr int kSummarySchemaVersion = 1;

struct AgentMetrics {
  int id = 0;
  double train_mse = 0.0;
  std::optional<double> test_mse;
  std::optional<double> test_rmse;
  std::optional<double> test_nmse;
  std::optional<double> subspace_error;
};

struct RunSummary {
  nlohmann::json config = nlohmann::json::object();
  std::vector<AgentMetrics> agents;
  std::vector<double> consensus;
  /// Test metrics of the Frechet mean subspace with re-solved inner problems.
  std::optional<double> mean_test_mse;
  std::optional<double> mean_test_rmse;
  std::optional<double> mean_test_nmse;
  std::optional<double> mean_subspace_error;
  int mean_iterations = 0;
  bool mean_converged = false;
  std::int64_t slots = 0;
  double offset = 0.0;
  std::vector<std::pair<std::string, double>> timing;  // phase -> seconds
};

namespace detail {

inline nlohmann::json opt(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

inline nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace detail

/// JSON layout (schema_version 1):
///   schema_version, config{...}, slots_executed, offset,
///   agents[{id, train_mse, test_mse, test_rmse, test_nmse, subspace_error}],
///   consensus[d_1..d_{N-1}],
///   frechet_mean{test_mse, test_rmse, test_nmse, subspace_error, iterations, converged},
///   timing{phase: seconds}
/// Non-finite or missing metrics are written as null.
inline nlohmann::json summary_to_json(const RunSummary& s) {
  using nlohmann::json;
  json j;
  j["schema_version"] = kSummarySchemaVersion;
  j["config"] = s.config;
  j["slots_executed"] = s.slots;
  j["offset"] = s.offset;
  j["agents"] = json::array();
  for (const auto& a : s.agents) {
    j["agents"].push_back({{"id", a.id},
                           {"train_mse", detail::finite_or_null(a.train_mse)},
                           {"test_mse", detail::opt(a.test_mse)},
                           {"test_rmse", detail::opt(a.test_rmse)},
                           {"test_nmse", detail::opt(a.test_nmse)},
                           {"subspace_error", detail::opt(a.subspace_error)}});
  }
  j["consensus"] = json::array();
  for (double d : s.consensus) j["consensus"].push_back(detail::finite_or_null(d));
  j["frechet_mean"] = {{"test_mse", detail::opt(s.mean_test_mse)},
                       {"test_rmse", detail::opt(s.mean_test_rmse)},
                       {"test_nmse", detail::opt(s.mean_test_nmse)},
                       {"subspace_error", detail::opt(s.mean_subspace_error)},
                       {"iterations", s.mean_iterations},
                       {"converged", s.mean_converged}};
  j["timing"] = json::object();
  for (const auto& [phase, sec] : s.timing) j["timing"][phase] = sec;
  return j;
}

inline void write_summary(const std::filesystem::path& path, const RunSummary& s) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open summary file " + path.string());
  out << summary_to_json(s).dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace rgossip
