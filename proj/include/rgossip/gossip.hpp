#pragma once

// Decentralized stochastic gossip over a chain of agents. Agent i holds a
// local subspace and a local task f_i; neighbouring agents i and i+1 share
// the sub-cost
//
//   g_i = alpha_i f_i(U_i) + alpha_{i+1} f_{i+1}(U_{i+1}) + 0.5 rho ||Log_{U_i}(U_{i+1})||^2
//
// whose Riemannian gradients are alpha grad f - rho Log. Each slot samples
// one pair (stochastic mode) or the odd/even group of pairs (parallel mode)
// and moves the touched agents along the exponential map.

#include <Eigen/Dense>

#include <chrono>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rgossip/errors.hpp"
#include "rgossip/manifold.hpp"
#include "rgossip/problems.hpp"

namespace rgossip {

enum class Mode { stochastic, parallel };
enum class Geometry { grassmann, euclidean };

inline const char* to_string(Mode m) { return m == Mode::stochastic ? "stochastic" : "parallel"; }
inline const char* to_string(Geometry g) {
  return g == Geometry::grassmann ? "grassmann" : "euclidean";
}

/// Run configuration. The stepsize at slot k is stepsize_a / (1 + stepsize_b k).
struct GossipConfig {
  int agents = 2;
  double rho = 1e3;
  double stepsize_a = 0.1;
  double stepsize_b = 0.01;
  std::int64_t max_slots = 0;
  Mode mode = Mode::stochastic;
  Geometry geometry = Geometry::grassmann;
  bool precon = false;
  std::uint64_t seed = 0;
  int reorth_every = 100;
  Index rank = 5;
  /// Per-agent task costs are recorded on slots divisible by this (and on
  /// the last slot). 0 disables them.
  int cost_cadence = 10;
  /// Threads used for the pairs of a parallel round.
  int workers = 1;

  void validate() const {
    if (agents < 2) throw ConfigError("agents must be >= 2");
    if (mode == Mode::parallel && agents < 3) {
      throw ConfigError("parallel mode needs at least 3 agents");
    }
    if (!(rho >= 0.0)) throw ConfigError("rho must be >= 0");
    if (!(stepsize_a > 0.0) || !(stepsize_b > 0.0)) {
      throw ConfigError("stepsize constants a and b must be positive");
    }
    if (max_slots < 0) throw ConfigError("max_slots must be >= 0");
    if (reorth_every < 1) throw ConfigError("reorth_every must be >= 1");
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (cost_cadence < 0) throw ConfigError("cost cadence must be >= 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (precon && geometry == Geometry::euclidean) {
      throw ConfigError("preconditioning is only defined for the Grassmann geometry");
    }
  }
};

/// Slot budget used in the reference experiments: 200 (N - 1) single-pair
/// slots, or 400 N parallel rounds.
inline std::int64_t default_budget(Mode mode, int agents) {
  return mode == Mode::stochastic ? 200 * static_cast<std::int64_t>(agents - 1)
                                  : 400 * static_cast<std::int64_t>(agents);
}

struct AgentState {
  int id = 0;  // 1-based chain position
  Matrix point;  // orthonormal in Grassmann mode, unconstrained in Euclidean mode
  std::int64_t update_count = 0;

  Subspace subspace() const { return Subspace(point); }
};

/// Telemetry for one slot (stochastic) or round (parallel).
struct TraceRecord {
  std::int64_t slot = 0;
  double gamma = 0.0;
  std::string mode;
  std::string pair_or_group;
  double g_value = 0.0;
  std::vector<double> consensus;           // dist_sq(U_i, U_{i+1}), i = 1..N-1
  std::optional<std::vector<double>> costs;  // f_i(U_i), i = 1..N
};

using TraceSink = std::function<void(const TraceRecord&)>;

class GossipError : public std::runtime_error {
 public:
  explicit GossipError(const std::string& what) : std::runtime_error(what) {}
};

/// Chain weight: 1 at the two endpoints, 0.5 in the interior, so that the
/// pair sub-costs sum to f_1 + ... + f_N plus the consensus terms.
inline double alpha(int i, int agents) {
  if (agents < 2 || i < 1 || i > agents) {
    throw std::out_of_range("alpha: agent " + std::to_string(i) + " outside 1.." +
                            std::to_string(agents));
  }
  return (i == 1 || i == agents) ? 1.0 : 0.5;
}

/// a / (1 + b k)
inline double stepsize(std::int64_t k, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0) || k < 0) {
    throw std::invalid_argument("stepsize requires a, b > 0 and k >= 0");
  }
  return a / (1.0 + b * static_cast<double>(k));
}

struct PairGradient {
  TangentVector left;   // at U_i
  TangentVector right;  // at U_{i+1}
  double g_value = 0.0;
  Matrix metric_left;   // inner-solution Gram terms for the preconditioner
  Matrix metric_right;
};

/// xi (M + rho I)^{-1}; right multiplication keeps xi horizontal.
inline TangentVector precondition(const TangentVector& grad, const Matrix& metric, double rho) {
  const Index r = grad.anchor().dim();
  if (metric.rows() != r || metric.cols() != r) {
    throw DimensionMismatch("preconditioner metric " + shape_str(metric.rows(), metric.cols()) +
                            " for rank " + std::to_string(r));
  }
  const double scale = std::max(1.0, metric.cwiseAbs().maxCoeff());
  if ((metric - metric.transpose()).norm() > 1e-12 * scale) {
    throw std::invalid_argument("preconditioner metric is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(metric, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-10 * scale) {
    throw std::invalid_argument("preconditioner metric is not positive semidefinite");
  }
  Matrix M = metric;
  M.diagonal().array() += rho;
  Eigen::LLT<Matrix> llt(M);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-14)) {
    throw std::invalid_argument("metric + rho I is not positive definite");
  }
  Matrix out = llt.solve(grad.direction().transpose()).transpose();
  return TangentVector(grad.anchor(), std::move(out));
}

namespace detail {

struct TaskEval {
  InnerSolution sol;
  double cost = 0.0;
  Matrix egrad;
};

template <LocalTask Task>
TaskEval evaluate(const Task& task, const Matrix& U) {
  TaskEval ev{task_solve(task, U), 0.0, Matrix()};
  ev.cost = task_cost(task, U, ev.sol);
  ev.egrad = task_egrad(task, U, ev.sol);
  return ev;
}

inline void check_pair(std::span<const AgentState> agents, int i) {
  const int n = static_cast<int>(agents.size());
  if (i < 1 || i > n - 1) {
    throw std::out_of_range("pair " + std::to_string(i) + " outside 1.." + std::to_string(n - 1));
  }
}

}  // namespace detail

/// Sub-cost g_i and the Riemannian gradients of g_i with respect to U_i and
/// U_{i+1} (pair index i is 1-based).
template <LocalTask Task>
PairGradient pair_cost_and_grad(std::span<const AgentState> agents, int i, double rho,
                                std::span<const Task> tasks) {
  detail::check_pair(agents, i);
  const int n = static_cast<int>(agents.size());
  if (tasks.size() != agents.size()) {
    throw DimensionMismatch(std::to_string(tasks.size()) + " tasks for " +
                            std::to_string(agents.size()) + " agents");
  }
  const auto a = static_cast<std::size_t>(i - 1);
  const auto b = static_cast<std::size_t>(i);
  const Subspace Ua = agents[a].subspace();
  const Subspace Ub = agents[b].subspace();
  const TangentVector log_ab = log_map(Ua, Ub);
  const TangentVector log_ba = log_map(Ub, Ua);
  const auto ea = detail::evaluate(tasks[a], Ua.basis());
  const auto eb = detail::evaluate(tasks[b], Ub.basis());
  const double wa = alpha(i, n);
  const double wb = alpha(i + 1, n);
  const TangentVector ga = egrad_to_rgrad(Ua, ea.egrad);
  const TangentVector gb = egrad_to_rgrad(Ub, eb.egrad);
  Matrix left = wa * ga.direction() - rho * log_ab.direction();
  Matrix right = wb * gb.direction() - rho * log_ba.direction();
  const double g = wa * ea.cost + wb * eb.cost + 0.5 * rho * log_ab.direction().squaredNorm();
  return PairGradient{project_tangent(Ua, left), project_tangent(Ub, right), g, ea.sol.metric,
                      eb.sol.metric};
}

/// Independent sampling streams derived from one master seed. Pair/group
/// selection has its own stream so that every variant run with the same seed
/// sees the same sequence of pairs.
struct GossipStreams {
  std::mt19937_64 sampling;
  std::mt19937_64 jitter;

  explicit GossipStreams(std::uint64_t seed)
      : sampling(seeded(seed, 2)), jitter(seeded(seed, 3)) {}

  static std::mt19937_64 seeded(std::uint64_t seed, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      stream};
    return std::mt19937_64(seq);
  }
};

/// Independent random initial points, one per agent.
inline std::vector<AgentState> init_agents(const GossipConfig& cfg, Index m) {
  if (cfg.rank > m) {
    throw ConfigError("rank " + std::to_string(cfg.rank) + " exceeds ambient dimension " +
                      std::to_string(m));
  }
  auto rng = GossipStreams::seeded(cfg.seed, 1);
  std::vector<AgentState> agents;
  agents.reserve(static_cast<std::size_t>(cfg.agents));
  for (int id = 1; id <= cfg.agents; ++id) {
    agents.push_back(AgentState{id, random_subspace(m, cfg.rank, rng).basis(), 0});
  }
  return agents;
}

/// dist_sq between adjacent agents' column spaces; +inf where the logarithm
/// is undefined.
inline std::vector<double> consensus_distances(std::span<const AgentState> agents,
                                               Geometry geometry) {
  std::vector<Subspace> spaces;
  spaces.reserve(agents.size());
  for (const auto& a : agents) {
    spaces.push_back(geometry == Geometry::grassmann ? a.subspace() : reorthonormalize(a.point));
  }
  std::vector<double> d;
  for (std::size_t i = 0; i + 1 < spaces.size(); ++i) {
    try {
      d.push_back(dist_sq(spaces[i], spaces[i + 1]));
    } catch (const SubspacesTooFar&) {
      d.push_back(std::numeric_limits<double>::infinity());
    }
  }
  return d;
}

template <LocalTask Task>
std::vector<double> local_costs(std::span<const AgentState> agents, std::span<const Task> tasks) {
  std::vector<double> c;
  c.reserve(agents.size());
  for (std::size_t i = 0; i < agents.size(); ++i) {
    c.push_back(task_cost(tasks[i], agents[i].point, task_solve(tasks[i], agents[i].point)));
  }
  return c;
}

namespace detail {

/// Computed update for one pair, not yet applied.
struct PairUpdate {
  int pair = 0;
  double g_value = 0.0;
  Matrix new_left;
  Matrix new_right;
};

inline Matrix bump(AgentState& agent, Matrix next, const GossipConfig& cfg) {
  ++agent.update_count;
  if (cfg.geometry == Geometry::grassmann && agent.update_count % cfg.reorth_every == 0) {
    return reorthonormalize(next).basis();
  }
  return next;
}

template <LocalTask Task>
PairUpdate grassmann_pair_update(std::span<const AgentState> agents, int i, double gamma,
                                 const GossipConfig& cfg, std::span<const Task> tasks) {
  PairGradient pg = pair_cost_and_grad(agents, i, cfg.rho, tasks);
  TangentVector left = pg.left;
  TangentVector right = pg.right;
  if (cfg.precon) {
    left = precondition(pg.left, pg.metric_left, cfg.rho);
    right = precondition(pg.right, pg.metric_right, cfg.rho);
  }
  return PairUpdate{i, pg.g_value, exp_map(left.anchor(), left, -gamma).basis(),
                    exp_map(right.anchor(), right, -gamma).basis()};
}

inline void require_full_rank(const Matrix& U, int id) {
  Eigen::LLT<Matrix> llt(U.transpose() * U);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-12)) {
    throw RankDeficient("agent " + std::to_string(id) + " iterate lost full column rank");
  }
}

/// Flat-space pair step on alpha f_i + alpha f_{i+1} + 0.5 rho ||U_i - U_{i+1}||_F^2.
template <LocalTask Task>
PairUpdate euclidean_pair_update(std::span<const AgentState> agents, int i, double gamma,
                                 const GossipConfig& cfg, std::span<const Task> tasks) {
  check_pair(agents, i);
  const int n = static_cast<int>(agents.size());
  const auto a = static_cast<std::size_t>(i - 1);
  const auto b = static_cast<std::size_t>(i);
  const Matrix& Ua = agents[a].point;
  const Matrix& Ub = agents[b].point;
  require_full_rank(Ua, agents[a].id);
  require_full_rank(Ub, agents[b].id);
  const auto ea = evaluate(tasks[a], Ua);
  const auto eb = evaluate(tasks[b], Ub);
  const double wa = alpha(i, n);
  const double wb = alpha(i + 1, n);
  const Matrix diff = Ua - Ub;
  const double g = wa * ea.cost + wb * eb.cost + 0.5 * cfg.rho * diff.squaredNorm();
  Matrix new_a = Ua - gamma * (wa * ea.egrad + cfg.rho * diff);
  Matrix new_b = Ub - gamma * (wb * eb.egrad - cfg.rho * diff);
  return PairUpdate{i, g, std::move(new_a), std::move(new_b)};
}

template <LocalTask Task>
PairUpdate pair_update(std::span<const AgentState> agents, int i, double gamma,
                       const GossipConfig& cfg, std::span<const Task> tasks) {
  return cfg.geometry == Geometry::grassmann ? grassmann_pair_update(agents, i, gamma, cfg, tasks)
                                             : euclidean_pair_update(agents, i, gamma, cfg, tasks);
}

inline void apply(std::vector<AgentState>& agents, PairUpdate&& u, const GossipConfig& cfg) {
  auto& a = agents[static_cast<std::size_t>(u.pair - 1)];
  auto& b = agents[static_cast<std::size_t>(u.pair)];
  a.point = bump(a, std::move(u.new_left), cfg);
  b.point = bump(b, std::move(u.new_right), cfg);
}

template <LocalTask Task>
TraceRecord make_record(std::int64_t k, double gamma, std::string label, double g,
                        const std::vector<AgentState>& agents, const GossipConfig& cfg,
                        std::span<const Task> tasks, bool with_costs) {
  TraceRecord rec;
  rec.slot = k;
  rec.gamma = gamma;
  rec.mode = to_string(cfg.mode);
  rec.pair_or_group = std::move(label);
  rec.g_value = g;
  rec.consensus = consensus_distances(agents, cfg.geometry);
  if (with_costs) rec.costs = local_costs<Task>(agents, tasks);
  return rec;
}

inline bool cadence_slot(std::int64_t k, const GossipConfig& cfg) {
  return cfg.cost_cadence > 0 && (k % cfg.cost_cadence == 0 || k + 1 == cfg.max_slots);
}

template <LocalTask Task>
TraceRecord single_pair_slot(std::vector<AgentState>& agents, std::int64_t k,
                             const GossipConfig& cfg, GossipStreams& streams,
                             std::span<const Task> tasks) {
  const int n = static_cast<int>(agents.size());
  std::uniform_int_distribution<int> pick(1, n - 1);
  const int first = pick(streams.sampling);
  const double gamma = stepsize(k, cfg.stepsize_a, cfg.stepsize_b);
  int pair = first;
  std::optional<PairUpdate> upd;
  try {
    upd = pair_update(std::span<const AgentState>(agents), pair, gamma, cfg, tasks);
  } catch (const SubspacesTooFar& first_err) {
    pair = pick(streams.jitter);
    try {
      upd = pair_update(std::span<const AgentState>(agents), pair, gamma, cfg, tasks);
    } catch (const SubspacesTooFar& second_err) {
      throw GossipError("slot " + std::to_string(k) + ": pairs " + std::to_string(first) +
                        " and " + std::to_string(pair) + " both failed (" + first_err.what() +
                        "; " + second_err.what() + ")");
    }
  }
  const double g = upd->g_value;
  apply(agents, std::move(*upd), cfg);
  return make_record(k, gamma, std::to_string(pair), g, agents, cfg, tasks,
                     cadence_slot(k, cfg));
}

}  // namespace detail

/// One slot of the stochastic gossip algorithm: a uniformly sampled pair
/// (i, i+1) moves along Exp(-gamma_k grad g_i). Other agents are untouched.
template <LocalTask Task>
TraceRecord stochastic_slot(std::vector<AgentState>& agents, std::int64_t k,
                            const GossipConfig& cfg, GossipStreams& streams,
                            std::span<const Task> tasks) {
  if (cfg.geometry != Geometry::grassmann) {
    throw ConfigError("stochastic_slot requires the Grassmann geometry");
  }
  return detail::single_pair_slot(agents, k, cfg, streams, tasks);
}

/// Flat-space baseline with the same pair sampling as stochastic_slot:
/// U <- U - gamma_k (alpha Grad f + rho (U - U_neighbour)), no retraction.
template <LocalTask Task>
TraceRecord euclidean_slot(std::vector<AgentState>& agents, std::int64_t k,
                           const GossipConfig& cfg, GossipStreams& streams,
                           std::span<const Task> tasks) {
  if (cfg.geometry != Geometry::euclidean) {
    throw ConfigError("euclidean_slot requires the Euclidean geometry");
  }
  return detail::single_pair_slot(agents, k, cfg, streams, tasks);
}

/// Pair indices of the odd (1, 3, 5, ...) or even (2, 4, ...) group.
inline std::vector<int> pair_group(int agents, bool odd) {
  std::vector<int> pairs;
  for (int i = odd ? 1 : 2; i <= agents - 1; i += 2) pairs.push_back(i);
  return pairs;
}

/// Red-black round: with probability 1/2 every odd pair is updated, else every
/// even pair. Pairs in a group touch disjoint agents, so their updates are
/// computed from the same state and may run concurrently.
template <LocalTask Task>
TraceRecord parallel_round(std::vector<AgentState>& agents, std::int64_t k,
                           const GossipConfig& cfg, GossipStreams& streams,
                           std::span<const Task> tasks) {
  const int n = static_cast<int>(agents.size());
  std::bernoulli_distribution coin(0.5);
  const bool first_odd = coin(streams.sampling);
  const double gamma = stepsize(k, cfg.stepsize_a, cfg.stepsize_b);

  auto compute = [&](bool odd) {
    const auto pairs = pair_group(n, odd);
    std::vector<detail::PairUpdate> ups(pairs.size());
    const std::span<const AgentState> view(agents);
    const auto workers = static_cast<std::size_t>(std::max(1, cfg.workers));
    if (workers == 1 || pairs.size() == 1) {
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        ups[p] = detail::pair_update(view, pairs[p], gamma, cfg, tasks);
      }
    } else {
      std::vector<std::future<void>> jobs;
      for (std::size_t w = 0; w < std::min(workers, pairs.size()); ++w) {
        jobs.push_back(std::async(std::launch::async, [&, w] {
          for (std::size_t p = w; p < pairs.size(); p += workers) {
            ups[p] = detail::pair_update(view, pairs[p], gamma, cfg, tasks);
          }
        }));
      }
      for (auto& j : jobs) j.get();  // rethrows
    }
    return ups;
  };

  bool odd = first_odd;
  std::vector<detail::PairUpdate> ups;
  try {
    ups = compute(odd);
  } catch (const SubspacesTooFar& first_err) {
    odd = coin(streams.jitter);
    try {
      ups = compute(odd);
    } catch (const SubspacesTooFar& second_err) {
      throw GossipError("round " + std::to_string(k) + ": both attempts failed (" +
                        first_err.what() + "; " + second_err.what() + ")");
    }
  }
  double g = 0.0;
  for (auto& u : ups) {
    g += u.g_value;
    detail::apply(agents, std::move(u), cfg);
  }
  return detail::make_record(k, gamma, odd ? "odd" : "even", g, agents, cfg, tasks,
                             detail::cadence_slot(k, cfg));
}

struct RunResult {
  std::vector<AgentState> agents;
  std::int64_t slots = 0;
  std::vector<double> final_costs;
  std::vector<double> final_consensus;
  std::optional<FrechetMeanResult> mean;
  double seconds = 0.0;
};

/// Column spaces of the agents (orthonormalized in Euclidean mode).
inline std::vector<Subspace> agent_subspaces(std::span<const AgentState> agents,
                                             Geometry geometry) {
  std::vector<Subspace> out;
  out.reserve(agents.size());
  for (const auto& a : agents) {
    out.push_back(geometry == Geometry::grassmann ? a.subspace() : reorthonormalize(a.point));
  }
  return out;
}

/// Runs cfg.max_slots slots from random initial points. Emits one record per
/// slot to `sink` (in slot order) and returns the final agents and their
/// Frechet mean. Deterministic given cfg.seed.
template <LocalTask Task>
RunResult run(const GossipConfig& cfg, std::span<const Task> tasks, const TraceSink& sink = {},
              std::optional<std::vector<AgentState>> initial = std::nullopt) {
  cfg.validate();
  if (tasks.size() != static_cast<std::size_t>(cfg.agents)) {
    throw ConfigError(std::to_string(tasks.size()) + " task shards for " +
                      std::to_string(cfg.agents) + " agents");
  }
  const Index m = task_ambient_dim(tasks.front());
  for (const auto& t : tasks) {
    if (task_ambient_dim(t) != m) throw DimensionMismatch("shards disagree on ambient dimension");
  }
  const auto start = std::chrono::steady_clock::now();
  RunResult res;
  res.agents = initial ? std::move(*initial) : init_agents(cfg, m);
  GossipStreams streams(cfg.seed);
  for (std::int64_t k = 0; k < cfg.max_slots; ++k) {
    TraceRecord rec;
    if (cfg.mode == Mode::parallel) {
      rec = parallel_round(res.agents, k, cfg, streams, tasks);
    } else if (cfg.geometry == Geometry::grassmann) {
      rec = stochastic_slot(res.agents, k, cfg, streams, tasks);
    } else {
      rec = euclidean_slot(res.agents, k, cfg, streams, tasks);
    }
    if (sink) sink(rec);
    ++res.slots;
  }
  res.final_costs = local_costs<Task>(res.agents, tasks);
  res.final_consensus = consensus_distances(res.agents, cfg.geometry);
  try {
    const auto spaces = agent_subspaces(res.agents, cfg.geometry);
    res.mean = frechet_mean(spaces);
  } catch (const SubspacesTooFar&) {
    res.mean.reset();
  }
  res.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace rgossip
