#pragma once

// Synthetic instance generators, triplet / task-directory file formats,
// train/test splitting and partitioning across agents.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rgossip/errors.hpp"
#include "rgossip/manifold.hpp"
#include "rgossip/problems.hpp"

namespace rgossip {

/// Matrix completion instance. Synthetic instances keep the ground truth as
/// factors A (m x r) and B (n x r) so that A B^T is never densified.
struct McInstance {
  Index m = 0;
  Index n = 0;
  Index r_true = 0;
  Matrix A;
  Matrix B;
  std::vector<Entry> train;
  std::vector<Entry> test;
  double noise_sd = 0.0;
  /// Subtracted from the training values when centering; add it back to
  /// predictions before comparing against test values.
  double offset = 0.0;

  bool has_truth() const { return A.size() > 0; }
  double truth(Index i, Index j) const { return A.row(i).dot(B.row(j)); }
};

/// |Omega| = round(OS (m r + n r - r^2)).
inline std::size_t oversampled_count(Index m, Index n, Index r, double os) {
  const double dof = static_cast<double>(m * r + n * r - r * r);
  return static_cast<std::size_t>(std::llround(os * dof));
}

namespace detail {

inline auto entry_order = [](const Entry& a, const Entry& b) {
  return a.col != b.col ? a.col < b.col : a.row < b.row;
};

template <class Rng>
Matrix gaussian(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) out(i, j) = g(rng);
  return out;
}

/// k distinct positions of [0, total) in random order (Floyd's sampling
/// followed by a shuffle).
template <class Rng>
std::vector<std::uint64_t> sample_positions(std::uint64_t total, std::size_t k, Rng& rng) {
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(k * 2);
  std::vector<std::uint64_t> out;
  out.reserve(k);
  for (std::uint64_t j = total - k; j < total; ++j) {
    std::uniform_int_distribution<std::uint64_t> pick(0, j);
    const std::uint64_t t = pick(rng);
    const std::uint64_t v = seen.insert(t).second ? t : j;
    if (v == j) seen.insert(j);
    out.push_back(v);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

template <class Rng>
void sample_entries(McInstance& inst, std::size_t n_train, std::size_t n_test, Rng& rng) {
  const auto total = static_cast<std::uint64_t>(inst.m) * static_cast<std::uint64_t>(inst.n);
  if (n_train + n_test > total) {
    throw DataError("requested " + std::to_string(n_train) + " training and " +
                    std::to_string(n_test) + " test entries from a " +
                    shape_str(inst.m, inst.n) + " matrix");
  }
  const auto pos = sample_positions(total, n_train + n_test, rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  inst.train.reserve(n_train);
  inst.test.reserve(n_test);
  for (std::size_t k = 0; k < pos.size(); ++k) {
    const auto i = static_cast<Index>(pos[k] % static_cast<std::uint64_t>(inst.m));
    const auto j = static_cast<Index>(pos[k] / static_cast<std::uint64_t>(inst.m));
    const double v = inst.truth(i, j);
    if (k < n_train) {
      inst.train.push_back({i, j, v + inst.noise_sd * noise(rng)});
    } else {
      inst.test.push_back({i, j, v});
    }
  }
  std::sort(inst.train.begin(), inst.train.end(), entry_order);
  std::sort(inst.test.begin(), inst.test.end(), entry_order);
}

inline std::size_t default_test_count(std::size_t n_train, std::uint64_t total) {
  const std::uint64_t left = total > n_train ? total - n_train : 0;
  return static_cast<std::size_t>(std::min<std::uint64_t>(left, n_train / 10 + 1));
}

}  // namespace detail

/// Random rank-r instance A B^T with Gaussian factors. Training entries carry
/// N(0, noise_sd^2) noise, test entries are noiseless. `test_count` defaults
/// to |Omega| / 10 + 1.
template <class Rng>
McInstance gen_mc(Index m, Index n, Index r, double os, double noise_sd, Rng& rng,
                  std::optional<std::size_t> test_count = std::nullopt) {
  if (m < 1 || n < 1 || r < 1 || r > std::min(m, n)) {
    throw DataError("gen_mc: invalid sizes m=" + std::to_string(m) + " n=" + std::to_string(n) +
                    " r=" + std::to_string(r));
  }
  if (!(os >= 1.0)) throw DataError("gen_mc: over-sampling ratio must be >= 1");
  if (!(noise_sd >= 0.0)) throw DataError("gen_mc: noise_sd must be >= 0");
  McInstance inst;
  inst.m = m;
  inst.n = n;
  inst.r_true = r;
  inst.noise_sd = noise_sd;
  inst.A = detail::gaussian(m, r, rng);
  inst.B = detail::gaussian(n, r, rng);
  const auto n_train = oversampled_count(m, n, r, os);
  const auto total = static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(n);
  detail::sample_entries(inst, n_train,
                         test_count.value_or(detail::default_test_count(n_train, total)), rng);
  return inst;
}

/// Singular values sigma_max * cond^{-(k-1)/(r-1)}, k = 1..r.
inline Vector geometric_spectrum(Index r, double sigma_max, double cond) {
  Vector s(r);
  for (Index k = 0; k < r; ++k) {
    s(k) = r == 1 ? sigma_max
                  : sigma_max * std::pow(cond, -static_cast<double>(k) / static_cast<double>(r - 1));
  }
  return s;
}

/// Ill-conditioned instance P diag(sigma) Q^T with orthonormal random P, Q
/// and geometrically decaying singular values, sigma_1 / sigma_r = cond.
/// sigma_1 = sqrt(m n), so the leading component has unit RMS entries.
template <class Rng>
McInstance gen_mc_illcond(Index m, Index n, Index r, double cond, double os, double noise_sd,
                          Rng& rng, std::optional<std::size_t> test_count = std::nullopt) {
  if (!(cond >= 1.0)) throw DataError("gen_mc_illcond: condition number must be >= 1");
  if (r == 1 && cond > 1.0) throw DataError("gen_mc_illcond: rank 1 cannot have cond > 1");
  if (m < 1 || n < 1 || r < 1 || r > std::min(m, n)) {
    throw DataError("gen_mc_illcond: invalid sizes");
  }
  if (!(os >= 1.0)) throw DataError("gen_mc_illcond: over-sampling ratio must be >= 1");
  McInstance inst;
  inst.m = m;
  inst.n = n;
  inst.r_true = r;
  inst.noise_sd = noise_sd;
  const Subspace P = random_subspace(m, r, rng);
  const Subspace Q = random_subspace(n, r, rng);
  const Vector sigma =
      geometric_spectrum(r, std::sqrt(static_cast<double>(m) * static_cast<double>(n)), cond);
  inst.A = P.basis() * sigma.asDiagonal();
  inst.B = Q.basis();
  const auto n_train = oversampled_count(m, n, r, os);
  const auto total = static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(n);
  detail::sample_entries(inst, n_train,
                         test_count.value_or(detail::default_test_count(n_train, total)), rng);
  return inst;
}

/// Contiguous column blocks. Block b has n / N + (b < n % N) columns.
inline std::vector<Index> block_sizes(Index total, int parts) {
  std::vector<Index> sizes(static_cast<std::size_t>(parts), total / parts);
  for (Index b = 0; b < total % parts; ++b) ++sizes[static_cast<std::size_t>(b)];
  return sizes;
}

struct McPartition {
  std::vector<McShard> shards;
  std::vector<std::vector<Entry>> test;  // per shard, local column indices
  std::vector<Index> col_begin;          // first global column of each shard
};

inline McPartition partition_columns(const McInstance& inst, int parts, double lambda) {
  if (parts < 1 || parts > inst.n) {
    throw DataError("cannot split " + std::to_string(inst.n) + " columns among " +
                    std::to_string(parts) + " agents");
  }
  const auto sizes = block_sizes(inst.n, parts);
  McPartition out;
  std::vector<Index> owner(static_cast<std::size_t>(inst.n));
  Index begin = 0;
  for (int b = 0; b < parts; ++b) {
    out.col_begin.push_back(begin);
    for (Index j = 0; j < sizes[static_cast<std::size_t>(b)]; ++j) {
      owner[static_cast<std::size_t>(begin + j)] = b;
    }
    begin += sizes[static_cast<std::size_t>(b)];
  }
  std::vector<std::vector<Entry>> train(static_cast<std::size_t>(parts));
  out.test.assign(static_cast<std::size_t>(parts), {});
  for (const auto& e : inst.train) {
    const auto b = owner[static_cast<std::size_t>(e.col)];
    train[static_cast<std::size_t>(b)].push_back(
        {e.row, e.col - out.col_begin[static_cast<std::size_t>(b)], e.value});
  }
  for (const auto& e : inst.test) {
    const auto b = owner[static_cast<std::size_t>(e.col)];
    out.test[static_cast<std::size_t>(b)].push_back(
        {e.row, e.col - out.col_begin[static_cast<std::size_t>(b)], e.value});
  }
  for (int b = 0; b < parts; ++b) {
    out.shards.emplace_back(inst.m, sizes[static_cast<std::size_t>(b)],
                            std::move(train[static_cast<std::size_t>(b)]), lambda);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multitask
// ---------------------------------------------------------------------------

struct MtlInstance {
  Index m = 0;
  std::vector<RegressionTask> tasks;
  std::vector<RegressionTask> test_tasks;  // empty, or one entry per task
  std::optional<Subspace> U_star;
  double noise_sd = 0.0;
};

/// T tasks with d_t ~ U{d_min..d_max} Gaussian samples in R^m; labels
/// y_t = X_t U* U*^T w_t + noise with w_t ~ N(0, I_m) and U* a random
/// r-dimensional subspace.
template <class Rng>
MtlInstance gen_mtl(Index T, Index m, Index r, Index d_min, Index d_max, double noise_sd,
                    Rng& rng) {
  if (T < 1 || m < 1 || r < 1 || r > m || d_min < 1 || d_max < d_min || !(noise_sd >= 0.0)) {
    throw DataError("gen_mtl: invalid parameters (T=" + std::to_string(T) +
                    ", m=" + std::to_string(m) + ", r=" + std::to_string(r) +
                    ", d in [" + std::to_string(d_min) + ", " + std::to_string(d_max) + "])");
  }
  MtlInstance inst;
  inst.m = m;
  inst.noise_sd = noise_sd;
  inst.U_star = random_subspace(m, r, rng);
  const Matrix& U = inst.U_star->basis();
  std::uniform_int_distribution<Index> dpick(d_min, d_max);
  std::normal_distribution<double> noise(0.0, 1.0);
  inst.tasks.reserve(static_cast<std::size_t>(T));
  for (Index t = 0; t < T; ++t) {
    const Index d = dpick(rng);
    Matrix X = detail::gaussian(d, m, rng);
    const Vector w = detail::gaussian(m, 1, rng);
    Vector y = X * (U * (U.transpose() * w));
    for (Index k = 0; k < d; ++k) y(k) += noise_sd * noise(rng);
    inst.tasks.push_back({std::move(X), std::move(y)});
  }
  return inst;
}

struct MtlPartition {
  std::vector<TaskGroup> groups;
  std::vector<std::vector<RegressionTask>> test;  // per group; empty if no test data
  std::vector<Index> task_begin;
};

/// Contiguous near-equal task groups.
inline MtlPartition partition_tasks(const MtlInstance& inst, int parts, double lambda) {
  const auto T = static_cast<Index>(inst.tasks.size());
  if (parts < 1 || parts > T) {
    throw DataError("cannot split " + std::to_string(T) + " tasks among " +
                    std::to_string(parts) + " agents");
  }
  if (!inst.test_tasks.empty() && inst.test_tasks.size() != inst.tasks.size()) {
    throw DataError("test tasks do not match training tasks");
  }
  MtlPartition out;
  Index begin = 0;
  for (const Index size : block_sizes(T, parts)) {
    out.task_begin.push_back(begin);
    const auto b = inst.tasks.begin() + begin;
    out.groups.emplace_back(inst.m, std::vector<RegressionTask>(b, b + size), lambda);
    if (!inst.test_tasks.empty()) {
      const auto tb = inst.test_tasks.begin() + begin;
      out.test.emplace_back(tb, tb + size);
    } else {
      out.test.emplace_back();
    }
    begin += size;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

namespace detail {

inline void check_fraction(double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw DataError("train fraction must lie in (0, 1), got " + std::to_string(fraction));
  }
}

}  // namespace detail

/// Per-entry split of all known entries (train and test pooled). With
/// `center`, the training mean is subtracted from the training values and
/// kept in `offset`; test values stay on the original scale.
template <class Rng>
McInstance split_train_test(const McInstance& inst, double fraction, Rng& rng,
                            bool center = false) {
  detail::check_fraction(fraction);
  McInstance out = inst;
  std::vector<Entry> pool;
  pool.reserve(inst.train.size() + inst.test.size());
  for (Entry e : inst.train) {
    e.value += inst.offset;  // back to the original scale
    pool.push_back(e);
  }
  pool.insert(pool.end(), inst.test.begin(), inst.test.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  const auto n_train =
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
  out.train.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.test.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_train), pool.end());
  out.offset = 0.0;
  if (center && !out.train.empty()) {
    double mean = 0.0;
    for (const auto& e : out.train) mean += e.value;
    mean /= static_cast<double>(out.train.size());
    for (auto& e : out.train) e.value -= mean;
    out.offset = mean;
  }
  std::sort(out.train.begin(), out.train.end(), detail::entry_order);
  std::sort(out.test.begin(), out.test.end(), detail::entry_order);
  return out;
}

/// Per-sample split within every task; each task keeps at least one
/// training sample.
template <class Rng>
MtlInstance split_train_test(const MtlInstance& inst, double fraction, Rng& rng) {
  detail::check_fraction(fraction);
  MtlInstance out;
  out.m = inst.m;
  out.U_star = inst.U_star;
  out.noise_sd = inst.noise_sd;
  for (const auto& task : inst.tasks) {
    const Index d = task.X.rows();
    std::vector<Index> idx(static_cast<std::size_t>(d));
    for (Index k = 0; k < d; ++k) idx[static_cast<std::size_t>(k)] = k;
    std::shuffle(idx.begin(), idx.end(), rng);
    const Index n_train =
        std::max<Index>(1, std::llround(fraction * static_cast<double>(d)));
    RegressionTask tr{Matrix(n_train, inst.m), Vector(n_train)};
    RegressionTask te{Matrix(d - n_train, inst.m), Vector(d - n_train)};
    for (Index k = 0; k < d; ++k) {
      const Index src = idx[static_cast<std::size_t>(k)];
      if (k < n_train) {
        tr.X.row(k) = task.X.row(src);
        tr.y(k) = task.y(src);
      } else {
        te.X.row(k - n_train) = task.X.row(src);
        te.y(k - n_train) = task.y(src);
      }
    }
    out.tasks.push_back(std::move(tr));
    out.test_tasks.push_back(std::move(te));
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t b = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > b) out.push_back(line.substr(b, i - b));
  }
  return out;
}

template <class T>
T parse_number(std::string_view tok, const std::string& where) {
  T value{};
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    throw DataError(where + ": cannot parse '" + std::string(tok) + "'");
  }
  return value;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string location(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

}  // namespace detail

/// Writes "m n" followed by one "i j v" line per entry (1-based indices,
/// 17 significant digits so values round-trip exactly).
inline void write_mc_triplets(const std::filesystem::path& path, Index m, Index n,
                              const std::vector<Entry>& entries) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << m << ' ' << n << '\n';
  for (const auto& e : entries) {
    out << (e.row + 1) << ' ' << (e.col + 1) << ' ' << detail::format_double(e.value) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Reads the triplet format written by write_mc_triplets. All entries land
/// in `train`; use split_train_test to hold some out.
inline McInstance load_mc_triplets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  McInstance inst;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::unordered_set<std::uint64_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    const auto where = detail::location(path, lineno);
    if (!header) {
      if (tok.size() != 2) throw DataError(where + ": expected header 'm n'");
      inst.m = detail::parse_number<Index>(tok[0], where);
      inst.n = detail::parse_number<Index>(tok[1], where);
      if (inst.m < 1 || inst.n < 1) throw DataError(where + ": dimensions must be positive");
      header = true;
      continue;
    }
    if (tok.size() != 3) throw DataError(where + ": expected 'i j v'");
    const auto i = detail::parse_number<Index>(tok[0], where);
    const auto j = detail::parse_number<Index>(tok[1], where);
    const auto v = detail::parse_number<double>(tok[2], where);
    if (i < 1 || i > inst.m || j < 1 || j > inst.n) {
      throw DataError(where + ": index (" + std::to_string(i) + ", " + std::to_string(j) +
                      ") outside " + shape_str(inst.m, inst.n));
    }
    const auto key = static_cast<std::uint64_t>(j - 1) * static_cast<std::uint64_t>(inst.m) +
                     static_cast<std::uint64_t>(i - 1);
    if (!seen.insert(key).second) {
      throw DataError(where + ": duplicate entry (" + std::to_string(i) + ", " +
                      std::to_string(j) + ")");
    }
    inst.train.push_back({i - 1, j - 1, v});
  }
  if (!header) throw DataError(path.string() + ": empty file");
  return inst;
}

/// One file per task named task_00000.txt, ...: header "d_t m", then rows
/// "x_1 ... x_m y".
inline void write_mtl_dir(const std::filesystem::path& dir, Index m,
                          const std::vector<RegressionTask>& tasks) {
  std::filesystem::create_directories(dir);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "task_%05zu.txt", t);
    const auto path = dir / name;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const auto& task = tasks[t];
    out << task.X.rows() << ' ' << m << '\n';
    for (Index k = 0; k < task.X.rows(); ++k) {
      for (Index c = 0; c < m; ++c) out << detail::format_double(task.X(k, c)) << ' ';
      out << detail::format_double(task.y(k)) << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }
}

/// Loads every regular file of `dir` (sorted by name) as one task.
inline MtlInstance load_mtl_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError(dir.string() + ": no task files");
  MtlInstance inst;
  for (const auto& path : files) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    Index d = -1;
    Index row = 0;
    RegressionTask task;
    while (std::getline(in, line)) {
      ++lineno;
      const auto tok = detail::split_ws(line);
      if (tok.empty()) continue;
      const auto where = detail::location(path, lineno);
      if (d < 0) {
        if (tok.size() != 2) throw DataError(where + ": expected header 'd_t m'");
        d = detail::parse_number<Index>(tok[0], where);
        const auto m = detail::parse_number<Index>(tok[1], where);
        if (d < 1 || m < 1) throw DataError(where + ": d_t and m must be positive");
        if (inst.m == 0) inst.m = m;
        if (m != inst.m) {
          throw DataError(where + ": feature dimension " + std::to_string(m) + " differs from " +
                          std::to_string(inst.m));
        }
        task.X.resize(d, m);
        task.y.resize(d);
        continue;
      }
      if (row >= d) throw DataError(where + ": more than " + std::to_string(d) + " rows");
      if (static_cast<Index>(tok.size()) != inst.m + 1) {
        throw DataError(where + ": expected " + std::to_string(inst.m + 1) + " values, got " +
                        std::to_string(tok.size()));
      }
      for (Index c = 0; c < inst.m; ++c) {
        task.X(row, c) = detail::parse_number<double>(tok[static_cast<std::size_t>(c)], where);
      }
      task.y(row) = detail::parse_number<double>(tok.back(), where);
      ++row;
    }
    if (d < 0) throw DataError(path.string() + ": empty task file");
    if (row != d) {
      throw DataError(path.string() + ": header declares " + std::to_string(d) + " rows, found " +
                      std::to_string(row));
    }
    inst.tasks.push_back(std::move(task));
  }
  return inst;
}

}  // namespace rgossip
