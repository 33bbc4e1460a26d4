// rgossip: run decentralized subspace learning experiments on simulated agents.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "rgossip/experiment.hpp"
#include "rgossip/rgossip.hpp"
#include "rgossip/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rgossip;

namespace {

enum Exit { kOk = 0, kFlagError = 2, kRuntimeError = 3, kVerifyFailed = 4 };

struct Common {
  int agents = 6;
  double rho = 1e3;
  double a = 0.1;
  double b = 0.01;
  std::int64_t slots = -1;  // -1: default budget for the mode
  std::string mode = "stochastic";
  std::string geometry = "grassmann";
  bool precon = false;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> data_seed;
  int reorth_every = 100;
  int rank = -1;  // -1: generator rank, or 5 for file data
  std::optional<double> lambda;
  int cadence = 10;
  int workers = 1;
  std::string out_dir = "rgossip_out";
};

struct McSynth {
  Index m = 500, n = 12000, r = 5;
  double os = 6.0, cond = 1.0, noise_sd = 1e-6;
  std::optional<std::size_t> test_count;
};

struct McFile {
  std::string train, test;
  double test_fraction = 0.2;
  bool center = false;
};

struct MtlSynth {
  Index T = 1000, m = 100, r = 5, d_min = 10, d_max = 50;
  double noise_sd = 1e-6;
  double test_fraction = 0.0;
};

struct MtlFile {
  std::string dir;
  double test_fraction = 0.2;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--agents", c.agents, "number of agents N")->check(CLI::Range(2, 1 << 20));
  cmd->add_option("--rho", c.rho, "consensus weight")->check(CLI::NonNegativeNumber);
  cmd->add_option("--a", c.a, "stepsize numerator a in a/(1+bk)")->check(CLI::PositiveNumber);
  cmd->add_option("--b", c.b, "stepsize decay b in a/(1+bk)")->check(CLI::PositiveNumber);
  cmd->add_option("--slots", c.slots, "slot budget (default 200(N-1) stochastic, 400N parallel)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--mode", c.mode)->check(CLI::IsMember({"stochastic", "parallel"}));
  cmd->add_option("--geometry", c.geometry)->check(CLI::IsMember({"grassmann", "euclidean"}));
  cmd->add_flag("--precon", c.precon, "precondition by (W^T W + rho I)^-1");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--data-seed", c.data_seed, "seed for data generation and splitting");
  cmd->add_option("--reorth-every", c.reorth_every)->check(CLI::PositiveNumber);
  cmd->add_option("--rank", c.rank, "dimension of the learned subspace")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--lambda", c.lambda, "inner regularization weight in [0, 0.5]")
      ->check(CLI::Range(0.0, 0.5));
  cmd->add_option("--trace-cadence", c.cadence, "record local costs every k slots (0: never)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--workers", c.workers, "threads for parallel rounds")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--output-dir", c.out_dir);
}

GossipConfig make_config(const Common& c, Index default_rank) {
  GossipConfig cfg;
  cfg.agents = c.agents;
  cfg.rho = c.rho;
  cfg.stepsize_a = c.a;
  cfg.stepsize_b = c.b;
  cfg.mode = c.mode == "parallel" ? Mode::parallel : Mode::stochastic;
  cfg.geometry = c.geometry == "euclidean" ? Geometry::euclidean : Geometry::grassmann;
  cfg.max_slots = c.slots >= 0 ? c.slots : default_budget(cfg.mode, cfg.agents);
  cfg.precon = c.precon;
  cfg.seed = c.seed;
  cfg.reorth_every = c.reorth_every;
  cfg.rank = c.rank > 0 ? c.rank : default_rank;
  cfg.cost_cadence = c.cadence;
  cfg.workers = c.workers;
  cfg.validate();
  return cfg;
}

json config_json(const std::string& cmd, const GossipConfig& cfg, double lambda,
                 std::uint64_t data_seed) {
  return {{"subcommand", cmd},
          {"agents", cfg.agents},
          {"rho", cfg.rho},
          {"a", cfg.stepsize_a},
          {"b", cfg.stepsize_b},
          {"slots", cfg.max_slots},
          {"mode", to_string(cfg.mode)},
          {"geometry", to_string(cfg.geometry)},
          {"precon", cfg.precon},
          {"seed", cfg.seed},
          {"data_seed", data_seed},
          {"reorth_every", cfg.reorth_every},
          {"rank", cfg.rank},
          {"lambda", lambda},
          {"trace_cadence", cfg.cost_cadence},
          {"workers", cfg.workers}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class Task>
RunResult execute(const GossipConfig& cfg, const std::vector<Task>& tasks, const fs::path& out) {
  TraceWriter trace(out / "trace.csv", cfg.agents);
  auto res = run(cfg, std::span<const Task>(tasks),
                 [&](const TraceRecord& rec) { trace.write(rec); });
  trace.close();
  return res;
}

void finish(const fs::path& out, RunSummary summary, const json& config, double t_data,
            double t_run, std::chrono::steady_clock::time_point t_eval) {
  summary.config = config;
  summary.timing = {{"data", t_data}, {"run", t_run}, {"evaluate", seconds_since(t_eval)}};
  write_summary(out / "summary.json", summary);
  std::cout << "slots " << summary.slots << ", outputs in " << out.string() << '\n';
}

int run_mc(const std::string& name, const Common& c, McInstance inst, json extra,
           double lambda, double t_data) {
  const GossipConfig cfg = make_config(c, inst.r_true > 0 ? inst.r_true : 5);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  json config = config_json(name, cfg, lambda, c.data_seed.value_or(c.seed));
  config.update(extra);
  write_json(out / "config.json", config);
  const auto part = partition_columns(inst, cfg.agents, lambda);
  const auto t_run = std::chrono::steady_clock::now();
  const auto res = execute(cfg, part.shards, out);
  const double run_s = seconds_since(t_run);
  const auto t_eval = std::chrono::steady_clock::now();
  finish(out, summarize_mc(res, part, inst.offset), config, t_data, run_s, t_eval);
  return kOk;
}

int run_mtl(const std::string& name, const Common& c, const MtlInstance& inst, json extra,
            double lambda, Index default_rank, double t_data) {
  const GossipConfig cfg = make_config(c, default_rank);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  json config = config_json(name, cfg, lambda, c.data_seed.value_or(c.seed));
  config.update(extra);
  write_json(out / "config.json", config);
  const auto part = partition_tasks(inst, cfg.agents, lambda);
  const auto t_run = std::chrono::steady_clock::now();
  const auto res = execute(cfg, part.groups, out);
  const double run_s = seconds_since(t_run);
  const auto t_eval = std::chrono::steady_clock::now();
  finish(out, summarize_mtl(res, part, inst.U_star), config, t_data, run_s, t_eval);
  return kOk;
}

int run_verify() {
  bool ok = true;
  for (const auto& suite : {verify::geometry_suite(), verify::gradient_suite()}) {
    for (const auto& chk : suite) {
      std::cout << (chk.passed ? "PASS" : "FAIL") << "  " << chk.name << "  (" << chk.detail
                << ")\n";
      ok = ok && chk.passed;
    }
  }
  return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized Riemannian gossip for subspace learning"};
  app.require_subcommand(1);

  Common common;
  McSynth mcs;
  McFile mcf;
  MtlSynth mts;
  MtlFile mtf;

  auto* mc_synth = app.add_subcommand("mc-synth", "matrix completion on a synthetic instance");
  add_common(mc_synth, common);
  mc_synth->add_option("--m", mcs.m)->check(CLI::PositiveNumber);
  mc_synth->add_option("--n", mcs.n)->check(CLI::PositiveNumber);
  mc_synth->add_option("--r", mcs.r, "rank of the ground truth")->check(CLI::PositiveNumber);
  mc_synth->add_option("--os", mcs.os, "over-sampling ratio")->check(CLI::Range(1.0, 1e9));
  mc_synth->add_option("--cond", mcs.cond, "condition number (1: Gaussian factors)")
      ->check(CLI::Range(1.0, 1e300));
  mc_synth->add_option("--noise-sd", mcs.noise_sd)->check(CLI::NonNegativeNumber);
  mc_synth->add_option("--test-count", mcs.test_count, "held-out entries");

  auto* mc_file = app.add_subcommand("mc-file", "matrix completion on a triplet file");
  add_common(mc_file, common);
  mc_file->add_option("--train", mcf.train, "triplet file")->required()->check(CLI::ExistingFile);
  mc_file->add_option("--test", mcf.test, "held-out triplet file")->check(CLI::ExistingFile);
  mc_file->add_option("--test-fraction", mcf.test_fraction,
                      "held-out share when --test is absent")
      ->check(CLI::Range(0.0, 1.0));
  mc_file->add_flag("--center", mcf.center, "subtract the training mean");

  auto* mtl_synth = app.add_subcommand("mtl-synth", "multitask learning on synthetic tasks");
  add_common(mtl_synth, common);
  mtl_synth->add_option("--T", mts.T, "number of tasks")->check(CLI::PositiveNumber);
  mtl_synth->add_option("--m", mts.m)->check(CLI::PositiveNumber);
  mtl_synth->add_option("--r", mts.r)->check(CLI::PositiveNumber);
  mtl_synth->add_option("--d-min", mts.d_min)->check(CLI::PositiveNumber);
  mtl_synth->add_option("--d-max", mts.d_max)->check(CLI::PositiveNumber);
  mtl_synth->add_option("--noise-sd", mts.noise_sd)->check(CLI::NonNegativeNumber);
  mtl_synth->add_option("--test-fraction", mts.test_fraction, "held-out share (0: none)")
      ->check(CLI::Range(0.0, 1.0));

  auto* mtl_file = app.add_subcommand("mtl-file", "multitask learning on a task directory");
  add_common(mtl_file, common);
  mtl_file->add_option("--data", mtf.dir, "directory of task files")
      ->required()
      ->check(CLI::ExistingDirectory);
  mtl_file->add_option("--test-fraction", mtf.test_fraction)->check(CLI::Range(0.0, 1.0));

  auto* verify_cmd = app.add_subcommand("verify", "run the geometry and gradient self-checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFlagError;
  }

  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t data_seed = common.data_seed.value_or(common.seed);
  auto data_rng = GossipStreams::seeded(data_seed, 0);
  try {
    if (verify_cmd->parsed()) return run_verify();

    if (mc_synth->parsed()) {
      const double lambda = common.lambda.value_or(0.0);
      if (mcs.r > std::min(mcs.m, mcs.n)) throw ConfigError("--r exceeds min(m, n)");
      if (mcs.cond > 1.0 && mcs.r < 2) throw ConfigError("--cond > 1 needs --r >= 2");
      McInstance inst = mcs.cond > 1.0
          ? gen_mc_illcond(mcs.m, mcs.n, mcs.r, mcs.cond, mcs.os, mcs.noise_sd, data_rng,
                           mcs.test_count)
          : gen_mc(mcs.m, mcs.n, mcs.r, mcs.os, mcs.noise_sd, data_rng, mcs.test_count);
      json extra = {{"m", mcs.m}, {"n", mcs.n}, {"r", mcs.r}, {"os", mcs.os},
                    {"cond", mcs.cond}, {"noise_sd", mcs.noise_sd},
                    {"test_count", inst.test.size()}};
      return run_mc("mc-synth", common, std::move(inst), extra, lambda, seconds_since(t0));
    }

    if (mc_file->parsed()) {
      const double lambda = common.lambda.value_or(0.01);
      McInstance inst = load_mc_triplets(mcf.train);
      if (!mcf.test.empty()) {
        const McInstance held = load_mc_triplets(mcf.test);
        if (held.m != inst.m || held.n != inst.n) {
          throw DataError("test file dimensions differ from the training file");
        }
        inst.test = held.train;
        if (mcf.center) {
          double mean = 0.0;
          for (const auto& e : inst.train) mean += e.value;
          mean /= static_cast<double>(std::max<std::size_t>(1, inst.train.size()));
          for (auto& e : inst.train) e.value -= mean;
          inst.offset = mean;
        }
      } else {
        inst = split_train_test(inst, 1.0 - mcf.test_fraction, data_rng, mcf.center);
      }
      json extra = {{"train_file", mcf.train}, {"test_file", mcf.test},
                    {"test_fraction", mcf.test_fraction}, {"center", mcf.center},
                    {"m", inst.m}, {"n", inst.n}};
      return run_mc("mc-file", common, std::move(inst), extra, lambda, seconds_since(t0));
    }

    if (mtl_synth->parsed()) {
      const double lambda = common.lambda.value_or(0.0);
      MtlInstance inst = gen_mtl(mts.T, mts.m, mts.r, mts.d_min, mts.d_max, mts.noise_sd,
                                 data_rng);
      if (mts.test_fraction > 0.0) inst = split_train_test(inst, 1.0 - mts.test_fraction, data_rng);
      json extra = {{"T", mts.T}, {"m", mts.m}, {"r", mts.r}, {"d_min", mts.d_min},
                    {"d_max", mts.d_max}, {"noise_sd", mts.noise_sd},
                    {"test_fraction", mts.test_fraction}};
      return run_mtl("mtl-synth", common, inst, extra, lambda, mts.r, seconds_since(t0));
    }

    if (mtl_file->parsed()) {
      const double lambda = common.lambda.value_or(0.1);
      MtlInstance inst = load_mtl_dir(mtf.dir);
      if (mtf.test_fraction > 0.0) inst = split_train_test(inst, 1.0 - mtf.test_fraction, data_rng);
      json extra = {{"data", mtf.dir}, {"test_fraction", mtf.test_fraction}, {"m", inst.m},
                    {"T", inst.tasks.size()}};
      return run_mtl("mtl-file", common, inst, extra, lambda, 5, seconds_since(t0));
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return kFlagError;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kFlagError;
}
