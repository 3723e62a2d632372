// gtrxl: train, evaluate, rank and inspect gated transformer experiments.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "gtrxl/gradcheck_suite.hpp"
#include "gtrxl/harness.hpp"
#include "oracle_checks.hpp"

namespace fs = std::filesystem;
using namespace gtrxl;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t count = 100;
  std::vector<std::size_t> checkpoints;
  std::string csv;
};

ExperimentConfig load(const Options& o) {
  ExperimentConfig c = load_experiment_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  c.validate();
  return c;
}

int cmd_train(const Options& o) {
  const ExperimentConfig c = load(o);
  for (const auto& s : run_experiment(c)) {
    std::printf("%s  lr %.6g  step %zu  mean_return %.6g%s\n", s.spec.run_id.c_str(), s.spec.learning_rate,
                s.final_step, s.mean_return, s.diverged ? "  DIVERGED" : "");
  }
  std::printf("metrics in %s\n", metrics_dir(c.output_dir).string().c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  const fs::path dir = fs::path(o.out) / "checkpoints";
  if (!fs::is_directory(dir)) throw ConfigError("no checkpoints under " + dir.string());
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) runs.push_back(e.path());
  std::sort(runs.begin(), runs.end());
  if (runs.empty()) throw ConfigError("no checkpoints under " + dir.string());
  std::printf("run_id,task,score\n");
  for (const auto& r : runs) {
    const EvalResult e = evaluate_checkpoint(r, o.count, o.seed.value_or(0));
    std::printf("%s,%s,%.6g\n", e.run_id.c_str(), e.kind == TaskKind::copy ? "copy" : "numpad", e.score);
  }
  return 0;
}

int cmd_grad_check(const Options& o) {
  bool ok = true;
  for (const auto& c : run_gradcheck_suite(o.seed.value_or(0))) {
    std::printf("%-4s %-32s error %.3e  tol %.0e\n", c.passed() ? "ok" : "FAIL", c.name.c_str(), c.error,
                c.tolerance);
    ok = ok && c.passed();
  }
  return ok ? 0 : 1;
}

int cmd_oracle_check(const Options& o) {
  bool ok = true;
  for (const auto& c : oracle::run_oracle_checks(o.seed.value_or(0))) {
    std::printf("%-4s %-32s error %.3e  tol %.0e\n", c.passed() ? "ok" : "FAIL", c.name.c_str(), c.error,
                c.tolerance);
    ok = ok && c.passed();
  }
  return ok ? 0 : 1;
}

int cmd_rank(const Options& o) {
  const fs::path dir = metrics_dir(o.out);
  std::vector<std::size_t> checkpoints = o.checkpoints;
  if (checkpoints.empty() && fs::is_directory(dir)) {
    std::set<std::size_t> steps;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".jsonl")
        for (const auto& r : read_metrics(e.path())) steps.insert(r.step);
    checkpoints.assign(steps.begin(), steps.end());
  }
  const auto rows = rank_runs(dir, checkpoints);
  if (rows.empty()) {
    std::fprintf(stderr, "no runs found in %s\n", dir.string().c_str());
    return 1;
  }
  const std::string csv = rank_csv(rows);
  if (o.csv.empty()) {
    std::cout << csv;
  } else {
    std::ofstream(o.csv) << csv;
  }
  return 0;
}

int cmd_param_count(const Options& o) {
  std::cout << param_report(load_experiment_config(o.config).stack);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated Transformer-XL experiments"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  Options o;
  std::uint64_t seed = 0;
  auto seed_opt = [&](CLI::App* sub) { sub->add_option("--seed", seed, "random seed"); };

  auto* train = app.add_subcommand("train", "train every run in the config's seed x sample grid");
  train->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "output directory (overrides the config)");
  seed_opt(train);

  auto* eval = app.add_subcommand("eval", "score the final checkpoints of an experiment");
  eval->add_option("--out", o.out, "experiment output directory")->required();
  eval->add_option("--count", o.count, "copy sequences or Numpad episodes per run")->check(CLI::PositiveNumber);
  seed_opt(eval);

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every differentiable op");
  seed_opt(grad);

  auto* oracle_cmd = app.add_subcommand("oracle-check", "compare attention and gates with loop oracles");
  seed_opt(oracle_cmd);

  auto* rank = app.add_subcommand("rank", "rank runs by windowed mean return, CSV");
  rank->add_option("--out", o.out, "experiment output directory")->required();
  rank->add_option("--checkpoints", o.checkpoints, "checkpoint steps (default: every logged step)")->delimiter(',');
  rank->add_option("--csv", o.csv, "write CSV here instead of stdout");

  auto* params = app.add_subcommand("param-count", "per-component parameter counts");
  params->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  for (auto* sub : {train, eval, grad, oracle_cmd}) {
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;
  }
  try {
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (grad->parsed()) return cmd_grad_check(o);
    if (oracle_cmd->parsed()) return cmd_oracle_check(o);
    if (rank->parsed()) return cmd_rank(o);
    if (params->parsed()) return cmd_param_count(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
