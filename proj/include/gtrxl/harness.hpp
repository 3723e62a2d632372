#pragma once

// Experiment runner: JSON configuration, seed x learning-rate grids, JSONL
// metrics, final checkpoints, run ranking and parameter reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gtrxl/checkpoint.hpp"
#include "gtrxl/training.hpp"

namespace gtrxl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { copy, numpad };

struct EnvSpec {
  TaskKind kind = TaskKind::copy;
  CopyTaskSpec copy;
  NumpadConfig numpad;
};

struct LearningRateRange {
  double low = 1e-4;
  double high = 1e-3;
};

struct ExperimentConfig {
  StackConfig stack;
  TrainConfig train;
  EnvSpec env;
  std::size_t seeds = 1;
  std::size_t samples = 1;
  std::optional<LearningRateRange> learning_rate_range;  // absent: train.learning_rate for all
  std::map<std::size_t, double> learning_rate_overrides;  // run index -> learning rate
  std::filesystem::path output_dir = "runs";
  std::size_t log_every = 1;
  bool record_wall_clock = false;

  void validate() const {
    stack.validate();
    train.validate();
    if (seeds == 0 || samples == 0 || log_every == 0) {
      throw ConfigError("seeds, samples and log_every must be positive");
    }
    if (learning_rate_range) {
      const auto& r = *learning_rate_range;
      if (!(r.low > 0.0) || !(r.low < r.high)) {
        throw ConfigError("learning_rate_range needs 0 < low < high");
      }
    }
    if (env.kind == TaskKind::numpad && train.unroll == 0) {
      throw ConfigError("numpad training needs a positive unroll");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const StackConfig& c) {
  return {{"variant", std::string(to_string(c.variant))}, {"layers", c.layers},   {"width", c.width},
          {"heads", c.heads},                {"head_dim", c.head_dim}, {"ff_width", c.ff_width},
          {"memory", c.memory},              {"gate", std::string(to_string(c.gate))}, {"gate_bias", c.gate_bias}};
}

/// Missing width and ff_width default to heads*head_dim and 4*width; gate
/// defaults to gru for gtrxl and residual otherwise.
inline StackConfig stack_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"variant", "layers", "width", "heads", "head_dim", "ff_width", "memory", "gate",
                             "gate_bias"},
                         "stack");
  std::string variant = "gtrxl", gate;
  detail::read(j, "variant", variant, "stack");
  StackConfig c;
  try {
    c.variant = parse_variant(variant);
    detail::read(j, "gate", gate, "stack");
    c.gate = gate.empty() ? (c.variant == Variant::gtrxl ? GateKind::gru : GateKind::residual)
                          : parse_gate_kind(gate);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("stack: ") + e.what());
  }
  detail::read(j, "layers", c.layers, "stack");
  detail::read(j, "heads", c.heads, "stack");
  detail::read(j, "head_dim", c.head_dim, "stack");
  c.width = c.heads * c.head_dim;
  detail::read(j, "width", c.width, "stack");
  c.ff_width = 4 * c.width;
  detail::read(j, "ff_width", c.ff_width, "stack");
  detail::read(j, "memory", c.memory, "stack");
  detail::read(j, "gate_bias", c.gate_bias, "stack");
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"unroll", c.unroll},               {"discount", c.discount},
          {"entropy_coef", c.entropy_coef},   {"value_coef", c.value_coef},
          {"total_steps", c.total_steps},     {"seed", c.seed},
          {"divergence_threshold", c.divergence_threshold},
          {"max_grad_norm", c.max_grad_norm}, {"carry_memory", c.carry_memory}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"learning_rate", "batch_size", "unroll", "discount", "entropy_coef", "value_coef",
                             "total_steps", "seed", "divergence_threshold", "max_grad_norm", "carry_memory"},
                         "train");
  TrainConfig c;
  detail::read(j, "learning_rate", c.learning_rate, "train");
  detail::read(j, "batch_size", c.batch_size, "train");
  detail::read(j, "unroll", c.unroll, "train");
  detail::read(j, "discount", c.discount, "train");
  detail::read(j, "entropy_coef", c.entropy_coef, "train");
  detail::read(j, "value_coef", c.value_coef, "train");
  detail::read(j, "total_steps", c.total_steps, "train");
  detail::read(j, "seed", c.seed, "train");
  detail::read(j, "divergence_threshold", c.divergence_threshold, "train");
  detail::read(j, "max_grad_norm", c.max_grad_norm, "train");
  detail::read(j, "carry_memory", c.carry_memory, "train");
  return c;
}

inline nlohmann::json to_json(const EnvSpec& e) {
  if (e.kind == TaskKind::copy) {
    return {{"task", "copy"}, {"payload", e.copy.payload}, {"vocab", e.copy.vocab}};
  }
  return {{"task", "numpad"},
          {"n", e.numpad.n},
          {"length", e.numpad.sequence_length()},
          {"episode_limit", e.numpad.episode_limit},
          {"repress_clears", e.numpad.repress_clears}};
}

inline EnvSpec env_spec_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"task", "payload", "vocab", "n", "length", "episode_limit", "repress_clears"}, "env");
  EnvSpec e;
  std::string task = "copy";
  detail::read(j, "task", task, "env");
  if (task == "copy") {
    e.kind = TaskKind::copy;
    detail::read(j, "payload", e.copy.payload, "env");
    detail::read(j, "vocab", e.copy.vocab, "env");
    if (e.copy.payload < 1 || e.copy.vocab < 2) throw ConfigError("env: copy needs payload >= 1 and vocab >= 2");
  } else if (task == "numpad") {
    e.kind = TaskKind::numpad;
    detail::read(j, "n", e.numpad.n, "env");
    detail::read(j, "length", e.numpad.length, "env");
    detail::read(j, "episode_limit", e.numpad.episode_limit, "env");
    detail::read(j, "repress_clears", e.numpad.repress_clears, "env");
    if (e.numpad.n < 2 || e.numpad.sequence_length() > e.numpad.n * e.numpad.n || e.numpad.episode_limit == 0) {
      throw ConfigError("env: numpad needs n >= 2, length <= n*n and a positive episode_limit");
    }
  } else {
    throw ConfigError("env: unknown task '" + task + "' (expected copy or numpad)");
  }
  return e;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"stack", "train", "env", "seeds", "samples", "learning_rate_range",
                             "learning_rate_overrides", "output_dir", "log_every", "record_wall_clock"},
                         "config");
  ExperimentConfig c;
  if (j.contains("stack")) c.stack = stack_config_from_json(j["stack"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("env")) c.env = env_spec_from_json(j["env"]);
  detail::read(j, "seeds", c.seeds, "config");
  detail::read(j, "samples", c.samples, "config");
  if (j.contains("learning_rate_range")) {
    const auto& r = j["learning_rate_range"];
    detail::reject_unknown(r, {"low", "high"}, "learning_rate_range");
    LearningRateRange range;
    detail::read(r, "low", range.low, "learning_rate_range");
    detail::read(r, "high", range.high, "learning_rate_range");
    c.learning_rate_range = range;
  }
  if (j.contains("learning_rate_overrides")) {
    for (const auto& o : j["learning_rate_overrides"]) {
      detail::reject_unknown(o, {"run", "learning_rate"}, "learning_rate_overrides");
      if (!o.contains("run") || !o.contains("learning_rate")) {
        throw ConfigError("learning_rate_overrides: entries need run and learning_rate");
      }
      std::size_t run = 0;
      double lr = 0.0;
      detail::read(o, "run", run, "learning_rate_overrides");
      detail::read(o, "learning_rate", lr, "learning_rate_overrides");
      c.learning_rate_overrides[run] = lr;
    }
  }
  std::string out = c.output_dir.string();
  detail::read(j, "output_dir", out, "config");
  c.output_dir = out;
  detail::read(j, "log_every", c.log_every, "config");
  detail::read(j, "record_wall_clock", c.record_wall_clock, "config");
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

/// Parses config text. Syntax errors report line and column.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON config: ") + e.what());
  }
  return experiment_config_from_json(j);
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRecord {
  std::string run_id;
  std::size_t step = 0;
  double loss = 0.0;
  double mean_return = 0.0;
  double grad_norm = 0.0;
  bool diverged = false;
  double wall_clock = 0.0;
};

inline nlohmann::json to_json(const MetricsRecord& r) {
  // Non-finite values have no JSON form; they become null.
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"run_id", r.run_id},         {"step", r.step},           {"loss", num(r.loss)},
          {"mean_return", num(r.mean_return)}, {"grad_norm", num(r.grad_norm)}, {"diverged", r.diverged},
          {"wall_clock", r.wall_clock}};
}

inline MetricsRecord metrics_record_from_json(const nlohmann::json& j) {
  auto num = [&](const char* k) { return j.at(k).is_null() ? std::nan("") : j.at(k).get<double>(); };
  return {j.at("run_id").get<std::string>(), j.at("step").get<std::size_t>(), num("loss"), num("mean_return"),
          num("grad_norm"), j.at("diverged").get<bool>(), j.at("wall_clock").get<double>()};
}

inline std::vector<MetricsRecord> read_metrics(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read metrics " + file.string());
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      out.push_back(metrics_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(file.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running experiments

struct RunSpec {
  std::size_t index = 0;
  std::string run_id;
  std::uint64_t seed = 0;
  std::size_t sample = 0;
  double learning_rate = 0.0;
};

/// Sample k's learning rate is log-uniform in the range, drawn from a stream
/// keyed by (base seed, k), so all seeds of a sample share it.
inline std::vector<RunSpec> plan_runs(const ExperimentConfig& c) {
  std::vector<RunSpec> runs;
  for (std::size_t k = 0; k < c.samples; ++k) {
    double lr = c.train.learning_rate;
    if (c.learning_rate_range) {
      Rng rng = detail::derived_rng(c.train.seed, 1000 + k);
      std::uniform_real_distribution<double> u(std::log(c.learning_rate_range->low),
                                               std::log(c.learning_rate_range->high));
      lr = std::exp(u(rng));
    }
    for (std::size_t s = 0; s < c.seeds; ++s) {
      RunSpec r;
      r.index = runs.size();
      r.seed = c.train.seed + s;
      r.sample = k;
      r.learning_rate = lr;
      std::ostringstream id;
      id << "run" << std::setw(3) << std::setfill('0') << r.index << "-seed" << r.seed << "-sample" << k;
      r.run_id = id.str();
      runs.push_back(r);
    }
  }
  for (auto& r : runs) {
    if (auto it = c.learning_rate_overrides.find(r.index); it != c.learning_rate_overrides.end()) {
      r.learning_rate = it->second;
    }
  }
  return runs;
}

struct RunSummary {
  RunSpec spec;
  std::filesystem::path metrics_file;
  std::filesystem::path checkpoint_dir;
  std::size_t final_step = 0;
  double mean_return = 0.0;
  bool diverged = false;
};

inline std::filesystem::path metrics_dir(const std::filesystem::path& out) { return out / "metrics"; }

/// Creates the output layout and fails fast if it cannot be written.
inline void prepare_output_dir(const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(metrics_dir(out), ec);
  std::filesystem::create_directories(out / "checkpoints", ec);
  const auto probe = out / ".write-probe";
  std::ofstream f(probe);
  if (ec || !f) throw ConfigError("output directory " + out.string() + " is not writable");
  f.close();
  std::filesystem::remove(probe, ec);
}

inline RunSummary run_single(const ExperimentConfig& c, const RunSpec& spec) {
  TrainConfig train = c.train;
  train.seed = spec.seed;
  train.learning_rate = spec.learning_rate;
  RunSummary summary{spec, metrics_dir(c.output_dir) / (spec.run_id + ".jsonl"),
                     c.output_dir / "checkpoints" / spec.run_id};
  std::ofstream out(summary.metrics_file, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + summary.metrics_file.string());
  const auto start = std::chrono::steady_clock::now();
  std::size_t updates = 0;
  auto on_update = [&](const UpdateRecord& u) {
    ++updates;
    if (updates % c.log_every == 0 || u.diverged) {
      MetricsRecord rec{spec.run_id, u.step, u.loss, u.mean_return, u.grad_norm, u.diverged, 0.0};
      if (c.record_wall_clock) {
        rec.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      out << to_json(rec).dump() << '\n';
      out.flush();
    }
    summary.final_step = u.step;
    summary.mean_return = u.mean_return;
    summary.diverged = u.diverged;
    return true;
  };
  nlohmann::json meta = {{"run_id", spec.run_id},     {"seed", spec.seed},
                         {"learning_rate", spec.learning_rate}, {"stack", to_json(c.stack)},
                         {"env", to_json(c.env)},       {"train", to_json(train)}};
  std::vector<NamedTensor> params;
  if (c.env.kind == TaskKind::copy) {
    CopyRun run = train_copy(c.stack, c.env.copy, train, on_update);
    params = run.model.parameters();
  } else {
    NumpadRun run = train_numpad(c.stack, c.env.numpad, train, on_update);
    params = run.model.parameters();
  }
  meta["final_step"] = summary.final_step;
  meta["diverged"] = summary.diverged;
  save_checkpoint(summary.checkpoint_dir, meta, params);
  return summary;
}

/// Trains every (seed, sample) pair in sequence. A diverged run is recorded
/// and the remaining runs proceed.
inline std::vector<RunSummary> run_experiment(const ExperimentConfig& c) {
  c.validate();
  prepare_output_dir(c.output_dir);
  std::vector<RunSummary> out;
  for (const auto& spec : plan_runs(c)) out.push_back(run_single(c, spec));
  return out;
}

struct EvalResult {
  std::string run_id;
  TaskKind kind = TaskKind::copy;
  double score = 0.0;  // payload accuracy or mean episode return
};

/// Rebuilds the model described by a checkpoint manifest and scores it on
/// fresh data: `count` copy sequences or Numpad episodes.
inline EvalResult evaluate_checkpoint(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed) {
  const Checkpoint ck = read_checkpoint(dir);
  const StackConfig stack = stack_config_from_json(ck.meta.at("stack"));
  const EnvSpec env = env_spec_from_json(ck.meta.at("env"));
  const TrainConfig train = train_config_from_json(ck.meta.at("train"));
  EvalResult r{ck.meta.at("run_id").get<std::string>(), env.kind};
  Rng rng(0);
  if (env.kind == TaskKind::copy) {
    CopyModel m = CopyModel::init(stack, env.copy, rng);
    auto params = m.parameters();
    load_into(ck, params);
    r.score = evaluate_copy(m, count, seed, train.unroll, train.carry_memory);
  } else {
    AgentConfig agent;
    agent.observation_size = numpad_observation_size(env.numpad.n);
    AgentModel m = AgentModel::init(stack, agent, rng);
    auto params = m.parameters();
    load_into(ck, params);
    r.score = evaluate_numpad(m, env.numpad, count, seed);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ranking

struct RankRow {
  std::size_t checkpoint = 0;
  std::size_t rank = 0;
  std::string run_id;
  double score = 0.0;
};

/// At each checkpoint, a run scores the mean_return of its last record at or
/// before it, or 0 once it has diverged or before its first record. Runs are
/// ranked by descending score, ties by run id. Reads only.
inline std::vector<RankRow> rank_runs(const std::filesystem::path& dir, std::span<const std::size_t> checkpoints) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(dir)) {
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<std::pair<std::string, std::vector<MetricsRecord>>> runs;
  for (const auto& f : files) {
    auto records = read_metrics(f);
    if (records.empty()) continue;
    runs.emplace_back(records.front().run_id, std::move(records));
  }
  std::vector<RankRow> table;
  for (std::size_t cp : checkpoints) {
    std::vector<RankRow> rows;
    for (const auto& [id, records] : runs) {
      double score = 0.0;
      bool diverged = false;
      for (const auto& r : records) {
        if (r.step > cp) break;
        diverged = diverged || r.diverged;
        score = r.mean_return;
      }
      if (diverged || !std::isfinite(score)) score = 0.0;
      rows.push_back({cp, 0, id, score});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const RankRow& a, const RankRow& b) {
      return a.score != b.score ? a.score > b.score : a.run_id < b.run_id;
    });
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].rank = i + 1;
    table.insert(table.end(), rows.begin(), rows.end());
  }
  return table;
}

inline std::string rank_csv(const std::vector<RankRow>& rows) {
  std::ostringstream os;
  os << "checkpoint,rank,run_id,score\n";
  os << std::setprecision(17);
  for (const auto& r : rows) os << r.checkpoint << ',' << r.rank << ',' << r.run_id << ',' << r.score << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Parameter report

inline std::string param_report(const StackConfig& c) {
  const ParamBreakdown b = param_breakdown(c);
  std::ostringstream os;
  os << "variant    " << to_string(c.variant) << " (gate " << to_string(c.gate) << ")\n"
     << "layers     " << c.layers << ", width " << c.width << ", heads " << c.heads << " x " << c.head_dim
     << ", ff " << c.ff_width << "\n"
     << "attention  " << b.attention << "\n"
     << "mlp        " << b.mlp << "\n"
     << "gates      " << b.gates << "\n"
     << "norms      " << b.norms << "\n"
     << "total      " << b.total() << "\n";
  return os.str();
}

}  // namespace gtrxl
