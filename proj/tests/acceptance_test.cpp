// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// if any gated criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "gtrxl/gradcheck_suite.hpp"
#include "gtrxl/harness.hpp"
#include "oracle_checks.hpp"

namespace fs = std::filesystem;
using namespace gtrxl;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("gtrxl_acceptance_" + name);
  fs::remove_all(dir);
  return dir;
}

double inf_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a.data(), b.data()); }

// 1. Relative attention against the term-by-term oracle, T=4, memory 3, H=2, d=3.
Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1);
  AttentionParams p = AttentionParams::init(6, 2, 3, rng);
  Tensor M = oracle::random_tensor({3, 6}, rng), E = oracle::random_tensor({4, 6}, rng);
  const Mask mask = causal_mask(4, 3);
  const Tensor phi = sinusoid_table(7, 6);
  const auto expected = oracle::relative_attention(oracle::to_matrix(M), oracle::to_matrix(E), p, mask, phi);
  const double err = oracle::max_abs_diff(expected, relative_attention_core(M, E, p, phi, mask));
  const double secs = seconds_since(t0);
  return {err < 1e-10 && secs < 1.0, fmt("max abs error %.2e (< 1e-10), %.3f s (< 1 s)", err, secs)};
}

// 2. Finite-difference suite.
Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_suite(0);
  const double secs = seconds_since(t0);
  std::size_t failed = 0;
  double worst_prim = 0, worst_comp = 0;
  std::string failures;
  for (const auto& c : cases) {
    const bool primitive = c.tolerance == kPrimitiveGradTolerance;
    (primitive ? worst_prim : worst_comp) = std::max(primitive ? worst_prim : worst_comp, c.error);
    if (!c.passed()) {
      ++failed;
      failures += " " + c.name;
    }
  }
  const bool stack_checked = std::any_of(cases.begin(), cases.end(),
                                         [](const GradCheckCase& c) { return c.name == "stack:gtrxl-gru-2x8"; });
  return {failed == 0 && stack_checked && secs < 120.0,
          fmt("%zu cases, %zu failed%s; worst primitive %.1e (< 1e-5), worst composite %.1e (< 1e-4); %.1f s (< 120 s)",
              cases.size(), failed, failures.c_str(), worst_prim, worst_comp, secs)};
}

// 3. Identity map: 4-layer GRU-gated stack.
Outcome identity_map() {
  auto deviation = [](double bias) {
    Rng rng(0);  // same weights and input for every bias
    auto stack = TransformerStack::init(StackConfig::make(Variant::gtrxl, 4, 2, 4, 3, GateKind::gru, bias), rng);
    Tensor E = oracle::random_tensor({6, 8}, rng);
    return inf_diff(stack.forward(stack.empty_memory(), E).output, E);
  };
  std::string detail = "deviation";
  bool monotone = true;
  double previous = 1e300, last = 0;
  for (double bias : {0.0, 2.0, 6.0, 20.0}) {
    last = deviation(bias);
    monotone = monotone && last <= previous;
    previous = last;
    detail += fmt(" b=%g:%.2e", bias, last);
  }
  return {monotone && last < 1e-5, detail + fmt("; b=20 < 1e-5 and non-increasing: %s", monotone ? "yes" : "no")};
}

// 4. Full 2T pass against two T-chunks, T = memory = 8.
Outcome memory_cache() {
  Rng rng(4);
  const std::size_t T = 8;
  double worst = 0;
  for (Variant v : {Variant::trxl, Variant::trxl_i, Variant::gtrxl}) {
    auto stack = TransformerStack::init(StackConfig::make(v, 2, 2, 4, T, GateKind::gru, 2.0), rng);
    Tensor E = oracle::random_tensor({2 * T, 8}, rng);
    StackOutput full = stack.forward(stack.empty_memory(), E);
    StackOutput first = stack.forward(stack.empty_memory(), slice_rows(E, 0, T));
    StackOutput second = stack.forward(first.memory, slice_rows(E, T, T));
    worst = std::max(worst, inf_diff(second.output, slice_rows(full.output, T, T)));
    for (std::size_t l = 0; l < 2; ++l) {
      worst = std::max(worst, inf_diff(second.layer_inputs[l], slice_rows(full.layer_inputs[l], T, T)));
    }
  }
  return {worst < 1e-8, fmt("worst layer difference %.2e over 3 variants (< 1e-8)", worst)};
}

// 5. Perturbing position t leaves outputs before t bitwise unchanged.
Outcome causality() {
  Rng rng(5);
  std::size_t violations = 0, checks = 0;
  for (Variant v : {Variant::trxl, Variant::trxl_i, Variant::gtrxl}) {
    auto stack = TransformerStack::init(StackConfig::make(v, 3, 2, 4, 4, GateKind::gru, 1.0), rng);
    MemoryState mem = stack.empty_memory();
    Tensor E = oracle::random_tensor({8, 8}, rng);
    const Tensor base = stack.forward(mem, E).output;
    for (std::size_t t = 0; t < 8; ++t) {
      Tensor bumped = E.clone();
      for (std::size_t j = 0; j < 8; ++j) bumped.mutable_data()[t * 8 + j] += 0.7;
      const Tensor out = stack.forward(mem, bumped).output;
      for (std::size_t i = 0; i < t * 8; ++i, ++checks) violations += base[i] != out[i];
    }
  }
  return {violations == 0 && checks > 0, fmt("%zu of %zu earlier outputs changed (exact equality, 3 variants)",
                                             violations, checks)};
}

// 6. Copy task B=10, V=8 with the frozen budget.
constexpr std::size_t kCopyBudget = 500;  // updates of 16 sequences
constexpr std::size_t kCopyEvalSamples = 256;

double copy_accuracy(Variant variant, std::size_t layers, std::uint64_t seed) {
  const StackConfig stack = StackConfig::make(variant, layers, 2, 16, 16, GateKind::gru, 2.0);
  TrainConfig train;
  train.learning_rate = 1e-3;
  train.batch_size = 16;
  train.unroll = 0;
  train.total_steps = kCopyBudget;
  train.seed = seed;
  const CopyRun run = train_copy(stack, CopyTaskSpec{10, 8}, train);
  if (run.diverged) return 0.0;
  return evaluate_copy(run.model, kCopyEvalSamples, 1000 + seed);
}

Outcome copy_stability() {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail = fmt("budget %zu updates; GTrXL(GRU, L=2, D=32, b=2) held-out accuracy", kCopyBudget);
  bool all = true;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const double acc = copy_accuracy(Variant::gtrxl, 2, seed);
    all = all && acc >= 0.95;
    detail += fmt(" %.3f", acc);
  }
  detail += " (>= 0.95 each); 8-layer TrXL recorded:";
  for (std::uint64_t seed = 0; seed < 3; ++seed) detail += fmt(" %.3f", copy_accuracy(Variant::trxl, 8, seed));
  return {all, detail + fmt("; %.0f s", seconds_since(t0))};
}

// 7. Numpad 2x2 actor-critic with a frozen budget inside the 2M-step cap.
constexpr std::size_t kNumpadStepCap = 2'000'000;
constexpr std::size_t kNumpadBudget = 300'000;
static_assert(kNumpadBudget <= kNumpadStepCap);

Outcome numpad_rl() {
  const auto t0 = std::chrono::steady_clock::now();
  const NumpadConfig env;  // 2x2, 500-step episodes
  const double baseline = numpad_random_baseline(env, 2000, 99);
  const double target = 2.0 * baseline;
  const StackConfig stack = StackConfig::make(Variant::gtrxl, 2, 2, 16, 16, GateKind::gru, 2.0);
  std::vector<double> finals;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainConfig train;
    train.learning_rate = 1e-3;
    train.batch_size = 16;
    train.unroll = 20;
    train.total_steps = kNumpadBudget;
    train.seed = seed;
    const NumpadRun run = train_numpad(stack, env, train);
    finals.push_back(run.diverged || run.episodes < 200 ? 0.0 : run.mean_return);
    detail += fmt(" %.1f", finals.back());
  }
  std::vector<double> sorted = finals;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[1];
  return {median > target, fmt("random baseline %.2f, target %.2f; last-200 mean after %zu steps per seed:",
                               baseline, target, kNumpadBudget) +
                               detail + fmt("; median %.2f; %.0f s", median, seconds_since(t0))};
}

// 8. Fault-injected learning rate 10 on the Numpad agent.
Outcome divergence_accounting() {
  ExperimentConfig c;
  c.stack = StackConfig::make(Variant::gtrxl, 2, 2, 4, 4, GateKind::gru, 2.0);
  c.env.kind = TaskKind::numpad;
  c.env.numpad.episode_limit = 100;
  c.train.batch_size = 4;
  c.train.unroll = 10;
  c.train.total_steps = 4000;
  c.seeds = 3;
  c.learning_rate_overrides[1] = 10.0;
  c.output_dir = scratch("divergence");
  const auto runs = run_experiment(c);
  const auto records = read_metrics(runs[1].metrics_file);
  std::size_t diverged_at = 0;
  bool latched = !records.empty();
  for (const auto& r : records) {
    if (r.diverged && diverged_at == 0) diverged_at = r.step;
    if (diverged_at != 0) latched = latched && r.diverged;
  }
  const bool others_clean = !runs[0].diverged && !runs[2].diverged;
  // Score 0 from divergence on; ranked last wherever the others score above 0.
  const std::size_t cps[] = {diverged_at, c.train.total_steps / 2, c.train.total_steps};
  bool zero_and_last = diverged_at != 0;
  const auto table = rank_runs(metrics_dir(c.output_dir), cps);
  for (std::size_t cp : cps) {
    bool others_positive = true;
    std::size_t rank = 0;
    for (const auto& row : table) {
      if (row.checkpoint != cp) continue;
      if (row.run_id == runs[1].spec.run_id) {
        zero_and_last = zero_and_last && row.score == 0.0;
        rank = row.rank;
      } else {
        others_positive = others_positive && row.score > 0.0;
      }
    }
    if (others_positive) zero_and_last = zero_and_last && rank == 3;
  }
  fs::remove_all(c.output_dir);
  return {runs[1].diverged && latched && others_clean && zero_and_last,
          fmt("lr=10 run diverged at step %zu, latched: %s, score 0 and ranked last after: %s, other runs clean: %s",
              diverged_at, latched ? "yes" : "no", zero_and_last ? "yes" : "no", others_clean ? "yes" : "no")};
}

// 9. Closed-form parameter counts against the registry.
Outcome parameter_accounting() {
  Rng rng(9);
  std::uniform_int_distribution<std::size_t> layers(0, 4), heads(1, 3), half_dim(1, 3), mem(0, 4), ff(1, 20);
  std::uniform_int_distribution<int> variant(0, 2), gate(1, 5);
  std::size_t mismatches = 0;
  for (int i = 0; i < 20; ++i) {
    StackConfig c = StackConfig::make(static_cast<Variant>(variant(rng)), layers(rng), heads(rng),
                                      2 * half_dim(rng), mem(rng), static_cast<GateKind>(gate(rng)), 1.0);
    c.ff_width = ff(rng);
    const auto stack = TransformerStack::init(c, rng);
    std::size_t registry = 0;
    for (const auto& nt : stack.parameters()) registry += nt.tensor.numel();
    mismatches += registry != count_params(c);
  }
  return {mismatches == 0, fmt("%zu of 20 random configs disagree", mismatches)};
}

// 10. Byte-identical metrics across two runs.
Outcome determinism() {
  auto run = [](const std::string& name) {
    ExperimentConfig c;
    c.stack = StackConfig::make(Variant::gtrxl, 2, 2, 4, 4, GateKind::gru, 2.0);
    c.env.kind = TaskKind::numpad;
    c.env.numpad.episode_limit = 40;
    c.train.batch_size = 4;
    c.train.unroll = 10;
    c.train.total_steps = 800;
    c.train.seed = 7;
    c.output_dir = scratch(name);
    const auto s = run_experiment(c);
    const std::string text = slurp(s[0].metrics_file);
    fs::remove_all(c.output_dir);
    return text;
  };
  const std::string a = run("det_a"), b = run("det_b");
  const auto lines = std::count(a.begin(), a.end(), '\n');
  return {!a.empty() && a == b, fmt("%ld JSONL lines, identical: %s", static_cast<long>(lines), a == b ? "yes" : "no")};
}

}  // namespace

/// With arguments, runs only the listed criterion numbers.
int main(int argc, char** argv) {
  std::set<std::string> only(argv + 1, argv + argc);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 oracle equivalence", oracle_equivalence},
      {"2 gradient suite", gradient_suite},
      {"3 identity map", identity_map},
      {"4 memory-cache equivalence", memory_cache},
      {"5 causality", causality},
      {"6 copy stability probe", copy_stability},
      {"7 numpad actor-critic", numpad_rl},
      {"8 divergence accounting", divergence_accounting},
      {"9 parameter accounting", parameter_accounting},
      {"10 determinism", determinism},
  };
  int failed = 0;
  std::size_t ran = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.count(name.substr(0, name.find(' ')))) continue;
    ++ran;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::printf("%s  %s: %s\n", o.passed ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, ran);
  return failed == 0 ? 0 : 1;
}
