#pragma once

// Supervised copy-task trainer and an n-step advantage actor-critic for
// Numpad, both driving a TransformerStack with segment memory.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "gtrxl/block.hpp"
#include "gtrxl/envs.hpp"

namespace gtrxl {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t unroll = 20;  // copy task: 0 runs the whole sequence as one segment
  double discount = 0.99;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  std::size_t total_steps = 1000;  // updates (copy) or environment steps (numpad)
  std::uint64_t seed = 0;
  double divergence_threshold = 1e4;
  double max_grad_norm = 0.0;  // 0 disables clipping
  bool carry_memory = true;    // false zeroes memory at every unroll boundary

  void validate() const {
    if (!(discount > 0.0 && discount <= 1.0)) throw ContractError("TrainConfig: discount must be in (0, 1]");
    if (batch_size == 0 || total_steps == 0) throw ContractError("TrainConfig: counts must be positive");
    if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning_rate must be positive");
    if (!(divergence_threshold > 0.0)) throw ContractError("TrainConfig: divergence_threshold must be positive");
  }
};

/// Latches on the first non-finite loss or loss above the threshold.
struct DivergenceMonitor {
  double threshold = 1e4;
  bool diverged = false;

  bool observe(double loss) {
    if (!std::isfinite(loss) || std::abs(loss) > threshold) diverged = true;
    return diverged;
  }
};

inline DivergenceMonitor divergence_monitor(std::span<const double> history, double threshold) {
  DivergenceMonitor m{threshold};
  for (double l : history) m.observe(l);
  return m;
}

/// Mean of the most recent `window` values pushed.
class WindowedMean {
 public:
  explicit WindowedMean(std::size_t window = 200) : window_(window) {}
  void push(double v) {
    values_.push_back(v);
    sum_ += v;
    if (values_.size() > window_) {
      sum_ -= values_.front();
      values_.pop_front();
    }
  }
  double mean() const { return values_.empty() ? 0.0 : sum_ / static_cast<double>(values_.size()); }
  std::size_t size() const { return values_.size(); }

 private:
  std::size_t window_;
  std::deque<double> values_;
  double sum_ = 0.0;
};

struct UpdateRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double mean_return = 0.0;
  double grad_norm = 0.0;
  bool diverged = false;
};

/// Return false to stop training early.
using UpdateCallback = std::function<bool(const UpdateRecord&)>;

namespace detail {

inline double finish_update(std::vector<NamedTensor>& named, OptimState& optim, double loss,
                            const TrainConfig& config, bool& diverged) {
  std::vector<Tensor> params;
  params.reserve(named.size());
  for (auto& nt : named) params.push_back(nt.tensor);
  const double norm = global_grad_norm(params);
  diverged = !std::isfinite(loss);
  if (!diverged) {
    if (config.max_grad_norm > 0.0) clip_grad_norm(params, config.max_grad_norm);
    diverged = adam_step(params, optim) == StepStatus::diverged;
  }
  zero_grads(params);
  return norm;
}

inline Rng derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Copy task

struct CopyModel {
  CopyTaskSpec task;
  Tensor embedding;  // [tokens x D]
  TransformerStack stack;
  Tensor head_w, head_b;  // [D x V], [V]

  static CopyModel init(const StackConfig& config, const CopyTaskSpec& task, Rng& rng) {
    CopyModel m;
    m.task = task;
    m.embedding = init_uniform({task.token_count(), config.width}, 1, rng);
    m.stack = TransformerStack::init(config, rng);
    m.head_w = Tensor::zeros({config.width, task.vocab}, true);  // uniform predictions at init
    m.head_b = Tensor::zeros({task.vocab}, true);
    return m;
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out{{"embedding", embedding}};
    for (auto& nt : stack.parameters()) out.push_back(nt);
    out.push_back({"head.w", head_w});
    out.push_back({"head.b", head_b});
    return out;
  }
};

/// Logits [length x V] for one sample, processed in segments of `unroll`
/// tokens (0: one segment) with memory carried or zeroed between them.
inline Tensor copy_logits(const CopyModel& m, const CopySample& s, std::size_t unroll, bool carry_memory) {
  const std::size_t len = s.input.size();
  const std::size_t seg = unroll == 0 ? len : unroll;
  MemoryState mem = m.stack.empty_memory();
  Tensor hidden;
  for (std::size_t begin = 0; begin < len; begin += seg) {
    const std::size_t count = std::min(seg, len - begin);
    std::span<const std::size_t> ids(s.input.data() + begin, count);
    StackOutput out = m.stack.forward(mem, embed(m.embedding, ids));
    mem = carry_memory ? out.memory : m.stack.empty_memory();
    hidden = hidden.defined() ? concat_rows(hidden, out.output) : out.output;
  }
  return linear(hidden, m.head_w, m.head_b);
}

struct CopyLoss {
  Tensor loss;            // mean cross-entropy over scored positions
  std::size_t correct = 0;
  std::size_t scored = 0;
  double accuracy() const { return scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0; }
};

inline CopyLoss copy_loss(const CopyModel& m, std::span<const CopySample> batch, std::size_t unroll,
                          bool carry_memory) {
  if (batch.empty()) throw ContractError("copy_loss: empty batch");
  const CopyTaskSpec& task = m.task;
  CopyLoss out;
  Tensor total;
  for (const auto& s : batch) {
    if (s.input.size() != task.length()) throw DimensionError("copy_loss: sample length mismatch");
    Tensor logits = slice_rows(copy_logits(m, s, unroll, carry_memory), task.first_scored(), task.payload);
    std::span<const std::size_t> targets(s.target.data() + task.first_scored(), task.payload);
    Tensor nll = sum(pick(log_softmax(logits), targets));
    total = total.defined() ? add(total, nll) : nll;
    for (std::size_t i = 0; i < task.payload; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < task.vocab; ++c)
        if (logits.at(i, c) > logits.at(i, best)) best = c;
      out.correct += best == targets[i];
    }
    out.scored += task.payload;
  }
  out.loss = scale(total, -1.0 / static_cast<double>(out.scored));
  return out;
}

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  double accuracy = 0.0;
  bool diverged = false;  // non-finite loss or gradient: no update was made
};

/// One Adam update on the batch; reports the pre-update loss.
inline StepResult supervised_step(CopyModel& m, OptimState& optim, std::span<const CopySample> batch,
                                  const TrainConfig& config) {
  CopyLoss l = copy_loss(m, batch, config.unroll, config.carry_memory);
  StepResult r;
  r.loss = l.loss.item();
  r.accuracy = l.accuracy();
  auto named = m.parameters();
  if (std::isfinite(r.loss)) backward(l.loss);
  r.grad_norm = detail::finish_update(named, optim, r.loss, config, r.diverged);
  return r;
}

inline std::vector<CopySample> copy_batch(const CopyTaskSpec& task, std::size_t n, Rng& rng) {
  std::vector<CopySample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(copy_sample(task, rng));
  return out;
}

struct CopyRun {
  CopyModel model;
  std::size_t steps = 0;
  double final_accuracy = 0.0;  // windowed mean over the last 200 updates
  bool diverged = false;
};

/// Trains on fresh batches for config.total_steps updates. mean_return in the
/// callback records is payload accuracy averaged over the last 200 updates.
inline CopyRun train_copy(const StackConfig& stack, const CopyTaskSpec& task, const TrainConfig& config,
                          const UpdateCallback& on_update = {}) {
  config.validate();
  Rng init_rng = detail::derived_rng(config.seed, 0);
  Rng data_rng = detail::derived_rng(config.seed, 1);
  CopyRun run{CopyModel::init(stack, task, init_rng)};
  OptimState optim;
  optim.learning_rate = config.learning_rate;
  DivergenceMonitor monitor{config.divergence_threshold};
  WindowedMean accuracy;
  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    auto batch = copy_batch(task, config.batch_size, data_rng);
    StepResult r = supervised_step(run.model, optim, batch, config);
    monitor.observe(r.loss);
    if (r.diverged) monitor.diverged = true;
    accuracy.push(r.accuracy);
    run.steps = step;
    run.final_accuracy = accuracy.mean();
    run.diverged = monitor.diverged;
    const UpdateRecord rec{step, r.loss, accuracy.mean(), r.grad_norm, monitor.diverged};
    const bool keep_going = !on_update || on_update(rec);
    if (monitor.diverged || !keep_going) break;
  }
  return run;
}

/// Payload accuracy on `samples` fresh sequences, without gradients.
inline double evaluate_copy(const CopyModel& m, std::size_t samples, std::uint64_t seed, std::size_t unroll = 0,
                            bool carry_memory = true) {
  NoGradGuard no_grad;
  Rng rng = detail::derived_rng(seed, 2);
  const auto batch = copy_batch(m.task, samples, rng);
  return copy_loss(m, batch, unroll, carry_memory).accuracy();
}

// ---------------------------------------------------------------------------
// Actor-critic agent

struct AgentConfig {
  std::size_t observation_size = numpad_observation_size(2);
  std::size_t actions = kNumpadActions;
  std::size_t head_width = 256;
};

struct AgentModel {
  AgentConfig agent;
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;  // 2-layer tanh encoder to width D
  TransformerStack stack;
  Tensor pi_w1, pi_b1, pi_w2, pi_b2;  // ReLU policy head
  Tensor v_w1, v_b1, v_w2, v_b2;      // ReLU value head

  static AgentModel init(const StackConfig& config, const AgentConfig& agent, Rng& rng) {
    const std::size_t D = config.width, O = agent.observation_size, K = agent.head_width;
    AgentModel m;
    m.agent = agent;
    m.enc_w1 = init_uniform({O, D}, O, rng);
    m.enc_b1 = Tensor::zeros({D}, true);
    m.enc_w2 = init_uniform({D, D}, D, rng);
    m.enc_b2 = Tensor::zeros({D}, true);
    m.stack = TransformerStack::init(config, rng);
    m.pi_w1 = init_uniform({D, K}, D, rng);
    m.pi_b1 = Tensor::zeros({K}, true);
    m.pi_w2 = Tensor::zeros({K, agent.actions}, true);  // uniform initial policy
    m.pi_b2 = Tensor::zeros({agent.actions}, true);
    m.v_w1 = init_uniform({D, K}, D, rng);
    m.v_b1 = Tensor::zeros({K}, true);
    m.v_w2 = init_uniform({K, 1}, K, rng);
    m.v_b2 = Tensor::zeros({1}, true);
    return m;
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out{{"encoder.w1", enc_w1}, {"encoder.b1", enc_b1},
                                 {"encoder.w2", enc_w2}, {"encoder.b2", enc_b2}};
    for (auto& nt : stack.parameters()) out.push_back(nt);
    for (auto [name, t] : {std::pair{"policy.w1", pi_w1}, {"policy.b1", pi_b1}, {"policy.w2", pi_w2},
                           {"policy.b2", pi_b2}, {"value.w1", v_w1}, {"value.b1", v_b1},
                           {"value.w2", v_w2}, {"value.b2", v_b2}}) {
      out.push_back({name, t});
    }
    return out;
  }
};

struct AgentOutput {
  Tensor logits;  // [T x A]
  Tensor values;  // [T x 1]
  MemoryState memory;
};

inline AgentOutput agent_forward(const AgentModel& m, const MemoryState& memory, const Tensor& observations,
                                 std::span<const std::size_t> episode_starts = {}) {
  Tensor e = tanh(linear(tanh(linear(observations, m.enc_w1, m.enc_b1)), m.enc_w2, m.enc_b2));
  StackOutput s = m.stack.forward(memory, e, episode_starts);
  AgentOutput out;
  out.logits = linear(relu(linear(s.output, m.pi_w1, m.pi_b1)), m.pi_w2, m.pi_b2);
  out.values = linear(relu(linear(s.output, m.v_w1, m.v_b1)), m.v_w2, m.v_b2);
  out.memory = std::move(s.memory);
  return out;
}

/// One environment instance with its own rng and agent memory.
struct EnvSlot {
  NumpadState state;
  MemoryState memory;
  Rng rng;
  std::vector<double> observation;
  double episode_return = 0.0;
};

inline std::vector<EnvSlot> make_env_slots(const NumpadConfig& env, const AgentModel& m, std::size_t count,
                                           std::uint64_t seed) {
  std::vector<EnvSlot> slots;
  for (std::size_t i = 0; i < count; ++i) {
    EnvSlot s{{}, m.stack.empty_memory(), detail::derived_rng(seed, 100 + i), {}, 0.0};
    s.state = numpad_reset(env, s.rng);
    s.observation = numpad_observation(s.state);
    slots.push_back(std::move(s));
  }
  return slots;
}

/// Time-major rollout: entry [t * envs + e].
struct RolloutBatch {
  std::size_t unroll = 0;
  std::size_t envs = 0;
  std::vector<std::vector<double>> observations;
  std::vector<std::size_t> actions;
  std::vector<double> rewards;
  std::vector<bool> dones;
  std::vector<double> values;
  std::vector<double> log_probs;
  std::vector<MemoryState> initial_memory;  // per env, before the first step
  std::vector<double> bootstrap;            // per env: value after the last step, 0 if done
  std::vector<NumpadState> initial_state;   // per env, for replay

  std::size_t index(std::size_t t, std::size_t e) const { return t * envs + e; }
};

inline std::size_t sample_categorical(std::span<const double> logits, Rng& rng, double* log_prob) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng) * z;
  std::size_t a = 0;
  for (; a + 1 < logits.size(); ++a) {
    r -= std::exp(logits[a] - mx);
    if (r < 0.0) break;
  }
  *log_prob = logits[a] - mx - std::log(z);
  return a;
}

/// Steps every environment `unroll` times under the policy. Memory carries
/// across unrolls and is zeroed when an episode ends. Finished episode
/// returns are appended to `finished`.
inline RolloutBatch collect_rollout(const AgentModel& m, std::vector<EnvSlot>& envs, std::size_t unroll,
                                    std::vector<double>* finished = nullptr) {
  if (unroll == 0) throw ContractError("collect_rollout: unroll must be positive");
  NoGradGuard no_grad;
  const std::size_t E = envs.size();
  RolloutBatch b;
  b.unroll = unroll;
  b.envs = E;
  b.observations.resize(unroll * E);
  b.actions.resize(unroll * E);
  b.rewards.resize(unroll * E);
  b.dones.resize(unroll * E);
  b.values.resize(unroll * E);
  b.log_probs.resize(unroll * E);
  b.bootstrap.resize(E);
  for (auto& env : envs) {
    b.initial_memory.push_back(env.memory);
    b.initial_state.push_back(env.state);
  }
  const std::size_t O = m.agent.observation_size;
  for (std::size_t t = 0; t < unroll; ++t) {
    for (std::size_t e = 0; e < E; ++e) {
      EnvSlot& env = envs[e];
      const std::size_t i = b.index(t, e);
      b.observations[i] = env.observation;
      AgentOutput out = agent_forward(m, env.memory, Tensor::from({1, O}, env.observation));
      b.values[i] = out.values.item();
      b.actions[i] = sample_categorical(out.logits.data(), env.rng, &b.log_probs[i]);
      const NumpadStep st = numpad_step(env.state, b.actions[i]);
      b.rewards[i] = st.reward;
      b.dones[i] = st.done;
      env.episode_return += st.reward;
      if (st.done) {
        if (finished) finished->push_back(env.episode_return);
        env.episode_return = 0.0;
        env.state = numpad_reset(env.state.config, env.rng);
        env.memory = m.stack.empty_memory();
      } else {
        env.memory = std::move(out.memory);
      }
      env.observation = numpad_observation(env.state);
    }
  }
  for (std::size_t e = 0; e < E; ++e) {
    if (b.dones[b.index(unroll - 1, e)]) continue;
    AgentOutput out = agent_forward(m, envs[e].memory, Tensor::from({1, O}, envs[e].observation));
    b.bootstrap[e] = out.values.item();
  }
  return b;
}

/// Discounted n-step returns: G_t = r_t + discount * (1 - done_t) * G_{t+1},
/// with G_T = bootstrap.
inline std::vector<double> n_step_returns(std::span<const double> rewards, const std::vector<bool>& dones,
                                          double bootstrap, double discount) {
  if (dones.size() != rewards.size()) throw DimensionError("n_step_returns: length mismatch");
  std::vector<double> out(rewards.size());
  double g = bootstrap;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    g = rewards[i] + (dones[i] ? 0.0 : discount * g);
    out[i] = g;
  }
  return out;
}

struct ActorCriticLoss {
  Tensor loss;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

/// Re-runs each environment's unroll from its initial memory and forms
/// mean(-A logpi) + c_v mean((G - V)^2) - c_e mean(H). The advantage A uses
/// the values recorded during the rollout, so it is a constant of the batch.
inline ActorCriticLoss actor_critic_loss(const AgentModel& m, const RolloutBatch& b, const TrainConfig& config) {
  const std::size_t T = b.unroll, E = b.envs, O = m.agent.observation_size;
  Tensor policy_total, value_total, entropy_total;
  auto accumulate = [](Tensor& acc, const Tensor& x) { acc = acc.defined() ? add(acc, x) : x; };
  for (std::size_t e = 0; e < E; ++e) {
    std::vector<double> obs;
    obs.reserve(T * O);
    std::vector<double> rewards(T);
    std::vector<bool> dones(T);
    std::vector<std::size_t> actions(T), starts;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t i = b.index(t, e);
      obs.insert(obs.end(), b.observations[i].begin(), b.observations[i].end());
      rewards[t] = b.rewards[i];
      dones[t] = b.dones[i];
      actions[t] = b.actions[i];
      if (t > 0 && dones[t - 1]) starts.push_back(t);
    }
    const std::vector<double> returns = n_step_returns(rewards, dones, b.bootstrap[e], config.discount);
    AgentOutput out = agent_forward(m, b.initial_memory[e], Tensor::from({T, O}, std::move(obs)), starts);
    Tensor logp = log_softmax(out.logits);
    Tensor values = reshape(out.values, {T});
    std::vector<double> advantage(T);
    for (std::size_t t = 0; t < T; ++t) advantage[t] = returns[t] - b.values[b.index(t, e)];
    accumulate(policy_total, sum(mul(pick(logp, actions), Tensor::from({T}, advantage))));
    accumulate(value_total, sum(square(sub(Tensor::from({T}, returns), values))));
    accumulate(entropy_total, sum(mul(exp(logp), logp)));  // -H summed
  }
  const double n = static_cast<double>(T * E);
  Tensor policy = scale(policy_total, -1.0 / n);
  Tensor value = scale(value_total, 1.0 / n);
  Tensor neg_entropy = scale(entropy_total, 1.0 / n);
  ActorCriticLoss l;
  l.policy_loss = policy.item();
  l.value_loss = value.item();
  l.entropy = -neg_entropy.item();
  l.loss = add(add(policy, scale(value, config.value_coef)), scale(neg_entropy, config.entropy_coef));
  return l;
}

struct ActorCriticResult {
  double loss = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
  bool diverged = false;
};

inline ActorCriticResult actor_critic_step(AgentModel& m, OptimState& optim, const RolloutBatch& b,
                                           const TrainConfig& config) {
  ActorCriticLoss l = actor_critic_loss(m, b, config);
  ActorCriticResult r{l.loss.item(), l.policy_loss, l.value_loss, l.entropy};
  auto named = m.parameters();
  if (std::isfinite(r.loss)) backward(l.loss);
  r.grad_norm = detail::finish_update(named, optim, r.loss, config, r.diverged);
  return r;
}

struct NumpadRun {
  AgentModel model;
  std::size_t env_steps = 0;
  double mean_return = 0.0;  // over the last 200 finished episodes
  std::size_t episodes = 0;
  bool diverged = false;
};

/// Runs batch_size environments in lockstep until total_steps environment
/// steps, an early stop from the callback, or divergence.
inline NumpadRun train_numpad(const StackConfig& stack, const NumpadConfig& env, const TrainConfig& config,
                              const UpdateCallback& on_update = {}) {
  config.validate();
  if (config.unroll == 0) throw ContractError("train_numpad: unroll must be positive");
  Rng init_rng = detail::derived_rng(config.seed, 0);
  AgentConfig agent;
  agent.observation_size = numpad_observation_size(env.n);
  NumpadRun run{AgentModel::init(stack, agent, init_rng)};
  auto envs = make_env_slots(env, run.model, config.batch_size, config.seed);
  OptimState optim;
  optim.learning_rate = config.learning_rate;
  DivergenceMonitor monitor{config.divergence_threshold};
  WindowedMean returns;
  std::vector<double> finished;
  while (run.env_steps < config.total_steps) {
    if (!config.carry_memory)
      for (auto& e : envs) e.memory = run.model.stack.empty_memory();
    finished.clear();
    RolloutBatch batch = collect_rollout(run.model, envs, config.unroll, &finished);
    for (double r : finished) returns.push(r);
    run.episodes += finished.size();
    run.env_steps += config.unroll * config.batch_size;
    ActorCriticResult r = actor_critic_step(run.model, optim, batch, config);
    monitor.observe(r.loss);
    if (r.diverged) monitor.diverged = true;
    run.mean_return = returns.mean();
    run.diverged = monitor.diverged;
    const UpdateRecord rec{run.env_steps, r.loss, returns.mean(), r.grad_norm, monitor.diverged};
    const bool keep_going = !on_update || on_update(rec);
    if (monitor.diverged || !keep_going) break;
  }
  return run;
}

/// Mean return of the sampled policy over the first `episodes` episodes
/// finished by a batch of parallel environments.
inline double evaluate_numpad(const AgentModel& m, const NumpadConfig& env, std::size_t episodes,
                              std::uint64_t seed, std::size_t parallel = 16) {
  if (episodes == 0) throw ContractError("evaluate_numpad: episodes must be positive");
  auto envs = make_env_slots(env, m, std::min(parallel, episodes), seed);
  std::vector<double> finished;
  while (finished.size() < episodes) collect_rollout(m, envs, env.episode_limit, &finished);
  double total = 0.0;
  for (std::size_t i = 0; i < episodes; ++i) total += finished[i];
  return total / static_cast<double>(episodes);
}

/// Mean episode return of the uniform-random policy.
inline double numpad_random_baseline(const NumpadConfig& env, std::size_t episodes, std::uint64_t seed) {
  Rng rng = detail::derived_rng(seed, 7);
  std::uniform_int_distribution<std::size_t> action(0, kNumpadActions - 1);
  double total = 0.0;
  for (std::size_t i = 0; i < episodes; ++i) {
    NumpadState s = numpad_reset(env, rng);
    while (!s.done()) total += numpad_step(s, action(rng)).reward;
  }
  return total / static_cast<double>(episodes);
}

}  // namespace gtrxl
