#pragma once

// Central finite-difference checks over every differentiable op, the gates,
// the block variants, a full 2-layer GRU-gated stack and the training losses.

#include <functional>
#include <string>
#include <vector>

#include "gtrxl/block.hpp"
#include "gtrxl/gradcheck.hpp"
#include "gtrxl/training.hpp"

namespace gtrxl {

inline constexpr double kPrimitiveGradTolerance = 1e-5;
inline constexpr double kCompositeGradTolerance = 1e-4;

struct GradCheckCase {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return error < tolerance; }
};

namespace detail {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// sum(f(...) * w) for a fixed random w, so every output element matters.
inline std::function<Tensor()> weighted(std::function<Tensor()> f, Rng& rng) {
  Tensor probe = f();
  Tensor w = uniform_tensor(probe.shape(), rng);
  w.set_requires_grad(false);
  return [f = std::move(f), w] { return sum(mul(f(), w)); };
}

}  // namespace detail

inline std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 0) {
  using detail::uniform_tensor;
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  auto check = [&](std::string name, std::function<Tensor()> f, std::vector<Tensor> params, double tol) {
    auto loss = detail::weighted(std::move(f), rng);
    out.push_back({std::move(name), grad_check(loss, params), tol});
  };
  const double prim = kPrimitiveGradTolerance, comp = kCompositeGradTolerance;

  Tensor a = uniform_tensor({3, 4}, rng), b = uniform_tensor({4, 2}, rng);
  Tensor c = uniform_tensor({3, 4}, rng), bias = uniform_tensor({4}, rng);
  check("matmul", [&] { return matmul(a, b); }, {a, b}, prim);
  check("add", [&] { return add(a, c); }, {a, c}, prim);
  check("sub", [&] { return sub(a, c); }, {a, c}, prim);
  check("mul", [&] { return mul(a, c); }, {a, c}, prim);
  check("scale", [&] { return scale(a, -1.7); }, {a}, prim);
  check("add_scalar", [&] { return add_scalar(a, 0.3); }, {a}, prim);
  check("one_minus", [&] { return one_minus(a); }, {a}, prim);
  check("square", [&] { return square(a); }, {a}, prim);
  check("exp", [&] { return exp(a); }, {a}, prim);
  check("add_bias", [&] { return add_bias(a, bias); }, {a, bias}, prim);
  check("sum", [&] { return reshape(sum(a), {1, 1}); }, {a}, prim);
  check("mean", [&] { return reshape(mean(a), {1, 1}); }, {a}, prim);
  check("reshape", [&] { return reshape(a, {2, 6}); }, {a}, prim);
  check("sigmoid", [&] { return sigmoid(a); }, {a}, prim);
  check("tanh", [&] { return tanh(a); }, {a}, prim);
  // Keep relu inputs away from the kink.
  Tensor away = uniform_tensor({3, 4}, rng, 0.2, 1.0);
  for (std::size_t i = 0; i < away.numel(); i += 2) away.mutable_data()[i] *= -1.0;
  check("relu", [&] { return relu(away); }, {away}, prim);
  Tensor gain = uniform_tensor({4}, rng, 0.5, 1.5), ln_bias = uniform_tensor({4}, rng);
  check("layer_norm", [&] { return layer_norm(a, gain, ln_bias); }, {a, gain, ln_bias}, prim);

  Tensor scores = uniform_tensor({2, 3, 5}, rng);
  const Mask mask = causal_mask(3, 2);
  check("masked_softmax", [&] { return masked_softmax(scores, mask); }, {scores}, prim);
  Tensor q = uniform_tensor({2, 3, 4}, rng), k = uniform_tensor({2, 5, 4}, rng);
  check("batched_contract_qk", [&] { return batched_contract_qk(q, k); }, {q, k}, prim);
  Tensor w = uniform_tensor({2, 3, 5}, rng), v = uniform_tensor({2, 5, 4}, rng);
  check("batched_contract_av", [&] { return batched_contract_av(w, v); }, {w, v}, prim);
  Tensor top = uniform_tensor({2, 4}, rng);
  check("concat_rows", [&] { return concat_rows(top, a); }, {top, a}, prim);
  check("slice_rows", [&] { return slice_rows(a, 1, 2); }, {a}, prim);
  Tensor wide = uniform_tensor({3, 6}, rng);
  check("split_heads", [&] { return split_heads(wide, 2); }, {wide}, prim);
  Tensor heads = uniform_tensor({2, 3, 3}, rng), u = uniform_tensor({2, 3}, rng);
  check("merge_heads", [&] { return merge_heads(heads); }, {heads}, prim);
  check("add_head_bias", [&] { return add_head_bias(heads, u); }, {heads, u}, prim);
  Tensor dist = uniform_tensor({2, 3, 6}, rng);
  check("relative_gather", [&] { return relative_gather(dist, 2); }, {dist}, prim);
  Tensor table = uniform_tensor({5, 3}, rng);
  const std::size_t ids[] = {4, 0, 4, 2};
  check("embed", [&] { return embed(table, ids); }, {table}, prim);
  check("log_softmax", [&] { return log_softmax(a); }, {a}, prim);
  const std::size_t picks[] = {3, 0, 1};
  check("pick", [&] { return reshape(pick(a, picks), {3, 1}); }, {a}, prim);

  // Attention, gates and blocks.
  {
    AttentionParams p = AttentionParams::init(6, 2, 3, rng);
    LayerNormParams ln = LayerNormParams::identity(6);
    Tensor M = uniform_tensor({2, 6}, rng), E = uniform_tensor({3, 6}, rng);
    M.set_requires_grad(false);
    const Tensor phi = sinusoid_table(5, 6);
    check("relative_multi_head_attention", [&] { return relative_multi_head_attention(M, E, p, phi, ln); },
          {E, p.w_q, p.w_k, p.w_v, p.w_r, p.u, p.v, p.w_o, p.b_o, ln.gain, ln.bias}, prim);
    check("multi_head_attention", [&] { return multi_head_attention(E, p, ln); },
          {E, p.w_q, p.w_k, p.w_v, p.w_o, p.b_o, ln.gain, ln.bias}, prim);
  }
  for (GateKind kind : {GateKind::input, GateKind::output, GateKind::highway, GateKind::sigtanh, GateKind::gru}) {
    GateParams p = init_gate(kind, 0.5, 4, rng);
    Tensor x = uniform_tensor({3, 4}, rng), y = uniform_tensor({3, 4}, rng);
    std::vector<Tensor> params{x, y};
    p.for_each([&](const char*, const Tensor& t) { params.push_back(t); });
    check("gate:" + std::string(to_string(kind)), [&, kind] { return apply_gate(kind, x, y, p); }, params, prim);
  }
  for (Variant variant : {Variant::trxl, Variant::trxl_i, Variant::gtrxl}) {
    StackConfig cfg = StackConfig::make(variant, 1, 2, 2, 2, GateKind::gru, 1.0);
    BlockParams blk = init_block(cfg, rng);
    Tensor M = uniform_tensor({2, 4}, rng), E = uniform_tensor({3, 4}, rng);
    M.set_requires_grad(false);
    std::vector<Tensor> params{E};
    for (auto& nt : named_parameters({blk})) params.push_back(nt.tensor);
    check("block:" + std::string(to_string(variant)), [&, variant] { return block_forward(variant, blk, M, E); },
          params, comp);
  }

  // Full 2-layer GRU-gated stack, D = 8, with a partly filled memory.
  {
    StackConfig cfg = StackConfig::make(Variant::gtrxl, 2, 2, 4, 2, GateKind::gru, 1.0);
    TransformerStack stack = TransformerStack::init(cfg, rng);
    MemoryState mem = stack.empty_memory();
    for (auto& layer : mem.layers) {
      layer = uniform_tensor({2, 8}, rng);
      layer.set_requires_grad(false);
    }
    mem.valid = 2;
    Tensor E = uniform_tensor({3, 8}, rng);
    std::vector<Tensor> params{E};
    for (auto& nt : stack.parameters()) params.push_back(nt.tensor);
    check("stack:gtrxl-gru-2x8", [&] { return stack.forward(mem, E).output; }, params, comp);
  }

  // Training losses.
  {
    CopyTaskSpec task{3, 4};
    CopyModel model = CopyModel::init(StackConfig::make(Variant::gtrxl, 1, 2, 2, 4, GateKind::gru, 1.0), task, rng);
    for (double& x : model.head_w.mutable_data()) x = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    auto batch = copy_batch(task, 2, rng);
    // One segment: memory carried between segments is gradient-isolated.
    std::vector<Tensor> params;
    for (auto& nt : model.parameters()) params.push_back(nt.tensor);
    out.push_back({"loss:copy", grad_check([&] { return copy_loss(model, batch, 0, true).loss; }, params), comp});
  }
  {
    NumpadConfig env;
    env.episode_limit = 4;
    AgentConfig agent;
    agent.head_width = 8;
    AgentModel model =
        AgentModel::init(StackConfig::make(Variant::gtrxl, 1, 2, 2, 2, GateKind::gru, 1.0), agent, rng);
    for (double& x : model.pi_w2.mutable_data()) x = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    auto envs = make_env_slots(env, model, 2, seed);
    collect_rollout(model, envs, 3);
    RolloutBatch batch = collect_rollout(model, envs, 3);
    TrainConfig config;
    std::vector<Tensor> params;
    for (auto& nt : model.parameters()) params.push_back(nt.tensor);
    out.push_back({"loss:actor-critic", grad_check([&] { return actor_critic_loss(model, batch, config).loss; }, params),
                   comp});
  }
  return out;
}

}  // namespace gtrxl
