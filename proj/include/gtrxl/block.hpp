#pragma once

// Transformer block variants and the L-layer stack with segment memory.
//
//   TrXL   : Y = LN(E + A(M, E));           E' = LN(Y + f(Y))
//   TrXL-I : Y = E + relu(A(LN M, LN E));    E' = Y + relu(f(LN Y))
//   GTrXL  : Y = g(E, relu(A(LN M, LN E)));  E' = g(Y, relu(f(LN Y)))

#include <string>
#include <string_view>
#include <vector>

#include "gtrxl/attention.hpp"
#include "gtrxl/gates.hpp"

namespace gtrxl {

enum class Variant { trxl, trxl_i, gtrxl };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::trxl: return "trxl";
    case Variant::trxl_i: return "trxl-i";
    case Variant::gtrxl: return "gtrxl";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::trxl, Variant::trxl_i, Variant::gtrxl}) {
    if (to_string(v) == name) return v;
  }
  throw ContractError("unknown variant '" + std::string(name) + "'");
}

struct StackConfig {
  Variant variant = Variant::gtrxl;
  std::size_t layers = 2;
  std::size_t width = 32;      // D
  std::size_t heads = 2;       // H
  std::size_t head_dim = 16;   // d, with D == H * d
  std::size_t ff_width = 128;  // MLP inner width, 4 * D by default
  std::size_t memory = 16;     // memory span
  GateKind gate = GateKind::gru;
  double gate_bias = 2.0;

  /// Defaults D_ff to 4 * D.
  static StackConfig make(Variant variant, std::size_t layers, std::size_t heads,
                          std::size_t head_dim, std::size_t memory, GateKind gate,
                          double gate_bias) {
    StackConfig c;
    c.variant = variant;
    c.layers = layers;
    c.heads = heads;
    c.head_dim = head_dim;
    c.width = heads * head_dim;
    c.ff_width = 4 * c.width;
    c.memory = memory;
    c.gate = variant == Variant::gtrxl ? gate : GateKind::residual;
    c.gate_bias = gate_bias;
    return c;
  }

  void validate() const {
    if (width != heads * head_dim) {
      throw ContractError("StackConfig: width " + std::to_string(width) + " != heads " +
                          std::to_string(heads) + " x head_dim " + std::to_string(head_dim));
    }
    if (heads == 0 || head_dim == 0 || ff_width == 0) {
      throw ContractError("StackConfig: heads, head_dim and ff_width must be positive");
    }
    if (width % 2 != 0) throw ContractError("StackConfig: width must be even");
    if ((variant == Variant::gtrxl) == (gate == GateKind::residual)) {
      throw ContractError("StackConfig: " + std::string(to_string(variant)) +
                          " is incompatible with gate '" + std::string(to_string(gate)) + "'");
    }
  }
};

struct MlpParams {
  Tensor w1, b1, w2, b2;
};

struct BlockParams {
  GateKind gate = GateKind::residual;
  AttentionParams attention;
  MlpParams mlp;
  LayerNormParams ln1, ln2;
  GateParams gate_mha, gate_mlp;
};

inline BlockParams init_block(const StackConfig& c, Rng& rng) {
  BlockParams b;
  b.gate = c.gate;
  b.attention = AttentionParams::init(c.width, c.heads, c.head_dim, rng);
  b.mlp.w1 = init_uniform({c.width, c.ff_width}, c.width, rng);
  b.mlp.b1 = Tensor::zeros({c.ff_width}, true);
  b.mlp.w2 = init_uniform({c.ff_width, c.width}, c.ff_width, rng);
  b.mlp.b2 = Tensor::zeros({c.width}, true);
  b.ln1 = LayerNormParams::identity(c.width);
  b.ln2 = LayerNormParams::identity(c.width);
  b.gate_mha = init_gate(c.gate, c.gate_bias, c.width, rng);
  b.gate_mlp = init_gate(c.gate, c.gate_bias, c.width, rng);
  return b;
}

/// Position-wise MLP; the output layer has no activation.
inline Tensor mlp_forward(const MlpParams& p, const Tensor& x) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

/// One block. M must be a constant [span x D] tensor; `mask` covers the
/// [M ; E] key slots and `phi` at least span + T relative distances.
inline Tensor block_forward(Variant variant, const BlockParams& p, const Tensor& M,
                            const Tensor& E, const Tensor& phi, const Mask& mask) {
  if (E.rank() != 2 || M.rank() != 2 || M.dim(1) != E.dim(1)) {
    throw DimensionError("block_forward: memory " + to_string(M.shape()) + " vs input " +
                         to_string(E.shape()));
  }
  const Tensor mem = stop_gradient(M);
  switch (variant) {
    case Variant::trxl: {
      Tensor y = apply(p.ln1, add(E, relative_attention_core(mem, E, p.attention, phi, mask)));
      return apply(p.ln2, add(y, mlp_forward(p.mlp, y)));
    }
    case Variant::trxl_i:
    case Variant::gtrxl: {
      // LN over [M ; E] is row-wise, so normalizing the two parts separately
      // with the same gain/bias is the same map.
      Tensor attn = relative_attention_core(apply(p.ln1, mem), apply(p.ln1, E), p.attention,
                                            phi, mask);
      const GateKind kind = variant == Variant::trxl_i ? GateKind::residual : p.gate;
      Tensor y = apply_gate(kind, E, relu(attn), p.gate_mha);
      Tensor ff = mlp_forward(p.mlp, apply(p.ln2, y));
      return apply_gate(kind, y, relu(ff), p.gate_mlp);
    }
  }
  throw ContractError("block_forward: unknown variant");
}

/// Convenience overload: fully valid memory, plain causal mask.
inline Tensor block_forward(Variant variant, const BlockParams& p, const Tensor& M,
                            const Tensor& E) {
  const std::size_t T = E.dim(0), span = M.dim(0);
  return block_forward(variant, p, M, E, sinusoid_table(span + T, E.dim(1)),
                       causal_mask(T, span));
}

struct StackOutput {
  Tensor output;
  MemoryState memory;
  std::vector<Tensor> layer_inputs;  // E^(l-1) entering each layer
};

/// Runs all layers over one segment and refreshes the memory with each
/// layer's input activations. `episode_starts` are segment positions where a
/// new episode begins; later queries see nothing before them.
inline StackOutput stack_forward(const StackConfig& config, const std::vector<BlockParams>& blocks,
                                 const MemoryState& memory, const Tensor& input,
                                 std::span<const std::size_t> episode_starts = {}) {
  if (blocks.size() != config.layers || memory.layers.size() != config.layers) {
    throw ContractError("stack_forward: config has " + std::to_string(config.layers) +
                        " layers, params " + std::to_string(blocks.size()) + ", memory " +
                        std::to_string(memory.layers.size()));
  }
  if (input.rank() != 2 || input.dim(1) != config.width) {
    throw DimensionError("stack_forward: input " + to_string(input.shape()) + " vs width " +
                         std::to_string(config.width));
  }
  const std::size_t T = input.dim(0);
  const std::size_t span = memory.span();
  StackOutput out;
  out.layer_inputs.reserve(config.layers);
  const Tensor phi = sinusoid_table(span + T, config.width);
  const Mask mask = segment_mask(T, span, memory.valid, episode_starts);
  Tensor e = input;
  for (std::size_t l = 0; l < config.layers; ++l) {
    out.layer_inputs.push_back(e);
    e = block_forward(config.variant, blocks[l], memory.layers[l], e, phi, mask);
  }
  out.output = e;
  out.memory = update_memory(memory, out.layer_inputs);
  if (!episode_starts.empty()) {
    // Memory only holds the current episode.
    std::size_t last = 0;
    for (std::size_t s : episode_starts) last = std::max(last, s);
    out.memory.valid = std::min(span, T - last);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter registry and accounting

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline void append_block_params(std::vector<NamedTensor>& out, const std::string& prefix,
                                const BlockParams& b) {
  const auto& a = b.attention;
  for (auto [name, t] : {std::pair{"attn.w_q", a.w_q}, {"attn.w_k", a.w_k},
                         {"attn.w_v", a.w_v}, {"attn.w_r", a.w_r}, {"attn.u", a.u},
                         {"attn.v", a.v}, {"attn.w_o", a.w_o}, {"attn.b_o", a.b_o},
                         {"mlp.w1", b.mlp.w1}, {"mlp.b1", b.mlp.b1}, {"mlp.w2", b.mlp.w2},
                         {"mlp.b2", b.mlp.b2}, {"ln1.gain", b.ln1.gain}, {"ln1.bias", b.ln1.bias},
                         {"ln2.gain", b.ln2.gain}, {"ln2.bias", b.ln2.bias}}) {
    out.push_back({prefix + name, t});
  }
  b.gate_mha.for_each([&](const char* name, const Tensor& t) {
    out.push_back({prefix + "gate_mha." + name, t});
  });
  b.gate_mlp.for_each([&](const char* name, const Tensor& t) {
    out.push_back({prefix + "gate_mlp." + name, t});
  });
}

inline std::vector<NamedTensor> named_parameters(const std::vector<BlockParams>& blocks) {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    append_block_params(out, "layers." + std::to_string(l) + ".", blocks[l]);
  }
  return out;
}

struct ParamBreakdown {
  std::size_t attention = 0;
  std::size_t mlp = 0;
  std::size_t gates = 0;
  std::size_t norms = 0;
  std::size_t total() const { return attention + mlp + gates + norms; }
};

/// Closed-form trainable scalar counts for the stack.
inline ParamBreakdown param_breakdown(const StackConfig& c) {
  const std::size_t D = c.width, hd = c.heads * c.head_dim, F = c.ff_width, L = c.layers;
  ParamBreakdown b;
  b.attention = L * (4 * D * hd + 2 * hd + hd * D + D);
  b.mlp = L * (D * F + F + F * D + D);
  b.norms = L * 4 * D;
  b.gates = L * 2 * gate_param_count(c.gate, D);
  return b;
}

inline std::size_t count_params(const StackConfig& c) { return param_breakdown(c).total(); }

/// A stack's configuration and weights.
struct TransformerStack {
  StackConfig config;
  std::vector<BlockParams> blocks;

  static TransformerStack init(const StackConfig& config, Rng& rng) {
    config.validate();
    TransformerStack s{config, {}};
    for (std::size_t l = 0; l < config.layers; ++l) s.blocks.push_back(init_block(config, rng));
    return s;
  }

  MemoryState empty_memory() const {
    return MemoryState::zeros(config.layers, config.memory, config.width);
  }

  StackOutput forward(const MemoryState& memory, const Tensor& input,
                      std::span<const std::size_t> episode_starts = {}) const {
    return stack_forward(config, blocks, memory, input, episode_starts);
  }

  std::vector<NamedTensor> parameters() const { return named_parameters(blocks); }
};

}  // namespace gtrxl
