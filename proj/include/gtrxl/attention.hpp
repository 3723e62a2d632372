#pragma once

// Multi-head attention and relative multi-head attention over a
// gradient-isolated segment memory.

#include <cmath>
#include <optional>
#include <vector>

#include "gtrxl/ops.hpp"
#include "gtrxl/optim.hpp"

namespace gtrxl {

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams identity(std::size_t width) {
    return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
  }
};

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor apply(const LayerNormParams& ln, const Tensor& x) {
  return layer_norm(x, ln.gain, ln.bias, kLayerNormEps);
}

/// Projections for one attention submodule. Q/K/V/R map D -> H*d without
/// bias; the output map (H*d) -> D carries a bias.
struct AttentionParams {
  std::size_t heads = 1;
  Tensor w_q, w_k, w_v, w_r;
  Tensor u, v;  // [H x d] content and position biases
  Tensor w_o, b_o;

  std::size_t width() const { return w_q.dim(0); }
  std::size_t head_dim() const { return w_q.dim(1) / heads; }

  static AttentionParams init(std::size_t width, std::size_t heads, std::size_t head_dim,
                              Rng& rng) {
    const std::size_t hd = heads * head_dim;
    AttentionParams p;
    p.heads = heads;
    p.w_q = init_uniform({width, hd}, width, rng);
    p.w_k = init_uniform({width, hd}, width, rng);
    p.w_v = init_uniform({width, hd}, width, rng);
    p.w_r = init_uniform({width, hd}, width, rng);
    p.u = init_uniform({heads, head_dim}, head_dim, rng);
    p.v = init_uniform({heads, head_dim}, head_dim, rng);
    p.w_o = init_uniform({hd, width}, hd, rng);
    p.b_o = Tensor::zeros({width}, true);
    return p;
  }
};

/// Fixed sinusoid encodings indexed by relative distance. Row p holds
/// sin(p / 10000^(2i/D)) in channel 2i and the matching cos in channel 2i+1.
inline Tensor sinusoid_table(std::size_t n_positions, std::size_t width) {
  if (width % 2 != 0) {
    throw ContractError("sinusoid_table: width must be even, got " + std::to_string(width));
  }
  std::vector<double> data(n_positions * width);
  for (std::size_t p = 0; p < n_positions; ++p) {
    for (std::size_t i = 0; i < width / 2; ++i) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(width));
      data[p * width + 2 * i] = std::sin(static_cast<double>(p) * freq);
      data[p * width + 2 * i + 1] = std::cos(static_cast<double>(p) * freq);
    }
  }
  return Tensor::from({n_positions, width}, std::move(data));
}

/// Key-slot visibility for T queries over [memory (mem_len) | segment (T)].
/// Row t sees all memory slots and segment positions <= t.
inline Mask causal_mask(std::size_t T, std::size_t mem_len) {
  Mask mask(T, mem_len + T, false);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t m = 0; m <= mem_len + t; ++m) mask.set(t, m, true);
  return mask;
}

/// causal_mask restricted further: only the last `mem_valid` memory slots are
/// real, and a query at or after an episode start sees nothing before it.
/// `episode_starts` lists segment positions where a new episode begins.
inline Mask segment_mask(std::size_t T, std::size_t mem_len, std::size_t mem_valid,
                         std::span<const std::size_t> episode_starts = {}) {
  Mask mask = causal_mask(T, mem_len);
  for (std::size_t t = 0; t < T; ++t) {
    std::optional<std::size_t> start;
    for (std::size_t s : episode_starts) {
      if (s <= t && (!start || s > *start)) start = s;
    }
    const std::size_t first_visible = start ? mem_len + *start : mem_len - std::min(mem_valid, mem_len);
    for (std::size_t m = 0; m < first_visible; ++m) mask.set(t, m, false);
  }
  return mask;
}

/// MultiHeadAttention(E): projections, causal softmax over QK, value
/// contraction, output linear, residual and layer norm.
inline Tensor multi_head_attention(const Tensor& E, const AttentionParams& p,
                                   const LayerNormParams& ln) {
  if (E.rank() != 2 || E.dim(1) != p.width()) {
    throw DimensionError("multi_head_attention: input " + to_string(E.shape()) +
                         " vs width " + std::to_string(p.width()));
  }
  const std::size_t T = E.dim(0);
  Tensor q = split_heads(matmul(E, p.w_q), p.heads);
  Tensor k = split_heads(matmul(E, p.w_k), p.heads);
  Tensor v = split_heads(matmul(E, p.w_v), p.heads);
  Tensor weights = masked_softmax(batched_contract_qk(q, k), causal_mask(T, 0));
  Tensor y = linear(merge_heads(batched_contract_av(weights, v)), p.w_o, p.b_o);
  return apply(ln, add(E, y));
}

/// Linear(RelativeAttention(M, E)) without residual or normalization; the
/// block variant decides where those go. Callers pass a constant M (memory
/// tensors never carry gradient); normalization applied to it upstream still
/// receives gradient through the memory rows.
/// The score for query t against key slot m at relative distance r = mem+t-m
/// is (Q_t + u).K_m + (Q_t + v).R_r with R = Phi W_R.
inline Tensor relative_attention_core(const Tensor& M, const Tensor& E,
                                      const AttentionParams& p, const Tensor& phi,
                                      const Mask& mask) {
  if (E.rank() != 2 || E.dim(1) != p.width()) {
    throw DimensionError("relative_attention: input " + to_string(E.shape()) +
                         " vs width " + std::to_string(p.width()));
  }
  if (M.rank() != 2 || M.dim(1) != E.dim(1)) {
    throw DimensionError("relative_attention: memory " + to_string(M.shape()) +
                         " vs input " + to_string(E.shape()));
  }
  const std::size_t mem = M.dim(0), T = E.dim(0), N = mem + T;
  if (phi.rank() != 2 || phi.dim(0) < N || phi.dim(1) != p.width()) {
    throw DimensionError("relative_attention: encoding table " + to_string(phi.shape()) +
                         " too small for " + std::to_string(N) + " positions");
  }
  Tensor context = concat_rows(M, E);
  Tensor q = split_heads(matmul(E, p.w_q), p.heads);
  Tensor k = split_heads(matmul(context, p.w_k), p.heads);
  Tensor v = split_heads(matmul(context, p.w_v), p.heads);
  Tensor r = split_heads(matmul(phi.dim(0) == N ? phi : slice_rows(phi, 0, N), p.w_r), p.heads);
  Tensor content = batched_contract_qk(add_head_bias(q, p.u), k);
  Tensor position = relative_gather(batched_contract_qk(add_head_bias(q, p.v), r), mem);
  Tensor weights = masked_softmax(add(content, position), mask);
  return linear(merge_heads(batched_contract_av(weights, v)), p.w_o, p.b_o);
}

/// RelativeMultiHeadAttention(M, E) with post-attention residual and layer
/// norm, using the plain causal mask over a fully valid memory.
inline Tensor relative_multi_head_attention(const Tensor& M, const Tensor& E,
                                            const AttentionParams& p, const Tensor& phi,
                                            const LayerNormParams& ln) {
  const Tensor y =
      relative_attention_core(stop_gradient(M), E, p, phi, causal_mask(E.dim(0), M.dim(0)));
  return apply(ln, add(E, y));
}

/// Per-layer cached inputs. Each layer holds span x D rows, of which only the
/// last `valid` are real history; the rest are zeros and masked out.
struct MemoryState {
  std::vector<Tensor> layers;
  std::size_t valid = 0;

  static MemoryState zeros(std::size_t n_layers, std::size_t span, std::size_t width) {
    MemoryState m;
    for (std::size_t l = 0; l < n_layers; ++l) m.layers.push_back(Tensor::zeros({span, width}));
    return m;
  }

  std::size_t span() const { return layers.empty() ? 0 : layers.front().dim(0); }
};

/// New memory = last span rows of [old memory ; layer inputs], gradient-isolated.
inline MemoryState update_memory(const MemoryState& old,
                                 std::span<const Tensor> segment_inputs) {
  if (segment_inputs.size() != old.layers.size()) {
    throw ContractError("update_memory: " + std::to_string(segment_inputs.size()) +
                        " segment inputs for " + std::to_string(old.layers.size()) + " layers");
  }
  MemoryState next;
  const std::size_t span = old.span();
  std::size_t T = 0;
  for (std::size_t l = 0; l < old.layers.size(); ++l) {
    const Tensor& mem = old.layers[l];
    const Tensor& seg = segment_inputs[l];
    if (seg.rank() != 2 || seg.dim(1) != mem.dim(1)) {
      throw DimensionError("update_memory: segment " + to_string(seg.shape()) +
                           " vs memory " + to_string(mem.shape()));
    }
    T = seg.dim(0);
    const std::size_t width = mem.dim(1);
    std::vector<double> rows(span * width);
    // Row i of the new memory is row (i + T) of [mem ; seg].
    for (std::size_t i = 0; i < span; ++i) {
      const std::size_t src = i + T;
      const double* from = src < span ? mem.data().data() + src * width
                                      : seg.data().data() + (src - span) * width;
      std::copy_n(from, width, rows.begin() + i * width);
    }
    next.layers.push_back(Tensor::from({span, width}, std::move(rows)));
  }
  next.valid = std::min(span, old.valid + T);
  return next;
}

}  // namespace gtrxl
