#pragma once

// Differentiable tensor operations. Shapes follow row-major conventions:
// sequences are [T x D], per-head tensors are [H x T x d].

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gtrxl/tensor.hpp"

namespace gtrxl {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      c[i * k + p] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary_map(const Tensor& x, Fwd fwd, Deriv deriv_from_xy) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv_from_xy](Node& self) {
    Node& src = *self.inputs[0];
    double* g = src.grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      g[i] += self.grad[i] * deriv_from_xy(src.data[i], self.data[i]);
    }
  });
}

inline std::atomic<std::uint64_t> fully_masked_rows{0};

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (double* ga = na.grad_buffer()) {
      detail::gemm_nt(self.grad.data(), nb.data.data(), ga, m, n, k);
    }
    if (double* gb = nb.grad_buffer()) {
      detail::gemm_tn(na.data.data(), self.grad.data(), gb, m, k, n);
    }
  });
}

/// alpha[h,t,m] = sum_d q[h,t,d] k[h,m,d]
inline Tensor batched_contract_qk(const Tensor& q, const Tensor& k) {
  detail::require_rank(q, 3, "batched_contract_qk");
  detail::require_rank(k, 3, "batched_contract_qk");
  if (q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw DimensionError("batched_contract_qk: head count or head dim differs: " +
                         to_string(q.shape()) + " vs " + to_string(k.shape()));
  }
  const std::size_t H = q.dim(0), T = q.dim(1), M = k.dim(1), d = q.dim(2);
  std::vector<double> out(H * T * M, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    detail::gemm_nt(q.data().data() + h * T * d, k.data().data() + h * M * d,
                    out.data() + h * T * M, T, d, M);
  }
  return detail::make_result({H, T, M}, std::move(out), {q, k}, [H, T, M, d](detail::Node& self) {
    auto& nq = *self.inputs[0];
    auto& nk = *self.inputs[1];
    double* gq = nq.grad_buffer();
    double* gk = nk.grad_buffer();
    for (std::size_t h = 0; h < H; ++h) {
      const double* ga = self.grad.data() + h * T * M;
      if (gq) detail::gemm_nn(ga, nk.data.data() + h * M * d, gq + h * T * d, T, M, d);
      if (gk) detail::gemm_tn(ga, nq.data.data() + h * T * d, gk + h * M * d, T, M, d);
    }
  });
}

/// y[h,t,d] = sum_m w[h,t,m] v[h,m,d]
inline Tensor batched_contract_av(const Tensor& w, const Tensor& v) {
  detail::require_rank(w, 3, "batched_contract_av");
  detail::require_rank(v, 3, "batched_contract_av");
  if (w.dim(0) != v.dim(0) || w.dim(2) != v.dim(1)) {
    throw DimensionError("batched_contract_av: head count or key length differs: " +
                         to_string(w.shape()) + " vs " + to_string(v.shape()));
  }
  const std::size_t H = w.dim(0), T = w.dim(1), M = w.dim(2), d = v.dim(2);
  std::vector<double> out(H * T * d, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    detail::gemm_nn(w.data().data() + h * T * M, v.data().data() + h * M * d,
                    out.data() + h * T * d, T, M, d);
  }
  return detail::make_result({H, T, d}, std::move(out), {w, v}, [H, T, M, d](detail::Node& self) {
    auto& nw = *self.inputs[0];
    auto& nv = *self.inputs[1];
    double* gw = nw.grad_buffer();
    double* gv = nv.grad_buffer();
    for (std::size_t h = 0; h < H; ++h) {
      const double* gy = self.grad.data() + h * T * d;
      if (gw) detail::gemm_nt(gy, nv.data.data() + h * M * d, gw + h * T * M, T, d, M);
      if (gv) detail::gemm_tn(nw.data.data() + h * T * M, gy, gv + h * M * d, T, M, d);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (double* g = in->grad_buffer()) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (double* g = self.inputs[0]->grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = self.inputs[1]->grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (double* g = na.grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * nb.data[i];
    }
    if (double* g = nb.grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * na.data[i];
    }
  });
}

/// c * x
inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_map(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

/// x + c
inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_map(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

/// 1 - x
inline Tensor one_minus(const Tensor& x) {
  return detail::unary_map(
      x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_map(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_map(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// x + b with b broadcast along the last axis. b holds either one value or
/// exactly x.shape().back() values.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t width = x.rank() ? x.shape().back() : 1;
  if (b.numel() != width && b.numel() != 1) {
    throw DimensionError("add_bias: bias " + to_string(b.shape()) +
                         " does not broadcast over " + to_string(x.shape()));
  }
  const std::size_t bn = b.numel();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[bn == 1 ? 0 : i % bn];
  return detail::make_result(x.shape(), std::move(out), {x, b}, [bn](detail::Node& self) {
    if (double* g = self.inputs[0]->grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = self.inputs[1]->grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[bn == 1 ? 0 : i % bn] += self.grad[i];
      }
    }
  });
}

/// x @ w + b, the per-timestep linear map.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result({1}, {s}, {x}, [](detail::Node& self) {
    if (double* g = self.inputs[0]->grad_buffer()) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += up;
    }
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Identity in the forward pass; blocks all gradient flow to x.
inline Tensor stop_gradient(const Tensor& x) { return x.clone(false); }

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (double* g = self.inputs[0]->grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { sigmoid, tanh, relu };

inline double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_map(
      x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_map(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_map(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor activation(Activation kind, const Tensor& x) {
  switch (kind) {
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::relu: return relu(x);
  }
  throw ContractError("unknown activation");
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Row-wise layer normalization of x[T x D] with affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t T = x.dim(0), D = x.dim(1);
  if (gain.numel() != D || bias.numel() != D) {
    throw DimensionError("layer_norm: width " + std::to_string(D) + " vs gain " +
                         to_string(gain.shape()) + ", bias " + to_string(bias.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  std::vector<double> out(T * D), xhat(T * D), inv_std(T);
  const auto in = x.data();
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = in.data() + t * D;
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(D);
    inv_std[t] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat[t * D + j] = (row[j] - mu) * inv_std[t];
      out[t * D + j] = xhat[t * D + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      {T, D}, std::move(out), {x, gain, bias},
      [T, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        double* gx = nx.grad_buffer();
        double* gg = ng.grad_buffer();
        double* gb = self.inputs[2]->grad_buffer();
        std::vector<double> dxhat(D);
        for (std::size_t t = 0; t < T; ++t) {
          const double* dy = self.grad.data() + t * D;
          const double* xh = xhat.data() + t * D;
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            if (gg) gg[j] += dy[j] * xh[j];
            if (gb) gb[j] += dy[j];
            dxhat[j] = dy[j] * ng.data[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xh[j];
          }
          if (!gx) continue;
          const double k = inv_std[t] / static_cast<double>(D);
          for (std::size_t j = 0; j < D; ++j) {
            gx[t * D + j] += k * (static_cast<double>(D) * dxhat[j] - sum_dxhat -
                                  xh[j] * sum_dxhat_xhat);
          }
        }
      });
}

/// Boolean [rows x cols] attention mask; true means the key may be attended.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool value)
      : rows(r), cols(c), allow(r * c, value ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return allow[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool value) { allow[r * cols + c] = value ? 1 : 0; }
  std::size_t allowed_in_row(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols; ++c) n += allow[r * cols + c];
    return n;
  }
};

/// Number of fully-masked rows seen by masked_softmax since process start.
inline std::uint64_t fully_masked_row_warnings() { return detail::fully_masked_rows.load(); }

/// Softmax over the last axis of logits[H x T x M], restricted to mask-allowed
/// keys. Masked entries are exactly 0. A row with no allowed key yields zeros
/// and bumps fully_masked_row_warnings().
inline Tensor masked_softmax(const Tensor& logits, const Mask& mask) {
  detail::require_rank(logits, 3, "masked_softmax");
  const std::size_t H = logits.dim(0), T = logits.dim(1), M = logits.dim(2);
  if (mask.rows != T || mask.cols != M) {
    throw DimensionError("masked_softmax: mask [" + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + "] vs logits " +
                         to_string(logits.shape()));
  }
  std::vector<double> out(H * T * M, 0.0);
  const auto in = logits.data();
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      const double* row = in.data() + (h * T + t) * M;
      double* dst = out.data() + (h * T + t) * M;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < M; ++m) {
        if (mask(t, m)) mx = std::max(mx, row[m]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) {
        detail::fully_masked_rows.fetch_add(1, std::memory_order_relaxed);
        continue;
      }
      double z = 0.0;
      for (std::size_t m = 0; m < M; ++m) {
        if (mask(t, m)) {
          dst[m] = std::exp(row[m] - mx);
          z += dst[m];
        }
      }
      for (std::size_t m = 0; m < M; ++m) dst[m] /= z;
    }
  }
  return detail::make_result(logits.shape(), std::move(out), {logits}, [M](detail::Node& self) {
    double* g = self.inputs[0]->grad_buffer();
    if (!g) return;
    const std::size_t rows = self.data.size() / M;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * M;
      const double* dy = self.grad.data() + r * M;
      double dot = 0.0;
      for (std::size_t m = 0; m < M; ++m) dot += y[m] * dy[m];
      for (std::size_t m = 0; m < M; ++m) g[r * M + m] += y[m] * (dy[m] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Layout ops

/// [m x D] ++ [n x D] -> [(m+n) x D]
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: widths differ " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  const std::size_t na = a.numel();
  std::vector<double> out;
  out.reserve(na + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return detail::make_result({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {a, b},
                             [na](detail::Node& self) {
                               if (double* g = self.inputs[0]->grad_buffer()) {
                                 for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
                               }
                               if (double* g = self.inputs[1]->grad_buffer()) {
                                 for (std::size_t i = na; i < self.grad.size(); ++i) {
                                   g[i - na] += self.grad[i];
                                 }
                               }
                             });
}

/// Rows [begin, begin+count) of x[R x D].
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_rows");
  if (begin + count > x.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + to_string(x.shape()));
  }
  const std::size_t D = x.dim(1);
  std::vector<double> out(x.data().begin() + begin * D, x.data().begin() + (begin + count) * D);
  return detail::make_result({count, D}, std::move(out), {x}, [begin, D](detail::Node& self) {
    if (double* g = self.inputs[0]->grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * D + i] += self.grad[i];
    }
  });
}

/// [T x (H*d)] -> [H x T x d]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  detail::require_rank(x, 2, "split_heads");
  if (heads == 0 || x.dim(1) % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(x.dim(1)) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t T = x.dim(0), d = x.dim(1) / heads, H = heads;
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) out[(h * T + t) * d + j] = in[t * H * d + h * d + j];
  return detail::make_result({H, T, d}, std::move(out), {x}, [H, T, d](detail::Node& self) {
    double* g = self.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) g[t * H * d + h * d + j] += self.grad[(h * T + t) * d + j];
  });
}

/// [H x T x d] -> [T x (H*d)]
inline Tensor merge_heads(const Tensor& x) {
  detail::require_rank(x, 3, "merge_heads");
  const std::size_t H = x.dim(0), T = x.dim(1), d = x.dim(2);
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) out[t * H * d + h * d + j] = in[(h * T + t) * d + j];
  return detail::make_result({T, H * d}, std::move(out), {x}, [H, T, d](detail::Node& self) {
    double* g = self.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) g[(h * T + t) * d + j] += self.grad[t * H * d + h * d + j];
  });
}

/// q[H x T x d] + u[H x d] broadcast over T.
inline Tensor add_head_bias(const Tensor& q, const Tensor& u) {
  detail::require_rank(q, 3, "add_head_bias");
  const std::size_t H = q.dim(0), T = q.dim(1), d = q.dim(2);
  if (u.numel() != H * d) {
    throw DimensionError("add_head_bias: bias " + to_string(u.shape()) + " vs heads " +
                         to_string(q.shape()));
  }
  std::vector<double> out(q.numel());
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) out[(h * T + t) * d + j] = q[(h * T + t) * d + j] + u[h * d + j];
  return detail::make_result(q.shape(), std::move(out), {q, u}, [H, T, d](detail::Node& self) {
    if (double* g = self.inputs[0]->grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = self.inputs[1]->grad_buffer()) {
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < d; ++j) g[h * d + j] += self.grad[(h * T + t) * d + j];
    }
  });
}

/// Re-indexes scores against relative distance into scores against key slot.
/// by_distance[h,t,r] holds the score of query t against distance r; the
/// result [H x T x (mem_len+T)] has out[h,t,m] = by_distance[h,t,mem_len+t-m]
/// for m <= mem_len+t (keys at or before the query) and 0 for future keys.
inline Tensor relative_gather(const Tensor& by_distance, std::size_t mem_len) {
  detail::require_rank(by_distance, 3, "relative_gather");
  const std::size_t H = by_distance.dim(0), T = by_distance.dim(1), R = by_distance.dim(2);
  const std::size_t N = mem_len + T;
  if (R < N) {
    throw DimensionError("relative_gather: " + std::to_string(R) + " distances for " +
                         std::to_string(N) + " key slots");
  }
  std::vector<double> out(H * T * N, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t m = 0; m <= mem_len + t; ++m)
        out[(h * T + t) * N + m] = by_distance[(h * T + t) * R + (mem_len + t - m)];
  return detail::make_result({H, T, N}, std::move(out), {by_distance},
                             [H, T, R, N, mem_len](detail::Node& self) {
                               double* g = self.inputs[0]->grad_buffer();
                               if (!g) return;
                               for (std::size_t h = 0; h < H; ++h)
                                 for (std::size_t t = 0; t < T; ++t)
                                   for (std::size_t m = 0; m <= mem_len + t; ++m)
                                     g[(h * T + t) * R + (mem_len + t - m)] +=
                                         self.grad[(h * T + t) * N + m];
                             });
}

/// Row lookup: table[V x D], ids -> [len(ids) x D].
inline Tensor embed(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_rank(table, 2, "embed");
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<double> out(ids.size() * D);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= V) throw DimensionError("embed: id " + std::to_string(ids[t]) + " >= vocab " + std::to_string(V));
    std::copy_n(table.data().begin() + ids[t] * D, D, out.begin() + t * D);
  }
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  return detail::make_result({ids.size(), D}, std::move(out), {table},
                             [rows = std::move(rows), D](detail::Node& self) {
                               double* g = self.inputs[0]->grad_buffer();
                               if (!g) return;
                               for (std::size_t t = 0; t < rows.size(); ++t)
                                 for (std::size_t j = 0; j < D; ++j) g[rows[t] * D + j] += self.grad[t * D + j];
                             });
}

// ---------------------------------------------------------------------------
// Losses

/// Row-wise log-softmax of x[N x C].
inline Tensor log_softmax(const Tensor& x) {
  detail::require_rank(x, 2, "log_softmax");
  const std::size_t N = x.dim(0), C = x.dim(1);
  std::vector<double> out(N * C);
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = x.data().data() + n * C;
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = row[c] - lz;
  }
  return detail::make_result({N, C}, std::move(out), {x}, [N, C](detail::Node& self) {
    double* g = self.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t n = 0; n < N; ++n) {
      double gs = 0.0;
      for (std::size_t c = 0; c < C; ++c) gs += self.grad[n * C + c];
      for (std::size_t c = 0; c < C; ++c) {
        g[n * C + c] += self.grad[n * C + c] - std::exp(self.data[n * C + c]) * gs;
      }
    }
  });
}

/// out[n] = x[n, index[n]]
inline Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  detail::require_rank(x, 2, "pick");
  const std::size_t N = x.dim(0), C = x.dim(1);
  if (index.size() != N) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " + to_string(x.shape()));
  }
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (index[n] >= C) throw DimensionError("pick: index out of range");
    out[n] = x[n * C + index[n]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return detail::make_result({N}, std::move(out), {x}, [idx = std::move(idx), C](detail::Node& self) {
    double* g = self.inputs[0]->grad_buffer();
    if (!g) return;
    for (std::size_t n = 0; n < idx.size(); ++n) g[n * C + idx[n]] += self.grad[n];
  });
}

}  // namespace gtrxl
