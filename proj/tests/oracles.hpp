#pragma once

// Loop-based reference implementations over plain doubles. They share no
// code with the tensor ops they check.

#include <cmath>
#include <random>
#include <vector>

#include "gtrxl/block.hpp"

namespace gtrxl::oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const Tensor& t) {
  const std::size_t rows = t.rank() == 1 ? 1 : t.dim(0);
  const std::size_t cols = t.shape().back();
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t[r * cols + c];
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b.empty() ? 0 : b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < c[i].size(); ++j)
      for (std::size_t p = 0; p < b.size(); ++p) c[i][j] += a[i][p] * b[p][j];
  return c;
}

inline Matrix layer_norm(const Matrix& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  Matrix y = x;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double D = static_cast<double>(x[t].size());
    double mu = 0;
    for (double v : x[t]) mu += v;
    mu /= D;
    double var = 0;
    for (double v : x[t]) var += (v - mu) * (v - mu);
    var /= D;
    for (std::size_t j = 0; j < x[t].size(); ++j) {
      y[t][j] = (x[t][j] - mu) / std::sqrt(var + eps) * gain[j] + bias[j];
    }
  }
  return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct AttentionTerms {
  // score terms indexed [h][t][m]
  std::vector<Matrix> content, content_position, content_bias, position_bias;
};

/// Relative attention Linear(softmax(score) V), each score term materialized
/// separately: Q.K, Q.R, u.K, v.R, with R indexed by distance mem + t - m.
inline Matrix relative_attention(const Matrix& memory, const Matrix& input,
                                 const AttentionParams& p, const Mask& mask,
                                 const Tensor& phi_table, AttentionTerms* terms = nullptr) {
  const std::size_t H = p.heads, d = p.head_dim(), D = p.width();
  const std::size_t mem = memory.size(), T = input.size(), N = mem + T;
  Matrix context = memory;
  context.insert(context.end(), input.begin(), input.end());
  const Matrix phi = to_matrix(phi_table);
  const Matrix Q = matmul(input, to_matrix(p.w_q));
  const Matrix K = matmul(context, to_matrix(p.w_k));
  const Matrix V = matmul(context, to_matrix(p.w_v));
  const Matrix R = matmul(phi, to_matrix(p.w_r));
  const Matrix u = to_matrix(p.u), v = to_matrix(p.v);
  AttentionTerms local;
  AttentionTerms& tm = terms ? *terms : local;
  auto blank = std::vector<Matrix>(H, Matrix(T, std::vector<double>(N, 0.0)));
  tm.content = tm.content_position = tm.content_bias = tm.position_bias = blank;
  Matrix merged(T, std::vector<double>(H * d, 0.0));
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> score(N, 0.0);
      for (std::size_t m = 0; m < N; ++m) {
        if (!mask(t, m)) continue;
        const std::size_t r = mem + t - m;
        for (std::size_t j = 0; j < d; ++j) {
          tm.content[h][t][m] += Q[t][h * d + j] * K[m][h * d + j];
          tm.content_position[h][t][m] += Q[t][h * d + j] * R[r][h * d + j];
          tm.content_bias[h][t][m] += u[h][j] * K[m][h * d + j];
          tm.position_bias[h][t][m] += v[h][j] * R[r][h * d + j];
        }
        score[m] = tm.content[h][t][m] + tm.content_position[h][t][m] +
                   tm.content_bias[h][t][m] + tm.position_bias[h][t][m];
      }
      double mx = -1e300;
      for (std::size_t m = 0; m < N; ++m) if (mask(t, m)) mx = std::max(mx, score[m]);
      double z = 0;
      std::vector<double> w(N, 0.0);
      for (std::size_t m = 0; m < N; ++m) if (mask(t, m)) z += (w[m] = std::exp(score[m] - mx));
      for (std::size_t m = 0; m < N; ++m) {
        for (std::size_t j = 0; j < d; ++j) merged[t][h * d + j] += w[m] / z * V[m][h * d + j];
      }
    }
  }
  Matrix out = matmul(merged, to_matrix(p.w_o));
  for (auto& row : out)
    for (std::size_t j = 0; j < D; ++j) row[j] += p.b_o[j];
  return out;
}

/// Plain causal MHA with residual and layer norm.
inline Matrix multi_head_attention(const Matrix& input, const AttentionParams& p,
                                   const LayerNormParams& ln) {
  const std::size_t H = p.heads, d = p.head_dim(), T = input.size();
  const Matrix Q = matmul(input, to_matrix(p.w_q));
  const Matrix K = matmul(input, to_matrix(p.w_k));
  const Matrix V = matmul(input, to_matrix(p.w_v));
  Matrix merged(T, std::vector<double>(H * d, 0.0));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> w(t + 1);
      double mx = -1e300, z = 0;
      for (std::size_t m = 0; m <= t; ++m) {
        w[m] = 0;
        for (std::size_t j = 0; j < d; ++j) w[m] += Q[t][h * d + j] * K[m][h * d + j];
        mx = std::max(mx, w[m]);
      }
      for (auto& x : w) z += (x = std::exp(x - mx));
      for (std::size_t m = 0; m <= t; ++m)
        for (std::size_t j = 0; j < d; ++j) merged[t][h * d + j] += w[m] / z * V[m][h * d + j];
    }
  Matrix out = matmul(merged, to_matrix(p.w_o));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < out[t].size(); ++j) out[t][j] += p.b_o[j] + input[t][j];
  return layer_norm(out, ln.gain, ln.bias);
}

/// Scalar-loop evaluation of each gate formula.
inline Matrix gate(GateKind kind, const Matrix& x, const Matrix& y, const GateParams& p) {
  const std::size_t T = x.size(), D = x[0].size();
  auto lin = [&](const Tensor& w, const Matrix& a, std::size_t t, std::size_t j) {
    double s = 0;
    for (std::size_t i = 0; i < D; ++i) s += a[t][i] * w[i * D + j];
    return s;
  };
  Matrix out(T, std::vector<double>(D));
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> r(D);
    if (kind == GateKind::gru) {
      for (std::size_t j = 0; j < D; ++j) r[j] = sigmoid(lin(p.w_r, y, t, j) + lin(p.u_r, x, t, j));
    }
    for (std::size_t j = 0; j < D; ++j) {
      const double xv = x[t][j], yv = y[t][j];
      switch (kind) {
        case GateKind::residual: out[t][j] = xv + yv; break;
        case GateKind::input: out[t][j] = sigmoid(lin(p.w_g, x, t, j)) * xv + yv; break;
        case GateKind::output: out[t][j] = xv + sigmoid(lin(p.w_g, x, t, j) - p.b_g[0]) * yv; break;
        case GateKind::highway: {
          const double c = sigmoid(lin(p.w_g, x, t, j) + p.b_g[0]);
          out[t][j] = c * xv + (1 - c) * yv;
          break;
        }
        case GateKind::sigtanh:
          out[t][j] = xv + sigmoid(lin(p.w_g, y, t, j) - p.b_g[0]) * std::tanh(lin(p.u_g, y, t, j));
          break;
        case GateKind::gru: {
          const double z = sigmoid(lin(p.w_z, y, t, j) + lin(p.u_z, x, t, j) - p.b_g[0]);
          double rx = 0;
          for (std::size_t i = 0; i < D; ++i) rx += r[i] * x[t][i] * p.u_g[i * D + j];
          const double hh = std::tanh(lin(p.w_g, y, t, j) + rx);
          out[t][j] = (1 - z) * xv + z * hh;
          break;
        }
      }
    }
  }
  return out;
}

inline double max_abs_diff(const Matrix& a, const Tensor& b) {
  double worst = 0;
  const std::size_t cols = b.shape().back();
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) worst = std::max(worst, std::abs(a[r][c] - b[r * cols + c]));
  return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace gtrxl::oracle
