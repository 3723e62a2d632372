#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "gtrxl/tensor.hpp"

namespace gtrxl {

using Rng = std::mt19937_64;

/// Uniform init on [-a, a] with a = sqrt(3 / fan_in), i.e. variance 1/fan_in.
inline Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double a = std::sqrt(3.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(data), true);
}

struct OptimState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

enum class StepStatus { updated, diverged };

inline bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

/// One bias-corrected Adam update over params using their accumulated grads
/// (absent grad counts as zero). Any non-finite gradient aborts the step and
/// leaves params and state untouched.
inline StepStatus adam_step(std::span<Tensor> params, OptimState& state) {
  for (const auto& p : params) {
    if (p.has_grad() && !all_finite(p.grad())) return StepStatus::diverged;
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " +
                        std::to_string(state.first_moment.size()) + " params, got " +
                        std::to_string(params.size()));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != p.numel()) throw DimensionError("adam_step: moment/param size mismatch");
    auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= state.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
    }
  }
  return StepStatus::updated;
}

inline double global_grad_norm(std::span<const Tensor> params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) s += g * g;
  }
  return std::sqrt(s);
}

/// Rescales all grads so their global L2 norm is at most max_norm.
inline void clip_grad_norm(std::span<Tensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm) || !std::isfinite(norm)) return;
  const double k = max_norm / norm;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto& g = p.node()->grad;
    for (double& v : g) v *= k;
  }
}

inline void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace gtrxl
