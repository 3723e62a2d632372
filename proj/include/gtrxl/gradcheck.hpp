#pragma once

// Central finite differences, used as the independent oracle for backward().

#include <algorithm>
#include <cmath>
#include <functional>

#include "gtrxl/tensor.hpp"

namespace gtrxl {

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i. f sees a fresh
/// constant copy of x on every call.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  Tensor probe = x.clone();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe.mutable_data()[i] = orig + h;
    const double up = f(probe);
    probe.mutable_data()[i] = orig - h;
    const double down = f(probe);
    probe.mutable_data()[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(out));
}

/// Same as finite_diff_grad but perturbs `param` in place, for losses that
/// close over model parameters. Values are restored exactly afterwards.
inline Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor param,
                                       double h = 1e-5) {
  std::vector<double> out(param.numel());
  auto data = param.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double up = f();
    data[i] = orig - h;
    const double down = f();
    data[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return Tensor::from(param.shape(), std::move(out));
}

/// ||a - b||_inf / max(||a||_inf, ||b||_inf, 1e-12)
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: size mismatch");
  double diff = 0.0, scale = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  return diff;
}

/// Compares backward() against finite differences for each of `params`
/// under a scalar loss builder. Returns the worst relative error.
inline double grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                         double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    Tensor numeric = finite_diff_grad_inplace(
        [&] {
          NoGradGuard guard;
          return loss_fn().item();
        },
        p, h);
    worst = std::max(worst, relative_error(analytic, numeric.data()));
  }
  return worst;
}

}  // namespace gtrxl
