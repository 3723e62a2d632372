#pragma once

// Two-stream gating layers g(x, y) combining the skip stream x with the
// submodule stream y.

#include <string>
#include <string_view>

#include "gtrxl/ops.hpp"
#include "gtrxl/optim.hpp"

namespace gtrxl {

enum class GateKind { residual, input, output, highway, sigtanh, gru };

inline std::string_view to_string(GateKind kind) {
  switch (kind) {
    case GateKind::residual: return "residual";
    case GateKind::input: return "input";
    case GateKind::output: return "output";
    case GateKind::highway: return "highway";
    case GateKind::sigtanh: return "sigtanh";
    case GateKind::gru: return "gru";
  }
  return "?";
}

inline GateKind parse_gate_kind(std::string_view name) {
  for (GateKind k : {GateKind::residual, GateKind::input, GateKind::output, GateKind::highway,
                     GateKind::sigtanh, GateKind::gru}) {
    if (to_string(k) == name) return k;
  }
  throw ContractError("unknown gate kind '" + std::string(name) + "'");
}

/// Gate weights. Fields a kind does not use stay undefined.
///   input:   w_g
///   output:  w_g, b_g
///   highway: w_g, b_g
///   sigtanh: w_g, u_g, b_g   (b_g plays the role of the unsubscripted b)
///   gru:     w_r, u_r, w_z, u_z, w_g, u_g, b_g
struct GateParams {
  Tensor w_g, u_g, b_g;
  Tensor w_r, u_r, w_z, u_z;

  template <typename F>
  void for_each(F&& f) const {
    const std::pair<const char*, const Tensor*> fields[] = {
        {"w_g", &w_g}, {"u_g", &u_g}, {"b_g", &b_g}, {"w_r", &w_r},
        {"u_r", &u_r}, {"w_z", &w_z}, {"u_z", &u_z}};
    for (const auto& [name, t] : fields) {
      if (t->defined()) f(name, *t);
    }
  }
};

namespace detail {

inline std::string gate_layout(const GateParams& p) {
  std::string s;
  p.for_each([&](const char* name, const Tensor&) {
    if (!s.empty()) s += ',';
    s += name;
  });
  return s;
}

inline const char* expected_gate_layout(GateKind kind) {
  switch (kind) {
    case GateKind::residual: return "";
    case GateKind::input: return "w_g";
    case GateKind::output:
    case GateKind::highway: return "w_g,b_g";
    case GateKind::sigtanh: return "w_g,u_g,b_g";
    case GateKind::gru: return "w_g,u_g,b_g,w_r,u_r,w_z,u_z";
  }
  return "";
}

}  // namespace detail

/// Number of trainable scalars in one gate of width D.
inline std::size_t gate_param_count(GateKind kind, std::size_t D) {
  switch (kind) {
    case GateKind::residual: return 0;
    case GateKind::input: return D * D;
    case GateKind::output:
    case GateKind::highway: return D * D + 1;
    case GateKind::sigtanh: return 2 * D * D + 1;
    case GateKind::gru: return 6 * D * D + 1;
  }
  return 0;
}

/// Random D x D weights (variance 1/D) and the identity-leaning scalar bias.
inline GateParams init_gate(GateKind kind, double bias_init, std::size_t D, Rng& rng) {
  GateParams p;
  auto weight = [&] { return init_uniform({D, D}, D, rng); };
  auto bias = [&] { return Tensor::full({1}, bias_init, true); };
  switch (kind) {
    case GateKind::residual: break;
    case GateKind::input: p.w_g = weight(); break;
    case GateKind::output:
    case GateKind::highway:
      p.w_g = weight();
      p.b_g = bias();
      break;
    case GateKind::sigtanh:
      p.w_g = weight();
      p.u_g = weight();
      p.b_g = bias();
      break;
    case GateKind::gru:
      p.w_r = weight();
      p.u_r = weight();
      p.w_z = weight();
      p.u_z = weight();
      p.w_g = weight();
      p.u_g = weight();
      p.b_g = bias();
      break;
  }
  return p;
}

inline Tensor apply_gate(GateKind kind, const Tensor& x, const Tensor& y, const GateParams& p) {
  if (x.shape() != y.shape()) {
    throw DimensionError("apply_gate: stream shapes differ " + to_string(x.shape()) + " vs " +
                         to_string(y.shape()));
  }
  if (detail::gate_layout(p) != detail::expected_gate_layout(kind)) {
    throw ContractError("apply_gate: " + std::string(to_string(kind)) + " gate expects {" +
                        detail::expected_gate_layout(kind) + "}, got {" +
                        detail::gate_layout(p) + "}");
  }
  switch (kind) {
    case GateKind::residual:
      return add(x, y);
    case GateKind::input:
      return add(mul(sigmoid(matmul(x, p.w_g)), x), y);
    case GateKind::output:
      return add(x, mul(sigmoid(add_bias(matmul(x, p.w_g), scale(p.b_g, -1.0))), y));
    case GateKind::highway: {
      Tensor carry = sigmoid(add_bias(matmul(x, p.w_g), p.b_g));
      return add(mul(carry, x), mul(one_minus(carry), y));
    }
    case GateKind::sigtanh:
      return add(x, mul(sigmoid(add_bias(matmul(y, p.w_g), scale(p.b_g, -1.0))),
                        tanh(matmul(y, p.u_g))));
    case GateKind::gru: {
      Tensor r = sigmoid(add(matmul(y, p.w_r), matmul(x, p.u_r)));
      Tensor z = sigmoid(add_bias(add(matmul(y, p.w_z), matmul(x, p.u_z)), scale(p.b_g, -1.0)));
      Tensor h = tanh(add(matmul(y, p.w_g), matmul(mul(r, x), p.u_g)));
      return add(mul(one_minus(z), x), mul(z, h));
    }
  }
  throw ContractError("apply_gate: unknown kind");
}

}  // namespace gtrxl
