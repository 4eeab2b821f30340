// Adam with bias correction, plus a global gradient-norm clip used by the
// trainer as a safety valve against the very large constraint weights.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dcgmm/autodiff.hpp"
#include "dcgmm/errors.hpp"

namespace dcgmm {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0; // t; incremented once per adam_step
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState init(const std::vector<ad::Var> &params, double lr = 1e-3) {
    AdamState s;
    s.lr = lr;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto &p : params) {
      s.m.emplace_back(p.value().shape());
      s.v.emplace_back(p.value().shape());
    }
    return s;
  }
};

// One Adam update over `params`, consuming the gradients accumulated by the
// last backward pass. Aborts without touching parameters if any gradient is
// non-finite.
inline void adam_step(AdamState &state, std::vector<ad::Var> &params) {
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " +
                     std::to_string(state.m.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor &g = params[pi].grad();
    if (g.numel() != params[pi].value().numel()) continue; // no grad: skip
    if (!g.all_finite()) {
      throw NumericalError("non-finite gradient in parameter " +
                               std::to_string(pi),
                           "adam_step");
    }
  }

  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step_count);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step_count);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor &x = params[pi].mutable_value();
    const Tensor &g = params[pi].grad();
    if (g.numel() != x.numel()) continue;
    Tensor &m = state.m[pi];
    Tensor &v = state.v[pi];
    for (std::size_t i = 0; i < x.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      x[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Scales all gradients so the global L2 norm is at most `max_norm`.
// Returns true when clipping fired.
inline bool clip_grad_norm(std::vector<ad::Var> &params, double max_norm) {
  double sq = 0.0;
  for (const auto &p : params) {
    const Tensor &g = p.grad();
    for (std::size_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return false;
  const double scale = max_norm / norm;
  for (auto &p : params) {
    ad::Var &vp = const_cast<ad::Var &>(p);
    if (vp.grad().numel() == 0) continue;
    Tensor &g = vp.node()->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= scale;
  }
  return true;
}

} // namespace dcgmm
