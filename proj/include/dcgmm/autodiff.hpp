// Reverse-mode automatic differentiation over dense f64 tensors.
//
// The graph is dynamic: every op allocates a fresh node, leaves (parameters)
// persist across batches. backward() visits each node exactly once in
// reverse topological order and accumulates (+=) into parent gradients, so
// shared subexpressions are handled correctly. Inside a NoGradGuard ops
// compute values only and allocate no graph.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dcgmm/errors.hpp"
#include "dcgmm/tensor.hpp"

namespace dcgmm::ad {

class Node;
using NodePtr = std::shared_ptr<Node>;

class Node {
public:
  Tensor value;
  std::vector<NodePtr> parents;
  std::function<void(Node &)> backward_fn;
  bool requires_grad = false;

  Tensor &ensure_grad() {
    if (grad_.numel() != value.numel()) grad_ = Tensor(value.shape());
    return grad_;
  }

  [[nodiscard]] const Tensor &grad() const { return grad_; }

  void zero_grad() {
    if (grad_.numel() != 0) std::fill(grad_.vec().begin(), grad_.vec().end(), 0.0);
  }

private:
  Tensor grad_;
};

inline bool &grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_enabled_flag(); }

// Scoped switch into value-only evaluation.
class NoGradGuard {
public:
  NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool prev_;
};

// Value handle over a graph node.
class Var {
public:
  Var() = default;

  static Var param(Tensor v) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(v);
    out.node_->requires_grad = true;
    return out;
  }

  static Var constant(Tensor v) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(v);
    return out;
  }

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Tensor &value() const { return node_->value; }
  Tensor &mutable_value() { return node_->value; }
  [[nodiscard]] const Tensor &grad() const { return node_->grad(); }
  [[nodiscard]] bool requires_grad() const {
    return node_ && node_->requires_grad;
  }
  void zero_grad() { node_->zero_grad(); }
  [[nodiscard]] const NodePtr &node() const { return node_; }

  explicit Var(NodePtr n) : node_(std::move(n)) {}

private:
  NodePtr node_;
};

// Builds a result node; drops graph linkage when gradients are off or no
// parent needs them.
inline Var make_node(Tensor value, std::vector<Var> parents,
                     std::function<void(Node &)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool needs = false;
    for (const auto &p : parents) needs = needs || p.requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto &p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var(node);
}

inline void accumulate(Node &parent, const double *g, std::size_t n) {
  double *dst = parent.ensure_grad().data();
  for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

namespace detail {

inline void require_same_shape(const Tensor &a, const Tensor &b,
                               const char *op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape " + a.shape_str() +
                     " vs shape " + b.shape_str());
  }
}

template <typename Fwd, typename Bwd>
Var elementwise_unary(const Var &a, Fwd fwd, Bwd dfdx_from_xy,
                      const char * /*name*/) {
  Tensor out(a.value().shape());
  const Tensor &x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
  return make_node(std::move(out), {a}, [dfdx_from_xy](Node &self) {
    Node &p = *self.parents[0];
    if (!p.requires_grad) return;
    const Tensor &x = p.value;
    const Tensor &y = self.value;
    const Tensor &g = self.grad();
    double *dst = p.ensure_grad().data();
    for (std::size_t i = 0; i < x.numel(); ++i)
      dst[i] += g[i] * dfdx_from_xy(x[i], y[i]);
  });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Var add(const Var &a, const Var &b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = a.value()[i] + b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node &self) {
    const Tensor &g = self.grad();
    for (int k = 0; k < 2; ++k) {
      Node &p = *self.parents[k];
      if (p.requires_grad) accumulate(p, g.data(), g.numel());
    }
  });
}

inline Var sub(const Var &a, const Var &b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = a.value()[i] - b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node &self) {
    const Tensor &g = self.grad();
    Node &pa = *self.parents[0];
    Node &pb = *self.parents[1];
    if (pa.requires_grad) accumulate(pa, g.data(), g.numel());
    if (pb.requires_grad) {
      double *dst = pb.ensure_grad().data();
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] -= g[i];
    }
  });
}

inline Var mul(const Var &a, const Var &b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = a.value()[i] * b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node &self) {
    const Tensor &g = self.grad();
    Node &pa = *self.parents[0];
    Node &pb = *self.parents[1];
    if (pa.requires_grad) {
      double *dst = pa.ensure_grad().data();
      const double *other = pb.value.data();
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i] * other[i];
    }
    if (pb.requires_grad) {
      double *dst = pb.ensure_grad().data();
      const double *other = pa.value.data();
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i] * other[i];
    }
  });
}

inline Var neg(const Var &a) {
  return detail::elementwise_unary(
      a, [](double x) { return -x; },
      [](double, double) { return -1.0; }, "neg");
}

inline Var exp(const Var &a) {
  return detail::elementwise_unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; }, "exp");
}

inline Var log(const Var &a) {
  const Tensor &x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(x[i]) +
                        " at index " + std::to_string(i));
    }
  }
  return detail::elementwise_unary(
      a, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; }, "log");
}

inline Var square(const Var &a) {
  return detail::elementwise_unary(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; }, "square");
}

inline Var relu(const Var &a) {
  return detail::elementwise_unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Var sigmoid(const Var &a) {
  return detail::elementwise_unary(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

// Subgradient 0 outside [lo, hi], like relu at its kink.
inline Var clamp(const Var &a, double lo, double hi) {
  return detail::elementwise_unary(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; },
      "clamp");
}

inline Var scale(const Var &a, double c) {
  return detail::elementwise_unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; },
      "scale");
}

inline Var add_scalar(const Var &a, double c) {
  return detail::elementwise_unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; },
      "add_scalar");
}

// ---------------------------------------------------------------------------
// Broadcast ops
// ---------------------------------------------------------------------------

// m (B x K) + v (K), broadcast over rows. Also serves as the bias add.
inline Var add_rowvec(const Var &m, const Var &v) {
  kernels::require_matrix(m.value(), "add_rowvec lhs");
  if (v.value().ndim() != 1 || v.value().numel() != m.value().cols()) {
    throw ShapeError("add_rowvec: shape " + m.value().shape_str() +
                     " vs shape " + v.value().shape_str());
  }
  const std::size_t b = m.value().rows(), k = m.value().cols();
  Tensor out({b, k});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < k; ++j)
      out.at(i, j) = m.value().at(i, j) + v.value()[j];
  return make_node(std::move(out), {m, v}, [](Node &self) {
    const Tensor &g = self.grad();
    Node &pm = *self.parents[0];
    Node &pv = *self.parents[1];
    if (pm.requires_grad) accumulate(pm, g.data(), g.numel());
    if (pv.requires_grad) {
      double *dst = pv.ensure_grad().data();
      const std::size_t b = g.rows(), k = g.cols();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < k; ++j) dst[j] += g.at(i, j);
    }
  });
}

// m (B x K) - v (B), broadcast over columns.
inline Var sub_colvec(const Var &m, const Var &v) {
  kernels::require_matrix(m.value(), "sub_colvec lhs");
  if (v.value().ndim() != 1 || v.value().numel() != m.value().rows()) {
    throw ShapeError("sub_colvec: shape " + m.value().shape_str() +
                     " vs shape " + v.value().shape_str());
  }
  const std::size_t b = m.value().rows(), k = m.value().cols();
  Tensor out({b, k});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < k; ++j)
      out.at(i, j) = m.value().at(i, j) - v.value()[i];
  return make_node(std::move(out), {m, v}, [](Node &self) {
    const Tensor &g = self.grad();
    Node &pm = *self.parents[0];
    Node &pv = *self.parents[1];
    if (pm.requires_grad) accumulate(pm, g.data(), g.numel());
    if (pv.requires_grad) {
      double *dst = pv.ensure_grad().data();
      const std::size_t b = g.rows(), k = g.cols();
      for (std::size_t i = 0; i < b; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += g.at(i, j);
        dst[i] -= acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix / structural ops
// ---------------------------------------------------------------------------

inline Var matmul(const Var &a, const Var &b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  return make_node(std::move(out), {a, b}, [](Node &self) {
    const Tensor &g = self.grad();
    Node &pa = *self.parents[0];
    Node &pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor da = kernels::matmul_nt(g, pb.value); // g * B^T
      accumulate(pa, da.data(), da.numel());
    }
    if (pb.requires_grad) {
      Tensor db = kernels::matmul_tn(pa.value, g); // A^T * g
      accumulate(pb, db.data(), db.numel());
    }
  });
}

inline Var transpose(const Var &a) {
  Tensor out = kernels::transpose(a.value());
  return make_node(std::move(out), {a}, [](Node &self) {
    Node &p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor gt = kernels::transpose(self.grad());
    accumulate(p, gt.data(), gt.numel());
  });
}

inline Var slice_rows(const Var &a, std::vector<std::size_t> indices) {
  kernels::require_matrix(a.value(), "slice_rows");
  const std::size_t m = a.value().cols();
  for (std::size_t idx : indices) {
    if (idx >= a.value().rows()) {
      throw ShapeError("slice_rows: row " + std::to_string(idx) +
                       " out of range for shape " + a.value().shape_str());
    }
  }
  Tensor out({indices.size(), m});
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (std::size_t j = 0; j < m; ++j) out.at(r, j) = a.value().at(indices[r], j);
  return make_node(std::move(out), {a}, [indices](Node &self) {
    Node &p = *self.parents[0];
    if (!p.requires_grad) return;
    const Tensor &g = self.grad();
    Tensor &dst = p.ensure_grad();
    const std::size_t m = g.cols();
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) dst.at(indices[r], j) += g.at(r, j);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var &a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
  return make_node(Tensor::scalar(acc), {a}, [](Node &self) {
    Node &p = *self.parents[0];
    if (!p.requires_grad) return;
    const double g = self.grad()[0];
    double *dst = p.ensure_grad().data();
    for (std::size_t i = 0; i < p.value.numel(); ++i) dst[i] += g;
  });
}

inline Var mean(const Var &a) {
  const std::size_t n = a.value().numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a.value()[i];
  return make_node(Tensor::scalar(acc / static_cast<double>(n)), {a},
                   [](Node &self) {
                     Node &p = *self.parents[0];
                     if (!p.requires_grad) return;
                     const std::size_t n = p.value.numel();
                     const double g = self.grad()[0] / static_cast<double>(n);
                     double *dst = p.ensure_grad().data();
                     for (std::size_t i = 0; i < n; ++i) dst[i] += g;
                   });
}

// Row-wise log(sum(exp(.))) of a (B x K) matrix, max-shifted so that
// logsumexp([1000, 1000]) = 1000 + ln 2 stays finite.
inline Var logsumexp_rows(const Var &a) {
  kernels::require_matrix(a.value(), "logsumexp_rows");
  const std::size_t b = a.value().rows(), k = a.value().cols();
  Tensor out({b});
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, a.value().at(i, j));
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += std::exp(a.value().at(i, j) - mx);
    out[i] = mx + std::log(acc);
  }
  return make_node(std::move(out), {a}, [](Node &self) {
    Node &p = *self.parents[0];
    if (!p.requires_grad) return;
    const Tensor &g = self.grad();
    const Tensor &lse = self.value;
    Tensor &dst = p.ensure_grad();
    const std::size_t b = p.value.rows(), k = p.value.cols();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < k; ++j)
        dst.at(i, j) += g[i] * std::exp(p.value.at(i, j) - lse[i]);
  });
}

// Row-wise softmax of a (B x K) matrix.
inline Var softmax_rows(const Var &a) {
  kernels::require_matrix(a.value(), "softmax_rows");
  const std::size_t b = a.value().rows(), k = a.value().cols();
  Tensor out({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, a.value().at(i, j));
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(a.value().at(i, j) - mx);
      out.at(i, j) = e;
      acc += e;
    }
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) /= acc;
  }
  return make_node(std::move(out), {a}, [](Node &self) {
    Node &p = *self.parents[0];
    if (!p.requires_grad) return;
    const Tensor &g = self.grad();
    const Tensor &y = self.value;
    Tensor &dst = p.ensure_grad();
    const std::size_t b = y.rows(), k = y.cols();
    for (std::size_t i = 0; i < b; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < k; ++j)
        dst.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

inline void backward(const Var &root) {
  if (root.value().numel() != 1) {
    throw ShapeError("backward requires a scalar root, got shape " +
                     root.value().shape_str());
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; each node enters `order` exactly once.
  std::vector<Node *> order;
  std::unordered_set<Node *> visited;
  std::vector<std::pair<Node *, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->parents.size()) {
      Node *parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  bool pass = false;
  std::string note;
};

namespace detail {

// Relative error with a unit floor, so near-zero gradients are compared
// absolutely.
inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

} // namespace detail

// Central-difference check of a scalar-valued function of one tensor.
// `f` maps a Var to a scalar Var; it is re-invoked under NoGradGuard for the
// numeric side.
template <typename F>
GradcheckReport gradcheck(F &&f, const Tensor &x, double h = 1e-5,
                          double tol = 1e-6) {
  Var p = Var::param(x);
  Var y = f(p);
  backward(y);
  Tensor analytic = p.requires_grad() && p.grad().numel() == x.numel()
                        ? p.grad()
                        : Tensor(x.shape());

  GradcheckReport report;
  NoGradGuard guard;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fp = f(Var::constant(std::move(xp))).value().item();
    const double fm = f(Var::constant(std::move(xm))).value().item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.pass = false;
      report.max_rel_err = std::numeric_limits<double>::infinity();
      report.worst_index = i;
      report.note = "non-finite evaluation at coordinate " + std::to_string(i);
      return report;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = detail::rel_err(analytic[i], numeric);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_index = i;
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

// Checks the gradient of a scalar graph w.r.t. a set of leaf parameters.
// `build` constructs the scalar from the parameters' current values; one
// backward pass provides all analytic gradients, then every coordinate is
// perturbed in place for the numeric side.
template <typename Build>
GradcheckReport gradcheck_params(Build &&build, std::vector<Var> &params,
                                 double h = 1e-5, double tol = 1e-6) {
  for (auto &p : params) p.zero_grad();
  Var y = build();
  backward(y);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto &p : params) {
    analytic.push_back(p.grad().numel() == p.value().numel()
                           ? p.grad()
                           : Tensor(p.value().shape()));
  }

  GradcheckReport report;
  NoGradGuard guard;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor &xs = params[pi].mutable_value();
    for (std::size_t i = 0; i < xs.numel(); ++i) {
      const double saved = xs[i];
      xs[i] = saved + h;
      const double fp = build().value().item();
      xs[i] = saved - h;
      const double fm = build().value().item();
      xs[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.pass = false;
        report.max_rel_err = std::numeric_limits<double>::infinity();
        report.worst_param = pi;
        report.worst_index = i;
        report.note = "non-finite evaluation";
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = detail::rel_err(analytic[pi][i], numeric);
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_param = pi;
        report.worst_index = i;
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

} // namespace dcgmm::ad
