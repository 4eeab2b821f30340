// Pairwise prior information W over cluster assignments, the differentiable
// batch-local penalty that carries it into the training objective, and
// brute-force / quadrature oracles for the conditional prior on instances
// small enough to enumerate.
//
// Convention: the unnormalized prior is prod_i pi_{c_i} prod_{j != i}
// exp(W_ij delta(c_i, c_j)), so every unordered pair contributes twice.
// Calibrate magnitudes with that double count in mind.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "dcgmm/autodiff.hpp"
#include "dcgmm/errors.hpp"
#include "dcgmm/tensor.hpp"

namespace dcgmm {

// Sparse symmetric map (i, j) -> W_ij with zero diagonal; absent entry = 0.
// Entries are stored once under the canonical (min, max) key. Re-inserting a
// pair overwrites (last wins) and is counted so callers can warn.
class PairwiseWeights {
public:
  explicit PairwiseWeights(std::size_t n) : n_(n) {}

  [[nodiscard]] std::size_t n() const { return n_; }
  [[nodiscard]] std::size_t entry_count() const { return entries_.size(); }
  [[nodiscard]] std::size_t overwrite_count() const { return overwrites_; }

  void set(std::size_t i, std::size_t j, double w) {
    if (i == j) {
      throw DataError("pairwise weight with i == j == " + std::to_string(i));
    }
    if (i >= n_ || j >= n_) {
      throw DataError("pairwise weight index (" + std::to_string(i) + ", " +
                      std::to_string(j) + ") out of range for n = " +
                      std::to_string(n_));
    }
    auto [it, inserted] = entries_.insert_or_assign(key(i, j), w);
    (void)it;
    if (!inserted) ++overwrites_;
  }

  [[nodiscard]] double get(std::size_t i, std::size_t j) const {
    if (i == j) return 0.0;
    auto it = entries_.find(key(i, j));
    return it == entries_.end() ? 0.0 : it->second;
  }

  struct Entry {
    std::size_t i, j; // i < j
    double w;
  };

  [[nodiscard]] std::vector<Entry> entries() const {
    std::vector<Entry> out;
    out.reserve(entries_.size());
    for (const auto &[k, w] : entries_)
      out.push_back({k >> 32, k & 0xffffffffULL, w});
    return out;
  }

private:
  static std::uint64_t key(std::size_t i, std::size_t j) {
    const std::uint64_t lo = std::min(i, j), hi = std::max(i, j);
    return (lo << 32) | hi;
  }

  std::size_t n_;
  std::unordered_map<std::uint64_t, double> entries_;
  std::size_t overwrites_ = 0;
};

// Dense B x B slice of W over a batch; symmetric with zero diagonal.
inline Tensor gather_batch_weights(const PairwiseWeights &w,
                                   const std::vector<std::size_t> &indices) {
  const std::size_t b = indices.size();
  for (std::size_t a = 0; a < b; ++a) {
    for (std::size_t c = a + 1; c < b; ++c) {
      if (indices[a] == indices[c]) {
        throw DataError("gather_batch_weights: duplicate index " +
                        std::to_string(indices[a]));
      }
    }
  }
  Tensor wb({b, b});
  for (std::size_t a = 0; a < b; ++a) {
    for (std::size_t c = a + 1; c < b; ++c) {
      const double v = w.get(indices[a], indices[c]);
      wb.at(a, c) = v;
      wb.at(c, a) = v;
    }
  }
  return wb;
}

// sum_{i != j} sum_k P_ik P_jk W_ij as sum(P .* (Wb P)); differentiable in P.
inline ad::Var pairwise_penalty(const ad::Var &p, const Tensor &wb) {
  if (wb.ndim() != 2 || wb.rows() != wb.cols()) {
    throw ShapeError("pairwise_penalty: Wb must be square, got " +
                     wb.shape_str());
  }
  if (p.value().ndim() != 2 || p.value().rows() != wb.rows()) {
    throw ShapeError("pairwise_penalty: P shape " + p.value().shape_str() +
                     " does not match Wb shape " + wb.shape_str());
  }
  const std::size_t b = wb.rows();
  for (std::size_t i = 0; i < b; ++i) {
    if (wb.at(i, i) != 0.0) {
      throw DomainError("pairwise_penalty: nonzero diagonal at " +
                        std::to_string(i));
    }
    for (std::size_t j = i + 1; j < b; ++j) {
      if (wb.at(i, j) != wb.at(j, i)) {
        throw DomainError("pairwise_penalty: asymmetric Wb at (" +
                          std::to_string(i) + ", " + std::to_string(j) + ")");
      }
    }
  }
  return ad::sum(ad::mul(p, ad::matmul(ad::Var::constant(wb), p)));
}

// ---------------------------------------------------------------------------
// Small-instance oracles
// ---------------------------------------------------------------------------

// log of prod_i pi_{c_i} prod_{j != i} exp(W_ij delta(c_i, c_j)).
inline double log_unnormalized_prior(const std::vector<std::size_t> &labels,
                                     const PairwiseWeights &w,
                                     const std::vector<double> &log_pi) {
  if (labels.size() != w.n()) {
    throw ShapeError("log_unnormalized_prior: |c| = " +
                     std::to_string(labels.size()) + " but W has n = " +
                     std::to_string(w.n()));
  }
  double acc = 0.0;
  for (std::size_t c : labels) acc += log_pi.at(c);
  for (const auto &e : w.entries()) {
    if (labels[e.i] == labels[e.j]) acc += 2.0 * e.w; // both ordered pairs
  }
  return acc;
}

namespace detail {

inline double logsumexp(const std::vector<double> &xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

inline void check_instance_size(std::size_t n, std::size_t k) {
  double total = 1.0;
  for (std::size_t i = 0; i < n; ++i) total *= static_cast<double>(k);
  if (total > 1e6) {
    throw DataError("oracle instance too large: K^n = " +
                    std::to_string(total));
  }
}

template <typename F>
void for_each_assignment(std::size_t n, std::size_t k, F &&fn) {
  std::vector<std::size_t> c(n, 0);
  for (;;) {
    fn(const_cast<const std::vector<std::size_t> &>(c));
    std::size_t pos = 0;
    while (pos < n) {
      if (++c[pos] < k) break;
      c[pos] = 0;
      ++pos;
    }
    if (pos == n) break;
  }
}

} // namespace detail

// log Omega(pi): log of the sum of the unnormalized prior over all K^n
// assignments.
inline double log_brute_force_normalizer(const PairwiseWeights &w,
                                         const std::vector<double> &log_pi,
                                         std::size_t k) {
  detail::check_instance_size(w.n(), k);
  std::vector<double> terms;
  detail::for_each_assignment(w.n(), k, [&](const std::vector<std::size_t> &c) {
    terms.push_back(log_unnormalized_prior(c, w, log_pi));
  });
  return detail::logsumexp(terms);
}

inline double brute_force_normalizer(const PairwiseWeights &w,
                                     const std::vector<double> &log_pi,
                                     std::size_t k) {
  return std::exp(log_brute_force_normalizer(w, log_pi, k));
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature (physicists' convention)
// ---------------------------------------------------------------------------

struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights; // integral e^{-x^2} f(x) dx = sum w_i f(x_i)
};

// Newton refinement on the orthonormal Hermite recurrence.
inline GaussHermiteRule gauss_hermite(std::size_t n) {
  if (n == 0) throw DomainError("gauss_hermite: need at least one node");
  constexpr double kPiQuarterInv = 0.7511255444649425; // pi^{-1/4}
  constexpr double kEps = 1e-14;
  constexpr int kMaxIter = 64;

  GaussHermiteRule rule;
  rule.nodes.assign(n, 0.0);
  rule.weights.assign(n, 0.0);
  const auto m = (n + 1) / 2;
  double z = 0.0, pp = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * n + 1.0) -
          1.85575 * std::pow(2.0 * n + 1.0, -1.0 / 6.0);
    } else if (i == 1) {
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * rule.nodes[0];
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * rule.nodes[1];
    } else {
      z = 2.0 * z - rule.nodes[i - 2];
    }
    for (int it = 0; it < kMaxIter; ++it) {
      double p1 = kPiQuarterInv, p2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / (j + 1.0)) * p2 -
             std::sqrt(static_cast<double>(j) / (j + 1.0)) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= kEps) break;
    }
    rule.nodes[i] = z;
    rule.nodes[n - 1 - i] = -z;
    rule.weights[i] = 2.0 / (pp * pp);
    rule.weights[n - 1 - i] = rule.weights[i];
  }
  return rule;
}

// ---------------------------------------------------------------------------
// Exact conditional posterior over assignments for tiny D=1 instances
// ---------------------------------------------------------------------------

struct ConditionalPosterior {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<double> table; // K^n probabilities, index = sum_i c_i * K^i
  double log_evidence = 0.0; // log p(X | W)

  [[nodiscard]] double prob(const std::vector<std::size_t> &c) const {
    std::size_t idx = 0, stride = 1;
    for (std::size_t i = 0; i < n; ++i) {
      idx += c[i] * stride;
      stride *= k;
    }
    return table[idx];
  }
};

// Exact p(c | X, W) and log p(X | W) for a D=1 latent space.
//
// log_px_given_z(i, z) must return log p_theta(x_i | z). The per-sample,
// per-cluster marginals integral N(z; mu_k, var_k) p(x_i | z) dz are computed
// with Gauss-Hermite quadrature on `nodes` points, then combined with the
// exact conditional prior by enumeration.
inline ConditionalPosterior brute_force_conditional_posterior(
    std::size_t n_samples,
    const std::function<double(std::size_t, double)> &log_px_given_z,
    const std::vector<double> &mean_k, const std::vector<double> &var_k,
    const std::vector<double> &log_pi, const PairwiseWeights &w,
    std::size_t nodes = 64) {
  const std::size_t k = mean_k.size();
  if (w.n() != n_samples) {
    throw ShapeError("conditional posterior: W has n = " +
                     std::to_string(w.n()) + ", expected " +
                     std::to_string(n_samples));
  }
  if (var_k.size() != k || log_pi.size() != k) {
    throw ShapeError("conditional posterior: mixture parameter lengths differ");
  }
  if (nodes < 64) nodes = 64;
  detail::check_instance_size(n_samples, k);

  const GaussHermiteRule rule = gauss_hermite(nodes);
  const double log_sqrt_pi = 0.5 * std::log(std::acos(-1.0));

  // log m[i][k] = log integral N(z; mu_k, var_k) p(x_i | z) dz
  std::vector<std::vector<double>> log_m(n_samples,
                                         std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> terms(nodes);
      const double sigma = std::sqrt(var_k[c]);
      for (std::size_t q = 0; q < nodes; ++q) {
        const double zq = mean_k[c] + std::numbers::sqrt2 * sigma * rule.nodes[q];
        terms[q] =
            std::log(rule.weights[q]) - log_sqrt_pi + log_px_given_z(i, zq);
      }
      log_m[i][c] = detail::logsumexp(terms);
    }
  }

  const double log_omega = log_brute_force_normalizer(w, log_pi, k);

  ConditionalPosterior post;
  post.n = n_samples;
  post.k = k;
  std::vector<double> log_joint;
  detail::for_each_assignment(
      n_samples, k, [&](const std::vector<std::size_t> &c) {
        double lj = log_unnormalized_prior(c, w, log_pi) - log_omega;
        for (std::size_t i = 0; i < n_samples; ++i) lj += log_m[i][c[i]];
        log_joint.push_back(lj);
      });
  post.log_evidence = detail::logsumexp(log_joint);
  post.table.resize(log_joint.size());
  for (std::size_t idx = 0; idx < log_joint.size(); ++idx)
    post.table[idx] = std::exp(log_joint[idx] - post.log_evidence);
  return post;
}

} // namespace dcgmm
