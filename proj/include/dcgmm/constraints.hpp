// Constraint generation from labels: uniform pair sampling (must-link when
// labels agree, cannot-link otherwise), independent sign flips for noise
// experiments, and the confidence-to-weight heuristic.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dcgmm/errors.hpp"
#include "dcgmm/prior.hpp"
#include "dcgmm/rng.hpp"

namespace dcgmm {

enum class LinkKind { must, cannot };

struct Constraint {
  std::size_t i = 0;
  std::size_t j = 0;
  LinkKind kind = LinkKind::must;
  double magnitude = 0.0; // strictly positive
};

inline constexpr double kDefaultConstraintMagnitude = 1e4;

// Draws n_c unordered distinct pairs uniformly, with replacement across
// draws; a pair that collides with an earlier one later overwrites it in
// build_weights (last wins).
inline std::vector<Constraint> sample_constraints(
    const std::vector<int> &labels, std::size_t n_c, Rng &rng,
    double magnitude = kDefaultConstraintMagnitude) {
  if (labels.size() < 2) {
    throw DataError("sample_constraints: need at least 2 samples, got " +
                    std::to_string(labels.size()));
  }
  if (n_c == 0) {
    throw DataError("sample_constraints: n_c must be at least 1");
  }
  if (!(magnitude > 0.0)) {
    throw DomainError("sample_constraints: magnitude must be positive");
  }
  const std::size_t n = labels.size();
  std::vector<Constraint> out;
  out.reserve(n_c);
  for (std::size_t t = 0; t < n_c; ++t) {
    const std::size_t i = rng.uniform_index(n);
    std::size_t j = rng.uniform_index(n - 1);
    if (j >= i) ++j;
    const LinkKind kind =
        labels[i] == labels[j] ? LinkKind::must : LinkKind::cannot;
    out.push_back({i, j, kind, magnitude});
  }
  return out;
}

// Flips each constraint's kind independently with probability q.
inline std::vector<Constraint> flip_noise(std::vector<Constraint> constraints,
                                          double q, Rng &rng) {
  if (q < 0.0 || q > 1.0) {
    throw DomainError("flip_noise: q = " + std::to_string(q) +
                      " outside [0, 1]");
  }
  for (auto &c : constraints) {
    if (rng.uniform() < q) {
      c.kind = c.kind == LinkKind::must ? LinkKind::cannot : LinkKind::must;
    }
  }
  return constraints;
}

// |W| = alpha * ln((1 - q) / q); only defined for q in (0, 0.5) where the
// weight is positive.
inline double confidence_weight(double q, double alpha) {
  if (!(q > 0.0) || !(q < 0.5)) {
    throw DomainError("confidence_weight: q = " + std::to_string(q) +
                      " outside (0, 0.5)");
  }
  return alpha * std::log((1.0 - q) / q);
}

// must-link -> +magnitude, cannot-link -> -magnitude, symmetric entries.
inline PairwiseWeights build_weights(const std::vector<Constraint> &constraints,
                                     std::size_t n) {
  PairwiseWeights w(n);
  for (const auto &c : constraints) {
    const double v = c.kind == LinkKind::must ? c.magnitude : -c.magnitude;
    w.set(c.i, c.j, v); // set() validates the index range and i != j
  }
  return w;
}

} // namespace dcgmm
