// Clustering evaluation: unsupervised accuracy via optimal label matching,
// NMI (sqrt normalization), and the adjusted Rand index. All metrics are
// invariant under relabeling of either partition.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dcgmm/errors.hpp"

namespace dcgmm::metrics {

struct Contingency {
  std::size_t k_pred = 0;
  std::size_t k_true = 0;
  std::vector<double> counts;     // k_pred x k_true, row-major
  std::vector<double> pred_sizes; // row marginals
  std::vector<double> true_sizes; // column marginals
  std::size_t n = 0;

  [[nodiscard]] double at(std::size_t i, std::size_t j) const {
    return counts[i * k_true + j];
  }
};

namespace detail {

// Maps arbitrary label values to dense ids [0, K).
inline std::vector<std::size_t> densify(const std::vector<int> &labels,
                                        std::size_t &k_out) {
  std::vector<int> uniq(labels);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  k_out = uniq.size();
  std::vector<std::size_t> ids(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ids[i] = static_cast<std::size_t>(
        std::lower_bound(uniq.begin(), uniq.end(), labels[i]) - uniq.begin());
  }
  return ids;
}

inline void require_equal_lengths(const std::vector<int> &a,
                                  const std::vector<int> &b) {
  if (a.size() != b.size()) {
    throw ShapeError("label vectors differ in length: " +
                     std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}

} // namespace detail

inline Contingency contingency(const std::vector<int> &pred,
                               const std::vector<int> &truth) {
  detail::require_equal_lengths(pred, truth);
  Contingency c;
  auto p = detail::densify(pred, c.k_pred);
  auto t = detail::densify(truth, c.k_true);
  c.n = pred.size();
  c.counts.assign(c.k_pred * c.k_true, 0.0);
  for (std::size_t i = 0; i < c.n; ++i) c.counts[p[i] * c.k_true + t[i]] += 1.0;
  c.pred_sizes.assign(c.k_pred, 0.0);
  c.true_sizes.assign(c.k_true, 0.0);
  for (std::size_t i = 0; i < c.k_pred; ++i)
    for (std::size_t j = 0; j < c.k_true; ++j) {
      c.pred_sizes[i] += c.at(i, j);
      c.true_sizes[j] += c.at(i, j);
    }
  return c;
}

// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
// paths with potentials, O(n^3)). Rectangular inputs are padded square with
// zeros. Returns the column assigned to each row; padded rows map to the
// leftover columns.
struct Assignment {
  std::vector<std::size_t> col_of_row;
  double cost = 0.0;
};

inline Assignment hungarian(const std::vector<std::vector<double>> &cost) {
  const std::size_t r = cost.size();
  std::size_t c = 0;
  for (const auto &row : cost) c = std::max(c, row.size());
  for (const auto &row : cost) {
    if (row.size() != c) {
      throw ShapeError("hungarian: ragged cost matrix");
    }
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw DomainError("hungarian: non-finite cost entry");
      }
    }
  }
  const std::size_t n = std::max(r, c);
  auto a = [&](std::size_t i, std::size_t j) -> double {
    return (i < r && j < c) ? cost[i][j] : 0.0;
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment out;
  out.col_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] != 0) out.col_of_row[p[j] - 1] = j - 1;
  }
  for (std::size_t i = 0; i < n; ++i) out.cost += a(i, out.col_of_row[i]);
  return out;
}

// Unsupervised clustering accuracy: best label bijection via Hungarian
// matching on the negated contingency counts.
inline double accuracy(const std::vector<int> &pred,
                       const std::vector<int> &truth) {
  const Contingency c = contingency(pred, truth);
  std::vector<std::vector<double>> cost(c.k_pred,
                                        std::vector<double>(c.k_true, 0.0));
  for (std::size_t i = 0; i < c.k_pred; ++i)
    for (std::size_t j = 0; j < c.k_true; ++j) cost[i][j] = -c.at(i, j);
  const Assignment match = hungarian(cost);
  return -match.cost / static_cast<double>(c.n);
}

// I(pred; truth) / sqrt(H(pred) H(truth)) with natural logs; a zero entropy
// on either side yields 0 by convention.
inline double nmi(const std::vector<int> &pred, const std::vector<int> &truth) {
  const Contingency c = contingency(pred, truth);
  const auto dn = static_cast<double>(c.n);
  double info = 0.0, hp = 0.0, ht = 0.0;
  for (std::size_t i = 0; i < c.k_pred; ++i) {
    if (c.pred_sizes[i] > 0.0)
      hp -= c.pred_sizes[i] / dn * std::log(c.pred_sizes[i] / dn);
  }
  for (std::size_t j = 0; j < c.k_true; ++j) {
    if (c.true_sizes[j] > 0.0)
      ht -= c.true_sizes[j] / dn * std::log(c.true_sizes[j] / dn);
  }
  if (hp <= 0.0 || ht <= 0.0) return 0.0;
  for (std::size_t i = 0; i < c.k_pred; ++i) {
    for (std::size_t j = 0; j < c.k_true; ++j) {
      const double nij = c.at(i, j);
      if (nij <= 0.0) continue;
      info += nij / dn *
              std::log(dn * nij / (c.pred_sizes[i] * c.true_sizes[j]));
    }
  }
  const double value = info / std::sqrt(hp * ht);
  return std::clamp(value, 0.0, 1.0);
}

inline double ari(const std::vector<int> &pred, const std::vector<int> &truth) {
  const Contingency c = contingency(pred, truth);
  auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double sum_ij = 0.0;
  for (double nij : c.counts) sum_ij += comb2(nij);
  double sum_a = 0.0, sum_b = 0.0;
  for (double ai : c.pred_sizes) sum_a += comb2(ai);
  for (double bj : c.true_sizes) sum_b += comb2(bj);
  const double pairs = comb2(static_cast<double>(c.n));
  const double expected = sum_a * sum_b / pairs;
  const double maximum = 0.5 * (sum_a + sum_b);
  if (maximum == expected) {
    // Degenerate partitions (all-singletons or single-cluster on both
    // sides): 1 when the partitions coincide, 0 otherwise.
    bool identical = true;
    for (std::size_t i = 0; i < c.k_pred && identical; ++i) {
      std::size_t nonzero = 0;
      for (std::size_t j = 0; j < c.k_true; ++j)
        if (c.at(i, j) > 0.0) ++nonzero;
      identical = nonzero == 1;
    }
    identical = identical && c.k_pred == c.k_true;
    return identical ? 1.0 : 0.0;
  }
  return (sum_ij - expected) / (maximum - expected);
}

} // namespace dcgmm::metrics
