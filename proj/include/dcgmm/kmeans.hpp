// Lloyd k-means with k-means++ seeding, restarts, and farthest-point
// reseeding of emptied clusters. Used to initialize the latent mixture from
// pretrained encoder means.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "dcgmm/errors.hpp"
#include "dcgmm/rng.hpp"
#include "dcgmm/tensor.hpp"

namespace dcgmm {

struct KmeansResult {
  Tensor centroids; // k x d
  std::vector<int> labels;
  double inertia = std::numeric_limits<double>::infinity();
};

namespace detail {

inline double sq_dist(const Tensor &points, std::size_t row,
                      const Tensor &centroids, std::size_t c) {
  const std::size_t d = points.cols();
  double acc = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = points.at(row, j) - centroids.at(c, j);
    acc += diff * diff;
  }
  return acc;
}

inline KmeansResult kmeans_once(const Tensor &points, std::size_t k, Rng &rng,
                                int iters) {
  const std::size_t n = points.rows(), d = points.cols();
  KmeansResult res;
  res.centroids = Tensor({k, d});
  res.labels.assign(n, 0);

  // k-means++ seeding
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.uniform_index(n);
  for (std::size_t j = 0; j < d; ++j) res.centroids.at(0, j) = points.at(first, j);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], sq_dist(points, i, res.centroids, c - 1));
      total += min_dist[i];
    }
    std::size_t chosen = n - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_dist[i];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = rng.uniform_index(n);
    }
    for (std::size_t j = 0; j < d; ++j)
      res.centroids.at(c, j) = points.at(chosen, j);
  }

  std::vector<double> dist_to_own(n, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sq_dist(points, i, res.centroids, c);
        if (dd < best_d) {
          best_d = dd;
          best = static_cast<int>(c);
        }
      }
      dist_to_own[i] = best_d;
      if (res.labels[i] != best) {
        res.labels[i] = best;
        changed = true;
      }
    }
    // update step
    std::fill(counts.begin(), counts.end(), 0);
    Tensor sums({k, d});
    for (std::size_t i = 0; i < n; ++i) {
      counts[res.labels[i]] += 1;
      for (std::size_t j = 0; j < d; ++j)
        sums.at(res.labels[i], j) += points.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // reseed the emptied centroid at the farthest point
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (dist_to_own[i] > far_d) {
            far_d = dist_to_own[i];
            far = i;
          }
        }
        for (std::size_t j = 0; j < d; ++j)
          res.centroids.at(c, j) = points.at(far, j);
        changed = true;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j)
        res.centroids.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
    }
    if (!changed) break;
  }

  res.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    res.inertia += sq_dist(points, i, res.centroids, res.labels[i]);
    // labels may be stale after the last update; refresh once
  }
  for (std::size_t i = 0; i < n; ++i) {
    int best = res.labels[i];
    double best_d = sq_dist(points, i, res.centroids, best);
    for (std::size_t c = 0; c < k; ++c) {
      const double dd = sq_dist(points, i, res.centroids, c);
      if (dd < best_d) {
        best_d = dd;
        best = static_cast<int>(c);
      }
    }
    res.labels[i] = best;
  }
  res.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    res.inertia += sq_dist(points, i, res.centroids, res.labels[i]);
  return res;
}

} // namespace detail

inline KmeansResult kmeans(const Tensor &points, std::size_t k, Rng &rng,
                           int restarts = 10, int iters = 100) {
  if (points.ndim() != 2 || points.rows() == 0) {
    throw ShapeError("kmeans: points must be a nonempty matrix, got " +
                     points.shape_str());
  }
  if (k == 0 || k > points.rows()) {
    throw DomainError("kmeans: k = " + std::to_string(k) +
                      " invalid for n = " + std::to_string(points.rows()));
  }
  KmeansResult best;
  for (int r = 0; r < restarts; ++r) {
    KmeansResult cur = detail::kmeans_once(points, k, rng, iters);
    if (cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

} // namespace dcgmm
