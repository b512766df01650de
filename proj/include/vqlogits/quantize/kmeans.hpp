#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/numerics/tensor.hpp"
#include "vqlogits/rng.hpp"

namespace vqlogits {

struct KMeansOptions {
  std::size_t max_iters = 20;
  double tolerance = 1e-7;  // stop when relative distortion improvement drops below this
  std::uint64_t seed = 0;
  std::size_t n_init = 10;  // independent seedings; the lowest final distortion wins
};

struct KMeansResult {
  RowMatrix<double> centroids;           // K x d
  std::vector<Index> assignments;        // one per point
  std::vector<double> distortion_history;  // sum of squared distances after each assignment
  std::size_t iterations_run = 0;        // centroid update steps performed

  double distortion() const { return distortion_history.back(); }
};

namespace detail {

inline double squared_distance(const RowMatrix<double>& x, Eigen::Index i,
                               const RowMatrix<double>& c, Eigen::Index j) {
  return (x.row(i) - c.row(j)).squaredNorm();
}

// k-means++ seeding: first centre uniform, the rest drawn with probability
// proportional to squared distance from the nearest chosen centre. If every
// remaining point coincides with a centre, the lowest-index unchosen point is
// taken.
inline RowMatrix<double> kmeanspp_seed(const RowMatrix<double>& x, std::size_t k, Rng& rng) {
  const Eigen::Index n = x.rows();
  RowMatrix<double> centres(static_cast<Eigen::Index>(k), x.cols());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  Eigen::VectorXd nearest = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());

  auto take = [&](Eigen::Index idx, Eigen::Index slot) {
    chosen[static_cast<std::size_t>(idx)] = 1;
    centres.row(slot) = x.row(idx);
    nearest = nearest.cwiseMin((x.rowwise() - x.row(idx)).rowwise().squaredNorm());
  };

  take(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))), 0);
  for (Eigen::Index slot = 1; slot < static_cast<Eigen::Index>(k); ++slot) {
    const double total = nearest.sum();
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= nearest[i];
        if (target < 0.0 && nearest[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (Eigen::Index i = n - 1; i >= 0; --i)
          if (nearest[i] > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) {
          pick = i;
          break;
        }
    }
    take(pick, slot);
  }
  return centres;
}

// Nearest-centroid assignment; ties resolve to the lowest centroid index.
// Candidates come from a blocked ||x||^2 - 2 x.c + ||c||^2 expansion and are
// confirmed against the previous assignment with exact distances, so the
// distortion can never rise from rounding in the expansion.
inline double assign_points(const RowMatrix<double>& x, const RowMatrix<double>& c,
                            std::vector<Index>& assign, std::vector<double>& dist) {
  const Eigen::Index n = x.rows(), k = c.rows();
  const Eigen::VectorXd c_norm = c.rowwise().squaredNorm();
  constexpr Eigen::Index kBlock = 256;
  RowMatrix<double> scores;
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index rows = std::min(kBlock, n - start);
    scores.noalias() = x.middleRows(start, rows) * c.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::Index i = start + r;
      Eigen::Index best = 0;
      double best_val = c_norm[0] - 2.0 * scores(r, 0);
      for (Eigen::Index j = 1; j < k; ++j) {
        const double v = c_norm[j] - 2.0 * scores(r, j);
        if (v < best_val) {
          best_val = v;
          best = j;
        }
      }
      double d_best = squared_distance(x, i, c, best);
      const Index prev = assign[static_cast<std::size_t>(i)];
      if (prev >= 0 && prev != best) {
        const double d_prev = squared_distance(x, i, c, prev);
        if (d_prev < d_best || (d_prev == d_best && prev < best)) {
          best = prev;
          d_best = d_prev;
        }
      }
      assign[static_cast<std::size_t>(i)] = static_cast<Index>(best);
      dist[static_cast<std::size_t>(i)] = d_best;
    }
  }
  double total = 0.0;
  for (double d : dist) total += d;
  return total;
}

}  // namespace detail

namespace detail {

// One k-means++ seeding followed by Lloyd iterations. Empty clusters are
// re-seeded with the points farthest from their current centroid.
inline KMeansResult lloyd(const RowMatrix<double>& points, std::size_t k,
                          const KMeansOptions& opts, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  KMeansResult res;
  res.centroids = detail::kmeanspp_seed(points, k, rng);
  res.assignments.assign(n, -1);
  std::vector<double> dist(n, 0.0);
  res.distortion_history.push_back(
      detail::assign_points(points, res.centroids, res.assignments, dist));

  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    const double before = res.distortion_history.back();
    if (before == 0.0) break;

    RowMatrix<double> sums = RowMatrix<double>::Zero(static_cast<Eigen::Index>(k), points.cols());
    std::vector<std::size_t> members(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = static_cast<Eigen::Index>(res.assignments[i]);
      sums.row(j) += points.row(static_cast<Eigen::Index>(i));
      ++members[static_cast<std::size_t>(j)];
    }
    std::vector<char> taken(n, 0);
    for (std::size_t j = 0; j < k; ++j) {
      const auto row = static_cast<Eigen::Index>(j);
      if (members[j] > 0) {
        res.centroids.row(row) = sums.row(row) / static_cast<double>(members[j]);
        continue;
      }
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i] && dist[i] > 0.0 && (far == n || dist[i] > dist[far])) far = i;
      }
      if (far == n) continue;  // every point already sits on a centroid
      taken[far] = 1;
      res.centroids.row(row) = points.row(static_cast<Eigen::Index>(far));
    }
    ++res.iterations_run;
    const double after = detail::assign_points(points, res.centroids, res.assignments, dist);
    res.distortion_history.push_back(after);
    if (before - after < opts.tolerance * before) break;
  }
  return res;
}

}  // namespace detail

// k-means over the rows of `points`: n_init k-means++ seedings, each refined
// by Lloyd iterations, keeping the run with the lowest distortion (first one
// on ties).
inline KMeansResult kmeans(const RowMatrix<double>& points, std::size_t k,
                           const KMeansOptions& opts = {}) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0) throw ConfigError("k-means needs at least one point");
  if (k == 0) throw ConfigError("k-means needs K >= 1");
  if (k > n) {
    throw ConfigError("k-means with K=" + std::to_string(k) + " > " + std::to_string(n) +
                      " points");
  }
  Rng rng(opts.seed);
  KMeansResult best;
  for (std::size_t run = 0; run < std::max<std::size_t>(opts.n_init, 1); ++run) {
    Rng run_rng = rng.split();
    KMeansResult res = detail::lloyd(points, k, opts, run_rng);
    if (run == 0 || res.distortion() < best.distortion()) best = std::move(res);
    if (best.distortion() == 0.0) break;
  }
  return best;
}

template <typename T>
RowMatrix<double> to_points(const Tensor<T>& rows) {
  return as_matrix(rows).template cast<double>();
}

}  // namespace vqlogits
