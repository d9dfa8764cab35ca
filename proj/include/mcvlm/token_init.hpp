// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <string>
#include <vector>

#include "mcvlm/errors.hpp"
#include "mcvlm/linalg.hpp"
#include "mcvlm/vision.hpp"

namespace mcvlm {

struct ClusterResult {
  Matrix centers;                    // k x D
  std::vector<int> assignments;      // one per input point
  double inertia = 0.0;              // sum of squared distances to assigned centers
  std::vector<double> inertia_trace; // inertia after every assignment step
  int iterations = 0;
};

namespace detail {

inline double sq_dist(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
  return (a - b).squaredNorm();
}

inline double assign(const Matrix& points, const Matrix& centers, std::vector<int>& out) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index j = 0; j < centers.rows(); ++j) {
      const double d = sq_dist(points.row(i), centers.row(j));
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    out[static_cast<std::size_t>(i)] = arg;
    inertia += best;
  }
  return inertia;
}

// k-means++ seeding: first center uniform, later ones proportional to D^2.
inline Matrix seed_plus_plus(const Matrix& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Matrix centers(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.row(0) = points.row(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = sq_dist(points.row(i), centers.row(0));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double d : d2) total += d;
    Eigen::Index pick = 0;
    if (total <= 0.0) {
      pick = first(rng);
    } else {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2[static_cast<std::size_t>(pick)];
        if (r < 0.0) break;
      }
    }
    centers.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], sq_dist(points.row(i), centers.row(c)));
  }
  return centers;
}

}  // namespace detail

/// Lloyd's algorithm from k-means++ seeds. A cluster that loses all its points
/// is re-seeded at the point farthest from its current center.
inline ClusterResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters = 100) {
  require(k >= 1, ErrorKind::Input, "k must be >= 1");
  require(max_iters >= 1, ErrorKind::Input, "max_iters must be >= 1");
  require(points.rows() >= k, ErrorKind::Input,
          "k-means needs at least k=" + std::to_string(k) + " points, got " + std::to_string(points.rows()));
  require(points.allFinite(), ErrorKind::NonFinite, "k-means input contains non-finite values");

  Rng rng(seed);
  ClusterResult res;
  res.centers = detail::seed_plus_plus(points, k, rng);
  res.assignments.assign(static_cast<std::size_t>(points.rows()), 0);
  res.inertia = detail::assign(points, res.centers, res.assignments);
  res.inertia_trace.push_back(res.inertia);

  for (int it = 0; it < max_iters; ++it) {
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      const int a = res.assignments[static_cast<std::size_t>(i)];
      sums.row(a) += points.row(i);
      ++counts[static_cast<std::size_t>(a)];
    }
    for (int j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) {
        res.centers.row(j) = sums.row(j) / counts[static_cast<std::size_t>(j)];
        continue;
      }
      // Empty cluster: move it onto the point farthest from its own center.
      Eigen::Index far = 0;
      double best = -1.0;
      for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const int a = res.assignments[static_cast<std::size_t>(i)];
        const double d = detail::sq_dist(points.row(i), res.centers.row(a));
        if (d > best) {
          best = d;
          far = i;
        }
      }
      res.centers.row(j) = points.row(far);
      res.assignments[static_cast<std::size_t>(far)] = j;
    }
    std::vector<int> next(res.assignments.size());
    const double inertia = detail::assign(points, res.centers, next);
    res.inertia_trace.push_back(inertia);
    res.iterations = it + 1;
    const bool converged = next == res.assignments;
    res.assignments = std::move(next);
    res.inertia = inertia;
    if (converged) break;
  }
  return res;
}

/// Scales `v` to L2 norm `target`, preserving direction.
inline RowVector norm_align(const Eigen::Ref<const RowVector>& v, double target) {
  require(target > 0.0, ErrorKind::Input, "target norm must be positive");
  const double n = v.norm();
  require(n > 0.0, ErrorKind::DegenerateInput, "cannot align a zero vector");
  return v * (target / n);
}

/// Mean L2 row norm of the frozen vocabulary embedding table.
inline double reference_norm(const Matrix& vocab_embeddings) {
  require(vocab_embeddings.rows() >= 1, ErrorKind::Input, "empty vocabulary");
  return vocab_embeddings.rowwise().norm().mean();
}

/// (k+1) x D learnable rows for one concept: row 0 is the identifier, rows 1..k
/// the soft tokens.
struct ConceptTokenBlock {
  std::string concept_id;
  Matrix rows;

  int k() const { return static_cast<int>(rows.rows()) - 1; }
  int dim() const { return static_cast<int>(rows.cols()); }
  auto identifier() const { return rows.row(0); }
  auto token(int i) const { return rows.row(1 + i); }
};

enum class InitMode { KMeans, Random };

inline const char* init_mode_name(InitMode m) { return m == InitMode::KMeans ? "kmeans" : "random"; }

inline InitMode init_mode_from_name(const std::string& s) {
  if (s == "kmeans") return InitMode::KMeans;
  if (s == "random") return InitMode::Random;
  fail(ErrorKind::Input, "unknown init mode '" + s + "' (expected kmeans or random)");
}

/// Block before norm alignment: k-means centers, identifier = their mean.
inline ConceptTokenBlock raw_block(const FeatureBank& bank, int k, std::uint64_t seed) {
  require(k >= 1, ErrorKind::Input, "k must be >= 1");
  require(bank.count() >= k, ErrorKind::Input,
          "bank for '" + bank.concept_id + "' has " + std::to_string(bank.count()) + " vectors, fewer than k=" +
              std::to_string(k));
  const ClusterResult clusters = kmeans(bank.vectors, k, seed);
  ConceptTokenBlock block;
  block.concept_id = bank.concept_id;
  block.rows.resize(k + 1, bank.dim());
  block.rows.row(0) = clusters.centers.colwise().mean();
  block.rows.bottomRows(k) = clusters.centers;
  return block;
}

inline void align_rows(Matrix& rows, double target) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) rows.row(i) = norm_align(rows.row(i), target);
}

/// k-means initialisation followed by norm alignment of all k+1 rows.
inline ConceptTokenBlock init_block(const FeatureBank& bank, int k, std::uint64_t seed, double target_norm) {
  ConceptTokenBlock block = raw_block(bank, k, seed);
  align_rows(block.rows, target_norm);
  return block;
}

/// Ablation arm: Gaussian rows scaled to the reference norm.
inline ConceptTokenBlock random_block(std::string concept_id, int k, int dim, std::uint64_t seed, double target_norm) {
  require(k >= 1, ErrorKind::Input, "k must be >= 1");
  Rng rng(seed);
  ConceptTokenBlock block;
  block.concept_id = std::move(concept_id);
  block.rows = gaussian_matrix(rng, k + 1, dim, 1.0);
  align_rows(block.rows, target_norm);
  return block;
}

}  // namespace mcvlm
