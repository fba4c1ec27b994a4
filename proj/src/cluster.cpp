#include "units/cluster.hpp"

#include <limits>
#include <random>

namespace units {

namespace {

Vector squared_distances(const Matrix& points, const Matrix& centroids, std::vector<int>& nearest) {
  const Eigen::Index n = points.rows();
  Vector best(n);
  nearest.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double d_best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < d_best) {
        d_best = d;
        nearest[static_cast<std::size_t>(i)] = static_cast<int>(c);
      }
    }
    best(i) = d_best;
  }
  return best;
}

Matrix plus_plus_seeds(const Matrix& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Matrix centroids(k, points.cols());
  centroids.row(0) = points.row(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
  Vector d2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2(pick);
        if (u < 0.0) break;
      }
    } else {
      pick = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    }
    centroids.row(c) = points.row(pick);
    d2 = d2.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }
  return centroids;
}

KMeansResult lloyd(const Matrix& points, Matrix centroids, int max_iterations) {
  const int k = static_cast<int>(centroids.rows());
  KMeansResult r;
  Vector d2 = squared_distances(points, centroids, r.assignments);
  for (int it = 0; it < max_iterations; ++it) {
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      sums.row(r.assignments[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(r.assignments[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      } else {
        Eigen::Index far = 0;
        d2.maxCoeff(&far);
        centroids.row(c) = points.row(far);
        d2(far) = 0.0;
      }
    }
    const std::vector<int> previous = r.assignments;
    d2 = squared_distances(points, centroids, r.assignments);
    if (r.assignments == previous) break;
  }
  r.centroids = std::move(centroids);
  r.inertia = d2.sum();
  return r;
}

}  // namespace

std::vector<int> assign_to_centroids(const Matrix& points, const Matrix& centroids) {
  if (points.cols() != centroids.cols()) throw ShapeError("points and centroids differ in dimension");
  std::vector<int> nearest;
  squared_distances(points, centroids, nearest);
  return nearest;
}

KMeansResult kmeans(const Matrix& points, int clusters, const KMeansOptions& options) {
  require(clusters >= 1, "cluster count must be >= 1");
  if (clusters > points.rows())
    throw ParameterError("cluster count " + std::to_string(clusters) + " exceeds sample count " +
                         std::to_string(points.rows()));
  require(options.restarts >= 1 && options.max_iterations >= 1, "k-means needs restarts and iterations >= 1");
  Rng rng(options.seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < options.restarts; ++r) {
    KMeansResult run = lloyd(points, plus_plus_seeds(points, clusters, rng), options.max_iterations);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

KMeansPenalty kmeans_regularizer(const Matrix& reprs, int clusters, const KMeansOptions& options) {
  KMeansResult km = kmeans(reprs, clusters, options);
  KMeansPenalty out;
  for (Eigen::Index i = 0; i < reprs.rows(); ++i)
    out.penalty += (reprs.row(i) - km.centroids.row(km.assignments[static_cast<std::size_t>(i)])).norm();
  out.centroids = std::move(km.centroids);
  out.assignments = std::move(km.assignments);
  return out;
}

double cluster_fit_loss(double pretrain_loss, double penalty, double beta) {
  if (!(beta >= 0.0 && beta <= kMaxClusterWeight))
    throw ParameterError("cluster weight beta must lie in [0, 1000]");
  return pretrain_loss + beta * penalty;
}

ad::Var cluster_fit_loss(ad::Var pretrain_loss, ad::Var penalty, double beta) {
  if (!(beta >= 0.0 && beta <= kMaxClusterWeight))
    throw ParameterError("cluster weight beta must lie in [0, 1000]");
  return ad::add(pretrain_loss, ad::scale(penalty, beta));
}

ad::Var centroid_penalty(ad::Var reprs, const Matrix& centroids, const std::vector<int>& assignments) {
  if (static_cast<Eigen::Index>(assignments.size()) != reprs.rows())
    throw ShapeError("one assignment per representation row expected");
  Matrix targets(reprs.rows(), reprs.cols());
  for (Eigen::Index i = 0; i < reprs.rows(); ++i) targets.row(i) = centroids.row(assignments[static_cast<std::size_t>(i)]);
  return ad::sum(ad::row_norms(ad::sub(reprs, reprs.tape().constant(targets))));
}

}  // namespace units
