#pragma once

#include "units/autograd.hpp"
#include "units/core.hpp"

#include <cstdint>
#include <vector>

namespace units {

struct KMeansOptions {
  int restarts = 10;
  int max_iterations = 100;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Matrix centroids;              // C x K
  std::vector<int> assignments;  // nearest centroid, ties to the lowest index
  double inertia = 0.0;          // sum of squared distances
};

/// Lloyd iterations from k-means++ seeds; the restart with the lowest inertia
/// wins. Empty clusters are re-seeded at the farthest point.
KMeansResult kmeans(const Matrix& points, int clusters, const KMeansOptions& options = {});

struct KMeansPenalty {
  double penalty = 0.0;  // sum_i ||z_i - c_a(i)||
  Matrix centroids;
  std::vector<int> assignments;
};

KMeansPenalty kmeans_regularizer(const Matrix& reprs, int clusters, const KMeansOptions& options = {});

/// Upper bound on beta: larger weights would drown the pre-training term.
inline constexpr double kMaxClusterWeight = 1e3;

/// pretrain_loss + beta * penalty.
double cluster_fit_loss(double pretrain_loss, double penalty, double beta);
ad::Var cluster_fit_loss(ad::Var pretrain_loss, ad::Var penalty, double beta);

/// sum_i ||z_i - c_a(i)|| on the tape, centroids held constant.
ad::Var centroid_penalty(ad::Var reprs, const Matrix& centroids, const std::vector<int>& assignments);

/// Nearest centroid per row, ties to the lowest index.
std::vector<int> assign_to_centroids(const Matrix& points, const Matrix& centroids);

}  // namespace units
