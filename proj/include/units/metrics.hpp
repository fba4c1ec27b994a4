#pragma once

#include "units/core.hpp"

#include <span>
#include <vector>

namespace units {

double accuracy(std::span<const int> predicted, std::span<const int> truth);
/// Unweighted mean of per-class F1 over classes [0, num_classes).
double macro_f1(std::span<const int> predicted, std::span<const int> truth, int num_classes);

/// Adjusted Rand index; 1 for identical partitions up to relabeling.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);
/// Mutual information normalised by the arithmetic mean of the entropies.
double normalized_mutual_info(std::span<const int> a, std::span<const int> b);

template <typename DerivedA, typename DerivedB>
double mean_squared_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mean_squared_error: shape mismatch");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

template <typename DerivedA, typename DerivedB>
double mean_absolute_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mean_absolute_error: shape mismatch");
  return (a - b).cwiseAbs().sum() / static_cast<double>(a.size());
}

struct DetectionScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long true_positives = 0;
  long false_positives = 0;
  long false_negatives = 0;
};

/// Point-wise precision/recall/F1 of predicted flags against truth. Empty
/// denominators count as 0.
DetectionScores detection_scores(const BoolArray& predicted, const BoolArray& truth);
DetectionScores detection_scores(std::span<const BoolArray> predicted, std::span<const BoolArray> truth);

/// confusion(t, p) counts samples of true class t predicted as p.
Eigen::MatrixXi confusion_matrix(std::span<const int> predicted, std::span<const int> truth, int num_classes);

}  // namespace units
