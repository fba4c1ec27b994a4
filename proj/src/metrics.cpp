#include "units/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace units {

namespace {

void check_same_size(std::size_t a, std::size_t b) {
  if (a != b) throw ShapeError("label vectors differ in length (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  if (a == 0) throw ParameterError("metrics need at least one sample");
}

// Contingency table over the distinct labels of a and b.
Eigen::MatrixXd contingency(std::span<const int> a, std::span<const int> b) {
  std::map<int, int> ia, ib;
  for (int v : a) ia.emplace(v, 0);
  for (int v : b) ib.emplace(v, 0);
  int k = 0;
  for (auto& [v, idx] : ia) idx = k++;
  k = 0;
  for (auto& [v, idx] : ib) idx = k++;
  Eigen::MatrixXd table = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ia.size()), static_cast<Eigen::Index>(ib.size()));
  for (std::size_t i = 0; i < a.size(); ++i) table(ia[a[i]], ib[b[i]]) += 1.0;
  return table;
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

double entropy(const Eigen::VectorXd& counts, double n) {
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / n) * std::log(c / n);
  return h;
}

}  // namespace

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  check_same_size(predicted.size(), truth.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

Eigen::MatrixXi confusion_matrix(std::span<const int> predicted, std::span<const int> truth, int num_classes) {
  check_same_size(predicted.size(), truth.size());
  require(num_classes >= 1, "confusion matrix needs at least one class");
  Eigen::MatrixXi m = Eigen::MatrixXi::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes)
      throw ParameterError("label outside [0, " + std::to_string(num_classes) + ")");
    ++m(truth[i], predicted[i]);
  }
  return m;
}

double macro_f1(std::span<const int> predicted, std::span<const int> truth, int num_classes) {
  const Eigen::MatrixXi m = confusion_matrix(predicted, truth, num_classes);
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    const double tp = m(c, c);
    const double fp = m.col(c).sum() - tp;
    const double fn = m.row(c).sum() - tp;
    total += tp == 0.0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  }
  return total / num_classes;
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  check_same_size(a.size(), b.size());
  const Eigen::MatrixXd t = contingency(a, b);
  const double n = static_cast<double>(a.size());
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) sum_ij += choose2(t.data()[i]);
  for (Eigen::Index i = 0; i < t.rows(); ++i) sum_a += choose2(t.row(i).sum());
  for (Eigen::Index j = 0; j < t.cols(); ++j) sum_b += choose2(t.col(j).sum());
  const double expected = sum_a * sum_b / choose2(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (sum_ij - expected) / (max_index - expected);
}

double normalized_mutual_info(std::span<const int> a, std::span<const int> b) {
  check_same_size(a.size(), b.size());
  const Eigen::MatrixXd t = contingency(a, b);
  const double n = static_cast<double>(a.size());
  const Eigen::VectorXd ra = t.rowwise().sum(), cb = t.colwise().sum().transpose();
  double mi = 0.0;
  for (Eigen::Index i = 0; i < t.rows(); ++i)
    for (Eigen::Index j = 0; j < t.cols(); ++j)
      if (t(i, j) > 0.0) mi += (t(i, j) / n) * std::log(n * t(i, j) / (ra(i) * cb(j)));
  const double ha = entropy(ra, n), hb = entropy(cb, n);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

DetectionScores detection_scores(std::span<const BoolArray> predicted, std::span<const BoolArray> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("flag sets differ in sample count");
  DetectionScores s;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const BoolArray& p = predicted[i];
    const BoolArray& t = truth[i];
    if (p.rows() != t.rows() || p.cols() != t.cols()) throw ShapeError("flag arrays differ in shape");
    s.true_positives += (p && t).count();
    s.false_positives += (p && !t).count();
    s.false_negatives += (!p && t).count();
  }
  const double tp = static_cast<double>(s.true_positives);
  s.precision = tp + s.false_positives > 0 ? tp / (tp + s.false_positives) : 0.0;
  s.recall = tp + s.false_negatives > 0 ? tp / (tp + s.false_negatives) : 0.0;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

DetectionScores detection_scores(const BoolArray& predicted, const BoolArray& truth) {
  return detection_scores(std::span<const BoolArray>(&predicted, 1), std::span<const BoolArray>(&truth, 1));
}

}  // namespace units
