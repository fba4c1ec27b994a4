#pragma once

#include "units/cluster.hpp"
#include "units/data.hpp"
#include "units/fusion.hpp"
#include "units/pretrain.hpp"

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace units {

enum class TaskKind { classification, clustering, forecasting, anomaly_detection, imputation };

std::string to_string(TaskKind task);
TaskKind parse_task_kind(const std::string& name);
const std::vector<TaskKind>& all_task_kinds();

enum class ForecastLoss { mse, mae };

struct ThresholdRule {
  enum class Kind { fixed, quantile };
  Kind kind = Kind::quantile;
  /// tau for fixed, q for quantile.
  double value = 0.99;

  static ThresholdRule fixed(double tau) { return {Kind::fixed, tau}; }
  static ThresholdRule quantile(double q) { return {Kind::quantile, q}; }
};

struct TrainableGroups {
  bool encoders = true;
  bool fusion = true;
  bool head = true;
};

struct TaskSpec {
  TaskKind task = TaskKind::classification;
  /// C for classification and clustering.
  std::optional<int> classes;
  /// H for forecasting.
  std::optional<int> horizon;
  ForecastLoss forecast_loss = ForecastLoss::mse;
  ThresholdRule threshold;
  /// Fraction of cells hidden per step when fitting the imputation DAE.
  double masking_rate = 0.2;
  /// beta, the k-means penalty weight in clustering fine-tuning.
  double cluster_weight = 0.1;
  int epochs = 20;
  int batch_size = 16;
  /// Encoders and fusion.
  double learning_rate = 1e-4;
  /// Freshly initialised task head.
  double head_learning_rate = 1e-3;
  TrainableGroups trainable;
  /// Fitted on the fine-tuning data, applied at every later predict call.
  NormalizationMode normalization = NormalizationMode::none;
  std::uint64_t seed = 0;

  static TaskSpec classification(int classes);
  static TaskSpec clustering(int clusters);
  static TaskSpec forecasting(int horizon);
  static TaskSpec anomaly_detection();
  static TaskSpec imputation();

  void validate() const;
};

/// f_T = g_T . fusion . (h_1..h_M). The instances are private copies, so
/// fine-tuning never touches the encoders they were made from.
struct TaskModel {
  std::vector<PretrainedInstance> instances;
  FusionModel fusion;
  /// g_T: "head.weight" / "head.bias"; empty for clustering.
  ParameterStore head;
  TaskSpec spec;
  int channels = 0;
  /// Timesteps the encoders read: T, or T - H for forecasting.
  int input_length = 0;
  NormalizationStats normalization;
  bool from_scratch = false;
  bool fitted = false;
  /// Anomaly threshold fixed at fit time.
  double threshold = std::numeric_limits<double>::infinity();
  /// Clustering: centroids of the last epoch's k-means run.
  Matrix centroids;
  std::vector<double> history;
  std::vector<double> penalty_history;

  int output_dim() const { return fusion.output_dim(); }
};

/// Wraps pre-trained instances (copied) with a fresh fusion model and head.
/// `length` is the sample length T of the task data.
TaskModel make_task_model(std::vector<PretrainedInstance> instances, const FusionConfig& fusion, const TaskSpec& spec,
                          int channels, int length);

/// Baseline arm: the same architecture, every encoder randomly initialised.
TaskModel make_scratch_model(const std::vector<PretrainTemplateConfig>& configs, const FusionConfig& fusion,
                             const TaskSpec& spec, int channels, int length);

/// Minimises the task loss for spec.epochs epochs over the trainable groups.
/// Deterministic given spec.seed. Labels are required for classification.
TaskModel fine_tune(TaskModel model, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels = std::nullopt,
                    const FitObserver& observer = {});

/// Self-supervised DAE fit for imputation (spec.task must be imputation).
TaskModel impute_fit(TaskModel model, const TimeSeriesDataset& data, const FitObserver& observer = {});

/// z'_i for every sample: N x K'.
Matrix fused_representations(const TaskModel& model, const TimeSeriesDataset& data);

/// One fine-tuning minibatch. Only the fields of the model's task are read:
/// classes (classification), targets B x (D*H) (forecasting), centroids and
/// assignments (clustering).
struct TaskBatch {
  std::vector<const Matrix*> inputs;
  std::vector<int> classes;
  Matrix targets;
  Matrix centroids;
  std::vector<int> assignments;
};

struct LossAndGradient {
  double loss = 0.0;
  /// Aligned with model_parameters(); zero for frozen groups.
  Vector gradient;
};

/// The fine-tuning objective of one batch. Random masks and negatives are
/// drawn from a generator seeded with `seed`.
LossAndGradient task_batch_loss(const TaskModel& model, const TaskBatch& batch, std::uint64_t seed);

/// Every parameter, flat: per instance encoder then auxiliary head, fusion, task head.
Vector model_parameters(const TaskModel& model);
void set_model_parameters(TaskModel& model, const Vector& flat);

// ---------------------------------------------------------------------------
// Classification

template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const VectorX<Scalar> mx = logits.rowwise().maxCoeff();
  MatrixX<Scalar> e = (logits.colwise() - mx).array().exp().matrix();
  const VectorX<Scalar> s = e.rowwise().sum();
  return s.cwiseInverse().asDiagonal() * e;
}

/// Index of the largest entry of each row, ties to the lowest index.
template <typename Derived>
std::vector<int> argmax_rows(const Eigen::MatrixBase<Derived>& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c)
      if (m(r, c) > m(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

struct ClassPrediction {
  std::vector<int> labels;
  Matrix probabilities;  // N x C, rows sum to 1
};

ClassPrediction classify_predict(const TaskModel& model, const TimeSeriesDataset& data);

// ---------------------------------------------------------------------------
// Clustering

/// k-means assignments in [0, C) on the fused representations.
std::vector<int> cluster_predict(const TaskModel& model, const TimeSeriesDataset& data);

// ---------------------------------------------------------------------------
// Forecasting

struct ForecastPairs {
  TimeSeriesDataset inputs;     // first T - H steps
  std::vector<Matrix> targets;  // last H steps, D x H each
};

ForecastPairs forecast_pairs(const TimeSeriesDataset& data, int horizon);

/// The H steps following the last model.input_length observations of each
/// sample: N matrices of D x H.
std::vector<Matrix> forecast_predict(const TaskModel& model, const TimeSeriesDataset& data);

// ---------------------------------------------------------------------------
// Reconstruction: anomaly detection and imputation

/// x_hat for every sample, D x T each.
std::vector<Matrix> reconstruct(const TaskModel& model, const TimeSeriesDataset& data,
                                const MissingIndex* missing = nullptr);

struct AnomalyResult {
  Matrix scores;    // N x T, nonnegative
  BoolArray flags;  // N x T, flags == (scores > tau)
  double tau = std::numeric_limits<double>::infinity();
};

/// Channel-mean absolute reconstruction error per timestep. No threshold is
/// applied (tau = +inf, all flags clear).
AnomalyResult anomaly_scores(const TaskModel& model, const TimeSeriesDataset& data);

/// Linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);

/// Flags scores > tau. The quantile rule takes tau from `calibration`.
AnomalyResult anomaly_decide(const Matrix& scores, const ThresholdRule& rule,
                             const std::vector<double>& calibration = {});

/// Scores with the threshold fixed at fit time.
AnomalyResult anomaly_detect(const TaskModel& model, const TimeSeriesDataset& data);

/// Per-timestep scores of one long D x L recording: windows of the model's
/// length every `stride` steps (plus one flush with the end), averaged where
/// they overlap.
RowVector score_long_series(const TaskModel& model, const Matrix& series, int stride);

struct ImputationResult {
  TimeSeriesDataset completed;
  /// One value per missing position, in MissingIndex order.
  std::vector<double> imputed;
};

/// Missing cells take x_hat, every other cell passes through unchanged.
ImputationResult impute_predict(const TaskModel& model, const TimeSeriesDataset& data, const MissingIndex& missing);

// ---------------------------------------------------------------------------
// Evaluation

using MetricMap = std::map<std::string, double>;

/// Task metrics: accuracy/macro_f1, ari/nmi, mse/mae, precision/recall/f1.
/// Labels follow the task: class labels, anomaly flags, or missing targets
/// (imputation); forecasting and clustering-without-labels need none.
MetricMap evaluate(const TaskModel& model, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels);

}  // namespace units
