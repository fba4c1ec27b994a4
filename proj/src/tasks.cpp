#include "units/tasks.hpp"

#include "units/losses.hpp"
#include "units/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace units {

namespace {

struct TaskName {
  TaskKind task;
  const char* name;
};

constexpr TaskName kTasks[] = {
    {TaskKind::classification, "classification"},
    {TaskKind::clustering, "clustering"},
    {TaskKind::forecasting, "forecasting"},
    {TaskKind::anomaly_detection, "anomaly_detection"},
    {TaskKind::imputation, "imputation"},
};

constexpr int kChunk = 64;

// Head output rows for K' inputs.
Eigen::Index head_outputs(const TaskSpec& spec, int channels, int length) {
  switch (spec.task) {
    case TaskKind::classification: return *spec.classes;
    case TaskKind::clustering: return 0;
    case TaskKind::forecasting: return static_cast<Eigen::Index>(channels) * *spec.horizon;
    case TaskKind::anomaly_detection: return static_cast<Eigen::Index>(channels) * length;
    case TaskKind::imputation: return channels;
  }
  return 0;
}

// D x L sample <-> 1 x (D*L) channel-major row.
RowVector flatten_row(const Matrix& x) {
  RowVector r(x.size());
  for (Eigen::Index d = 0; d < x.rows(); ++d) r.segment(d * x.cols(), x.cols()) = x.row(d);
  return r;
}

Matrix unflatten_row(const RowVector& r, Eigen::Index channels, Eigen::Index length) {
  Matrix x(channels, length);
  for (Eigen::Index d = 0; d < channels; ++d) x.row(d) = r.segment(d * length, length);
  return x;
}

// Everything of a TaskModel placed on one tape.
struct Bound {
  std::vector<Binding> encoders;
  std::vector<Binding> aux;
  Binding fusion;
  Binding head;
};

Bound bind_model(ad::Tape& tape, const TaskModel& m, bool training) {
  const TrainableGroups& g = m.spec.trainable;
  Bound b;
  for (const PretrainedInstance& inst : m.instances) {
    b.encoders.push_back(bind(tape, inst.encoder().parameters(), training && g.encoders));
    b.aux.push_back(bind(tape, inst.head(), training && g.encoders));
  }
  b.fusion = bind(tape, m.fusion.parameters(), training && g.fusion && m.fusion.learnable());
  b.head = bind(tape, m.head, training && g.head);
  return b;
}

// Fused representation of a batch: B x K' pooled, or (B*L) x K' per timestep.
ad::Var fused(const TaskModel& m, const Bound& b, ad::Tape& tape, const std::vector<const Matrix*>& batch, bool pooled) {
  const Eigen::Index len = batch.front()->cols();
  const ad::Var input = tape.constant(to_time_major(batch));
  std::vector<ad::Var> parts;
  for (std::size_t i = 0; i < m.instances.size(); ++i) {
    const ad::Var seq = m.instances[i].encoder().forward(b.encoders[i], input, len);
    parts.push_back(pooled ? ad::max_pool_blocks(seq, len) : seq);
  }
  return m.fusion.forward(b.fusion, parts);
}

void check_fitted(const TaskModel& m, TaskKind task, const char* op) {
  if (!m.fitted) throw StateError(std::string(op) + " called on an unfitted task model");
  if (m.spec.task != task)
    throw ParameterError(std::string(op) + " needs a " + to_string(task) + " model, got " + to_string(m.spec.task));
}

void check_data(const TaskModel& m, const TimeSeriesDataset& data, int min_length) {
  if (data.channels() != m.channels)
    throw ShapeError("data has " + std::to_string(data.channels()) + " channels, model expects " +
                     std::to_string(m.channels));
  if (data.length() < min_length)
    throw ShapeError("data has " + std::to_string(data.length()) + " timesteps, model needs " +
                     std::to_string(min_length));
}

// Normalised copies; cells listed in `missing` are re-zeroed afterwards.
std::vector<Matrix> prepared(const TaskModel& m, const TimeSeriesDataset& data, const MissingIndex* missing = nullptr) {
  std::vector<Matrix> xs;
  xs.reserve(data.samples().size());
  for (int i = 0; i < data.size(); ++i) {
    Matrix x = m.normalization.mode == NormalizationMode::none ? data.sample(i) : m.normalization.apply(data.sample(i));
    if (missing && !missing->positions.empty())
      for (const auto& [d, t] : missing->positions[static_cast<std::size_t>(i)]) x(d, t) = 0.0;
    xs.push_back(std::move(x));
  }
  return xs;
}

Matrix denormalized(const TaskModel& m, const Matrix& x) {
  return m.normalization.mode == NormalizationMode::none ? x : m.normalization.invert(x);
}

// Runs `body(batch ptrs)` over fixed-size chunks of xs, read-only.
template <typename Body>
void for_chunks(const std::vector<Matrix>& xs, Body&& body) {
  for (std::size_t start = 0; start < xs.size(); start += kChunk) {
    std::vector<const Matrix*> batch;
    for (std::size_t i = start; i < std::min(xs.size(), start + kChunk); ++i) batch.push_back(&xs[i]);
    body(start, batch);
  }
}

Matrix head_outputs_for(const TaskModel& m, const std::vector<Matrix>& xs, bool pooled) {
  Matrix out;
  for_chunks(xs, [&](std::size_t start, const std::vector<const Matrix*>& batch) {
    ad::Tape tape;
    const Bound b = bind_model(tape, m, false);
    const ad::Var z = fused(m, b, tape, batch, pooled);
    const Matrix y = affine(z, b.head[0], b.head[1]).value();
    const Eigen::Index per_sample = pooled ? 1 : xs.front().cols();
    if (out.size() == 0) out.resize(static_cast<Eigen::Index>(xs.size()) * per_sample, y.cols());
    out.middleRows(static_cast<Eigen::Index>(start) * per_sample, y.rows()) = y;
  });
  return out;
}

Matrix fused_of(const TaskModel& m, const std::vector<Matrix>& xs) {
  Matrix out(static_cast<Eigen::Index>(xs.size()), m.output_dim());
  for_chunks(xs, [&](std::size_t start, const std::vector<const Matrix*>& batch) {
    ad::Tape tape;
    const Bound b = bind_model(tape, m, false);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(batch.size())) =
        fused(m, b, tape, batch, true).value();
  });
  return out;
}

// x_hat of prepared samples, normalised space.
std::vector<Matrix> reconstruct_prepared(const TaskModel& m, const std::vector<Matrix>& xs) {
  const Eigen::Index d = m.channels, t = m.input_length;
  std::vector<Matrix> out;
  if (m.spec.task == TaskKind::anomaly_detection) {
    const Matrix rows = head_outputs_for(m, xs, true);
    for (Eigen::Index i = 0; i < rows.rows(); ++i) out.push_back(unflatten_row(rows.row(i), d, t));
  } else {
    const Matrix tm = head_outputs_for(m, xs, false);  // (N*T) x D
    for (std::size_t i = 0; i < xs.size(); ++i)
      out.push_back(tm.middleRows(static_cast<Eigen::Index>(i) * t, t).transpose());
  }
  return out;
}

Matrix scores_from(const TaskModel& m, const std::vector<Matrix>& raw) {
  std::vector<Matrix> xs;
  for (const Matrix& x : raw)
    xs.push_back(m.normalization.mode == NormalizationMode::none ? x : m.normalization.apply(x));
  const std::vector<Matrix> xh = reconstruct_prepared(m, xs);
  Matrix scores(static_cast<Eigen::Index>(raw.size()), m.input_length);
  for (std::size_t i = 0; i < raw.size(); ++i)
    scores.row(static_cast<Eigen::Index>(i)) =
        (denormalized(m, xh[i]) - raw[i]).cwiseAbs().colwise().mean();
  return scores;
}

ad::Var batch_objective(const TaskModel& m, const Bound& b, ad::Tape& tape, const TaskBatch& batch, Rng& rng) {
  if (batch.inputs.empty()) throw ParameterError("empty fine-tuning batch");
  const auto rows = static_cast<Eigen::Index>(batch.inputs.size());
  switch (m.spec.task) {
    case TaskKind::classification:
      if (batch.classes.size() != batch.inputs.size()) throw ShapeError("batch needs one class label per sample");
      return ad::softmax_cross_entropy(affine(fused(m, b, tape, batch.inputs, true), b.head[0], b.head[1]),
                                       batch.classes);
    case TaskKind::forecasting: {
      if (batch.targets.rows() != rows) throw ShapeError("batch needs one forecast target row per sample");
      const ad::Var pred = affine(fused(m, b, tape, batch.inputs, true), b.head[0], b.head[1]);
      return m.spec.forecast_loss == ForecastLoss::mae ? mae(pred, batch.targets) : mse(pred, batch.targets);
    }
    case TaskKind::anomaly_detection: {
      Matrix target(rows, static_cast<Eigen::Index>(m.channels) * m.input_length);
      for (Eigen::Index r = 0; r < rows; ++r) target.row(r) = flatten_row(*batch.inputs[static_cast<std::size_t>(r)]);
      return mse(affine(fused(m, b, tape, batch.inputs, true), b.head[0], b.head[1]), target);
    }
    case TaskKind::imputation: {
      std::vector<Matrix> masked;
      for (const Matrix* x : batch.inputs)
        masked.push_back(apply_mask(
            *x, sample_binary_mask(m.channels, m.input_length, m.spec.masking_rate, rng, MaskGeometry::iid)));
      std::vector<const Matrix*> masked_ptrs;
      for (const Matrix& x : masked) masked_ptrs.push_back(&x);
      return mse(affine(fused(m, b, tape, masked_ptrs, false), b.head[0], b.head[1]), to_time_major(batch.inputs));
    }
    case TaskKind::clustering: {
      if (batch.assignments.size() != batch.inputs.size()) throw ShapeError("batch needs one assignment per sample");
      std::vector<ad::Var> objectives;
      for (std::size_t i = 0; i < m.instances.size(); ++i)
        objectives.push_back(m.instances[i].objective(b.encoders[i], b.aux[i], batch.inputs, rng));
      const ad::Var pretrain = objectives.size() == 1 ? objectives.front() : ad::sum(ad::vstack(objectives));
      return cluster_fit_loss(pretrain,
                              centroid_penalty(fused(m, b, tape, batch.inputs, true), batch.centroids, batch.assignments),
                              m.spec.cluster_weight);
    }
  }
  throw ParameterError("unknown task");
}

struct Optimizers {
  std::vector<OptimizerState> encoders, aux;
  OptimizerState fusion, head;
};

Optimizers make_optimizers(const TaskModel& m) {
  Optimizers o;
  OptimizerState base;
  base.learning_rate = m.spec.learning_rate;
  o.encoders.assign(m.instances.size(), base);
  o.aux.assign(m.instances.size(), base);
  o.fusion = base;
  o.head = base;
  o.head.learning_rate = m.spec.head_learning_rate;
  return o;
}

void apply_steps(TaskModel& m, const Bound& b, Optimizers& o) {
  for (std::size_t i = 0; i < m.instances.size(); ++i) {
    if (b.encoders[i].trainable) gradient_step(m.instances[i].encoder().parameters(), gradients(b.encoders[i]), o.encoders[i]);
    if (b.aux[i].trainable && m.instances[i].head().size() > 0)
      gradient_step(m.instances[i].head(), gradients(b.aux[i]), o.aux[i]);
  }
  if (b.fusion.trainable) gradient_step(m.fusion.parameters(), gradients(b.fusion), o.fusion);
  if (b.head.trainable && m.head.size() > 0) gradient_step(m.head, gradients(b.head), o.head);
}

void round_trained(TaskModel& m) {
  const TrainableGroups& g = m.spec.trainable;
  for (PretrainedInstance& inst : m.instances) {
    if (!g.encoders) continue;
    inst.encoder().parameters().round_to_float();
    inst.head().round_to_float();
  }
  if (g.fusion && m.fusion.learnable()) m.fusion.parameters().round_to_float();
  if (g.head) m.head.round_to_float();
}

std::vector<int> checked_class_labels(const TaskModel& m, const TimeSeriesDataset& data,
                                      const std::optional<LabelSet>& labels) {
  if (!labels || !labels->class_labels)
    throw ParameterError("classification fine-tuning needs class labels");
  const std::vector<int>& y = *labels->class_labels;
  if (static_cast<int>(y.size()) != data.size())
    throw ParameterError("got " + std::to_string(y.size()) + " labels for " + std::to_string(data.size()) + " samples");
  for (int v : y)
    if (v < 0 || v >= *m.spec.classes)
      throw ParameterError("class label " + std::to_string(v) + " outside [0, " + std::to_string(*m.spec.classes) + ")");
  return y;
}

}  // namespace

std::string to_string(TaskKind task) {
  for (const auto& t : kTasks)
    if (t.task == task) return t.name;
  return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
  for (const auto& t : kTasks)
    if (name == t.name) return t.task;
  if (name == "anomaly") return TaskKind::anomaly_detection;
  throw ParameterError("unknown task '" + name +
                       "' (expected classification, clustering, forecasting, anomaly_detection or imputation)");
}

const std::vector<TaskKind>& all_task_kinds() {
  static const std::vector<TaskKind> all{TaskKind::classification, TaskKind::clustering, TaskKind::forecasting,
                                         TaskKind::anomaly_detection, TaskKind::imputation};
  return all;
}

TaskSpec TaskSpec::classification(int classes) {
  TaskSpec s;
  s.task = TaskKind::classification;
  s.classes = classes;
  return s;
}

TaskSpec TaskSpec::clustering(int clusters) {
  TaskSpec s;
  s.task = TaskKind::clustering;
  s.classes = clusters;
  s.epochs = 10;
  return s;
}

TaskSpec TaskSpec::forecasting(int horizon) {
  TaskSpec s;
  s.task = TaskKind::forecasting;
  s.horizon = horizon;
  return s;
}

TaskSpec TaskSpec::anomaly_detection() {
  TaskSpec s;
  s.task = TaskKind::anomaly_detection;
  return s;
}

TaskSpec TaskSpec::imputation() {
  TaskSpec s;
  s.task = TaskKind::imputation;
  return s;
}

void TaskSpec::validate() const {
  if (task == TaskKind::classification || task == TaskKind::clustering) {
    if (!classes) throw ParameterError(to_string(task) + " needs the class/cluster count C");
    require(*classes >= 1, "C must be >= 1");
    if (task == TaskKind::classification) require(*classes >= 2, "classification needs C >= 2");
  }
  if (task == TaskKind::forecasting) {
    if (!horizon) throw ParameterError("forecasting needs the horizon H");
    require(*horizon >= 1, "horizon H must be >= 1");
  }
  if (threshold.kind == ThresholdRule::Kind::quantile)
    require(threshold.value > 0.0 && threshold.value < 1.0, "threshold quantile q must lie in (0,1)");
  else
    require(std::isfinite(threshold.value) && threshold.value >= 0.0, "fixed threshold tau must be finite and >= 0");
  require(masking_rate >= 0.0 && masking_rate < 1.0, "imputation masking rate must lie in [0,1)");
  if (!(cluster_weight >= 0.0 && cluster_weight <= kMaxClusterWeight))
    throw ParameterError("cluster weight beta must lie in [0, 1000]");
  require(epochs >= 0, "epochs must be >= 0");
  require(batch_size >= 2, "batch size must be >= 2");
  require(learning_rate > 0.0 && head_learning_rate > 0.0, "learning rates must be > 0");
}

TaskModel make_task_model(std::vector<PretrainedInstance> instances, const FusionConfig& fusion, const TaskSpec& spec,
                          int channels, int length) {
  spec.validate();
  if (instances.empty()) throw ParameterError("a task model needs at least one encoder");
  require(channels >= 1 && length >= 1, "task data shape must be positive");
  TaskModel m;
  m.spec = spec;
  m.channels = channels;
  m.input_length = length;
  if (spec.task == TaskKind::forecasting) {
    if (*spec.horizon >= length)
      throw ParameterError("horizon H=" + std::to_string(*spec.horizon) + " must be < T=" + std::to_string(length));
    m.input_length = length - *spec.horizon;
  }
  std::vector<int> dims;
  for (const PretrainedInstance& inst : instances) {
    if (inst.encoder().config().input_dims != channels)
      throw ShapeError("encoder expects " + std::to_string(inst.encoder().config().input_dims) +
                       " channels, task data has " + std::to_string(channels));
    dims.push_back(inst.repr_dim());
  }
  m.instances = std::move(instances);
  m.fusion = FusionModel(fusion, dims);
  const Eigen::Index outputs = head_outputs(spec, channels, m.input_length);
  if (outputs > 0) {
    Rng rng(spec.seed ^ 0x5851f42d4c957f2dull);
    const int k = m.fusion.output_dim();
    m.head.add("head.weight", init_uniform(outputs, k, k, rng));
    m.head.add("head.bias", Matrix::Zero(1, outputs));
  }
  return m;
}

TaskModel make_scratch_model(const std::vector<PretrainTemplateConfig>& configs, const FusionConfig& fusion,
                             const TaskSpec& spec, int channels, int length) {
  std::vector<PretrainedInstance> instances;
  for (const PretrainTemplateConfig& c : configs) instances.push_back(make_instance(c));
  TaskModel m = make_task_model(std::move(instances), fusion, spec, channels, length);
  m.from_scratch = true;
  return m;
}

TaskModel fine_tune(TaskModel m, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels,
                    const FitObserver& observer) {
  m.spec.validate();
  if (!m.from_scratch)
    for (std::size_t i = 0; i < m.instances.size(); ++i)
      if (!m.instances[i].fitted())
        throw StateError("encoder " + std::to_string(i) + " is not pre-trained (use a from-scratch model)");
  if (data.channels() != m.channels) throw ShapeError("fine-tuning data channel count differs from the model");
  const TaskKind task = m.spec.task;
  const int full_length = task == TaskKind::forecasting ? m.input_length + *m.spec.horizon : m.input_length;
  if (data.length() != full_length)
    throw ShapeError("fine-tuning data has " + std::to_string(data.length()) + " timesteps, model was built for " +
                     std::to_string(full_length));
  std::vector<int> y;
  if (task == TaskKind::classification) y = checked_class_labels(m, data, labels);
  if (task == TaskKind::clustering && data.size() < *m.spec.classes)
    throw ParameterError("cluster count C exceeds the number of samples");

  if (m.spec.normalization != NormalizationMode::none) m.normalization = normalize(data, m.spec.normalization).second;
  const std::vector<Matrix> xs = prepared(m, data);
  std::vector<Matrix> inputs, targets;
  if (task == TaskKind::forecasting) {
    for (const Matrix& x : xs) {
      inputs.push_back(x.leftCols(m.input_length));
      targets.push_back(flatten_row(x.rightCols(*m.spec.horizon)));
    }
  }
  const std::vector<Matrix>& feed = task == TaskKind::forecasting ? inputs : xs;

  Rng rng(m.spec.seed);
  Optimizers opt = make_optimizers(m);
  m.history.clear();
  m.penalty_history.clear();
  const KMeansOptions km{10, 100, m.spec.seed};
  for (int epoch = 0; epoch < m.spec.epochs; ++epoch) {
    std::vector<int> assign;
    if (task == TaskKind::clustering) {
      const KMeansPenalty reg = kmeans_regularizer(fused_of(m, xs), *m.spec.classes, km);
      m.centroids = reg.centroids;
      m.penalty_history.push_back(reg.penalty);
      assign = reg.assignments;
    }
    double total = 0.0;
    int steps = 0;
    for (const std::vector<int>& idx : make_batches(data.size(), m.spec.batch_size, rng)) {
      TaskBatch batch;
      for (int i : idx) {
        const auto k = static_cast<std::size_t>(i);
        batch.inputs.push_back(&feed[k]);
        if (task == TaskKind::classification) batch.classes.push_back(y[k]);
        if (task == TaskKind::clustering) batch.assignments.push_back(assign[k]);
      }
      if (task == TaskKind::forecasting) {
        batch.targets.resize(static_cast<Eigen::Index>(idx.size()), targets.front().cols());
        for (std::size_t r = 0; r < idx.size(); ++r)
          batch.targets.row(static_cast<Eigen::Index>(r)) = targets[static_cast<std::size_t>(idx[r])];
      }
      if (task == TaskKind::clustering) batch.centroids = m.centroids;
      ad::Tape tape;
      const Bound b = bind_model(tape, m, true);
      const ad::Var loss = batch_objective(m, b, tape, batch, rng);
      const double value = loss.scalar();
      if (!std::isfinite(value))
        throw NumericError("non-finite fine-tuning loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps));
      tape.backward(loss);
      apply_steps(m, b, opt);
      if (observer) observer(epoch, steps, value);
      total += value;
      ++steps;
    }
    m.history.push_back(total / std::max(1, steps));
  }
  if (m.spec.epochs > 0) round_trained(m);
  m.fitted = true;

  if (task == TaskKind::anomaly_detection) {
    if (m.spec.threshold.kind == ThresholdRule::Kind::fixed) {
      m.threshold = m.spec.threshold.value;
    } else {
      const Matrix s = scores_from(m, data.samples());
      m.threshold = quantile(std::vector<double>(s.data(), s.data() + s.size()), m.spec.threshold.value);
    }
  }
  return m;
}

namespace {

std::vector<ParameterStore*> stores_of(TaskModel& m) {
  std::vector<ParameterStore*> out;
  for (PretrainedInstance& inst : m.instances) {
    out.push_back(&inst.encoder().parameters());
    out.push_back(&inst.head());
  }
  out.push_back(&m.fusion.parameters());
  out.push_back(&m.head);
  return out;
}

}  // namespace

Vector model_parameters(const TaskModel& model) {
  std::vector<Vector> parts;
  Eigen::Index n = 0;
  for (ParameterStore* s : stores_of(const_cast<TaskModel&>(model))) {
    parts.push_back(s->flatten());
    n += parts.back().size();
  }
  Vector out(n);
  Eigen::Index at = 0;
  for (const Vector& p : parts) {
    out.segment(at, p.size()) = p;
    at += p.size();
  }
  return out;
}

void set_model_parameters(TaskModel& model, const Vector& flat) {
  Eigen::Index need = 0;
  for (ParameterStore* s : stores_of(model)) need += s->total_size();
  if (flat.size() != need)
    throw ShapeError("expected " + std::to_string(need) + " parameters, got " + std::to_string(flat.size()));
  Eigen::Index at = 0;
  for (ParameterStore* s : stores_of(model)) {
    const Eigen::Index k = s->total_size();
    s->unflatten(flat.segment(at, k));
    at += k;
  }
}

LossAndGradient task_batch_loss(const TaskModel& model, const TaskBatch& batch, std::uint64_t seed) {
  Rng rng(seed);
  ad::Tape tape;
  const Bound b = bind_model(tape, model, true);
  const ad::Var loss = batch_objective(model, b, tape, batch, rng);
  tape.backward(loss);
  std::vector<Matrix> grads;
  auto append = [&grads](const Binding& binding) {
    for (Matrix& g : gradients(binding)) grads.push_back(std::move(g));
  };
  for (std::size_t i = 0; i < model.instances.size(); ++i) {
    append(b.encoders[i]);
    append(b.aux[i]);
  }
  append(b.fusion);
  append(b.head);
  Eigen::Index n = 0;
  for (const Matrix& g : grads) n += g.size();
  LossAndGradient out;
  out.loss = loss.scalar();
  out.gradient.resize(n);
  Eigen::Index at = 0;
  for (const Matrix& g : grads) {
    out.gradient.segment(at, g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
    at += g.size();
  }
  return out;
}

TaskModel impute_fit(TaskModel model, const TimeSeriesDataset& data, const FitObserver& observer) {
  if (model.spec.task != TaskKind::imputation) throw ParameterError("impute_fit needs an imputation task model");
  return fine_tune(std::move(model), data, std::nullopt, observer);
}

Matrix fused_representations(const TaskModel& model, const TimeSeriesDataset& data) {
  check_data(model, data, model.input_length);
  std::vector<Matrix> xs = prepared(model, data);
  if (data.length() != model.input_length)
    for (Matrix& x : xs) x = x.rightCols(model.input_length).eval();
  return fused_of(model, xs);
}

ClassPrediction classify_predict(const TaskModel& model, const TimeSeriesDataset& data) {
  check_fitted(model, TaskKind::classification, "classify_predict");
  check_data(model, data, model.input_length);
  const Matrix logits = head_outputs_for(model, prepared(model, data), true);
  ClassPrediction p;
  p.probabilities = softmax_rows(logits);
  p.labels = argmax_rows(logits);
  return p;
}

std::vector<int> cluster_predict(const TaskModel& model, const TimeSeriesDataset& data) {
  check_fitted(model, TaskKind::clustering, "cluster_predict");
  return kmeans(fused_representations(model, data), *model.spec.classes, {10, 100, model.spec.seed}).assignments;
}

ForecastPairs forecast_pairs(const TimeSeriesDataset& data, int horizon) {
  if (horizon < 1 || horizon >= data.length())
    throw ParameterError("horizon H=" + std::to_string(horizon) + " must lie in [1, T=" +
                         std::to_string(data.length()) + ")");
  ForecastPairs p;
  std::vector<Matrix> prefixes;
  for (const Matrix& x : data.samples()) {
    prefixes.push_back(x.leftCols(data.length() - horizon));
    p.targets.push_back(x.rightCols(horizon));
  }
  p.inputs = TimeSeriesDataset(std::move(prefixes), data.sample_ids(), data.channel_names(), data.sampling_meta());
  return p;
}

std::vector<Matrix> forecast_predict(const TaskModel& model, const TimeSeriesDataset& data) {
  check_fitted(model, TaskKind::forecasting, "forecast_predict");
  check_data(model, data, model.input_length);
  std::vector<Matrix> xs = prepared(model, data);
  for (Matrix& x : xs) x = x.rightCols(model.input_length).eval();
  const Matrix rows = head_outputs_for(model, xs, true);
  std::vector<Matrix> out;
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    out.push_back(denormalized(model, unflatten_row(rows.row(i), model.channels, *model.spec.horizon)));
  return out;
}

std::vector<Matrix> reconstruct(const TaskModel& model, const TimeSeriesDataset& data, const MissingIndex* missing) {
  if (!model.fitted) throw StateError("reconstruct called on an unfitted task model");
  if (model.spec.task != TaskKind::anomaly_detection && model.spec.task != TaskKind::imputation)
    throw ParameterError("reconstruct needs an anomaly_detection or imputation model");
  check_data(model, data, model.input_length);
  if (data.length() != model.input_length) throw ShapeError("reconstruction needs samples of the fitted length");
  if (missing) missing->validate(data.size(), data.channels(), data.length());
  std::vector<Matrix> xh = reconstruct_prepared(model, prepared(model, data, missing));
  for (Matrix& x : xh) x = denormalized(model, x);
  return xh;
}

AnomalyResult anomaly_scores(const TaskModel& model, const TimeSeriesDataset& data) {
  check_fitted(model, TaskKind::anomaly_detection, "anomaly_scores");
  check_data(model, data, model.input_length);
  if (data.length() != model.input_length) throw ShapeError("anomaly scoring needs samples of the fitted length");
  AnomalyResult r;
  r.scores = scores_from(model, data.samples());
  r.flags = BoolArray::Constant(r.scores.rows(), r.scores.cols(), false);
  return r;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ParameterError("quantile of an empty calibration set");
  require(q >= 0.0 && q <= 1.0, "quantile q must lie in [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return values[lo] + w * (values[hi] - values[lo]);
}

AnomalyResult anomaly_decide(const Matrix& scores, const ThresholdRule& rule, const std::vector<double>& calibration) {
  AnomalyResult r;
  r.scores = scores;
  if (rule.kind == ThresholdRule::Kind::fixed) {
    r.tau = rule.value;
  } else {
    if (calibration.empty()) throw ParameterError("quantile threshold needs calibration scores");
    require(rule.value > 0.0 && rule.value < 1.0, "threshold quantile q must lie in (0,1)");
    r.tau = quantile(calibration, rule.value);
  }
  r.flags = scores.array() > r.tau;
  return r;
}

AnomalyResult anomaly_detect(const TaskModel& model, const TimeSeriesDataset& data) {
  AnomalyResult r = anomaly_scores(model, data);
  r.tau = model.threshold;
  r.flags = r.scores.array() > r.tau;
  return r;
}

RowVector score_long_series(const TaskModel& model, const Matrix& series, int stride) {
  check_fitted(model, TaskKind::anomaly_detection, "score_long_series");
  require(stride >= 1, "stride must be >= 1");
  const int w = model.input_length;
  const auto len = static_cast<int>(series.cols());
  if (series.rows() != model.channels) throw ShapeError("series channel count differs from the model");
  if (len < w) throw ShapeError("series shorter than the model window");
  std::vector<int> starts;
  for (int s = 0; s + w <= len; s += stride) starts.push_back(s);
  if (starts.back() + w < len) starts.push_back(len - w);
  std::vector<Matrix> windows;
  for (int s : starts) windows.push_back(series.middleCols(s, w));
  const Matrix scores = scores_from(model, windows);
  RowVector total = RowVector::Zero(len), count = RowVector::Zero(len);
  for (std::size_t k = 0; k < starts.size(); ++k) {
    total.segment(starts[k], w) += scores.row(static_cast<Eigen::Index>(k));
    count.segment(starts[k], w).array() += 1.0;
  }
  return total.cwiseQuotient(count);
}

ImputationResult impute_predict(const TaskModel& model, const TimeSeriesDataset& data, const MissingIndex& missing) {
  check_fitted(model, TaskKind::imputation, "impute_predict");
  if (!missing.positions.empty() && static_cast<int>(missing.positions.size()) != data.size())
    throw ParameterError("missing index covers " + std::to_string(missing.positions.size()) + " samples, data has " +
                         std::to_string(data.size()));
  missing.validate(data.size(), data.channels(), data.length());
  ImputationResult r;
  if (missing.count() == 0) {
    r.completed = data;
    return r;
  }
  const std::vector<Matrix> xh = reconstruct(model, data, &missing);
  std::vector<Matrix> out = data.samples();
  for (std::size_t i = 0; i < missing.positions.size(); ++i)
    for (const auto& [d, t] : missing.positions[i]) {
      out[i](d, t) = xh[i](d, t);
      r.imputed.push_back(xh[i](d, t));
    }
  r.completed = TimeSeriesDataset(std::move(out), data.sample_ids(), data.channel_names(), data.sampling_meta());
  return r;
}

MetricMap evaluate(const TaskModel& model, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels) {
  if (!model.fitted) throw StateError("evaluate called on an unfitted task model");
  MetricMap out;
  out["samples"] = data.size();
  switch (model.spec.task) {
    case TaskKind::classification: {
      if (!labels || !labels->class_labels) throw ParameterError("classification evaluation needs class labels");
      const ClassPrediction p = classify_predict(model, data);
      out["accuracy"] = accuracy(p.labels, *labels->class_labels);
      out["macro_f1"] = macro_f1(p.labels, *labels->class_labels, *model.spec.classes);
      break;
    }
    case TaskKind::clustering: {
      const std::vector<int> a = cluster_predict(model, data);
      out["penalty"] = kmeans_regularizer(fused_representations(model, data), *model.spec.classes,
                                          {10, 100, model.spec.seed})
                           .penalty;
      if (labels && labels->class_labels) {
        out["ari"] = adjusted_rand_index(a, *labels->class_labels);
        out["nmi"] = normalized_mutual_info(a, *labels->class_labels);
      }
      break;
    }
    case TaskKind::forecasting: {
      const ForecastPairs pairs = forecast_pairs(data, *model.spec.horizon);
      const std::vector<Matrix> pred = forecast_predict(model, pairs.inputs);
      double se = 0.0, ae = 0.0;
      Eigen::Index cells = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        se += (pred[i] - pairs.targets[i]).squaredNorm();
        ae += (pred[i] - pairs.targets[i]).cwiseAbs().sum();
        cells += pred[i].size();
      }
      out["mse"] = se / static_cast<double>(cells);
      out["mae"] = ae / static_cast<double>(cells);
      break;
    }
    case TaskKind::anomaly_detection: {
      if (!labels || !labels->anomaly_flags) throw ParameterError("anomaly evaluation needs anomaly flags");
      const AnomalyResult r = anomaly_detect(model, data);
      std::vector<BoolArray> predicted, truth;
      for (Eigen::Index i = 0; i < r.flags.rows(); ++i) {
        predicted.push_back(r.flags.row(i));
        const BoolArray& f = (*labels->anomaly_flags)[static_cast<std::size_t>(i)];
        truth.push_back(f.rows() == 1 ? f : BoolArray(f.colwise().any()));
      }
      const DetectionScores s = detection_scores(predicted, truth);
      out["precision"] = s.precision;
      out["recall"] = s.recall;
      out["f1"] = s.f1;
      out["tau"] = r.tau;
      break;
    }
    case TaskKind::imputation: {
      if (!labels || !labels->missing_targets) throw ParameterError("imputation evaluation needs missing targets");
      MissingIndex missing;
      missing.positions.resize(static_cast<std::size_t>(data.size()));
      std::vector<std::vector<double>> truth(static_cast<std::size_t>(data.size()));
      for (const MissingTarget& t : *labels->missing_targets) {
        if (t.sample < 0 || t.sample >= data.size()) throw ParameterError("missing target sample out of range");
        missing.positions[static_cast<std::size_t>(t.sample)].emplace_back(t.channel, t.timestep);
        truth[static_cast<std::size_t>(t.sample)].push_back(t.value);
      }
      const ImputationResult r = impute_predict(model, data, missing);
      double se = 0.0, ae = 0.0;
      std::size_t k = 0;
      for (const std::vector<double>& values : truth)
        for (double v : values) {
          se += (r.imputed[k] - v) * (r.imputed[k] - v);
          ae += std::abs(r.imputed[k] - v);
          ++k;
        }
      const double n = static_cast<double>(std::max<std::size_t>(1, k));
      out["mse"] = se / n;
      out["mae"] = ae / n;
      break;
    }
  }
  return out;
}

}  // namespace units
