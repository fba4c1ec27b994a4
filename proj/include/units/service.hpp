#pragma once

#include "units/serialize.hpp"
#include "units/tasks.hpp"

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace units {

struct MetricPoint {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;
  double wall_seconds = 0.0;
};

/// Append-only, single writer. Readers never block: points live in fixed
/// chunks and become visible when the published size covers them.
class MetricLog {
 public:
  static constexpr std::size_t kChunk = 1024;
  static constexpr std::size_t kMaxChunks = 4096;

  MetricLog() = default;
  MetricLog(const MetricLog&) = delete;
  MetricLog& operator=(const MetricLog&) = delete;
  ~MetricLog();

  /// Throws StateError unless point.step exceeds the last step.
  void append(const MetricPoint& point);
  std::size_t size() const { return size_.load(std::memory_order_acquire); }
  /// Points with index >= since.
  std::vector<MetricPoint> snapshot(std::size_t since = 0) const;

 private:
  using Chunk = std::array<MetricPoint, kChunk>;
  std::array<std::atomic<Chunk*>, kMaxChunks> chunks_{};
  std::atomic<std::size_t> size_{0};
  long last_step_ = -1;
};

enum class RunKind { pretrain, finetune };
enum class RunStatus { running, succeeded, failed };

std::string to_string(RunKind kind);
std::string to_string(RunStatus status);

class Run {
 public:
  Run(std::string id, RunKind kind, Json config);

  const std::string& id() const { return id_; }
  RunKind kind() const { return kind_; }
  const Json& config() const { return config_; }
  RunStatus status() const { return status_.load(std::memory_order_acquire); }
  MetricLog& metrics() { return metrics_; }
  const MetricLog& metrics() const { return metrics_; }
  double elapsed() const;

  /// running -> succeeded. Throws StateError from any other status.
  void succeed(std::vector<std::string> encoder_ids, std::vector<std::string> model_ids);
  /// running -> failed.
  void fail(std::string error);

  std::vector<std::string> encoder_ids() const;
  std::vector<std::string> model_ids() const;
  std::string error() const;
  /// Status, config, artifacts and metric count; metrics themselves are
  /// served separately.
  Json summary() const;
  /// Blocks until the run leaves `running`.
  void wait() const;

 private:
  std::string id_;
  RunKind kind_;
  Json config_;
  std::chrono::steady_clock::time_point start_;
  std::atomic<RunStatus> status_{RunStatus::running};
  MetricLog metrics_;
  mutable std::mutex mu_;
  mutable std::condition_variable done_;
  std::vector<std::string> encoder_ids_;
  std::vector<std::string> model_ids_;
  std::string error_;
};

struct EncoderEntry {
  std::string id;
  std::string run_id;
  TemplateFamily family;
  int input_dims = 0;
  int repr_dim = 0;
  std::uint64_t checksum = 0;
};

Json to_json(const EncoderEntry& e);

/// Datasets, encoders, task models and runs. With a root directory every
/// artifact is also written to a content-addressed store:
///   datasets/<id>.uts + <id>.json, encoders/<id>.json, models/<id>.json,
///   runs/<id>.json
/// and reloaded on construction. Ids carry the first 16 hex digits of the
/// SHA-256 of the stored bytes.
class Registry {
 public:
  Registry() = default;
  explicit Registry(std::filesystem::path root);

  const std::optional<std::filesystem::path>& root() const { return root_; }

  std::string put_dataset(LoadedDataset data, const std::string& name = {});
  std::shared_ptr<const LoadedDataset> dataset(const std::string& id) const;
  std::vector<std::string> dataset_ids() const;

  std::string put_encoder(PretrainedInstance instance, const std::string& run_id);
  std::shared_ptr<const PretrainedInstance> encoder(const std::string& id) const;
  std::vector<EncoderEntry> encoders() const;
  /// Checksum of the parameters as stored now.
  std::uint64_t encoder_checksum(const std::string& id) const;

  std::string put_model(TaskModel model, const std::string& run_id);
  std::shared_ptr<const TaskModel> model(const std::string& id) const;
  std::vector<std::string> model_ids() const;

  std::shared_ptr<Run> create_run(RunKind kind, Json config);
  std::shared_ptr<Run> run(const std::string& id) const;
  std::vector<std::shared_ptr<Run>> runs() const;
  /// Writes the finished run's record (with its metrics) to the store.
  void persist_run(const Run& run) const;

 private:
  struct EncoderSlot {
    EncoderEntry entry;
    std::shared_ptr<const PretrainedInstance> instance;
  };
  void load();
  void write_file(const std::filesystem::path& rel, const std::string& bytes) const;

  std::optional<std::filesystem::path> root_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const LoadedDataset>> datasets_;
  std::map<std::string, EncoderSlot> encoders_;
  std::map<std::string, std::shared_ptr<const TaskModel>> models_;
  std::map<std::string, std::shared_ptr<Run>> runs_;
  long run_counter_ = 0;
};

// ---------------------------------------------------------------------------
// Runs

/// Runs jobs on a fixed number of threads.
class WorkerPool {
 public:
  explicit WorkerPool(int workers = 2);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  void submit(std::function<void()> job);
  void wait_idle();
  int workers() const { return static_cast<int>(threads_.size()); }

 private:
  std::vector<std::thread> threads_;
  std::deque<std::function<void()>> queue_;
  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable idle_;
  int busy_ = 0;
  bool stop_ = false;
};

struct FinetuneRequest {
  std::vector<std::string> encoder_ids;
  FusionConfig fusion;
  TaskSpec spec;
  std::string dataset_id;
  /// Dataset whose labels are used; defaults to the training dataset's own.
  std::optional<std::string> labels_id;
  /// Baseline arm: random encoders built from `scratch_templates` (defaults of
  /// every family when empty); encoder_ids must then be empty.
  bool from_scratch = false;
  std::vector<PretrainTemplateConfig> scratch_templates;
};

Json to_json(const FinetuneRequest& r);
FinetuneRequest finetune_request_from_json(const Json& j);

struct FinetuneHandle {
  std::string run_id;
  /// Set once the run succeeds.
  std::string model_id;
};

/// Validates a pre-training request and creates one run per config without
/// executing it. Empty configs raise ParameterError, an unknown dataset
/// NotFoundError.
std::vector<std::shared_ptr<Run>> plan_pretrain(Registry& registry, const std::vector<PretrainTemplateConfig>& configs,
                                                const std::string& dataset_id);
/// Fits one planned run. On failure the run is marked failed and nothing is
/// added to the registry.
void execute_pretrain(Registry& registry, Run& run, const PretrainTemplateConfig& config, const std::string& dataset_id);

/// Plans and executes synchronously; returns the run ids.
std::vector<std::string> run_pretrain(Registry& registry, const std::vector<PretrainTemplateConfig>& configs,
                                      const std::string& dataset_id);

/// Checks encoders, dataset and label requirements, then creates the run.
std::shared_ptr<Run> plan_finetune(Registry& registry, const FinetuneRequest& request);
/// Returns the registered model id, or empty when the run failed.
std::string execute_finetune(Registry& registry, Run& run, const FinetuneRequest& request);
FinetuneHandle run_finetune(Registry& registry, const FinetuneRequest& request);

/// Asynchronous front end over a WorkerPool.
class Service {
 public:
  explicit Service(Registry& registry, int workers = 2);

  Registry& registry() { return registry_; }
  std::vector<std::string> submit_pretrain(const std::vector<PretrainTemplateConfig>& configs,
                                           const std::string& dataset_id);
  std::string submit_finetune(const FinetuneRequest& request);
  void wait_idle() { pool_.wait_idle(); }

 private:
  Registry& registry_;
  WorkerPool pool_;
};

// ---------------------------------------------------------------------------
// Pipelines

struct ArmReport {
  MetricMap metrics;
  int train_samples = 0;
  int labeled_samples = 0;
  double wall_seconds = 0.0;
};

struct ComparisonReport {
  std::string pipeline;
  Json parameters;
  std::optional<ArmReport> pretrained;
  std::optional<ArmReport> scratch;
  /// SHA-256 of the index lists both arms were given.
  std::string split_digest;
};

Json to_json(const ComparisonReport& r);

struct PipelineOptions {
  /// Templates for pre-training and for the scratch arm's architecture;
  /// defaults of every family when empty.
  std::vector<PretrainTemplateConfig> templates;
  FusionConfig fusion;
  /// Held-out share of the (target) data used for evaluation.
  double test_fraction = 1.0 / 3.0;
  /// Fixes the train/test split independently of the per-run seed.
  std::uint64_t split_seed = 0;
  /// Reuse these instead of pre-training inside the pipeline.
  std::optional<std::vector<PretrainedInstance>> encoders;
  /// The scratch arm starts from random weights everywhere, so its encoders
  /// train at the head rate unless set here.
  std::optional<double> scratch_learning_rate;
  bool run_pretrained = true;
  bool run_scratch = true;
};

/// Both arms fine-tune on the same stratified rho share of the training split
/// and are scored on the same test split.
ComparisonReport pipeline_partial_labeling(const TimeSeriesDataset& data, const LabelSet& labels, double rho,
                                           const TaskSpec& spec, std::uint64_t seed,
                                           const PipelineOptions& options = {});

/// Pretrained arm: pre-train on the source, fine-tune on n target samples
/// (n = 0: head fitted on labeled source data, zero-shot on the target).
/// Scratch arm: source plus the same n target samples. Both are scored on the
/// remaining target samples.
ComparisonReport pipeline_domain_shift(const TimeSeriesDataset& source, const LabelSet& source_labels,
                                       const TimeSeriesDataset& target, const LabelSet& target_labels, int n,
                                       const TaskSpec& spec, std::uint64_t seed, const PipelineOptions& options = {});

// ---------------------------------------------------------------------------
// Result payloads

/// Task-specific evaluation payload: metrics plus what a client needs to draw
/// the result (confusion matrix, 2-D projection, overlays, score timeline).
Json evaluation_payload(const TaskModel& model, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels,
                        const MissingIndex* missing = nullptr);

/// Predictions in JSON form for the predict endpoint and CLI.
Json prediction_payload(const TaskModel& model, const TimeSeriesDataset& data, const MissingIndex* missing = nullptr);

/// Top-2 principal axes of the centered rows: N x 2 scores.
Matrix project_2d(const Matrix& rows);

}  // namespace units
