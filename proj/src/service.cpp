#include "units/service.hpp"

#include "units/metrics.hpp"
#include "units/synthetic.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <tuple>

namespace units {

namespace fs = std::filesystem;

namespace {

std::string short_hash(const std::string& prefix, const std::string& bytes) {
  return prefix + sha256_hex(bytes).substr(0, 16);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json missing_json(const MissingIndex& m) {
  Json out = Json::array();
  for (const auto& sample : m.positions) {
    Json cells = Json::array();
    for (const auto& [c, t] : sample) cells.push_back({c, t});
    out.push_back(cells);
  }
  return out;
}

MissingIndex missing_from_json(const Json& j) {
  MissingIndex m;
  for (const Json& sample : j) {
    std::vector<std::pair<int, int>> cells;
    for (const Json& cell : sample) cells.emplace_back(cell.at(0).get<int>(), cell.at(1).get<int>());
    m.positions.push_back(std::move(cells));
  }
  return m;
}

Json metric_json(const MetricPoint& p) {
  Json j{{"step", p.step}, {"epoch", p.epoch}, {"wall_seconds", p.wall_seconds}};
  j["loss"] = std::isfinite(p.loss) ? Json(p.loss) : Json(nullptr);
  return j;
}

Json matrix_rows(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const RowVector row = m.row(r);
    rows.push_back(std::vector<double>(row.data(), row.data() + row.size()));
  }
  return rows;
}

FitObserver metric_observer(Run& run) {
  return [&run, step = 0L](int epoch, int, double loss) mutable {
    run.metrics().append({step++, epoch, loss, run.elapsed()});
  };
}

std::vector<PretrainTemplateConfig> templates_or_defaults(std::vector<PretrainTemplateConfig> templates, int dims) {
  if (templates.empty())
    for (TemplateFamily f : all_template_families()) templates.push_back(PretrainTemplateConfig::defaults(f, dims));
  return templates;
}

std::optional<LabelSet> resolve_labels(const Registry& registry, const FinetuneRequest& r, const LoadedDataset& data) {
  if (r.labels_id) return registry.dataset(*r.labels_id)->labels;
  return data.labels;
}

void check_labels_for_task(const TaskSpec& spec, const std::optional<LabelSet>& labels, int n) {
  const TaskKind task = spec.task;
  if (task == TaskKind::classification && (!labels || labels->kind != LabelKind::class_labels))
    throw ParameterError("classification fine-tuning needs class labels");
  if (!labels) return;
  labels->validate(n);
  const LabelKind k = labels->kind;
  const bool fits = (task == TaskKind::classification && k == LabelKind::class_labels) ||
                    (task == TaskKind::clustering && (k == LabelKind::class_labels || k == LabelKind::cluster_count)) ||
                    (task == TaskKind::forecasting && k == LabelKind::horizon) ||
                    (task == TaskKind::anomaly_detection && k == LabelKind::anomaly_flags) ||
                    (task == TaskKind::imputation && k == LabelKind::missing_targets);
  if (!fits) throw ParameterError("labels do not fit task " + to_string(task));
  if (task == TaskKind::forecasting && *labels->horizon != *spec.horizon)
    throw ParameterError("label horizon differs from the task horizon");
}

std::vector<int> class_labels_of(const LabelSet& labels, const char* pipeline) {
  if (!labels.class_labels) throw ParameterError(std::string(pipeline) + " needs class labels");
  return *labels.class_labels;
}

std::vector<int> pick(const std::vector<int>& from, const std::vector<int>& positions) {
  std::vector<int> out;
  for (int p : positions) out.push_back(from[static_cast<std::size_t>(p)]);
  return out;
}

// Exactly n indices, classes interleaved so every class is represented as
// evenly as n allows.
std::pair<std::vector<int>, std::vector<int>> stratified_take(const std::vector<int>& labels, int n,
                                                              std::uint64_t seed) {
  Rng rng(seed);
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(classes));
  for (int i = 0; i < static_cast<int>(labels.size()); ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);
  for (auto& m : members) std::shuffle(m.begin(), m.end(), rng);
  std::vector<int> first;
  for (std::size_t round = 0; static_cast<int>(first.size()) < n; ++round)
    for (const auto& m : members)
      if (round < m.size() && static_cast<int>(first.size()) < n) first.push_back(m[round]);
  std::vector<char> taken(labels.size(), 0);
  for (int i : first) taken[static_cast<std::size_t>(i)] = 1;
  std::vector<int> second;
  for (int i = 0; i < static_cast<int>(labels.size()); ++i)
    if (!taken[static_cast<std::size_t>(i)]) second.push_back(i);
  std::sort(first.begin(), first.end());
  return {first, second};
}

std::vector<PretrainedInstance> pretrain_all(const std::vector<PretrainTemplateConfig>& templates,
                                             const TimeSeriesDataset& data) {
  std::vector<PretrainedInstance> out;
  for (const PretrainTemplateConfig& c : templates) out.push_back(fit(c, data));
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ArmReport run_arm(TaskModel model, const TimeSeriesDataset& train, const LabelSet& train_labels,
                  const TimeSeriesDataset& test, const LabelSet& test_labels) {
  const auto t0 = std::chrono::steady_clock::now();
  ArmReport arm;
  arm.train_samples = train.size();
  arm.labeled_samples = train.size();
  const TaskModel fitted = fine_tune(std::move(model), train, train_labels);
  arm.metrics = evaluate(fitted, test, test_labels);
  arm.wall_seconds = seconds_since(t0);
  return arm;
}

TaskSpec scratch_spec(const TaskSpec& spec, const PipelineOptions& options) {
  TaskSpec s = spec;
  s.learning_rate = options.scratch_learning_rate.value_or(spec.head_learning_rate);
  return s;
}

Json indices_json(const std::vector<int>& v) { return Json(v); }

}  // namespace

// ---------------------------------------------------------------------------
// Metric log and runs

MetricLog::~MetricLog() {
  for (auto& c : chunks_) delete c.load(std::memory_order_relaxed);
}

void MetricLog::append(const MetricPoint& point) {
  if (point.step <= last_step_)
    throw StateError("metric step " + std::to_string(point.step) + " does not follow step " +
                     std::to_string(last_step_));
  const std::size_t n = size_.load(std::memory_order_relaxed);
  const std::size_t c = n / kChunk;
  if (c >= kMaxChunks) throw StateError("metric log is full");
  Chunk* chunk = chunks_[c].load(std::memory_order_relaxed);
  if (!chunk) {
    chunk = new Chunk();
    chunks_[c].store(chunk, std::memory_order_release);
  }
  (*chunk)[n % kChunk] = point;
  last_step_ = point.step;
  size_.store(n + 1, std::memory_order_release);
}

std::vector<MetricPoint> MetricLog::snapshot(std::size_t since) const {
  const std::size_t n = size();
  std::vector<MetricPoint> out;
  for (std::size_t i = since; i < n; ++i)
    out.push_back((*chunks_[i / kChunk].load(std::memory_order_acquire))[i % kChunk]);
  return out;
}

std::string to_string(RunKind kind) { return kind == RunKind::pretrain ? "pretrain" : "finetune"; }

std::string to_string(RunStatus status) {
  switch (status) {
    case RunStatus::running:
      return "running";
    case RunStatus::succeeded:
      return "succeeded";
    case RunStatus::failed:
      return "failed";
  }
  return "failed";
}

Run::Run(std::string id, RunKind kind, Json config)
    : id_(std::move(id)), kind_(kind), config_(std::move(config)), start_(std::chrono::steady_clock::now()) {}

double Run::elapsed() const { return seconds_since(start_); }

void Run::succeed(std::vector<std::string> encoder_ids, std::vector<std::string> model_ids) {
  std::lock_guard lock(mu_);
  if (status() != RunStatus::running) throw StateError("run " + id_ + " already finished");
  encoder_ids_ = std::move(encoder_ids);
  model_ids_ = std::move(model_ids);
  status_.store(RunStatus::succeeded, std::memory_order_release);
  done_.notify_all();
}

void Run::fail(std::string error) {
  std::lock_guard lock(mu_);
  if (status() != RunStatus::running) throw StateError("run " + id_ + " already finished");
  error_ = std::move(error);
  status_.store(RunStatus::failed, std::memory_order_release);
  done_.notify_all();
}

std::vector<std::string> Run::encoder_ids() const {
  std::lock_guard lock(mu_);
  return encoder_ids_;
}

std::vector<std::string> Run::model_ids() const {
  std::lock_guard lock(mu_);
  return model_ids_;
}

std::string Run::error() const {
  std::lock_guard lock(mu_);
  return error_;
}

Json Run::summary() const {
  std::lock_guard lock(mu_);
  Json j{{"id", id_},
         {"kind", to_string(kind_)},
         {"status", to_string(status())},
         {"config", config_},
         {"encoder_ids", encoder_ids_},
         {"model_ids", model_ids_},
         {"metric_count", metrics_.size()}};
  if (!error_.empty()) j["error"] = error_;
  return j;
}

void Run::wait() const {
  std::unique_lock lock(mu_);
  done_.wait(lock, [this] { return status() != RunStatus::running; });
}

Json to_json(const EncoderEntry& e) {
  return {{"id", e.id},
          {"run_id", e.run_id},
          {"family", to_string(e.family)},
          {"input_dims", e.input_dims},
          {"repr_dim", e.repr_dim},
          {"checksum", e.checksum}};
}

// ---------------------------------------------------------------------------
// Registry

Registry::Registry(fs::path root) : root_(std::move(root)) {
  for (const char* dir : {"datasets", "encoders", "models", "runs"}) fs::create_directories(*root_ / dir);
  load();
}

void Registry::write_file(const fs::path& rel, const std::string& bytes) const {
  if (!root_) return;
  const fs::path target = *root_ / rel;
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

void Registry::load() {
  const fs::path& root = *root_;
  for (const auto& e : fs::directory_iterator(root / "datasets")) {
    if (e.path().extension() != ".json") continue;
    const Json meta = Json::parse(read_file(e.path()));
    fs::path blob = e.path();
    blob.replace_extension(".uts");
    LoadedDataset ds = load_dataset(blob, FileFormat::uts_binary);
    ds.missing = missing_from_json(meta.at("missing"));
    ds.labels = meta.at("labels").is_null() ? std::nullopt : std::optional(labels_from_json(meta.at("labels")));
    datasets_[e.path().stem().string()] = std::make_shared<const LoadedDataset>(std::move(ds));
  }
  for (const auto& e : fs::directory_iterator(root / "encoders")) {
    if (e.path().extension() != ".json") continue;
    const Json doc = Json::parse(read_file(e.path()));
    const std::string id = e.path().stem().string();
    auto inst = std::make_shared<const PretrainedInstance>(instance_from_json(doc.at("instance"), id));
    EncoderEntry entry{id, doc.at("run_id").get<std::string>(), inst->config().family, inst->config().encoder.input_dims,
                       inst->repr_dim(), inst->encoder().parameters().checksum()};
    encoders_[id] = {entry, inst};
  }
  for (const auto& e : fs::directory_iterator(root / "models")) {
    if (e.path().extension() != ".json") continue;
    models_[e.path().stem().string()] =
        std::make_shared<const TaskModel>(import_model_json(Json::parse(read_file(e.path()))));
  }
  for (const auto& e : fs::directory_iterator(root / "runs")) {
    if (e.path().extension() != ".json") continue;
    const Json doc = Json::parse(read_file(e.path()));
    const std::string id = doc.at("id").get<std::string>();
    auto run = std::make_shared<Run>(id, doc.at("kind") == "pretrain" ? RunKind::pretrain : RunKind::finetune,
                                     doc.at("config"));
    for (const Json& m : doc.at("metrics"))
      run->metrics().append({m.at("step").get<long>(), m.at("epoch").get<int>(),
                             m.at("loss").is_null() ? std::nan("") : m.at("loss").get<double>(),
                             m.at("wall_seconds").get<double>()});
    if (doc.at("status") == "succeeded")
      run->succeed(doc.at("encoder_ids").get<std::vector<std::string>>(),
                   doc.at("model_ids").get<std::vector<std::string>>());
    else
      run->fail(doc.value("error", std::string("interrupted")));
    runs_[id] = run;
    run_counter_ = std::max(run_counter_, std::stol(id.substr(4)));
  }
}

std::string Registry::put_dataset(LoadedDataset data, const std::string& name) {
  if (data.data.empty()) throw ParameterError("dataset is empty");
  data.missing.validate(data.data.size(), data.data.channels(), data.data.length());
  if (data.labels) data.labels->validate(data.data.size());
  Json meta{{"name", name},
            {"samples", data.data.size()},
            {"channels", data.data.channels()},
            {"length", data.data.length()},
            {"missing", missing_json(data.missing)}};
  meta["labels"] = data.labels ? to_json(*data.labels) : Json(nullptr);
  Json content = meta;
  content.erase("name");
  content["values"] = samples_to_json(data.data);
  const std::string id = short_hash("ds-", content.dump());
  std::lock_guard lock(mu_);
  if (!datasets_.contains(id)) {
    if (root_) {
      write_uts_binary(*root_ / "datasets" / (id + ".uts"), data.data);
      write_file(fs::path("datasets") / (id + ".json"), meta.dump(1));
    }
    datasets_[id] = std::make_shared<const LoadedDataset>(std::move(data));
  }
  return id;
}

std::shared_ptr<const LoadedDataset> Registry::dataset(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = datasets_.find(id);
  if (it == datasets_.end()) throw NotFoundError("no dataset '" + id + "'");
  return it->second;
}

std::vector<std::string> Registry::dataset_ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : datasets_) ids.push_back(id);
  return ids;
}

std::string Registry::put_encoder(PretrainedInstance instance, const std::string& run_id) {
  if (!instance.fitted()) throw StateError("only pre-trained encoders enter the registry");
  const Json doc = to_json(instance);
  const std::string id = short_hash("enc-", doc.dump());
  std::lock_guard lock(mu_);
  if (!encoders_.contains(id)) {
    write_file(fs::path("encoders") / (id + ".json"), Json{{"run_id", run_id}, {"instance", doc}}.dump());
    auto inst = std::make_shared<const PretrainedInstance>(std::move(instance));
    EncoderEntry entry{id, run_id, inst->config().family, inst->config().encoder.input_dims, inst->repr_dim(),
                       inst->encoder().parameters().checksum()};
    encoders_[id] = {entry, inst};
  }
  return id;
}

std::shared_ptr<const PretrainedInstance> Registry::encoder(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = encoders_.find(id);
  if (it == encoders_.end()) throw NotFoundError("no encoder '" + id + "'");
  return it->second.instance;
}

std::vector<EncoderEntry> Registry::encoders() const {
  std::lock_guard lock(mu_);
  std::vector<EncoderEntry> out;
  for (const auto& [_, slot] : encoders_) out.push_back(slot.entry);
  return out;
}

std::uint64_t Registry::encoder_checksum(const std::string& id) const {
  return encoder(id)->encoder().parameters().checksum();
}

std::string Registry::put_model(TaskModel model, const std::string&) {
  const std::string doc = export_model_json(model).dump();
  const std::string id = short_hash("mdl-", doc);
  std::lock_guard lock(mu_);
  if (!models_.contains(id)) {
    write_file(fs::path("models") / (id + ".json"), doc);
    models_[id] = std::make_shared<const TaskModel>(std::move(model));
  }
  return id;
}

std::shared_ptr<const TaskModel> Registry::model(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = models_.find(id);
  if (it == models_.end()) throw NotFoundError("no model '" + id + "'");
  return it->second;
}

std::vector<std::string> Registry::model_ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : models_) ids.push_back(id);
  return ids;
}

std::shared_ptr<Run> Registry::create_run(RunKind kind, Json config) {
  std::lock_guard lock(mu_);
  char id[32];
  std::snprintf(id, sizeof id, "run-%06ld", ++run_counter_);
  auto run = std::make_shared<Run>(id, kind, std::move(config));
  runs_[id] = run;
  return run;
}

std::shared_ptr<Run> Registry::run(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = runs_.find(id);
  if (it == runs_.end()) throw NotFoundError("no run '" + id + "'");
  return it->second;
}

std::vector<std::shared_ptr<Run>> Registry::runs() const {
  std::lock_guard lock(mu_);
  std::vector<std::shared_ptr<Run>> out;
  for (const auto& [_, r] : runs_) out.push_back(r);
  return out;
}

void Registry::persist_run(const Run& run) const {
  if (!root_) return;
  Json doc = run.summary();
  Json metrics = Json::array();
  for (const MetricPoint& p : run.metrics().snapshot()) metrics.push_back(metric_json(p));
  doc["metrics"] = metrics;
  std::lock_guard lock(mu_);
  write_file(fs::path("runs") / (run.id() + ".json"), doc.dump());
}

// ---------------------------------------------------------------------------
// Worker pool

WorkerPool::WorkerPool(int workers) {
  require(workers >= 1, "worker pool needs at least one thread");
  for (int i = 0; i < workers; ++i)
    threads_.emplace_back([this] {
      for (;;) {
        std::function<void()> job;
        {
          std::unique_lock lock(mu_);
          wake_.wait(lock, [this] { return stop_ || !queue_.empty(); });
          if (queue_.empty()) return;
          job = std::move(queue_.front());
          queue_.pop_front();
          ++busy_;
        }
        job();
        std::lock_guard lock(mu_);
        --busy_;
        if (queue_.empty() && busy_ == 0) idle_.notify_all();
      }
    });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  wake_.notify_all();
  for (std::thread& t : threads_) t.join();
}

void WorkerPool::submit(std::function<void()> job) {
  {
    std::lock_guard lock(mu_);
    if (stop_) throw StateError("worker pool is shutting down");
    queue_.push_back(std::move(job));
  }
  wake_.notify_one();
}

void WorkerPool::wait_idle() {
  std::unique_lock lock(mu_);
  idle_.wait(lock, [this] { return queue_.empty() && busy_ == 0; });
}

// ---------------------------------------------------------------------------
// Pre-training and fine-tuning runs

Json to_json(const FinetuneRequest& r) {
  Json templates = Json::array();
  for (const PretrainTemplateConfig& c : r.scratch_templates) templates.push_back(to_json(c));
  Json j{{"encoder_ids", r.encoder_ids}, {"fusion", to_json(r.fusion)},      {"task_spec", to_json(r.spec)},
         {"dataset_id", r.dataset_id},  {"from_scratch", r.from_scratch}, {"scratch_templates", templates}};
  j["labels_id"] = r.labels_id ? Json(*r.labels_id) : Json(nullptr);
  return j;
}

FinetuneRequest finetune_request_from_json(const Json& j) {
  FinetuneRequest r;
  try {
    r.encoder_ids = j.value("encoder_ids", std::vector<std::string>{});
    if (j.contains("fusion")) r.fusion = fusion_config_from_json(j.at("fusion"));
    r.spec = task_spec_from_json(j.at("task_spec"));
    r.dataset_id = j.at("dataset_id").get<std::string>();
    if (j.contains("labels_id") && !j.at("labels_id").is_null()) r.labels_id = j.at("labels_id").get<std::string>();
    r.from_scratch = j.value("from_scratch", false);
    if (j.contains("scratch_templates"))
      for (const Json& c : j.at("scratch_templates")) r.scratch_templates.push_back(template_config_from_json(c));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("fine-tune request: ") + e.what());
  }
  return r;
}

std::vector<std::shared_ptr<Run>> plan_pretrain(Registry& registry, const std::vector<PretrainTemplateConfig>& configs,
                                                const std::string& dataset_id) {
  if (configs.empty()) throw ParameterError("pre-training needs at least one template config");
  const auto data = registry.dataset(dataset_id);
  for (const PretrainTemplateConfig& c : configs) {
    c.validate();
    if (c.encoder.input_dims != data->data.channels())
      throw ShapeError("template expects " + std::to_string(c.encoder.input_dims) + " channels, dataset has " +
                       std::to_string(data->data.channels()));
  }
  std::vector<std::shared_ptr<Run>> runs;
  for (const PretrainTemplateConfig& c : configs) {
    Json snapshot = to_json(c);
    snapshot["dataset_id"] = dataset_id;
    runs.push_back(registry.create_run(RunKind::pretrain, snapshot));
  }
  return runs;
}

void execute_pretrain(Registry& registry, Run& run, const PretrainTemplateConfig& config, const std::string& dataset_id) {
  try {
    const auto data = registry.dataset(dataset_id);
    PretrainedInstance inst = fit(config, data->data, metric_observer(run));
    const std::string id = registry.put_encoder(std::move(inst), run.id());
    run.succeed({id}, {});
  } catch (const std::exception& e) {
    run.fail(e.what());
  }
  registry.persist_run(run);
}

std::vector<std::string> run_pretrain(Registry& registry, const std::vector<PretrainTemplateConfig>& configs,
                                      const std::string& dataset_id) {
  const auto runs = plan_pretrain(registry, configs, dataset_id);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    execute_pretrain(registry, *runs[i], configs[i], dataset_id);
    ids.push_back(runs[i]->id());
  }
  return ids;
}

std::shared_ptr<Run> plan_finetune(Registry& registry, const FinetuneRequest& r) {
  r.spec.validate();
  const auto data = registry.dataset(r.dataset_id);
  if (r.from_scratch && !r.encoder_ids.empty())
    throw ParameterError("from-scratch fine-tuning takes no encoder ids");
  if (!r.from_scratch && r.encoder_ids.empty())
    throw ParameterError("fine-tuning needs encoder ids (or the from-scratch flag)");
  for (const std::string& id : r.encoder_ids) {
    const auto enc = registry.encoder(id);
    if (enc->config().encoder.input_dims != data->data.channels())
      throw ShapeError("encoder " + id + " expects " + std::to_string(enc->config().encoder.input_dims) +
                       " channels, dataset has " + std::to_string(data->data.channels()));
  }
  const auto labels = resolve_labels(registry, r, *data);
  check_labels_for_task(r.spec, labels, data->data.size());
  return registry.create_run(RunKind::finetune, to_json(r));
}

std::string execute_finetune(Registry& registry, Run& run, const FinetuneRequest& r) {
  std::string model_id;
  try {
    const auto data = registry.dataset(r.dataset_id);
    const int dims = data->data.channels(), length = data->data.length();
    TaskModel model;
    if (r.from_scratch) {
      model = make_scratch_model(templates_or_defaults(r.scratch_templates, dims), r.fusion, r.spec, dims, length);
    } else {
      std::vector<PretrainedInstance> copies;
      for (const std::string& id : r.encoder_ids) copies.push_back(*registry.encoder(id));
      model = make_task_model(std::move(copies), r.fusion, r.spec, dims, length);
    }
    model = fine_tune(std::move(model), data->data, resolve_labels(registry, r, *data), metric_observer(run));
    model_id = registry.put_model(std::move(model), run.id());
    run.succeed({}, {model_id});
  } catch (const std::exception& e) {
    model_id.clear();
    run.fail(e.what());
  }
  registry.persist_run(run);
  return model_id;
}

FinetuneHandle run_finetune(Registry& registry, const FinetuneRequest& request) {
  const auto run = plan_finetune(registry, request);
  return {run->id(), execute_finetune(registry, *run, request)};
}

Service::Service(Registry& registry, int workers) : registry_(registry), pool_(workers) {}

std::vector<std::string> Service::submit_pretrain(const std::vector<PretrainTemplateConfig>& configs,
                                                  const std::string& dataset_id) {
  const auto runs = plan_pretrain(registry_, configs, dataset_id);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    pool_.submit([this, run = runs[i], config = configs[i], dataset_id] {
      execute_pretrain(registry_, *run, config, dataset_id);
    });
    ids.push_back(runs[i]->id());
  }
  return ids;
}

std::string Service::submit_finetune(const FinetuneRequest& request) {
  const auto run = plan_finetune(registry_, request);
  pool_.submit([this, run, request] { execute_finetune(registry_, *run, request); });
  return run->id();
}

// ---------------------------------------------------------------------------
// Pipelines

Json to_json(const ComparisonReport& r) {
  auto arm = [](const std::optional<ArmReport>& a) -> Json {
    if (!a) return nullptr;
    return {{"metrics", a->metrics},
            {"train_samples", a->train_samples},
            {"labeled_samples", a->labeled_samples},
            {"wall_seconds", a->wall_seconds}};
  };
  return {{"pipeline", r.pipeline},
          {"parameters", r.parameters},
          {"pretrained", arm(r.pretrained)},
          {"scratch", arm(r.scratch)},
          {"split_digest", r.split_digest}};
}

ComparisonReport pipeline_partial_labeling(const TimeSeriesDataset& data, const LabelSet& labels, double rho,
                                           const TaskSpec& spec, std::uint64_t seed, const PipelineOptions& options) {
  if (spec.task != TaskKind::classification) throw ParameterError("partial labeling compares classifiers");
  require(rho > 0.0 && rho <= 1.0, "label fraction must lie in (0, 1]");
  require(options.test_fraction > 0.0 && options.test_fraction < 1.0, "test fraction must lie in (0, 1)");
  spec.validate();
  labels.validate(data.size());
  const std::vector<int> y = class_labels_of(labels, "partial labeling");
  const int classes = *spec.classes;

  const auto [train, test] = synthetic::stratified_split(y, 1.0 - options.test_fraction, options.split_seed);
  const std::vector<int> ytrain = pick(y, train);
  if (rho * static_cast<double>(train.size()) < classes)
    throw ParameterError("rho * N = " + std::to_string(rho * static_cast<double>(train.size())) +
                         " labeled samples cannot cover " + std::to_string(classes) + " classes");
  const std::vector<int> labeled =
      rho >= 1.0 ? [&] { std::vector<int> all(train.size()); std::iota(all.begin(), all.end(), 0); return all; }()
                 : synthetic::stratified_split(ytrain, rho, seed).first;

  const TimeSeriesDataset xtrain = data.subset(train), xtest = data.subset(test);
  const TimeSeriesDataset xl = xtrain.subset(labeled);
  const LabelSet yl = LabelSet::classes(pick(ytrain, labeled), classes);
  const LabelSet ytest = LabelSet::classes(pick(y, test), classes);
  const auto templates = templates_or_defaults(options.templates, data.channels());
  TaskSpec s = spec;
  s.seed = seed;

  ComparisonReport report;
  report.pipeline = "partial_labeling";
  report.parameters = {{"rho", rho},           {"seed", seed},
                       {"split_seed", options.split_seed}, {"task_spec", to_json(s)},
                       {"train_samples", train.size()},    {"test_samples", test.size()}};
  report.split_digest =
      sha256_hex(Json{{"train", indices_json(train)}, {"test", indices_json(test)}, {"labeled", indices_json(labeled)}}
                     .dump());
  if (options.run_pretrained) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<PretrainedInstance> encoders =
        options.encoders ? *options.encoders : pretrain_all(templates, xtrain);
    ArmReport arm = run_arm(make_task_model(encoders, options.fusion, s, data.channels(), data.length()), xl, yl, xtest,
                            ytest);
    arm.train_samples = xtrain.size();
    arm.wall_seconds = seconds_since(t0);
    report.pretrained = arm;
  }
  if (options.run_scratch) {
    ArmReport arm = run_arm(make_scratch_model(templates, options.fusion, scratch_spec(s, options), data.channels(),
                                               data.length()),
                            xl, yl, xtest, ytest);
    report.scratch = arm;
  }
  return report;
}

ComparisonReport pipeline_domain_shift(const TimeSeriesDataset& source, const LabelSet& source_labels,
                                       const TimeSeriesDataset& target, const LabelSet& target_labels, int n,
                                       const TaskSpec& spec, std::uint64_t seed, const PipelineOptions& options) {
  if (spec.task != TaskKind::classification) throw ParameterError("domain shift compares classifiers");
  spec.validate();
  if (source.channels() != target.channels())
    throw ParameterError("source has " + std::to_string(source.channels()) + " channels, target has " +
                         std::to_string(target.channels()));
  if (source.length() != target.length()) throw ParameterError("source and target lengths differ");
  if (n < 0 || n >= target.size())
    throw ParameterError("target budget n = " + std::to_string(n) + " must lie in [0, " +
                         std::to_string(target.size()) + ")");
  source_labels.validate(source.size());
  target_labels.validate(target.size());
  const std::vector<int> ys = class_labels_of(source_labels, "domain shift");
  const std::vector<int> yt = class_labels_of(target_labels, "domain shift");
  const int classes = *spec.classes;

  const auto [few, rest] = stratified_take(yt, n, seed);
  const TimeSeriesDataset xeval = target.subset(rest);
  const std::vector<Matrix> xf_samples = few.empty() ? std::vector<Matrix>{} : target.subset(few).samples();
  const LabelSet yf = LabelSet::classes(pick(yt, few), classes);
  const LabelSet yeval = LabelSet::classes(pick(yt, rest), classes);
  const auto templates = templates_or_defaults(options.templates, source.channels());
  TaskSpec s = spec;
  s.seed = seed;

  ComparisonReport report;
  report.pipeline = "domain_shift";
  report.parameters = {{"n", n}, {"seed", seed}, {"task_spec", to_json(s)}, {"eval_samples", rest.size()},
                       {"zero_shot", n == 0}};
  report.split_digest = sha256_hex(Json{{"few", indices_json(few)}, {"eval", indices_json(rest)}}.dump());

  if (options.run_pretrained) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<PretrainedInstance> encoders =
        options.encoders ? *options.encoders : pretrain_all(templates, source);
    TaskModel m = make_task_model(encoders, options.fusion, s, source.channels(), source.length());
    ArmReport arm = n > 0 ? run_arm(std::move(m), TimeSeriesDataset(xf_samples), yf, xeval, yeval)
                          : run_arm(std::move(m), source, LabelSet::classes(ys, classes), xeval, yeval);
    arm.wall_seconds = seconds_since(t0);
    report.pretrained = arm;
  }
  if (options.run_scratch) {
    std::vector<Matrix> combined = source.samples();
    std::vector<int> yc = ys;
    for (std::size_t i = 0; i < xf_samples.size(); ++i) {
      combined.push_back(xf_samples[i]);
      yc.push_back(yt[static_cast<std::size_t>(few[i])]);
    }
    report.scratch = run_arm(make_scratch_model(templates, options.fusion, scratch_spec(s, options), source.channels(),
                                                source.length()),
                             TimeSeriesDataset(std::move(combined)), LabelSet::classes(yc, classes), xeval, yeval);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Payloads

Matrix project_2d(const Matrix& rows) {
  Matrix out = Matrix::Zero(rows.rows(), 2);
  if (rows.rows() == 0) return out;
  const Matrix centred = rows.rowwise() - rows.colwise().mean();
  Eigen::JacobiSVD<Matrix> svd(centred, Eigen::ComputeThinV);
  const Eigen::Index k = std::min<Eigen::Index>(2, svd.matrixV().cols());
  for (Eigen::Index c = 0; c < k; ++c) {
    Vector axis = svd.matrixV().col(c);
    Eigen::Index big = 0;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis(big) < 0) axis = -axis;
    out.col(c) = centred * axis;
  }
  return out;
}

Json prediction_payload(const TaskModel& model, const TimeSeriesDataset& data, const MissingIndex* missing) {
  Json j{{"task", to_string(model.spec.task)}, {"samples", data.size()}};
  switch (model.spec.task) {
    case TaskKind::classification: {
      const ClassPrediction p = classify_predict(model, data);
      j["labels"] = p.labels;
      j["probabilities"] = matrix_rows(p.probabilities);
      break;
    }
    case TaskKind::clustering:
      j["assignments"] = cluster_predict(model, data);
      break;
    case TaskKind::forecasting: {
      Json f = Json::array();
      for (const Matrix& m : forecast_predict(model, data)) f.push_back(matrix_rows(m));
      j["forecasts"] = f;
      break;
    }
    case TaskKind::anomaly_detection: {
      const AnomalyResult r = anomaly_detect(model, data);
      j["scores"] = matrix_rows(r.scores);
      Json flags = Json::array();
      for (Eigen::Index i = 0; i < r.flags.rows(); ++i) {
        std::vector<int> row;
        for (Eigen::Index t = 0; t < r.flags.cols(); ++t) row.push_back(r.flags(i, t) ? 1 : 0);
        flags.push_back(row);
      }
      j["flags"] = flags;
      j["tau"] = r.tau;
      break;
    }
    case TaskKind::imputation: {
      MissingIndex none;
      none.positions.resize(static_cast<std::size_t>(data.size()));
      const ImputationResult r = impute_predict(model, data, missing ? *missing : none);
      j["completed"] = samples_to_json(r.completed);
      j["imputed"] = r.imputed;
      break;
    }
  }
  return j;
}

Json evaluation_payload(const TaskModel& model, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels,
                        const MissingIndex* missing) {
  Json j{{"task", to_string(model.spec.task)}, {"samples", data.size()}};
  // anomaly payloads still carry scores when no ground truth was supplied
  const bool scored_only = model.spec.task == TaskKind::anomaly_detection && !(labels && labels->anomaly_flags);
  j["metrics"] = scored_only ? Json::object() : Json(evaluate(model, data, labels));
  switch (model.spec.task) {
    case TaskKind::classification: {
      const ClassPrediction p = classify_predict(model, data);
      j["predicted"] = p.labels;
      j["truth"] = *labels->class_labels;
      const Eigen::MatrixXi cm = confusion_matrix(p.labels, *labels->class_labels, *model.spec.classes);
      Json rows = Json::array();
      for (Eigen::Index r = 0; r < cm.rows(); ++r) {
        std::vector<int> row;
        for (Eigen::Index c = 0; c < cm.cols(); ++c) row.push_back(cm(r, c));
        rows.push_back(row);
      }
      j["confusion_matrix"] = rows;
      j["projection"] = matrix_rows(project_2d(fused_representations(model, data)));
      break;
    }
    case TaskKind::clustering: {
      j["assignments"] = cluster_predict(model, data);
      if (labels && labels->class_labels) j["truth"] = *labels->class_labels;
      j["projection"] = matrix_rows(project_2d(fused_representations(model, data)));
      break;
    }
    case TaskKind::forecasting: {
      const ForecastPairs pairs = forecast_pairs(data, *model.spec.horizon);
      const std::vector<Matrix> pred = forecast_predict(model, pairs.inputs);
      Json overlays = Json::array();
      for (std::size_t i = 0; i < pred.size(); ++i)
        overlays.push_back({{"history", matrix_rows(pairs.inputs.sample(static_cast<int>(i)))},
                            {"forecast", matrix_rows(pred[i])},
                            {"truth", matrix_rows(pairs.targets[i])}});
      j["overlays"] = overlays;
      break;
    }
    case TaskKind::anomaly_detection: {
      Json p = prediction_payload(model, data);
      j["scores"] = p["scores"];
      j["flags"] = p["flags"];
      j["tau"] = p["tau"];
      if (labels && labels->anomaly_flags) {
        Json truth = Json::array();
        for (const BoolArray& f : *labels->anomaly_flags) {
          const Eigen::Array<bool, 1, Eigen::Dynamic> any = f.colwise().any();
          std::vector<int> row;
          for (Eigen::Index t = 0; t < any.size(); ++t) row.push_back(any(t) ? 1 : 0);
          truth.push_back(row);
        }
        j["truth"] = truth;
      }
      break;
    }
    case TaskKind::imputation: {
      MissingIndex mi;
      if (missing) {
        mi = *missing;
      } else {
        mi.positions.resize(static_cast<std::size_t>(data.size()));
        if (labels && labels->missing_targets)
          for (const MissingTarget& t : *labels->missing_targets)
            mi.positions[static_cast<std::size_t>(t.sample)].emplace_back(t.channel, t.timestep);
      }
      const ImputationResult r = impute_predict(model, data, mi);
      j["completed"] = samples_to_json(r.completed);
      j["missing"] = missing_json(mi);
      j["imputed"] = r.imputed;
      if (labels && labels->missing_targets) {
        std::map<std::tuple<int, int, int>, double> known;
        for (const MissingTarget& t : *labels->missing_targets) known[{t.sample, t.channel, t.timestep}] = t.value;
        Json truth = Json::array();
        for (std::size_t i = 0; i < mi.positions.size(); ++i)
          for (const auto& [c, t] : mi.positions[i]) {
            const auto it = known.find({static_cast<int>(i), c, t});
            truth.push_back(it == known.end() ? Json(nullptr) : Json(it->second));
          }
        j["truth"] = truth;
      }
      break;
    }
  }
  return j;
}

}  // namespace units
