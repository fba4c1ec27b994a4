// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failures. `units_acceptance <name>...` runs a subset.
#include "units/cluster.hpp"
#include "units/losses.hpp"
#include "units/metrics.hpp"
#include "units/serialize.hpp"
#include "units/service.hpp"
#include "units/synthetic.hpp"
#include "units/tuning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

using namespace units;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Gradient checks on the four-sample toy (D=1, T=8, K=4)

std::vector<Matrix> toy_batch() {
  std::vector<Matrix> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(gaussian(1, 8, 40 + static_cast<std::uint64_t>(i)));
  return xs;
}

PretrainTemplateConfig toy_template(TemplateFamily family) {
  PretrainTemplateConfig c = PretrainTemplateConfig::defaults(family, 1);
  c.encoder.hidden_width = 4;
  c.encoder.repr_dim = 4;
  c.encoder.depth = 2;
  c.encoder.seed = 5;
  c.n_negatives = 2;
  c.masking_rate = 0.3;
  c.mask_geometry = MaskGeometry::iid;
  return c;
}

double template_gradient_error(const PretrainTemplateConfig& cfg) {
  const PretrainedInstance inst = make_instance(cfg);
  const std::vector<Matrix> xs = toy_batch();
  std::vector<const Matrix*> batch;
  for (const Matrix& x : xs) batch.push_back(&x);
  const Eigen::Index ne = inst.encoder().parameters().total_size();
  auto eval = [&](const Vector& flat, Vector* grad) {
    Encoder enc = inst.encoder();
    ParameterStore head = inst.head();
    enc.parameters().unflatten(flat.head(ne));
    if (head.size() > 0) head.unflatten(flat.tail(flat.size() - ne));
    ad::Tape tape;
    const Binding be = bind(tape, enc.parameters(), true);
    const Binding bh = bind(tape, head, true);
    Rng rng(17);
    const PretrainedInstance probe(cfg, enc, head, {}, false);
    const ad::Var loss = probe.objective(be, bh, batch, rng);
    if (grad) {
      tape.backward(loss);
      std::vector<double> g;
      for (const Binding* b : {&be, &bh})
        for (const Matrix& m : gradients(*b)) g.insert(g.end(), m.data(), m.data() + m.size());
      *grad = Eigen::Map<Vector>(g.data(), static_cast<Eigen::Index>(g.size()));
    }
    return loss.scalar();
  };
  Vector p(ne + inst.head().total_size());
  p.head(ne) = inst.encoder().parameters().flatten();
  if (inst.head().size() > 0) p.tail(p.size() - ne) = inst.head().flatten();
  Vector analytic;
  eval(p, &analytic);
  return relative_error(analytic, finite_difference_gradient([&](const Vector& q) { return eval(q, nullptr); }, p));
}

TaskModel toy_task_model(const TaskSpec& spec, int length) {
  std::vector<PretrainedInstance> insts;
  for (TemplateFamily f : {TemplateFamily::contrastive_series, TemplateFamily::autoregressive_mask})
    insts.push_back(make_instance(toy_template(f)));
  FusionConfig fusion;
  fusion.kind = FusionKind::projection;
  fusion.output_dim = 6;
  TaskModel m = make_task_model(insts, fusion, spec, 1, length);
  for (auto& e : m.fusion.parameters().entries()) e.value = gaussian(e.value.rows(), e.value.cols(), 77, 0.5);
  return m;
}

double task_gradient_error(const TaskModel& m, const TaskBatch& batch) {
  const Vector p = model_parameters(m);
  const Vector analytic = task_batch_loss(m, batch, 3).gradient;
  auto loss = [&](const Vector& q) {
    TaskModel probe = m;
    set_model_parameters(probe, q);
    return task_batch_loss(probe, batch, 3).loss;
  };
  return relative_error(analytic, finite_difference_gradient(loss, p));
}

Verdict gradient_check() {
  const auto t0 = Clock::now();
  std::vector<std::pair<std::string, double>> errs;
  for (TemplateFamily f : all_template_families()) errs.emplace_back(to_string(f), template_gradient_error(toy_template(f)));

  const std::vector<Matrix> xs = toy_batch();
  std::vector<const Matrix*> ptrs;
  for (const Matrix& x : xs) ptrs.push_back(&x);
  TaskBatch b;
  b.inputs = ptrs;
  b.classes = {0, 2, 1, 2};
  errs.emplace_back("cross_entropy", task_gradient_error(toy_task_model(TaskSpec::classification(3), 8), b));
  for (ForecastLoss loss : {ForecastLoss::mse, ForecastLoss::mae}) {
    TaskSpec spec = TaskSpec::forecasting(3);
    spec.forecast_loss = loss;
    TaskBatch fb;
    fb.inputs = ptrs;
    fb.targets = gaussian(4, 3, 8);
    errs.emplace_back(loss == ForecastLoss::mse ? "forecast_mse" : "forecast_mae",
                      task_gradient_error(toy_task_model(spec, 11), fb));
  }
  TaskBatch plain;
  plain.inputs = ptrs;
  errs.emplace_back("reconstruction", task_gradient_error(toy_task_model(TaskSpec::anomaly_detection(), 8), plain));
  TaskSpec dae = TaskSpec::imputation();
  dae.masking_rate = 0.3;
  errs.emplace_back("dae", task_gradient_error(toy_task_model(dae, 8), plain));
  TaskBatch cb;
  cb.inputs = ptrs;
  cb.centroids = gaussian(2, 6, 12);
  cb.assignments = {0, 1, 1, 0};
  errs.emplace_back("cluster_fit_loss", task_gradient_error(toy_task_model(TaskSpec::clustering(2), 8), cb));

  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : errs)
    if (!(e <= worst)) worst = e, worst_name = name;
  const double secs = since(t0);
  return {worst < 1e-4 && secs < 60.0,
          fmt("%zu losses, max rel err %.2e (%s), %.1fs", errs.size(), worst, worst_name.c_str(), secs)};
}

// ---------------------------------------------------------------------------

Verdict masked_locality() {
  Rng rng(2024);
  int checked = 0;
  bool ok = true;
  while (checked < 20) {
    const BoolArray mask = sample_binary_mask(3, 16, 0.3, rng);
    if (mask.all()) continue;
    ad::Tape tape;
    const ad::Var pred = tape.parameter(gaussian(3, 16, 500 + static_cast<std::uint64_t>(checked)));
    tape.backward(masked_mse(pred, gaussian(3, 16, 900 + static_cast<std::uint64_t>(checked)), mask.cast<double>().matrix()));
    const Matrix g = pred.grad();
    ok = ok && (mask.select(g, Matrix::Zero(3, 16)).array() == 0.0).all();
    ++checked;
  }
  return {ok, fmt("%d random masks, unmasked-cell gradients exactly 0", checked)};
}

Verdict closed_forms() {
  const Matrix same = Matrix::Constant(2, 4, 0.7);
  const double nx = nt_xent_loss(same, same, 0.5);
  double worst = std::abs(nx - std::log(3.0));
  for (int t : {2, 3, 5, 8, 16}) {
    const Matrix rows = Matrix::Constant(t, 4, -1.3);
    worst = std::max(worst, std::abs(timestamp_contrastive_loss(rows, rows, 1.0) - std::log(2.0 * t - 1.0)));
  }
  return {worst <= 1e-6, fmt("nt_xent %.9f vs ln3, max deviation %.2e", nx, worst)};
}

// ---------------------------------------------------------------------------

Verdict partial_labeling() {
  const auto t0 = Clock::now();
  const synthetic::LabeledSeries ds = synthetic::frequency_warp_classes(600, 64, 7);
  const LabelSet labels = LabelSet::classes(ds.labels, 3);
  PipelineOptions o;
  // pre-train once on the training split the pipeline will draw
  const auto train = synthetic::stratified_split(ds.labels, 1.0 - o.test_fraction, o.split_seed).first;
  const TimeSeriesDataset xtrain = ds.data.subset(train);
  std::vector<PretrainedInstance> encoders;
  for (TemplateFamily f : all_template_families()) encoders.push_back(fit(PretrainTemplateConfig::defaults(f, 1), xtrain));
  o.encoders = encoders;

  TaskSpec spec = TaskSpec::classification(3);
  spec.epochs = 100;  // every arm
  std::vector<double> pre, scratch, scratch30;
  for (std::uint64_t seed : {0, 1, 2}) {
    const ComparisonReport r = pipeline_partial_labeling(ds.data, labels, 0.1, spec, seed, o);
    pre.push_back(r.pretrained->metrics.at("accuracy"));
    scratch.push_back(r.scratch->metrics.at("accuracy"));
    PipelineOptions s30 = o;
    s30.run_pretrained = false;
    scratch30.push_back(pipeline_partial_labeling(ds.data, labels, 0.3, spec, seed, s30).scratch->metrics.at("accuracy"));
  }
  const double secs = since(t0);
  const double p = mean(pre), s = mean(scratch), s3 = mean(scratch30);
  return {p >= s && p >= s3 - 0.02 && secs < 600.0,
          fmt("pretrained@10%% %.3f, scratch@10%% %.3f, scratch@30%% %.3f, %.0fs", p, s, s3, secs)};
}

// Target: amplitudes scaled by kGain, noise of std kNoise.
constexpr double kGain = 3.0;
constexpr double kNoise = 0.5;
constexpr int kDepth = 5;

Verdict domain_shift() {
  const auto t0 = Clock::now();
  const synthetic::LabeledSeries src = synthetic::sinusoid_mixture_classes(300, 64, 21);
  const synthetic::LabeledSeries tgt = synthetic::sinusoid_mixture_classes(300, 64, 22, kGain, kNoise);
  TaskSpec spec = TaskSpec::classification(3);
  spec.epochs = 60;
  spec.normalization = NormalizationMode::zscore_per_channel;
  PipelineOptions o;
  // five conv blocks for both arms
  for (TemplateFamily f : all_template_families()) {
    PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, 1);
    c.encoder.depth = kDepth;
    o.templates.push_back(c);
  }
  const TimeSeriesDataset src_norm = normalize(src.data, NormalizationMode::zscore_per_channel).first;
  std::vector<PretrainedInstance> encoders;
  for (const PretrainTemplateConfig& c : o.templates) encoders.push_back(fit(c, src_norm));
  o.encoders = encoders;

  std::vector<double> pre, scratch;
  for (std::uint64_t seed : {0, 1, 2}) {
    const ComparisonReport r = pipeline_domain_shift(src.data, LabelSet::classes(src.labels, 3), tgt.data,
                                                     LabelSet::classes(tgt.labels, 3), 20, spec, seed, o);
    pre.push_back(r.pretrained->metrics.at("accuracy"));
    scratch.push_back(r.scratch->metrics.at("accuracy"));
  }
  const double secs = since(t0);
  const double p = mean(pre), s = mean(scratch);
  return {p >= s && secs < 600.0,
          fmt("gain %.1f noise %.1f depth %d: pretrained %.3f, scratch(source+20) %.3f, %.0fs", kGain, kNoise, kDepth, p, s,
              secs)};
}

// ---------------------------------------------------------------------------

Verdict anomaly() {
  constexpr int kWindow = 64;
  const synthetic::SpikeRecording rec = synthetic::spike_recording(kWindow * 200, 16, 0.01, 5.0, 3);
  std::vector<Matrix> windows;
  std::vector<BoolArray> truth;
  for (int w = 0; w < 200; ++w) {
    windows.push_back(rec.series.middleCols(w * kWindow, kWindow));
    truth.push_back(rec.anomalies.middleCols(w * kWindow, kWindow));
  }
  const TimeSeriesDataset train(std::vector<Matrix>(windows.begin(), windows.begin() + 100));
  const TimeSeriesDataset held(std::vector<Matrix>(windows.begin() + 100, windows.end()));
  const std::vector<BoolArray> held_truth(truth.begin() + 100, truth.end());

  std::vector<PretrainedInstance> encoders;
  for (TemplateFamily f : all_template_families()) encoders.push_back(fit(PretrainTemplateConfig::defaults(f, 1), train));
  TaskSpec spec = TaskSpec::anomaly_detection();
  spec.threshold = ThresholdRule::quantile(0.99);
  const TaskModel m = fine_tune(make_task_model(encoders, {}, spec, 1, kWindow), train);
  const AnomalyResult r = anomaly_detect(m, held);
  std::vector<BoolArray> flags;
  for (Eigen::Index i = 0; i < r.flags.rows(); ++i) flags.push_back(r.flags.row(i));
  const DetectionScores d = detection_scores(flags, held_truth);

  bool consistent = true;
  const double lo = r.scores.minCoeff(), hi = r.scores.maxCoeff();
  for (int k = 0; k < 20; ++k) {
    const double tau = lo + (hi - lo) * k / 19.0;
    const AnomalyResult s = anomaly_decide(r.scores, ThresholdRule::fixed(tau));
    consistent = consistent && ((r.scores.array() > tau) == s.flags).all();
  }
  return {d.f1 >= 0.8 && consistent,
          fmt("held-out F1 %.3f (P %.3f R %.3f) at tau %.4f, 20-tau sweep %s", d.f1, d.precision, d.recall, r.tau,
              consistent ? "consistent" : "INCONSISTENT")};
}

Verdict imputation() {
  std::vector<double> dae, base;
  bool passthrough = true;
  for (std::uint64_t seed : {0, 1, 2}) {
    const TimeSeriesDataset train = synthetic::sinusoids(200, 2, 32, 100 + seed);
    const TimeSeriesDataset test = synthetic::sinusoids(60, 2, 32, 200 + seed);
    const MissingIndex miss = synthetic::mcar_missing(60, 2, 32, 0.2, 300 + seed);

    std::vector<PretrainedInstance> encoders;
    for (TemplateFamily f : all_template_families()) {
      PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, 2);
      c.seed = seed;
      encoders.push_back(fit(c, train));
    }
    TaskSpec spec = TaskSpec::imputation();
    spec.seed = seed;
    const TaskModel m = impute_fit(make_task_model(encoders, {}, spec, 2, 32), train);

    // observed cells carry the truth; missing ones are zeroed
    std::vector<Matrix> masked;
    for (int i = 0; i < test.size(); ++i)
      masked.push_back(apply_mask(test.sample(i), mask_from_positions(2, 32, miss.positions[static_cast<std::size_t>(i)])));
    const TimeSeriesDataset input(masked);
    const ImputationResult r = impute_predict(m, input, miss);

    double se = 0.0, se_base = 0.0;
    long cells = 0;
    std::size_t k = 0;
    for (int i = 0; i < test.size(); ++i) {
      const auto& pos = miss.positions[static_cast<std::size_t>(i)];
      const BoolArray keep = mask_from_positions(2, 32, pos);
      for (int d = 0; d < 2; ++d) {
        const double n_obs = keep.row(d).cast<double>().sum();
        const double channel_mean = n_obs > 0 ? (keep.row(d).cast<double>() * test.sample(i).row(d).array()).sum() / n_obs : 0.0;
        for (int t = 0; t < 32; ++t) {
          if (keep(d, t)) {
            passthrough = passthrough && r.completed.sample(i)(d, t) == input.sample(i)(d, t);
            continue;
          }
          const double truth = test.sample(i)(d, t);
          se_base += (channel_mean - truth) * (channel_mean - truth);
          ++cells;
        }
      }
      for (auto [d, t] : pos) {
        const double e = r.imputed[k++] - test.sample(i)(d, t);
        se += e * e;
      }
    }
    dae.push_back(se / static_cast<double>(cells));
    base.push_back(se_base / static_cast<double>(cells));
  }
  const double a = mean(dae), b = mean(base);
  return {a < b && passthrough, fmt("DAE MSE %.4f vs per-channel mean %.4f, observed cells %s", a, b,
                                    passthrough ? "bit-identical" : "CHANGED")};
}

Verdict clustering() {
  const synthetic::LabeledSeries ds = synthetic::three_clusters(150, 32, 5);
  std::vector<PretrainedInstance> encoders;
  for (TemplateFamily f : all_template_families()) encoders.push_back(fit(PretrainTemplateConfig::defaults(f, 1), ds.data));
  TaskSpec spec = TaskSpec::clustering(3);
  spec.epochs = 10;
  spec.cluster_weight = 0.1;
  const TaskModel m = fine_tune(make_task_model(encoders, {}, spec, 1, 32), ds.data);
  const double ari = adjusted_rand_index(cluster_predict(m, ds.data), ds.labels);
  const double raw = adjusted_rand_index(kmeans(ds.data.flattened(), 3).assignments, ds.labels);
  const double p1 = m.penalty_history.front(), p10 = m.penalty_history.back();
  return {ari >= raw && m.penalty_history.size() == 10 && p10 <= p1,
          fmt("ARI fused %.3f vs raw k-means %.3f, penalty epoch1 %.4f -> epoch10 %.4f", ari, raw, p1, p10)};
}

// ---------------------------------------------------------------------------

Verdict fusion() {
  bool ok = true;
  int cases = 0;
  const std::vector<int> ks{4, 8, 16};
  for (int m = 1; m <= 3; ++m) {
    // every assignment of K_m from {4, 8, 16}
    std::vector<int> idx(static_cast<std::size_t>(m), 0);
    while (true) {
      std::vector<int> dims;
      for (int i : idx) dims.push_back(ks[static_cast<std::size_t>(i)]);
      const int total = std::accumulate(dims.begin(), dims.end(), 0);
      std::vector<Matrix> reprs;
      for (std::size_t i = 0; i < dims.size(); ++i) reprs.push_back(gaussian(5, dims[i], 10 * cases + i));
      const FusionModel concat(FusionConfig{FusionKind::concatenation, 0, true}, dims);
      const Matrix c = concat.fuse(reprs);
      ok = ok && c.cols() == total;
      int off = 0;
      for (std::size_t i = 0; i < dims.size(); ++i) {
        ok = ok && c.middleCols(off, dims[i]) == reprs[i];
        off += dims[i];
      }
      const FusionModel proj(FusionConfig{FusionKind::projection, total, true}, dims);
      ok = ok && (proj.fuse(reprs) - c).cwiseAbs().maxCoeff() <= 1e-6;
      ++cases;
      std::size_t j = 0;
      while (j < idx.size() && ++idx[j] == 3) idx[j++] = 0;
      if (j == idx.size()) break;
    }
  }
  return {ok, fmt("%d dimension combinations: offsets and identity projection agree", cases)};
}

TaskModel small_model(TaskSpec spec, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels) {
  std::vector<PretrainedInstance> insts;
  for (TemplateFamily f : {TemplateFamily::contrastive_series, TemplateFamily::hybrid}) {
    PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, data.channels());
    c.encoder.hidden_width = 16;
    c.encoder.repr_dim = 16;
    c.epochs = 2;
    insts.push_back(fit(c, data));
  }
  spec.epochs = 3;
  spec.normalization = NormalizationMode::zscore_per_channel;
  return fine_tune(make_task_model(insts, FusionConfig{FusionKind::projection, 12, true}, spec, data.channels(),
                                   data.length()),
                   data, labels);
}

double max_diff(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, (a[i] - b[i]).cwiseAbs().maxCoeff());
  return d;
}

Verdict export_roundtrip() {
  const synthetic::LabeledSeries cls = synthetic::frequency_warp_classes(30, 32, 1);
  const TimeSeriesDataset multi = synthetic::sinusoids(20, 2, 32, 2);
  auto roundtrip = [](const TaskModel& m) { return import_model_json(Json::parse(export_model_json(m).dump())); };
  double worst = 0.0;
  bool same_labels = true;

  const TaskModel c = small_model(TaskSpec::classification(3), cls.data, LabelSet::classes(cls.labels, 3));
  const ClassPrediction a = classify_predict(c, cls.data), b = classify_predict(roundtrip(c), cls.data);
  same_labels = same_labels && a.labels == b.labels;
  worst = std::max(worst, (a.probabilities - b.probabilities).cwiseAbs().maxCoeff());

  const TaskModel k = small_model(TaskSpec::clustering(3), cls.data, std::nullopt);
  same_labels = same_labels && cluster_predict(k, cls.data) == cluster_predict(roundtrip(k), cls.data);

  const TaskModel f = small_model(TaskSpec::forecasting(4), multi, std::nullopt);
  worst = std::max(worst, max_diff(forecast_predict(f, multi), forecast_predict(roundtrip(f), multi)));

  const TaskModel an = small_model(TaskSpec::anomaly_detection(), multi, std::nullopt);
  const AnomalyResult ra = anomaly_detect(an, multi), rb = anomaly_detect(roundtrip(an), multi);
  worst = std::max(worst, (ra.scores - rb.scores).cwiseAbs().maxCoeff());
  same_labels = same_labels && (ra.flags == rb.flags).all();

  const TaskModel im = small_model(TaskSpec::imputation(), multi, std::nullopt);
  const MissingIndex miss = synthetic::mcar_missing(20, 2, 32, 0.2, 3);
  const ImputationResult ia = impute_predict(im, multi, miss), ib = impute_predict(roundtrip(im), multi, miss);
  for (std::size_t i = 0; i < ia.imputed.size(); ++i) worst = std::max(worst, std::abs(ia.imputed[i] - ib.imputed[i]));

  // tampering: every variant must be refused
  const Json doc = export_model_json(c);
  std::vector<Json> tampered;
  Json t = doc;
  t["schema_version"] = kSchemaVersion + 1;
  tampered.push_back(t);
  t = doc;
  t.erase("task_head");
  tampered.push_back(t);
  t = doc;
  {
    Json& p = t["encoders"][0]["parameters"][0];
    const std::string bytes = base64_decode(p["data"].get<std::string>());
    p["data"] = base64_encode(bytes.substr(0, bytes.size() - 4));
  }
  tampered.push_back(t);
  t = doc;
  {
    Json& p = t["task_head"]["parameters"][0];
    p["shape"] = Json::array({p["shape"][1], p["shape"][0]});
  }
  tampered.push_back(t);
  t = doc;
  t["fusion"]["input_dims"] = Json::array({16, 17});
  tampered.push_back(t);
  int rejected = 0;
  for (const Json& bad : tampered) {
    try {
      import_model_json(bad);
    } catch (const Error&) {
      ++rejected;
    }
  }
  const bool ok = worst <= 1e-6 && same_labels && rejected == static_cast<int>(tampered.size());
  return {ok, fmt("5 tasks, max deviation %.2e, discrete outputs %s, %d/%zu tampered exports rejected", worst,
                  same_labels ? "equal" : "DIFFER", rejected, tampered.size())};
}

Verdict tuner() {
  const SearchSpace space({Dimension::real("x", 0.0, 1.0)});
  auto f = [](const Json& c) {
    const double x = c.at("x").get<double>();
    return (x - 0.3) * (x - 0.3);
  };
  double grid_x = 0.0, grid_v = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 1000; ++i) {
    const double x = i / 1000.0, v = (x - 0.3) * (x - 0.3);
    if (v < grid_v) grid_v = v, grid_x = x;
  }
  std::vector<double> bayes, random;
  double worst_dx = 0.0;
  for (std::uint64_t seed = 0; seed < 11; ++seed) {
    const TuningResult b = bayes_optimize(f, space, 30, seed);
    bayes.push_back(b.best_value);
    worst_dx = std::max(worst_dx, std::abs(b.best.at("x").get<double>() - grid_x));
    random.push_back(random_search(f, space, 30, seed).best_value);
  }
  const double mb = median(bayes), mr = median(random);
  return {mb < mr && worst_dx < 0.1,
          fmt("median best bayes %.2e vs random %.2e, max |x - %.3f| %.4f over 11 seeds", mb, mr, grid_x, worst_dx)};
}

Verdict immutability() {
  Registry registry;
  const synthetic::LabeledSeries ds = synthetic::frequency_warp_classes(30, 32, 9);
  LoadedDataset loaded;
  loaded.data = ds.data;
  loaded.labels = LabelSet::classes(ds.labels, 3);
  const std::string dataset = registry.put_dataset(loaded);
  loaded.labels.reset();
  const std::string unlabeled = registry.put_dataset(loaded, "unlabeled");
  std::vector<PretrainTemplateConfig> configs;
  for (TemplateFamily f : all_template_families()) {
    PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, 1);
    c.encoder.hidden_width = 16;
    c.encoder.repr_dim = 16;
    c.epochs = 2;
    configs.push_back(c);
  }
  run_pretrain(registry, configs, dataset);
  std::vector<std::string> ids;
  std::vector<std::uint64_t> before;
  for (const EncoderEntry& e : registry.encoders()) {
    ids.push_back(e.id);
    before.push_back(registry.encoder_checksum(e.id));
  }
  int runs = 0;
  for (TaskSpec spec : {TaskSpec::classification(3), TaskSpec::clustering(3), TaskSpec::forecasting(4),
                        TaskSpec::anomaly_detection(), TaskSpec::imputation()}) {
    spec.epochs = 2;
    FinetuneRequest r;
    r.encoder_ids = ids;
    r.dataset_id = spec.task == TaskKind::classification ? dataset : unlabeled;
    r.spec = spec;
    r.fusion = FusionConfig{FusionKind::projection, 16, true};
    if (!run_finetune(registry, r).model_id.empty()) ++runs;
  }
  bool same = ids.size() == 5;
  for (std::size_t i = 0; i < ids.size(); ++i) same = same && registry.encoder_checksum(ids[i]) == before[i];
  return {same && runs == 5, fmt("%zu encoders, %d fine-tune runs, checksums %s", ids.size(), runs,
                                 same ? "unchanged" : "CHANGED")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient_fd", gradient_check},
      {"masked_locality", masked_locality},
      {"closed_forms", closed_forms},
      {"partial_labeling", partial_labeling},
      {"domain_shift", domain_shift},
      {"anomaly", anomaly},
      {"imputation", imputation},
      {"clustering", clustering},
      {"fusion", fusion},
      {"export", export_roundtrip},
      {"tuner", tuner},
      {"immutability", immutability},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %-17s %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(), since(t0));
    std::fflush(stdout);
  }
  return failed;
}
