#include "support.hpp"
#include "units/service.hpp"
#include "units/synthetic.hpp"

#include <set>

using namespace units;
using units::test::TempDir;

namespace {

PretrainTemplateConfig quick(TemplateFamily f, int epochs = 1) {
  PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, 1);
  c.encoder.hidden_width = 8;
  c.encoder.repr_dim = 8;
  c.epochs = epochs;
  return c;
}

LoadedDataset labeled(int n, std::uint64_t seed) {
  const synthetic::LabeledSeries s = synthetic::frequency_warp_classes(n, 16, seed);
  LoadedDataset ld;
  ld.data = s.data;
  ld.labels = LabelSet::classes(s.labels, 3);
  ld.missing.positions.resize(static_cast<std::size_t>(n));
  return ld;
}

FinetuneRequest classify_request(std::vector<std::string> encoders, const std::string& dataset) {
  FinetuneRequest r;
  r.encoder_ids = std::move(encoders);
  r.dataset_id = dataset;
  r.spec = TaskSpec::classification(3);
  r.spec.epochs = 2;
  return r;
}

}  // namespace

TEST_CASE("metric log") {
  MetricLog log;
  CHECK(log.size() == 0);
  for (long s = 0; s < 2500; ++s) log.append({s, 0, static_cast<double>(s), 0.0});
  CHECK(log.size() == 2500);
  CHECK_THROWS_AS(log.append({2499, 0, 0.0, 0.0}), StateError);
  const auto tail = log.snapshot(2490);
  REQUIRE(tail.size() == 10);
  CHECK(tail.front().step == 2490);
  CHECK(log.snapshot(9999).empty());
}

TEST_CASE("metric log readers see an ordered prefix while the writer appends") {
  MetricLog log;
  std::atomic<bool> done{false};
  std::thread writer([&] {
    for (long s = 0; s < 20000; ++s) log.append({s, 0, 1.0, 0.0});
    done = true;
  });
  bool ordered = true;
  while (!done) {
    const auto pts = log.snapshot();
    for (std::size_t i = 0; i < pts.size(); ++i) ordered &= pts[i].step == static_cast<long>(i);
  }
  writer.join();
  CHECK(ordered);
  CHECK(log.size() == 20000);
}

TEST_CASE("run lifecycle") {
  Run run("run-000001", RunKind::pretrain, Json::object());
  CHECK(run.status() == RunStatus::running);
  run.succeed({"enc-a"}, {});
  CHECK(run.status() == RunStatus::succeeded);
  CHECK_THROWS_AS(run.fail("late"), StateError);
  CHECK_THROWS_AS(run.succeed({}, {}), StateError);
  CHECK(run.summary().at("status") == "succeeded");
  run.wait();

  Run bad("run-000002", RunKind::finetune, Json::object());
  bad.fail("boom");
  CHECK(bad.error() == "boom");
  CHECK_THROWS_AS(bad.succeed({}, {}), StateError);
}

TEST_CASE("pre-training runs") {
  Registry reg;
  const std::string ds = reg.put_dataset(labeled(12, 1));
  CHECK(ds.rfind("ds-", 0) == 0);
  CHECK(reg.put_dataset(labeled(12, 1)) == ds);

  CHECK_THROWS_AS(run_pretrain(reg, {}, ds), ParameterError);
  CHECK_THROWS_AS(run_pretrain(reg, {quick(TemplateFamily::contrastive_series)}, "ds-nope"), NotFoundError);
  PretrainTemplateConfig two_channel = quick(TemplateFamily::contrastive_series);
  two_channel.encoder.input_dims = 2;
  CHECK_THROWS_AS(run_pretrain(reg, {two_channel}, ds), ShapeError);

  const auto ids = run_pretrain(reg, {quick(TemplateFamily::contrastive_series), quick(TemplateFamily::hybrid, 2)}, ds);
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] != ids[1]);
  for (const std::string& id : ids) {
    const auto run = reg.run(id);
    CHECK(run->status() == RunStatus::succeeded);
    const auto pts = run->metrics().snapshot();
    CHECK_FALSE(pts.empty());
    for (std::size_t i = 1; i < pts.size(); ++i) CHECK(pts[i].step > pts[i - 1].step);
    REQUIRE(run->encoder_ids().size() == 1);
  }
  CHECK(reg.run(ids[1])->metrics().size() > reg.run(ids[0])->metrics().size());
  CHECK(reg.encoders().size() == 2);

  SUBCASE("injected divergence fails the run and registers nothing") {
    PretrainTemplateConfig wild = quick(TemplateFamily::autoregressive_mask, 5);
    wild.learning_rate = 1e200;
    const auto bad = run_pretrain(reg, {wild}, ds);
    const auto run = reg.run(bad.at(0));
    CHECK(run->status() == RunStatus::failed);
    CHECK_FALSE(run->error().empty());
    CHECK(run->encoder_ids().empty());
    CHECK(reg.encoders().size() == 2);
  }
}

TEST_CASE("fine-tuning runs leave encoders untouched") {
  Registry reg;
  const std::string ds = reg.put_dataset(labeled(15, 2));
  const auto runs = run_pretrain(reg, {quick(TemplateFamily::contrastive_series), quick(TemplateFamily::autoregressive_mask)}, ds);
  std::vector<std::string> enc;
  for (const std::string& r : runs) enc.push_back(reg.run(r)->encoder_ids().at(0));
  std::map<std::string, std::uint64_t> before;
  for (const std::string& e : enc) before[e] = reg.encoder_checksum(e);

  const FinetuneHandle a = run_finetune(reg, classify_request(enc, ds));
  FinetuneRequest proj = classify_request({enc[0]}, ds);
  proj.fusion.kind = FusionKind::projection;
  const FinetuneHandle b = run_finetune(reg, proj);
  FinetuneRequest frozen = classify_request(enc, ds);
  frozen.spec.trainable.encoders = false;
  run_finetune(reg, frozen);

  for (const std::string& e : enc) CHECK(reg.encoder_checksum(e) == before[e]);
  CHECK(reg.run(a.run_id)->status() == RunStatus::succeeded);
  const auto model = reg.model(a.model_id);
  CHECK(model->output_dim() == 16);
  CHECK(reg.model(b.model_id)->output_dim() == 32);
  CHECK_FALSE(model->instances[0].encoder().parameters() == reg.encoder(enc[0])->encoder().parameters());

  SUBCASE("request validation") {
    CHECK_THROWS_AS(run_finetune(reg, classify_request({"enc-missing"}, ds)), NotFoundError);
    CHECK_THROWS_AS(run_finetune(reg, classify_request({}, ds)), ParameterError);
    FinetuneRequest both = classify_request(enc, ds);
    both.from_scratch = true;
    CHECK_THROWS_AS(run_finetune(reg, both), ParameterError);
    LoadedDataset unlabeled = labeled(15, 2);
    unlabeled.labels.reset();
    const std::string plain = reg.put_dataset(unlabeled);
    CHECK_THROWS_AS(run_finetune(reg, classify_request(enc, plain)), ParameterError);
    FinetuneRequest withlabels = classify_request(enc, plain);
    withlabels.labels_id = ds;
    CHECK(reg.run(run_finetune(reg, withlabels).run_id)->status() == RunStatus::succeeded);
  }
  SUBCASE("from-scratch baseline") {
    FinetuneRequest s = classify_request({}, ds);
    s.from_scratch = true;
    s.scratch_templates = {quick(TemplateFamily::contrastive_series)};
    const FinetuneHandle h = run_finetune(reg, s);
    CHECK(reg.model(h.model_id)->from_scratch);
  }
  SUBCASE("request JSON roundtrip") {
    FinetuneRequest r = classify_request(enc, ds);
    r.labels_id = ds;
    CHECK(to_json(finetune_request_from_json(to_json(r))) == to_json(r));
  }
}

TEST_CASE("worker pool service runs jobs concurrently and isolates streams") {
  Registry reg;
  Service svc(reg, 2);
  const std::string ds = reg.put_dataset(labeled(12, 3));
  const auto ids = svc.submit_pretrain({quick(TemplateFamily::contrastive_series, 3), quick(TemplateFamily::contrastive_timestamp, 2)}, ds);
  svc.wait_idle();
  std::set<std::string> encs;
  for (const std::string& id : ids) {
    const auto run = reg.run(id);
    CHECK(run->status() == RunStatus::succeeded);
    encs.insert(run->encoder_ids().at(0));
  }
  CHECK(encs.size() == 2);
  const std::string ft = svc.submit_finetune(classify_request({*encs.begin()}, ds));
  svc.wait_idle();
  CHECK(reg.run(ft)->model_ids().size() == 1);
}

TEST_CASE("store persists and reloads") {
  TempDir dir("store");
  std::string ds, enc, model, run_id;
  std::uint64_t sum = 0;
  {
    Registry reg(dir.path());
    ds = reg.put_dataset(labeled(12, 4), "demo");
    const auto runs = run_pretrain(reg, {quick(TemplateFamily::contrastive_series)}, ds);
    enc = reg.run(runs[0])->encoder_ids().at(0);
    sum = reg.encoder_checksum(enc);
    const FinetuneHandle h = run_finetune(reg, classify_request({enc}, ds));
    model = h.model_id;
    run_id = h.run_id;
  }
  CHECK(std::filesystem::exists(dir.path() / "datasets" / (ds + ".uts")));
  CHECK(std::filesystem::exists(dir.path() / "models" / (model + ".json")));
  Registry again(dir.path());
  CHECK(again.dataset(ds)->data.size() == 12);
  CHECK(again.encoder_checksum(enc) == sum);
  CHECK(again.run(run_id)->status() == RunStatus::succeeded);
  CHECK(again.run(run_id)->metrics().size() > 0);
  const synthetic::LabeledSeries probe = synthetic::frequency_warp_classes(6, 16, 9);
  Registry first(dir.path());
  CHECK(classify_predict(*again.model(model), probe.data).labels == classify_predict(*first.model(model), probe.data).labels);
  // new runs continue the numbering
  const auto more = run_pretrain(again, {quick(TemplateFamily::contrastive_series)}, ds);
  CHECK(more[0] > run_id);
  CHECK_THROWS_AS(again.model("mdl-0000000000000000"), NotFoundError);
}

TEST_CASE("partial-labeling pipeline") {
  const synthetic::LabeledSeries s = synthetic::frequency_warp_classes(60, 16, 5);
  const LabelSet labels = LabelSet::classes(s.labels, 3);
  TaskSpec spec = TaskSpec::classification(3);
  spec.epochs = 2;
  PipelineOptions o;
  o.templates = {quick(TemplateFamily::contrastive_series)};
  const ComparisonReport a = pipeline_partial_labeling(s.data, labels, 0.25, spec, 1, o);
  REQUIRE(a.pretrained.has_value());
  REQUIRE(a.scratch.has_value());
  CHECK(a.pretrained->labeled_samples == a.scratch->labeled_samples);
  CHECK(a.pretrained->labeled_samples >= 9);
  CHECK(a.pretrained->labeled_samples <= 10);
  CHECK(a.pretrained->metrics.count("accuracy") == 1);
  const ComparisonReport b = pipeline_partial_labeling(s.data, labels, 0.25, spec, 1, o);
  CHECK(a.split_digest == b.split_digest);
  CHECK(a.pretrained->metrics == b.pretrained->metrics);
  CHECK(a.scratch->metrics == b.scratch->metrics);

  const ComparisonReport all = pipeline_partial_labeling(s.data, labels, 1.0, spec, 1, o);
  CHECK(all.pretrained->labeled_samples == all.pretrained->train_samples);
  CHECK_THROWS_AS(pipeline_partial_labeling(s.data, labels, 0.05, spec, 1, o), ParameterError);
  CHECK_THROWS_AS(pipeline_partial_labeling(s.data, labels, 0.0, spec, 1, o), ParameterError);
  const Json j = to_json(a);
  CHECK(j.at("pipeline") == "partial_labeling");
}

TEST_CASE("domain-shift pipeline") {
  const synthetic::LabeledSeries src = synthetic::sinusoid_mixture_classes(30, 16, 1);
  const synthetic::LabeledSeries tgt = synthetic::sinusoid_mixture_classes(30, 16, 2, 2.0, 0.5);
  TaskSpec spec = TaskSpec::classification(3);
  spec.epochs = 2;
  PipelineOptions o;
  o.templates = {quick(TemplateFamily::contrastive_series)};
  const LabelSet sl = LabelSet::classes(src.labels, 3), tl = LabelSet::classes(tgt.labels, 3);
  const ComparisonReport r = pipeline_domain_shift(src.data, sl, tgt.data, tl, 6, spec, 0, o);
  CHECK(r.pretrained->labeled_samples == 6);
  CHECK(r.scratch->labeled_samples == 36);
  CHECK(r.pretrained->metrics.at("accuracy") >= 0.0);
  const ComparisonReport zero = pipeline_domain_shift(src.data, sl, tgt.data, tl, 0, spec, 0, o);
  CHECK(zero.pretrained->labeled_samples == 30);
  CHECK_THROWS_AS(pipeline_domain_shift(src.data, sl, tgt.data, tl, 31, spec, 0, o), ParameterError);
  CHECK_THROWS_AS(pipeline_domain_shift(src.data, sl, synthetic::sinusoids(30, 2, 16, 1), tl, 3, spec, 0, o), ParameterError);
}

TEST_CASE("evaluation payloads follow the task") {
  const synthetic::LabeledSeries s = synthetic::frequency_warp_classes(12, 16, 6);
  PretrainTemplateConfig c = quick(TemplateFamily::contrastive_series, 0);
  const PretrainedInstance inst = fit(c, s.data);

  TaskSpec cls = TaskSpec::classification(3);
  cls.epochs = 1;
  const TaskModel m = fine_tune(make_task_model({inst}, {}, cls, 1, 16), s.data, LabelSet::classes(s.labels, 3));
  const Json p = evaluation_payload(m, s.data, LabelSet::classes(s.labels, 3));
  CHECK(p.at("task") == "classification");
  long total = 0;
  for (const Json& row : p.at("confusion_matrix"))
    for (const Json& v : row) total += v.get<long>();
  CHECK(total == 12);
  CHECK(p.at("projection").size() == 12);

  TaskSpec an = TaskSpec::anomaly_detection();
  an.epochs = 1;
  const TaskModel am = fine_tune(make_task_model({inst}, {}, an, 1, 16), s.data);
  const Json ap = evaluation_payload(am, s.data, std::nullopt);
  CHECK(ap.at("metrics").empty());
  const double tau = ap.at("tau").get<double>();
  for (std::size_t i = 0; i < ap.at("scores").size(); ++i)
    for (std::size_t t = 0; t < ap.at("scores")[i].size(); ++t)
      CHECK((ap.at("flags")[i][t].get<int>() != 0) == (ap.at("scores")[i][t].get<double>() > tau));

  const Matrix rows = units::test::random_matrix(20, 5, 1);
  const Matrix proj = project_2d(rows);
  CHECK(proj.rows() == 20);
  CHECK(proj.cols() == 2);
  CHECK(std::abs(proj.col(0).mean()) < 1e-9);
  CHECK(proj.col(0).squaredNorm() >= proj.col(1).squaredNorm());
}
