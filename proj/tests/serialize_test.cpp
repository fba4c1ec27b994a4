#include "support.hpp"
#include "units/serialize.hpp"
#include "units/synthetic.hpp"

using namespace units;
using units::test::random_matrix;

namespace {

TaskModel trained(TaskSpec spec, const TimeSeriesDataset& data, const std::optional<LabelSet>& labels,
                  FusionKind fusion = FusionKind::projection) {
  std::vector<PretrainedInstance> insts;
  for (TemplateFamily f : {TemplateFamily::contrastive_series, TemplateFamily::hybrid}) {
    PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, data.channels());
    c.encoder.hidden_width = 8;
    c.encoder.repr_dim = 8;
    c.epochs = 1;
    insts.push_back(fit(c, data));
  }
  FusionConfig fc;
  fc.kind = fusion;
  fc.output_dim = 6;
  spec.epochs = 2;
  spec.normalization = NormalizationMode::zscore_per_channel;
  const int len = data.length();
  return fine_tune(make_task_model(insts, fc, spec, data.channels(), len), data, labels);
}

double max_diff(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, (a[i] - b[i]).cwiseAbs().maxCoeff());
  return d;
}

}  // namespace

TEST_CASE("base64 and sha256 vectors") {
  CHECK(base64_encode("") == "");
  CHECK(base64_encode("f") == "Zg==");
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
  CHECK(base64_decode("Zm9vYg==") == "foob");
  CHECK_THROWS_AS(base64_decode("Zm9v!"), FormatError);
  CHECK_THROWS_AS(base64_decode("Zm9"), FormatError);
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("tensor encoding") {
  const Matrix m = random_matrix(3, 2, 1).cast<float>().cast<double>();
  const Json j = tensor_to_json("w", m);
  CHECK(j.at("shape") == Json::array({3, 2}));
  CHECK(tensor_from_json(j, "t") == m);
  Json bad = j;
  bad["shape"] = Json::array({2, 2});
  CHECK_THROWS_AS(tensor_from_json(bad, "t"), ShapeError);
  bad = j;
  bad["data"] = "***";
  CHECK_THROWS_AS(tensor_from_json(bad, "t"), FormatError);
  bad = j;
  bad["data"] = base64_encode(std::string(24, '\xff'));  // NaN payload
  CHECK_THROWS_AS(tensor_from_json(bad, "t"), NumericError);
}

TEST_CASE("config JSON roundtrips") {
  for (TemplateFamily f : all_template_families()) {
    const PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, 3);
    CHECK(to_json(template_config_from_json(to_json(c))) == to_json(c));
  }
  TaskSpec s = TaskSpec::anomaly_detection();
  s.threshold = ThresholdRule::fixed(0.7);
  s.trainable.fusion = false;
  CHECK(to_json(task_spec_from_json(to_json(s))) == to_json(s));
  Json bad = to_json(PretrainTemplateConfig{});
  bad["family"] = "nope";
  CHECK_THROWS_AS(template_config_from_json(bad), FormatError);
  bad = to_json(PretrainTemplateConfig{});
  bad["encoder"]["architecture"] = "lstm";
  CHECK_THROWS_AS(template_config_from_json(bad), FormatError);
  const LabelSet ls = LabelSet::classes({0, 2, 1}, 3);
  CHECK(*labels_from_json(to_json(ls)).class_labels == *ls.class_labels);
}

TEST_CASE("export roundtrip for all five tasks") {
  const synthetic::LabeledSeries cls = synthetic::frequency_warp_classes(12, 16, 1);
  const TimeSeriesDataset multi = synthetic::sinusoids(10, 2, 16, 2);

  SUBCASE("classification") {
    const TaskModel m = trained(TaskSpec::classification(3), cls.data, LabelSet::classes(cls.labels, 3));
    const TaskModel back = import_model_json(Json::parse(export_model_json(m).dump()));
    const ClassPrediction a = classify_predict(m, cls.data), b = classify_predict(back, cls.data);
    CHECK(a.labels == b.labels);
    CHECK((a.probabilities - b.probabilities).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(export_model_json(back) == export_model_json(m));
  }
  SUBCASE("clustering") {
    const TaskModel m = trained(TaskSpec::clustering(3), cls.data, std::nullopt, FusionKind::concatenation);
    const TaskModel back = import_model_json(export_model_json(m));
    CHECK(cluster_predict(m, cls.data) == cluster_predict(back, cls.data));
  }
  SUBCASE("forecasting") {
    const TaskModel m = trained(TaskSpec::forecasting(4), multi, std::nullopt);
    const TaskModel back = import_model_json(export_model_json(m));
    CHECK(max_diff(forecast_predict(m, multi), forecast_predict(back, multi)) <= 1e-6);
  }
  SUBCASE("anomaly detection") {
    const TaskModel m = trained(TaskSpec::anomaly_detection(), multi, std::nullopt);
    const TaskModel back = import_model_json(export_model_json(m));
    const AnomalyResult a = anomaly_detect(m, multi), b = anomaly_detect(back, multi);
    CHECK((a.scores - b.scores).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(a.tau == b.tau);
    CHECK((a.flags == b.flags).all());
  }
  SUBCASE("imputation") {
    const TaskModel m = trained(TaskSpec::imputation(), multi, std::nullopt);
    const TaskModel back = import_model_json(export_model_json(m));
    const MissingIndex miss = synthetic::mcar_missing(10, 2, 16, 0.2, 3);
    const ImputationResult a = impute_predict(m, multi, miss), b = impute_predict(back, multi, miss);
    REQUIRE(a.imputed.size() == b.imputed.size());
    for (std::size_t i = 0; i < a.imputed.size(); ++i) CHECK(std::abs(a.imputed[i] - b.imputed[i]) <= 1e-6);
  }
}

TEST_CASE("export schema and tamper rejection") {
  const synthetic::LabeledSeries cls = synthetic::frequency_warp_classes(12, 16, 1);
  const TaskModel m = trained(TaskSpec::classification(3), cls.data, LabelSet::classes(cls.labels, 3));
  const Json doc = export_model_json(m);
  std::vector<std::string> keys;
  for (auto it = doc.begin(); it != doc.end(); ++it) keys.push_back(it.key());
  std::sort(keys.begin(), keys.end());
  CHECK(keys == std::vector<std::string>{"encoders", "fusion", "normalization", "schema_version", "task_head", "task_spec"});
  CHECK(doc.at("encoders").size() == 2);

  SUBCASE("version") {
    Json bad = doc;
    bad["schema_version"] = kSchemaVersion + 1;
    CHECK_THROWS_AS(import_model_json(bad), VersionError);
  }
  SUBCASE("missing key") {
    Json bad = doc;
    bad.erase("fusion");
    CHECK_THROWS_AS(import_model_json(bad), FormatError);
  }
  SUBCASE("truncated parameter array names the entry") {
    Json bad = doc;
    Json& t = bad["encoders"][1]["parameters"][0];
    const std::string bytes = base64_decode(t["data"].get<std::string>());
    t["data"] = base64_encode(bytes.substr(0, bytes.size() - 4));
    try {
      import_model_json(bad);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("encoders[1]") != std::string::npos);
    }
  }
  SUBCASE("reshaped head") {
    Json bad = doc;
    Json& t = bad["task_head"]["parameters"][0];
    t["shape"] = Json::array({t["shape"][1], t["shape"][0]});
    CHECK_THROWS_AS(import_model_json(bad), ShapeError);
  }
  SUBCASE("fusion dims disagree with the encoders") {
    Json bad = doc;
    bad["fusion"]["input_dims"] = Json::array({8, 9});
    CHECK_THROWS(import_model_json(bad));
  }
  SUBCASE("unknown task") {
    Json bad = doc;
    bad["task_spec"]["task"] = "ranking";
    CHECK_THROWS_AS(import_model_json(bad), ParameterError);
  }
  SUBCASE("unfitted export") {
    TaskModel u = m;
    u.fitted = false;
    CHECK_THROWS_AS(export_model_json(u), StateError);
  }
}
