#include "units/serialize.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <utility>

namespace units {

namespace {

template <typename E, std::size_t N>
using NameTable = std::array<std::pair<E, const char*>, N>;

template <typename E, std::size_t N>
std::string name_of(const NameTable<E, N>& table, E value) {
  for (const auto& [e, name] : table)
    if (e == value) return name;
  throw ParameterError("enum value has no name");
}

template <typename E, std::size_t N>
E value_of(const NameTable<E, N>& table, const std::string& name, const char* what) {
  std::string valid;
  for (const auto& [e, n] : table) {
    if (name == n) return e;
    valid += valid.empty() ? n : std::string(", ") + n;
  }
  throw FormatError(std::string("unknown ") + what + " '" + name + "' (expected one of: " + valid + ")");
}

constexpr NameTable<Architecture, 2> kArchitectures{{{Architecture::dilated_conv, "dilated_conv"},
                                                     {Architecture::mlp, "mlp"}}};
constexpr NameTable<MaskGeometry, 2> kGeometries{{{MaskGeometry::iid, "iid"},
                                                  {MaskGeometry::contiguous_spans, "contiguous_spans"}}};
constexpr NameTable<NormalizationMode, 3> kNormModes{{{NormalizationMode::zscore_per_channel, "zscore_per_channel"},
                                                      {NormalizationMode::minmax_per_channel, "minmax_per_channel"},
                                                      {NormalizationMode::none, "none"}}};
constexpr NameTable<Augmentation::Kind, 4> kAugmentations{{{Augmentation::Kind::jitter, "jitter"},
                                                           {Augmentation::Kind::scale, "scale"},
                                                           {Augmentation::Kind::crop_resize, "crop_resize"},
                                                           {Augmentation::Kind::permute_segments, "permute_segments"}}};
constexpr NameTable<ForecastLoss, 2> kForecastLosses{{{ForecastLoss::mse, "mse"}, {ForecastLoss::mae, "mae"}}};
constexpr NameTable<ThresholdRule::Kind, 2> kThresholdKinds{{{ThresholdRule::Kind::fixed, "fixed"},
                                                             {ThresholdRule::Kind::quantile, "quantile"}}};
constexpr NameTable<LabelKind, 5> kLabelKinds{{{LabelKind::class_labels, "class_labels"},
                                               {LabelKind::cluster_count, "cluster_count"},
                                               {LabelKind::horizon, "horizon"},
                                               {LabelKind::anomaly_flags, "anomaly_flags"},
                                               {LabelKind::missing_targets, "missing_targets"}}};

// Runs f, turning JSON library errors into FormatError with context.
template <typename F>
auto guarded(const std::string& context, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": " + e.what());
  }
}

Json vector_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

Vector vector_from(const Json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

Json bool_array_json(const BoolArray& a) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    std::vector<int> row;
    for (Eigen::Index c = 0; c < a.cols(); ++c) row.push_back(a(r, c) ? 1 : 0);
    rows.push_back(row);
  }
  return rows;
}

BoolArray bool_array_from(const Json& j) {
  const auto rows = j.get<std::vector<std::vector<int>>>();
  if (rows.empty()) return BoolArray(0, 0);
  BoolArray a(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.front().size()) throw ShapeError("ragged flag rows");
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c] != 0;
  }
  return a;
}

}  // namespace

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw FormatError("malformed base64");
  std::size_t padding = 0;
  if (!text.empty() && text.back() == '=') ++padding;
  if (text.size() >= 2 && text[text.size() - 2] == '=') ++padding;
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

Json tensor_to_json(const std::string& name, const Matrix& value) {
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(value.size()) * 4);
  for (Eigen::Index r = 0; r < value.rows(); ++r)
    for (Eigen::Index c = 0; c < value.cols(); ++c) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value(r, c)));
      for (int b = 0; b < 4; ++b) bytes += static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
  return {{"name", name}, {"shape", {value.rows(), value.cols()}}, {"data", base64_encode(bytes)}};
}

Matrix tensor_from_json(const Json& j, const std::string& context) {
  return guarded(context, [&] {
    const std::string name = j.at("name").get<std::string>();
    const std::string where = context + " '" + name + "'";
    const auto shape = j.at("shape").get<std::vector<long>>();
    if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw ShapeError(where + ": shape must be [rows, cols]");
    const std::string bytes = base64_decode(j.at("data").get<std::string>());
    const auto expected = static_cast<std::size_t>(shape[0] * shape[1] * 4);
    if (bytes.size() != expected)
      throw ShapeError(where + ": data holds " + std::to_string(bytes.size() / 4) + " values, shape needs " +
                       std::to_string(expected / 4));
    Matrix m(shape[0], shape[1]);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c, k += 4) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[k + b])) << (8 * b);
        const float v = std::bit_cast<float>(bits);
        if (!std::isfinite(v)) throw NumericError(where + ": non-finite value");
        m(r, c) = v;
      }
    return m;
  });
}

Json to_json(const ParameterStore& params) {
  Json out = Json::array();
  for (const auto& e : params.entries()) out.push_back(tensor_to_json(e.name, e.value));
  return out;
}

ParameterStore parameters_from_json(const Json& j, const std::string& context) {
  return guarded(context, [&] {
    ParameterStore p;
    for (const Json& t : j) p.add(t.at("name").get<std::string>(), tensor_from_json(t, context));
    return p;
  });
}

Json to_json(const EncoderConfig& c) {
  return {{"architecture", name_of(kArchitectures, c.architecture)},
          {"input_dims", c.input_dims},
          {"depth", c.depth},
          {"hidden_width", c.hidden_width},
          {"repr_dim", c.repr_dim},
          {"kernel_size", c.kernel_size},
          {"seed", c.seed}};
}

EncoderConfig encoder_config_from_json(const Json& j) {
  return guarded("encoder config", [&] {
    EncoderConfig c;
    c.architecture = value_of(kArchitectures, j.value("architecture", std::string("dilated_conv")), "architecture");
    c.input_dims = j.value("input_dims", c.input_dims);
    c.depth = j.value("depth", c.depth);
    c.hidden_width = j.value("hidden_width", c.hidden_width);
    c.repr_dim = j.value("repr_dim", c.repr_dim);
    c.kernel_size = j.value("kernel_size", c.kernel_size);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  });
}

Json to_json(const PretrainTemplateConfig& c) {
  Json augs = Json::array();
  for (const Augmentation& a : c.augmentations)
    augs.push_back({{"kind", name_of(kAugmentations, a.kind)}, {"param", a.param}});
  Json j{{"family", to_string(c.family)},
         {"encoder", to_json(c.encoder)},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"temperature", c.temperature},
         {"masking_rate", c.masking_rate},
         {"mask_geometry", name_of(kGeometries, c.mask_geometry)},
         {"augmentations", augs},
         {"n_negatives", c.n_negatives},
         {"seed", c.seed}};
  j["hybrid_weight"] = c.hybrid_weight ? Json(*c.hybrid_weight) : Json(nullptr);
  return j;
}

PretrainTemplateConfig template_config_from_json(const Json& j) {
  return guarded("template config", [&] {
    PretrainTemplateConfig c;
    try {
      c.family = parse_template_family(j.at("family").get<std::string>());
    } catch (const ParameterError& e) {
      throw FormatError(e.what());
    }
    c.encoder = encoder_config_from_json(j.at("encoder"));
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.masking_rate = j.at("masking_rate").get<double>();
    c.mask_geometry = value_of(kGeometries, j.at("mask_geometry").get<std::string>(), "mask geometry");
    c.augmentations.clear();
    for (const Json& a : j.at("augmentations"))
      c.augmentations.push_back(
          {value_of(kAugmentations, a.at("kind").get<std::string>(), "augmentation"), a.at("param").get<double>()});
    c.n_negatives = j.at("n_negatives").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("hybrid_weight") && !j.at("hybrid_weight").is_null()) c.hybrid_weight = j.at("hybrid_weight").get<double>();
    c.validate();
    return c;
  });
}

Json to_json(const PretrainedInstance& inst) {
  return {{"template", to_json(inst.config())},
          {"parameters", to_json(inst.encoder().parameters())},
          {"head", to_json(inst.head())},
          {"loss_curve", inst.loss_curve()},
          {"fitted", inst.fitted()}};
}

PretrainedInstance instance_from_json(const Json& j, const std::string& context) {
  return guarded(context, [&] {
    PretrainTemplateConfig cfg = template_config_from_json(j.at("template"));
    ParameterStore params = parameters_from_json(j.at("parameters"), context + ".parameters");
    Encoder enc = [&] {
      try {
        return Encoder(cfg.encoder, std::move(params));
      } catch (const ShapeError& e) {
        throw ShapeError(context + ": " + e.what());
      }
    }();
    return PretrainedInstance(cfg, std::move(enc), parameters_from_json(j.at("head"), context + ".head"),
                              j.at("loss_curve").get<std::vector<double>>(), j.at("fitted").get<bool>());
  });
}

Json to_json(const FusionConfig& c) {
  return {{"kind", to_string(c.kind)}, {"output_dim", c.output_dim}, {"learnable", c.learnable}};
}

FusionConfig fusion_config_from_json(const Json& j) {
  return guarded("fusion config", [&] {
    FusionConfig c;
    c.kind = parse_fusion_kind(j.value("kind", std::string("concatenation")));
    c.output_dim = j.value("output_dim", c.output_dim);
    c.learnable = j.value("learnable", c.learnable);
    return c;
  });
}

Json to_json(const TaskSpec& s) {
  Json j{{"task", to_string(s.task)},
         {"forecast_loss", name_of(kForecastLosses, s.forecast_loss)},
         {"threshold", {{"rule", name_of(kThresholdKinds, s.threshold.kind)}, {"value", s.threshold.value}}},
         {"masking_rate", s.masking_rate},
         {"cluster_weight", s.cluster_weight},
         {"epochs", s.epochs},
         {"batch_size", s.batch_size},
         {"learning_rate", s.learning_rate},
         {"head_learning_rate", s.head_learning_rate},
         {"trainable", {{"encoders", s.trainable.encoders}, {"fusion", s.trainable.fusion}, {"head", s.trainable.head}}},
         {"normalization", name_of(kNormModes, s.normalization)},
         {"seed", s.seed}};
  j["classes"] = s.classes ? Json(*s.classes) : Json(nullptr);
  j["horizon"] = s.horizon ? Json(*s.horizon) : Json(nullptr);
  return j;
}

TaskSpec task_spec_from_json(const Json& j) {
  return guarded("task spec", [&] {
    TaskSpec s;
    s.task = parse_task_kind(j.at("task").get<std::string>());
    if (j.contains("classes") && !j["classes"].is_null()) s.classes = j["classes"].get<int>();
    if (j.contains("horizon") && !j["horizon"].is_null()) s.horizon = j["horizon"].get<int>();
    s.forecast_loss = value_of(kForecastLosses, j.value("forecast_loss", std::string("mse")), "forecast loss");
    if (j.contains("threshold")) {
      const Json& t = j["threshold"];
      s.threshold.kind = value_of(kThresholdKinds, t.value("rule", std::string("quantile")), "threshold rule");
      s.threshold.value = t.value("value", s.threshold.value);
    }
    s.masking_rate = j.value("masking_rate", s.masking_rate);
    s.cluster_weight = j.value("cluster_weight", s.cluster_weight);
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.learning_rate = j.value("learning_rate", s.learning_rate);
    s.head_learning_rate = j.value("head_learning_rate", s.head_learning_rate);
    if (j.contains("trainable")) {
      const Json& t = j["trainable"];
      s.trainable.encoders = t.value("encoders", true);
      s.trainable.fusion = t.value("fusion", true);
      s.trainable.head = t.value("head", true);
    }
    s.normalization = value_of(kNormModes, j.value("normalization", std::string("none")), "normalization");
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
  });
}

Json to_json(const NormalizationStats& s) {
  return {{"mode", name_of(kNormModes, s.mode)}, {"offset", vector_json(s.offset)}, {"scale", vector_json(s.scale)}};
}

NormalizationStats normalization_from_json(const Json& j) {
  return guarded("normalization", [&] {
    NormalizationStats s;
    s.mode = value_of(kNormModes, j.at("mode").get<std::string>(), "normalization");
    s.offset = vector_from(j.at("offset"));
    s.scale = vector_from(j.at("scale"));
    if (s.offset.size() != s.scale.size()) throw ShapeError("normalization: offset and scale differ in length");
    return s;
  });
}

Json to_json(const LabelSet& labels) {
  Json j{{"kind", name_of(kLabelKinds, labels.kind)}};
  if (labels.class_labels) j["class_labels"] = *labels.class_labels;
  if (labels.num_classes) j["num_classes"] = *labels.num_classes;
  if (labels.horizon) j["horizon"] = *labels.horizon;
  if (labels.anomaly_flags) {
    Json flags = Json::array();
    for (const BoolArray& f : *labels.anomaly_flags) flags.push_back(bool_array_json(f));
    j["anomaly_flags"] = flags;
  }
  if (labels.missing_targets) {
    Json targets = Json::array();
    for (const MissingTarget& t : *labels.missing_targets)
      targets.push_back({{"sample", t.sample}, {"channel", t.channel}, {"timestep", t.timestep}, {"value", t.value}});
    j["missing_targets"] = targets;
  }
  return j;
}

LabelSet labels_from_json(const Json& j) {
  return guarded("labels", [&] {
    LabelSet l;
    l.kind = value_of(kLabelKinds, j.at("kind").get<std::string>(), "label kind");
    if (j.contains("class_labels")) l.class_labels = j["class_labels"].get<std::vector<int>>();
    if (j.contains("num_classes")) l.num_classes = j["num_classes"].get<int>();
    if (j.contains("horizon")) l.horizon = j["horizon"].get<int>();
    if (j.contains("anomaly_flags")) {
      std::vector<BoolArray> flags;
      for (const Json& f : j["anomaly_flags"]) flags.push_back(bool_array_from(f));
      l.anomaly_flags = std::move(flags);
    }
    if (j.contains("missing_targets")) {
      std::vector<MissingTarget> targets;
      for (const Json& t : j["missing_targets"])
        targets.push_back({t.at("sample").get<int>(), t.at("channel").get<int>(), t.at("timestep").get<int>(),
                           t.at("value").get<double>()});
      l.missing_targets = std::move(targets);
    }
    return l;
  });
}

Json samples_to_json(const TimeSeriesDataset& data) {
  Json out = Json::array();
  for (const Matrix& x : data.samples()) {
    Json rows = Json::array();
    for (Eigen::Index d = 0; d < x.rows(); ++d) {
      const RowVector row = x.row(d);
      rows.push_back(std::vector<double>(row.data(), row.data() + row.size()));
    }
    out.push_back(rows);
  }
  return out;
}

TimeSeriesDataset samples_from_json(const Json& j) {
  return guarded("samples", [&] {
    const auto raw = j.get<std::vector<std::vector<std::vector<double>>>>();
    std::vector<Matrix> samples;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const auto& rows = raw[i];
      if (rows.empty()) throw ShapeError("sample " + std::to_string(i) + " has no channels");
      Matrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
      for (std::size_t d = 0; d < rows.size(); ++d) {
        if (rows[d].size() != rows.front().size())
          throw ShapeError("sample " + std::to_string(i) + " has ragged channels");
        for (std::size_t t = 0; t < rows[d].size(); ++t)
          x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(t)) = rows[d][t];
      }
      samples.push_back(std::move(x));
    }
    return TimeSeriesDataset(std::move(samples));
  });
}

Json export_model_json(const TaskModel& model) {
  if (!model.fitted) throw StateError("cannot export an unfitted task model");
  Json encoders = Json::array();
  for (const PretrainedInstance& inst : model.instances) encoders.push_back(to_json(inst));
  Json head{{"parameters", to_json(model.head)},
            {"channels", model.channels},
            {"input_length", model.input_length},
            {"from_scratch", model.from_scratch},
            {"history", model.history},
            {"penalty_history", model.penalty_history}};
  head["threshold"] = std::isfinite(model.threshold) ? Json(model.threshold) : Json(nullptr);
  head["centroids"] = model.centroids.size() > 0 ? tensor_to_json("centroids", model.centroids) : Json(nullptr);
  Json fusion = to_json(model.fusion.config());
  fusion["input_dims"] = model.fusion.input_dims();
  fusion["parameters"] = to_json(model.fusion.parameters());
  return {{"schema_version", kSchemaVersion}, {"encoders", encoders},   {"fusion", fusion},
          {"task_head", head},                {"task_spec", to_json(model.spec)}, {"normalization", to_json(model.normalization)}};
}

TaskModel import_model_json(const Json& doc) {
  return guarded("model export", [&] {
    if (!doc.is_object()) throw FormatError("model export must be a JSON object");
    for (const char* key : {"schema_version", "encoders", "fusion", "task_head", "task_spec", "normalization"})
      if (!doc.contains(key)) throw FormatError(std::string("model export lacks '") + key + "'");
    const int version = doc.at("schema_version").get<int>();
    if (version != kSchemaVersion)
      throw VersionError("model export schema_version " + std::to_string(version) + ", this build reads " +
                         std::to_string(kSchemaVersion));
    TaskModel m;
    m.spec = task_spec_from_json(doc.at("task_spec"));
    int i = 0;
    for (const Json& e : doc.at("encoders")) {
      m.instances.push_back(instance_from_json(e, "encoders[" + std::to_string(i) + "]"));
      ++i;
    }
    const Json& f = doc.at("fusion");
    m.fusion = FusionModel(fusion_config_from_json(f), f.at("input_dims").get<std::vector<int>>(),
                           parameters_from_json(f.at("parameters"), "fusion.parameters"));
    for (std::size_t k = 0; k < m.instances.size(); ++k)
      if (m.fusion.input_dims().size() != m.instances.size() || m.fusion.input_dims()[k] != m.instances[k].repr_dim())
        throw ShapeError("fusion input dims do not match the encoders");
    const Json& h = doc.at("task_head");
    m.head = parameters_from_json(h.at("parameters"), "task_head.parameters");
    m.channels = h.at("channels").get<int>();
    m.input_length = h.at("input_length").get<int>();
    m.from_scratch = h.at("from_scratch").get<bool>();
    m.history = h.at("history").get<std::vector<double>>();
    m.penalty_history = h.at("penalty_history").get<std::vector<double>>();
    if (!h.at("threshold").is_null()) m.threshold = h.at("threshold").get<double>();
    if (!h.at("centroids").is_null()) m.centroids = tensor_from_json(h.at("centroids"), "task_head.centroids");
    m.normalization = normalization_from_json(doc.at("normalization"));
    // the head must have the shape a fresh model would build
    const TaskModel fresh = make_task_model(m.instances, m.fusion.config(), m.spec, m.channels,
                                            m.spec.task == TaskKind::forecasting ? m.input_length + *m.spec.horizon
                                                                                 : m.input_length);
    if (fresh.head.size() != m.head.size()) throw ShapeError("task_head.parameters: wrong entry count");
    for (std::size_t k = 0; k < m.head.size(); ++k) {
      const auto& a = fresh.head.entries()[k];
      const auto& b = m.head.entries()[k];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
        throw ShapeError("task_head.parameters '" + b.name + "': expected " + a.name + " " +
                         std::to_string(a.value.rows()) + "x" + std::to_string(a.value.cols()));
    }
    m.fitted = true;
    return m;
  });
}

}  // namespace units
