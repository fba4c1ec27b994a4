#pragma once

#include "units/tasks.hpp"

#include <json.hpp>

#include <string>
#include <string_view>

// JSON forms of configs, parameter stores and whole task models. Tensors are
// {"name", "shape": [rows, cols], "data": base64 of little-endian float32,
// row-major}.
namespace units {

using Json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

std::string base64_encode(std::string_view bytes);
/// Throws FormatError on malformed input.
std::string base64_decode(std::string_view text);
/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

Json tensor_to_json(const std::string& name, const Matrix& value);
/// `context` prefixes error messages (e.g. "encoders[1].parameters").
Matrix tensor_from_json(const Json& j, const std::string& context);

Json to_json(const ParameterStore& params);
ParameterStore parameters_from_json(const Json& j, const std::string& context);

Json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const Json& j);

Json to_json(const PretrainTemplateConfig& c);
PretrainTemplateConfig template_config_from_json(const Json& j);

Json to_json(const PretrainedInstance& inst);
PretrainedInstance instance_from_json(const Json& j, const std::string& context = "encoder");

Json to_json(const FusionConfig& c);
FusionConfig fusion_config_from_json(const Json& j);

Json to_json(const TaskSpec& s);
TaskSpec task_spec_from_json(const Json& j);

Json to_json(const NormalizationStats& s);
NormalizationStats normalization_from_json(const Json& j);

Json to_json(const LabelSet& labels);
LabelSet labels_from_json(const Json& j);

/// Samples as nested [N][D][T] arrays.
Json samples_to_json(const TimeSeriesDataset& data);
TimeSeriesDataset samples_from_json(const Json& j);

/// Top-level keys: schema_version, encoders, fusion, task_head, task_spec,
/// normalization. Unfitted models raise StateError.
Json export_model_json(const TaskModel& model);
/// Raises VersionError on a schema mismatch and FormatError/ShapeError naming
/// the offending entry on malformed content.
TaskModel import_model_json(const Json& doc);

}  // namespace units
