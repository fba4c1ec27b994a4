#include "units/fusion.hpp"

namespace units {

std::string to_string(FusionKind kind) { return kind == FusionKind::projection ? "projection" : "concatenation"; }

FusionKind parse_fusion_kind(const std::string& name) {
  if (name == "concat" || name == "concatenation") return FusionKind::concatenation;
  if (name == "projection") return FusionKind::projection;
  throw ParameterError("unknown fusion '" + name + "' (expected concat or projection)");
}

FusionModel::FusionModel(const FusionConfig& config, std::vector<int> input_dims)
    : config_(config), input_dims_(std::move(input_dims)) {
  if (input_dims_.empty()) throw ParameterError("fusion needs at least one representation");
  for (int k : input_dims_) require(k >= 1, "representation dims must be positive");
  if (config_.kind == FusionKind::projection) {
    require(config_.output_dim >= 1, "projection output dim K' must be >= 1");
    params_.add("projection.weight", Matrix::Identity(config_.output_dim, concat_dim()));
    params_.add("projection.bias", Matrix::Zero(1, config_.output_dim));
  }
}

FusionModel::FusionModel(const FusionConfig& config, std::vector<int> input_dims, ParameterStore params)
    : FusionModel(config, std::move(input_dims)) {
  if (config_.kind == FusionKind::concatenation) {
    if (params.size() != 0) throw ShapeError("concatenation fusion has no parameters");
    return;
  }
  if (params.size() != 2 || !params.contains("projection.weight") || !params.contains("projection.bias"))
    throw ShapeError("projection fusion expects projection.weight and projection.bias");
  const Matrix& w = params["projection.weight"];
  const Matrix& b = params["projection.bias"];
  if (w.rows() != config_.output_dim || w.cols() != concat_dim())
    throw ShapeError("projection.weight must be " + std::to_string(config_.output_dim) + "x" +
                     std::to_string(concat_dim()));
  if (b.rows() != 1 || b.cols() != config_.output_dim)
    throw ShapeError("projection.bias must be 1x" + std::to_string(config_.output_dim));
  params_ = std::move(params);
}

ad::Var FusionModel::forward(const Binding& params, std::span<const ad::Var> parts) const {
  if (parts.size() != input_dims_.size())
    throw ShapeError("fusion expects " + std::to_string(input_dims_.size()) + " representations, got " +
                     std::to_string(parts.size()));
  for (std::size_t m = 0; m < parts.size(); ++m)
    if (parts[m].cols() != input_dims_[m])
      throw ShapeError("representation " + std::to_string(m) + " has dim " + std::to_string(parts[m].cols()) +
                       ", fusion expects " + std::to_string(input_dims_[m]));
  const ad::Var cat = parts.size() == 1 ? parts.front() : ad::hstack(parts);
  if (config_.kind == FusionKind::concatenation) return cat;
  return affine(cat, params[0], params[1]);
}

Matrix FusionModel::fuse(std::span<const Matrix> reprs) const {
  ad::Tape tape;
  std::vector<ad::Var> parts;
  for (const Matrix& z : reprs) parts.push_back(tape.constant(z));
  return forward(bind(tape, params_, false), parts).value();
}

Vector projection_fuse(const FusionModel& model, const std::vector<Vector>& reprs) {
  if (model.kind() != FusionKind::projection) throw ParameterError("projection_fuse needs a projection model");
  std::vector<Matrix> rows;
  for (const Vector& z : reprs) rows.push_back(z.transpose());
  return model.fuse(rows).row(0).transpose();
}

}  // namespace units
