#pragma once

#include "units/model.hpp"

#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace units {

enum class FusionKind { concatenation, projection };

std::string to_string(FusionKind kind);
FusionKind parse_fusion_kind(const std::string& name);

/// z'_i = z_{i,1} (+) ... (+) z_{i,M}, in registration order.
template <typename Scalar>
VectorX<Scalar> concat_fuse(std::span<const VectorX<Scalar>> reprs) {
  if (reprs.empty()) throw ParameterError("concat_fuse needs at least one representation");
  Eigen::Index total = 0;
  for (const auto& z : reprs) total += z.size();
  VectorX<Scalar> out(total);
  Eigen::Index off = 0;
  for (const auto& z : reprs) {
    out.segment(off, z.size()) = z;
    off += z.size();
  }
  return out;
}

template <typename Scalar>
VectorX<Scalar> concat_fuse(const std::vector<VectorX<Scalar>>& reprs) {
  return concat_fuse(std::span<const VectorX<Scalar>>(reprs));
}

/// Row-wise concatenation of M representation matrices (N x K_m each).
template <typename Scalar>
MatrixX<Scalar> concat_fuse_rows(std::span<const MatrixX<Scalar>> reprs) {
  if (reprs.empty()) throw ParameterError("concat_fuse needs at least one representation");
  const Eigen::Index n = reprs.front().rows();
  Eigen::Index total = 0;
  for (const auto& z : reprs) {
    if (z.rows() != n) throw ShapeError("representation matrices differ in sample count");
    total += z.cols();
  }
  MatrixX<Scalar> out(n, total);
  Eigen::Index off = 0;
  for (const auto& z : reprs) {
    out.middleCols(off, z.cols()) = z;
    off += z.cols();
  }
  return out;
}

struct FusionConfig {
  FusionKind kind = FusionKind::concatenation;
  /// K' for projection.
  int output_dim = 32;
  bool learnable = true;
};

/// Concatenation (no parameters) or a single affine projection p of the
/// concatenation to K' dimensions.
class FusionModel {
 public:
  FusionModel() = default;
  /// Projection starts at the identity truncated/padded to K' x sum(K_m).
  FusionModel(const FusionConfig& config, std::vector<int> input_dims);
  FusionModel(const FusionConfig& config, std::vector<int> input_dims, ParameterStore params);

  FusionKind kind() const { return config_.kind; }
  const FusionConfig& config() const { return config_; }
  bool learnable() const { return config_.kind == FusionKind::projection && config_.learnable; }
  const std::vector<int>& input_dims() const { return input_dims_; }
  int concat_dim() const { return std::accumulate(input_dims_.begin(), input_dims_.end(), 0); }
  int output_dim() const { return config_.kind == FusionKind::projection ? config_.output_dim : concat_dim(); }

  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// Fuses per-instance rows (pooled B x K_m or per-timestep (B*T) x K_m).
  ad::Var forward(const Binding& params, std::span<const ad::Var> parts) const;
  /// One fused row per sample.
  Matrix fuse(std::span<const Matrix> reprs) const;

 private:
  FusionConfig config_;
  std::vector<int> input_dims_;
  ParameterStore params_;
};

/// p(z_1 (+) ... (+) z_M) for a projection model.
Vector projection_fuse(const FusionModel& model, const std::vector<Vector>& reprs);

}  // namespace units
