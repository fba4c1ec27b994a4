#pragma once

#include "units/data.hpp"
#include "units/model.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace units {

enum class TemplateFamily {
  contrastive_series,       // whole-series views, NT-Xent
  contrastive_subsequence,  // reference / sub-window / foreign-window triplets
  contrastive_timestamp,    // per-timestep contrast on overlapping crops
  autoregressive_mask,      // zero masked cells, predict them back
  hybrid,                   // weighted series contrast + masked prediction
};

std::string to_string(TemplateFamily family);
TemplateFamily parse_template_family(const std::string& name);
const std::vector<TemplateFamily>& all_template_families();

struct Augmentation {
  enum class Kind { jitter, scale, crop_resize, permute_segments };
  Kind kind = Kind::jitter;
  /// sigma for jitter/scale, kept ratio for crop_resize, segment count for permute.
  double param = 0.0;
};

/// "jitter:0.1", "scale:0.2", "crop_resize:0.8", "permute_segments:4".
Augmentation parse_augmentation(const std::string& spec);
std::string to_string(const Augmentation& aug);

/// Applies the policies left to right. Output shape equals input shape.
Matrix augment(const Matrix& x, const std::vector<Augmentation>& policy, Rng& rng);

struct PretrainTemplateConfig {
  TemplateFamily family = TemplateFamily::contrastive_series;
  EncoderConfig encoder;
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double temperature = 0.2;
  double masking_rate = 0.15;
  MaskGeometry mask_geometry = MaskGeometry::contiguous_spans;
  /// Weight of the contrastive term; required iff family == hybrid.
  std::optional<double> hybrid_weight;
  std::vector<Augmentation> augmentations{{Augmentation::Kind::jitter, 0.5}, {Augmentation::Kind::scale, 0.2}};
  int n_negatives = 10;
  std::uint64_t seed = 0;

  /// Documented defaults for one family (hybrid gets weight 0.5).
  static PretrainTemplateConfig defaults(TemplateFamily family, int input_dims = 1);
  void validate() const;
};

/// Per-step progress callback: (epoch, step, loss).
using FitObserver = std::function<void(int, int, double)>;

/// A pre-training template instance: config, learned encoder h_m, the
/// template's auxiliary prediction head (masking families) and the loss curve.
class PretrainedInstance {
 public:
  PretrainedInstance() = default;
  PretrainedInstance(PretrainTemplateConfig config, Encoder encoder, ParameterStore head,
                     std::vector<double> loss_curve, bool fitted);

  const PretrainTemplateConfig& config() const { return config_; }
  const Encoder& encoder() const { return encoder_; }
  Encoder& encoder() { return encoder_; }
  const ParameterStore& head() const { return head_; }
  ParameterStore& head() { return head_; }
  const std::vector<double>& loss_curve() const { return loss_curve_; }
  bool fitted() const { return fitted_; }
  int repr_dim() const { return encoder_.repr_dim(); }

  /// Z_m: one pooled representation per sample, N x K.
  Matrix transform(const TimeSeriesDataset& data) const;

  /// The template's self-supervised objective on one batch, recorded on the
  /// tape through the given bindings of encoder() and head().
  ad::Var objective(const Binding& encoder_params, const Binding& head_params,
                    const std::vector<const Matrix*>& batch, Rng& rng) const;

 private:
  PretrainTemplateConfig config_;
  Encoder encoder_;
  ParameterStore head_;
  std::vector<double> loss_curve_;
  bool fitted_ = false;
};

/// Builds an untrained instance (random encoder, fitted flag clear).
PretrainedInstance make_instance(const PretrainTemplateConfig& config);

/// Pre-trains on X only (labels are never an input). One loss-curve entry per
/// epoch; deterministic given the config seed.
PretrainedInstance fit(const PretrainTemplateConfig& config, const TimeSeriesDataset& data,
                       const FitObserver& observer = {});

/// M pooled representation matrices aligned by sample.
struct RepresentationSet {
  std::vector<Matrix> matrices;
  int size() const { return matrices.empty() ? 0 : static_cast<int>(matrices.front().rows()); }
};

RepresentationSet transform_all(const std::vector<PretrainedInstance>& instances, const TimeSeriesDataset& data);

/// Sub-sequence triplet objective on a batch (T-Loss style): random reference
/// windows, a positive sub-window of each, negatives cut from other samples.
ad::Var triplet_subseries_loss(const Encoder& encoder, const Binding& params, const std::vector<const Matrix*>& batch,
                               int n_negatives, Rng& rng);

/// Splits [0, n) into shuffled mini-batches; a trailing singleton is merged
/// into the previous batch.
std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng, bool shuffle = true);

}  // namespace units
