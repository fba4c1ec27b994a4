#pragma once

#include "units/core.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace units {

/// N samples of D channels by T timesteps. Immutable once built; missing
/// cells are tracked by MissingIndex and stored as 0 in `values`.
class TimeSeriesDataset {
 public:
  TimeSeriesDataset() = default;
  explicit TimeSeriesDataset(std::vector<Matrix> samples, std::vector<std::string> sample_ids = {},
                             std::vector<std::string> channel_names = {}, std::string sampling_meta = {});

  int size() const { return static_cast<int>(samples_.size()); }
  int channels() const { return channels_; }
  int length() const { return length_; }
  bool empty() const { return samples_.empty(); }

  const Matrix& sample(int i) const { return samples_.at(static_cast<std::size_t>(i)); }
  const std::vector<Matrix>& samples() const { return samples_; }
  const std::vector<std::string>& sample_ids() const { return sample_ids_; }
  const std::vector<std::string>& channel_names() const { return channel_names_; }
  const std::string& sampling_meta() const { return sampling_meta_; }

  /// Rows picked by index, in the given order.
  TimeSeriesDataset subset(std::span<const int> indices) const;
  /// Every sample flattened channel-major into one row of an N x (D*T) matrix.
  Matrix flattened() const;

 private:
  std::vector<Matrix> samples_;
  std::vector<std::string> sample_ids_;
  std::vector<std::string> channel_names_;
  std::string sampling_meta_;
  int channels_ = 0;
  int length_ = 0;
};

enum class LabelKind { class_labels, cluster_count, horizon, anomaly_flags, missing_targets };

struct MissingTarget {
  int sample;
  int channel;
  int timestep;
  double value;
};

struct LabelSet {
  LabelKind kind = LabelKind::class_labels;
  std::optional<std::vector<int>> class_labels;
  std::optional<int> num_classes;
  std::optional<int> horizon;
  std::optional<std::vector<BoolArray>> anomaly_flags;
  std::optional<std::vector<MissingTarget>> missing_targets;

  static LabelSet classes(std::vector<int> labels, std::optional<int> num_classes = std::nullopt);
  static LabelSet clusters(int count);
  static LabelSet forecast_horizon(int h);
  static LabelSet anomalies(std::vector<BoolArray> flags);

  /// Throws ParameterError unless exactly the fields required by `kind` are set.
  void validate(int n_samples) const;
  LabelSet subset(std::span<const int> indices) const;
};

/// Per-sample positions (channel, timestep) of missing cells.
struct MissingIndex {
  std::vector<std::vector<std::pair<int, int>>> positions;

  bool empty() const;
  std::size_t count() const;
  void validate(int n_samples, int channels, int length) const;
};

// ---------------------------------------------------------------------------
// File formats

enum class FileFormat { csv_wide, uts_binary };

struct LoadedDataset {
  TimeSeriesDataset data;
  MissingIndex missing;
  std::optional<LabelSet> labels;
};

LoadedDataset load_dataset(const std::filesystem::path& path, FileFormat format);
/// Picks the format from the extension: ".uts" is binary, anything else CSV.
LoadedDataset load_dataset(const std::filesystem::path& path);

void write_uts_binary(const std::filesystem::path& path, const TimeSeriesDataset& ds,
                      const std::optional<LabelSet>& labels = std::nullopt);
void write_csv_wide(const std::filesystem::path& path, const TimeSeriesDataset& ds,
                    const MissingIndex* missing = nullptr);

// ---------------------------------------------------------------------------
// Normalization

enum class NormalizationMode { zscore_per_channel, minmax_per_channel, none };

struct NormalizationStats {
  NormalizationMode mode = NormalizationMode::none;
  Vector offset;  // subtracted per channel
  Vector scale;   // divided per channel; 0 marks a degenerate channel

  Matrix apply(const Matrix& sample) const;
  Matrix invert(const Matrix& sample) const;
};

std::pair<TimeSeriesDataset, NormalizationStats> normalize(const TimeSeriesDataset& ds, NormalizationMode mode);
TimeSeriesDataset apply_normalization(const TimeSeriesDataset& ds, const NormalizationStats& stats);
TimeSeriesDataset denormalize(const TimeSeriesDataset& ds, const NormalizationStats& stats);

// ---------------------------------------------------------------------------
// Masks and windows

enum class MaskGeometry { iid, contiguous_spans };

/// Zeroes the cells where the mask is false.
template <typename Derived>
MatrixX<typename Derived::Scalar> apply_mask(const Eigen::MatrixBase<Derived>& x, const BoolArray& mask) {
  if (x.rows() != mask.rows() || x.cols() != mask.cols())
    throw ShapeError("apply_mask: sample is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                     " but mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  using Scalar = typename Derived::Scalar;
  return mask.select(x.derived(), MatrixX<Scalar>::Zero(x.rows(), x.cols()));
}

/// True = observed/kept, false = masked. Contiguous spans have mean length 5.
BoolArray sample_binary_mask(int channels, int length, double masking_rate, Rng& rng,
                             MaskGeometry geometry = MaskGeometry::iid, double mean_span = 5.0);

/// Mask with false at the listed positions.
BoolArray mask_from_positions(int channels, int length, const std::vector<std::pair<int, int>>& positions);

TimeSeriesDataset slice_windows(const TimeSeriesDataset& ds, int window, int stride);

}  // namespace units
