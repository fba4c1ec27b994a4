#pragma once

#include "units/data.hpp"

#include <cstdint>
#include <vector>

// Seeded generators for the benchmark datasets used by tests, the acceptance
// suite and the CLI demos.
namespace units::synthetic {

struct LabeledSeries {
  TimeSeriesDataset data;
  std::vector<int> labels;
  int num_classes = 0;
};

/// Three classes of univariate series: a slow sine, a faster sine and a
/// time-warped (chirp) sine, each with random phase, amplitude and noise.
LabeledSeries frequency_warp_classes(int n, int length, std::uint64_t seed, double noise = 0.5);

/// Classes defined by mixtures of two sinusoids with class-specific
/// frequencies. The shifted variant scales amplitudes by `gain` and adds
/// Gaussian noise of std `noise`.
LabeledSeries sinusoid_mixture_classes(int n, int length, std::uint64_t seed, double gain = 1.0, double noise = 0.05);

struct SpikeRecording {
  Matrix series;      // 1 x L
  BoolArray anomalies;  // 1 x L
};

/// One long sinusoid (period `period`, light noise) with point spikes at a
/// `spike_rate` fraction of timesteps, magnitude `magnitude` clean-signal
/// standard deviations, random sign.
SpikeRecording spike_recording(int length, int period, double spike_rate, double magnitude, std::uint64_t seed);

/// D-channel sinusoids with random frequency, phase and amplitude per sample.
TimeSeriesDataset sinusoids(int n, int channels, int length, std::uint64_t seed, double noise = 0.02);

/// Three well-separated shape families (sine, square-ish, ramp) with noise.
LabeledSeries three_clusters(int n, int length, std::uint64_t seed, double noise = 0.3);

/// Stratified split: `fraction` of each class goes to the first index list.
std::pair<std::vector<int>, std::vector<int>> stratified_split(const std::vector<int>& labels, double fraction,
                                                               std::uint64_t seed);

/// MCAR missingness: every cell independently missing with probability `rate`.
MissingIndex mcar_missing(int n, int channels, int length, double rate, std::uint64_t seed);

}  // namespace units::synthetic
