#include "units/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <numbers>
#include <random>

namespace units::synthetic {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::vector<std::string> ids(const char* prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(std::string(prefix) + std::to_string(i));
  return out;
}

}  // namespace

LabeledSeries frequency_warp_classes(int n, int length, std::uint64_t seed, double noise) {
  require(n >= 1 && length >= 2, "generator needs n >= 1 and length >= 2");
  Rng rng(seed);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi), amp(0.7, 1.3), jitter(-0.25, 0.25);
  std::normal_distribution<double> eps(0.0, noise);
  LabeledSeries out;
  out.num_classes = 3;
  std::vector<Matrix> samples;
  for (int i = 0; i < n; ++i) {
    const int c = i % 3;
    const double p = phase(rng), a = amp(rng), df = jitter(rng);
    Matrix x(1, length);
    for (int t = 0; t < length; ++t) {
      const double u = static_cast<double>(t) / length;
      double arg = 0.0;
      switch (c) {
        case 0: arg = kTwoPi * (3.0 + df) * u; break;
        case 1: arg = kTwoPi * (5.0 + df) * u; break;
        default: arg = kTwoPi * ((2.0 + df) * u + 2.0 * u * u); break;  // 2 -> 6 cycles per window
      }
      x(0, t) = a * std::sin(arg + p) + eps(rng);
    }
    samples.push_back(std::move(x));
    out.labels.push_back(c);
  }
  out.data = TimeSeriesDataset(std::move(samples), ids("fw", n), {"value"}, "frequency/warp classes");
  return out;
}

LabeledSeries sinusoid_mixture_classes(int n, int length, std::uint64_t seed, double gain, double noise) {
  require(n >= 1 && length >= 2, "generator needs n >= 1 and length >= 2");
  static constexpr double kFreq[3][2] = {{2.0, 7.0}, {3.0, 5.0}, {4.0, 9.0}};
  Rng rng(seed);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi), amp(0.8, 1.2);
  std::normal_distribution<double> eps(0.0, 1.0);
  LabeledSeries out;
  out.num_classes = 3;
  std::vector<Matrix> samples;
  for (int i = 0; i < n; ++i) {
    const int c = i % 3;
    const double p1 = phase(rng), p2 = phase(rng), a1 = amp(rng), a2 = 0.5 * amp(rng);
    Matrix x(1, length);
    for (int t = 0; t < length; ++t) {
      const double u = static_cast<double>(t) / length;
      x(0, t) = gain * (a1 * std::sin(kTwoPi * kFreq[c][0] * u + p1) + a2 * std::sin(kTwoPi * kFreq[c][1] * u + p2)) +
                noise * eps(rng);
    }
    samples.push_back(std::move(x));
    out.labels.push_back(c);
  }
  out.data = TimeSeriesDataset(std::move(samples), ids("mix", n), {"value"}, "sinusoid mixture classes");
  return out;
}

SpikeRecording spike_recording(int length, int period, double spike_rate, double magnitude, std::uint64_t seed) {
  require(length >= 2 && period >= 2, "spike recording needs length, period >= 2");
  require(spike_rate >= 0.0 && spike_rate <= 1.0, "spike rate must lie in [0,1]");
  Rng rng(seed);
  std::normal_distribution<double> eps(0.0, 0.05);
  SpikeRecording r;
  r.series.resize(1, length);
  r.anomalies = BoolArray::Constant(1, length, false);
  const double sigma = std::sqrt(0.5);  // std of a unit sine
  for (int t = 0; t < length; ++t) r.series(0, t) = std::sin(kTwoPi * t / period) + eps(rng);
  const int spikes = static_cast<int>(std::lround(spike_rate * length));
  std::vector<int> positions(static_cast<std::size_t>(length));
  std::iota(positions.begin(), positions.end(), 0);
  std::shuffle(positions.begin(), positions.end(), rng);
  std::bernoulli_distribution sign(0.5);
  for (int s = 0; s < spikes; ++s) {
    const int t = positions[static_cast<std::size_t>(s)];
    r.series(0, t) += (sign(rng) ? 1.0 : -1.0) * magnitude * sigma;
    r.anomalies(0, t) = true;
  }
  return r;
}

TimeSeriesDataset sinusoids(int n, int channels, int length, std::uint64_t seed, double noise) {
  require(n >= 1 && channels >= 1 && length >= 2, "generator needs n, channels >= 1 and length >= 2");
  Rng rng(seed);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi), amp(0.5, 1.5), freq(2.0, 4.0);
  std::normal_distribution<double> eps(0.0, noise);
  std::vector<Matrix> samples;
  for (int i = 0; i < n; ++i) {
    Matrix x(channels, length);
    for (int d = 0; d < channels; ++d) {
      const double p = phase(rng), a = amp(rng), f = freq(rng);
      for (int t = 0; t < length; ++t) x(d, t) = a * std::sin(kTwoPi * f * t / length + p) + eps(rng);
    }
    samples.push_back(std::move(x));
  }
  return TimeSeriesDataset(std::move(samples), ids("sin", n), {}, "random sinusoids");
}

LabeledSeries three_clusters(int n, int length, std::uint64_t seed, double noise) {
  require(n >= 1 && length >= 2, "generator needs n >= 1 and length >= 2");
  Rng rng(seed);
  std::uniform_real_distribution<double> amp(0.8, 1.2), shift(-0.3, 0.3);
  std::normal_distribution<double> eps(0.0, noise);
  LabeledSeries out;
  out.num_classes = 3;
  std::vector<Matrix> samples;
  for (int i = 0; i < n; ++i) {
    const int c = i % 3;
    const double a = amp(rng), s = shift(rng);
    Matrix x(1, length);
    for (int t = 0; t < length; ++t) {
      const double u = static_cast<double>(t) / length;
      double v = 0.0;
      switch (c) {
        case 0: v = std::sin(kTwoPi * 2.0 * (u + s)); break;
        case 1: v = std::sin(kTwoPi * 2.0 * (u + s)) >= 0.0 ? 1.0 : -1.0; break;
        default: v = 2.0 * std::fmod(u + s + 1.0, 1.0) - 1.0; break;
      }
      x(0, t) = a * v + eps(rng);
    }
    samples.push_back(std::move(x));
    out.labels.push_back(c);
  }
  out.data = TimeSeriesDataset(std::move(samples), ids("cl", n), {"value"}, "three shape clusters");
  return out;
}

std::pair<std::vector<int>, std::vector<int>> stratified_split(const std::vector<int>& labels, double fraction,
                                                               std::uint64_t seed) {
  require(fraction >= 0.0 && fraction <= 1.0, "split fraction must lie in [0,1]");
  Rng rng(seed);
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> first, second;
  for (int c = 0; c < classes; ++c) {
    std::vector<int> members;
    for (int i = 0; i < static_cast<int>(labels.size()); ++i)
      if (labels[static_cast<std::size_t>(i)] == c) members.push_back(i);
    std::shuffle(members.begin(), members.end(), rng);
    const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size())));
    first.insert(first.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
    second.insert(second.end(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {first, second};
}

MissingIndex mcar_missing(int n, int channels, int length, double rate, std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, "missing rate must lie in [0,1)");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MissingIndex m;
  m.positions.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < channels; ++d)
      for (int t = 0; t < length; ++t)
        if (u(rng) < rate) m.positions[static_cast<std::size_t>(i)].emplace_back(d, t);
  return m;
}

}  // namespace units::synthetic
