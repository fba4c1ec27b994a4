#include "units/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace units {

namespace {

std::string cell_name(int i, int j, int k) {
  return "sample " + std::to_string(i) + ", channel " + std::to_string(j) + ", timestep " + std::to_string(k);
}

}  // namespace

TimeSeriesDataset::TimeSeriesDataset(std::vector<Matrix> samples, std::vector<std::string> sample_ids,
                                     std::vector<std::string> channel_names, std::string sampling_meta)
    : samples_(std::move(samples)),
      sample_ids_(std::move(sample_ids)),
      channel_names_(std::move(channel_names)),
      sampling_meta_(std::move(sampling_meta)) {
  if (samples_.empty()) throw ShapeError("dataset needs at least one sample");
  channels_ = static_cast<int>(samples_.front().rows());
  length_ = static_cast<int>(samples_.front().cols());
  if (channels_ < 1) throw ShapeError("dataset needs at least one channel");
  if (length_ < 2) throw ShapeError("dataset needs at least two timesteps");
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const Matrix& s = samples_[i];
    if (s.rows() != channels_ || s.cols() != length_)
      throw ShapeError("ragged dataset: sample " + std::to_string(i) + " is " + std::to_string(s.rows()) + "x" +
                       std::to_string(s.cols()) + ", expected " + std::to_string(channels_) + "x" +
                       std::to_string(length_));
    for (int j = 0; j < channels_; ++j)
      for (int k = 0; k < length_; ++k)
        if (!std::isfinite(s(j, k)))
          throw NumericError("non-finite value at " + cell_name(static_cast<int>(i), j, k));
  }
  if (sample_ids_.empty()) {
    sample_ids_.reserve(samples_.size());
    for (std::size_t i = 0; i < samples_.size(); ++i) sample_ids_.push_back(std::to_string(i));
  }
  if (sample_ids_.size() != samples_.size()) throw ShapeError("sample_ids length differs from sample count");
  if (channel_names_.empty())
    for (int j = 0; j < channels_; ++j) channel_names_.push_back("ch" + std::to_string(j));
  if (static_cast<int>(channel_names_.size()) != channels_)
    throw ShapeError("channel_names length differs from channel count");
}

TimeSeriesDataset TimeSeriesDataset::subset(std::span<const int> indices) const {
  std::vector<Matrix> out;
  std::vector<std::string> ids;
  out.reserve(indices.size());
  for (int i : indices) {
    if (i < 0 || i >= size()) throw ParameterError("subset index " + std::to_string(i) + " out of range");
    out.push_back(samples_[static_cast<std::size_t>(i)]);
    ids.push_back(sample_ids_[static_cast<std::size_t>(i)]);
  }
  return TimeSeriesDataset(std::move(out), std::move(ids), channel_names_, sampling_meta_);
}

Matrix TimeSeriesDataset::flattened() const {
  Matrix out(size(), channels_ * length_);
  for (int i = 0; i < size(); ++i)
    for (int j = 0; j < channels_; ++j) out.row(i).segment(j * length_, length_) = samples_[i].row(j);
  return out;
}

// ---------------------------------------------------------------------------

LabelSet LabelSet::classes(std::vector<int> labels, std::optional<int> num_classes) {
  LabelSet ls;
  ls.kind = LabelKind::class_labels;
  if (!num_classes) {
    int mx = -1;
    for (int y : labels) mx = std::max(mx, y);
    num_classes = mx + 1;
  }
  ls.class_labels = std::move(labels);
  ls.num_classes = num_classes;
  return ls;
}

LabelSet LabelSet::clusters(int count) {
  LabelSet ls;
  ls.kind = LabelKind::cluster_count;
  ls.num_classes = count;
  return ls;
}

LabelSet LabelSet::forecast_horizon(int h) {
  LabelSet ls;
  ls.kind = LabelKind::horizon;
  ls.horizon = h;
  return ls;
}

LabelSet LabelSet::anomalies(std::vector<BoolArray> flags) {
  LabelSet ls;
  ls.kind = LabelKind::anomaly_flags;
  ls.anomaly_flags = std::move(flags);
  return ls;
}

void LabelSet::validate(int n_samples) const {
  const bool want_labels = kind == LabelKind::class_labels;
  const bool want_c = kind == LabelKind::class_labels || kind == LabelKind::cluster_count;
  const bool want_h = kind == LabelKind::horizon;
  const bool want_flags = kind == LabelKind::anomaly_flags;
  const bool want_missing = kind == LabelKind::missing_targets;
  if (class_labels.has_value() != want_labels || num_classes.has_value() != want_c ||
      horizon.has_value() != want_h || anomaly_flags.has_value() != want_flags ||
      missing_targets.has_value() != want_missing)
    throw ParameterError("label set fields do not match its kind");
  if (want_c) require(*num_classes >= 1, "label set: class/cluster count must be positive");
  if (want_h) require(*horizon >= 1, "label set: horizon must be positive");
  if (want_labels) {
    require(static_cast<int>(class_labels->size()) == n_samples,
            "label set has " + std::to_string(class_labels->size()) + " labels for " + std::to_string(n_samples) +
                " samples");
    for (int y : *class_labels)
      require(y >= 0 && y < *num_classes, "class label " + std::to_string(y) + " outside [0," +
                                              std::to_string(*num_classes) + ")");
  }
  if (want_flags) require(static_cast<int>(anomaly_flags->size()) == n_samples, "anomaly flags count mismatch");
}

LabelSet LabelSet::subset(std::span<const int> indices) const {
  LabelSet out = *this;
  if (class_labels) {
    std::vector<int> ys;
    for (int i : indices) ys.push_back(class_labels->at(static_cast<std::size_t>(i)));
    out.class_labels = std::move(ys);
  }
  if (anomaly_flags) {
    std::vector<BoolArray> fs;
    for (int i : indices) fs.push_back(anomaly_flags->at(static_cast<std::size_t>(i)));
    out.anomaly_flags = std::move(fs);
  }
  if (missing_targets) {
    std::vector<MissingTarget> ts;
    for (std::size_t pos = 0; pos < indices.size(); ++pos)
      for (const auto& t : *missing_targets)
        if (t.sample == indices[pos]) ts.push_back({static_cast<int>(pos), t.channel, t.timestep, t.value});
    out.missing_targets = std::move(ts);
  }
  return out;
}

bool MissingIndex::empty() const { return count() == 0; }

std::size_t MissingIndex::count() const {
  std::size_t n = 0;
  for (const auto& p : positions) n += p.size();
  return n;
}

void MissingIndex::validate(int n_samples, int channels, int length) const {
  if (positions.empty()) return;
  require(static_cast<int>(positions.size()) == n_samples, "missing index covers " +
                                                               std::to_string(positions.size()) + " samples, dataset has " +
                                                               std::to_string(n_samples));
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::set<std::pair<int, int>> seen;
    for (auto [j, k] : positions[i]) {
      require(j >= 0 && j < channels && k >= 0 && k < length,
              "missing position (" + std::to_string(j) + "," + std::to_string(k) + ") out of range in sample " +
                  std::to_string(i));
      require(seen.insert({j, k}).second, "duplicate missing position in sample " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// uts_binary

namespace {

constexpr char kDataMagic[4] = {'U', 'T', 'S', '1'};
constexpr char kLabelMagic[4] = {'L', 'B', 'L', '1'};

std::uint32_t read_u32(const std::string& buf, std::size_t off) {
  std::uint32_t v = 0;
  for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(buf[off + static_cast<std::size_t>(b)]);
  return v;
}

float read_f32(const std::string& buf, std::size_t off) { return std::bit_cast<float>(read_u32(buf, off)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

LoadedDataset load_uts_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw FormatError("uts_binary header truncated at byte " + std::to_string(buf.size()));
  if (std::memcmp(buf.data(), kDataMagic, 4) != 0) throw FormatError("uts_binary: bad magic at byte 0");
  const std::uint32_t n = read_u32(buf, 4), d = read_u32(buf, 8), t = read_u32(buf, 12);
  if (n == 0 || d == 0 || t == 0)
    throw FormatError("uts_binary: zero dimension in header at byte 4 (N=" + std::to_string(n) +
                      ", D=" + std::to_string(d) + ", T=" + std::to_string(t) + ")");
  const std::uint64_t cells = std::uint64_t{n} * d * t;
  const std::uint64_t payload_end = 16 + 4 * cells;
  const std::uint64_t label_size = 8 + 4 * std::uint64_t{n};
  bool has_labels = false;
  if (buf.size() == payload_end) {
  } else if (buf.size() == payload_end + label_size && std::memcmp(buf.data() + payload_end, kLabelMagic, 4) == 0) {
    has_labels = true;
  } else {
    throw ShapeError("uts_binary: file has " + std::to_string(buf.size() - 16) + " payload bytes, header N*D*T*4 = " +
                     std::to_string(4 * cells));
  }
  std::vector<Matrix> samples(n, Matrix(d, t));
  std::size_t off = 16;
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j)
      for (std::uint32_t k = 0; k < t; ++k, off += 4) {
        const float v = read_f32(buf, off);
        if (!std::isfinite(v))
          throw NumericError("uts_binary: non-finite value at " +
                             cell_name(static_cast<int>(i), static_cast<int>(j), static_cast<int>(k)));
        samples[i](j, k) = static_cast<double>(v);
      }
  LoadedDataset out{TimeSeriesDataset(std::move(samples)), {}, std::nullopt};
  if (has_labels) {
    off = payload_end + 4;
    const std::uint32_t c = read_u32(buf, off);
    off += 4;
    std::vector<int> ys(n);
    for (std::uint32_t i = 0; i < n; ++i, off += 4) {
      const std::uint32_t y = read_u32(buf, off);
      if (y >= c) throw FormatError("uts_binary: label " + std::to_string(y) + " >= C at byte " + std::to_string(off));
      ys[i] = static_cast<int>(y);
    }
    out.labels = LabelSet::classes(std::move(ys), static_cast<int>(c));
  }
  return out;
}

LoadedDataset load_csv_wide(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv_wide: empty file, expected header on line 1");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::string prefix = "#units-csv,v1,D=";
  if (line.rfind(prefix, 0) != 0) throw FormatError("csv_wide: malformed header on line 1: '" + line + "'");
  int d = 0;
  try {
    std::size_t used = 0;
    d = std::stoi(line.substr(prefix.size()), &used);
    if (used != line.size() - prefix.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw FormatError("csv_wide: malformed D in header on line 1: '" + line + "'");
  }
  if (d < 1) throw FormatError("csv_wide: D must be positive on line 1");

  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> present;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::vector<bool> ok;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      const std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (cell.empty() || cell.find_first_not_of(" \t") == std::string::npos) {
        row.push_back(0.0);
        ok.push_back(false);
      } else {
        std::size_t used = 0;
        double v = 0;
        try {
          v = std::stod(cell, &used);
        } catch (const std::exception&) {
          throw FormatError("csv_wide: bad number '" + cell + "' on line " + std::to_string(lineno));
        }
        if (cell.find_first_not_of(" \t", used) != std::string::npos)
          throw FormatError("csv_wide: bad number '" + cell + "' on line " + std::to_string(lineno));
        if (!std::isfinite(v)) {
          const int r = static_cast<int>(rows.size());
          throw NumericError("csv_wide: non-finite value at " +
                             cell_name(r / d, r % d, static_cast<int>(row.size())) + " (line " +
                             std::to_string(lineno) + ")");
        }
        row.push_back(v);
        ok.push_back(true);
      }
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw ShapeError("csv_wide: line " + std::to_string(lineno) + " has " + std::to_string(row.size()) +
                       " values, expected " + std::to_string(rows.front().size()));
    rows.push_back(std::move(row));
    present.push_back(std::move(ok));
  }
  if (rows.empty()) throw ShapeError("csv_wide: no data rows");
  if (rows.size() % static_cast<std::size_t>(d) != 0)
    throw ShapeError("csv_wide: " + std::to_string(rows.size()) + " rows is not a multiple of D=" + std::to_string(d));
  const int n = static_cast<int>(rows.size()) / d;
  const int t = static_cast<int>(rows.front().size());
  std::vector<Matrix> samples(static_cast<std::size_t>(n), Matrix(d, t));
  MissingIndex missing;
  missing.positions.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const auto r = static_cast<std::size_t>(i * d + j);
      for (int k = 0; k < t; ++k) {
        samples[i](j, k) = rows[r][static_cast<std::size_t>(k)];
        if (!present[r][static_cast<std::size_t>(k)]) missing.positions[i].emplace_back(j, k);
      }
    }
  if (missing.empty()) missing.positions.clear();
  return {TimeSeriesDataset(std::move(samples)), std::move(missing), std::nullopt};
}

}  // namespace

LoadedDataset load_dataset(const std::filesystem::path& path, FileFormat format) {
  if (!std::filesystem::exists(path)) throw NotFoundError("no such file: " + path.string());
  return format == FileFormat::uts_binary ? load_uts_binary(path) : load_csv_wide(path);
}

LoadedDataset load_dataset(const std::filesystem::path& path) {
  return load_dataset(path, path.extension() == ".uts" ? FileFormat::uts_binary : FileFormat::csv_wide);
}

void write_uts_binary(const std::filesystem::path& path, const TimeSeriesDataset& ds,
                      const std::optional<LabelSet>& labels) {
  std::string out(kDataMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(ds.size()));
  put_u32(out, static_cast<std::uint32_t>(ds.channels()));
  put_u32(out, static_cast<std::uint32_t>(ds.length()));
  out.reserve(16 + 4 * static_cast<std::size_t>(ds.size() * ds.channels() * ds.length()));
  for (const Matrix& s : ds.samples())
    for (int j = 0; j < ds.channels(); ++j)
      for (int k = 0; k < ds.length(); ++k) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(s(j, k))));
  if (labels && labels->class_labels) {
    out.append(kLabelMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(labels->num_classes.value_or(0)));
    for (int y : *labels->class_labels) put_u32(out, static_cast<std::uint32_t>(y));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw NotFoundError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

void write_csv_wide(const std::filesystem::path& path, const TimeSeriesDataset& ds, const MissingIndex* missing) {
  std::ofstream f(path);
  if (!f) throw NotFoundError("cannot write " + path.string());
  f << "#units-csv,v1,D=" << ds.channels() << "\n";
  f.precision(17);
  for (int i = 0; i < ds.size(); ++i) {
    BoolArray observed = BoolArray::Constant(ds.channels(), ds.length(), true);
    if (missing && !missing->positions.empty())
      for (auto [j, k] : missing->positions.at(static_cast<std::size_t>(i))) observed(j, k) = false;
    for (int j = 0; j < ds.channels(); ++j) {
      for (int k = 0; k < ds.length(); ++k) {
        if (k) f << ',';
        if (observed(j, k)) f << ds.sample(i)(j, k);
      }
      f << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Normalization

Matrix NormalizationStats::apply(const Matrix& s) const {
  if (mode == NormalizationMode::none) return s;
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index j = 0; j < s.rows(); ++j)
    out.row(j) = scale(j) == 0.0 ? RowVector::Zero(s.cols()).eval()
                                 : ((s.row(j).array() - offset(j)) / scale(j)).matrix().eval();
  return out;
}

Matrix NormalizationStats::invert(const Matrix& s) const {
  if (mode == NormalizationMode::none) return s;
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index j = 0; j < s.rows(); ++j) out.row(j) = (s.row(j).array() * scale(j) + offset(j)).matrix();
  return out;
}

std::pair<TimeSeriesDataset, NormalizationStats> normalize(const TimeSeriesDataset& ds, NormalizationMode mode) {
  NormalizationStats st;
  st.mode = mode;
  const int d = ds.channels();
  st.offset = Vector::Zero(d);
  st.scale = Vector::Ones(d);
  if (mode == NormalizationMode::none) return {ds, st};
  const double count = static_cast<double>(ds.size()) * ds.length();
  for (int j = 0; j < d; ++j) {
    if (mode == NormalizationMode::zscore_per_channel) {
      double sum = 0;
      for (const Matrix& s : ds.samples()) sum += s.row(j).sum();
      const double mean = sum / count;
      double ss = 0;
      for (const Matrix& s : ds.samples()) ss += (s.row(j).array() - mean).square().sum();
      const double var = ss / count;
      st.offset(j) = mean;
      st.scale(j) = var < 1e-12 ? 0.0 : std::sqrt(var);
    } else {
      double lo = ds.sample(0)(j, 0), hi = lo;
      for (const Matrix& s : ds.samples()) {
        lo = std::min(lo, s.row(j).minCoeff());
        hi = std::max(hi, s.row(j).maxCoeff());
      }
      st.offset(j) = lo;
      st.scale(j) = hi - lo < 1e-12 ? 0.0 : hi - lo;
    }
  }
  return {apply_normalization(ds, st), st};
}

TimeSeriesDataset apply_normalization(const TimeSeriesDataset& ds, const NormalizationStats& stats) {
  if (stats.mode != NormalizationMode::none && stats.offset.size() != ds.channels())
    throw ShapeError("normalization stats cover " + std::to_string(stats.offset.size()) + " channels, dataset has " +
                     std::to_string(ds.channels()));
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(ds.size()));
  for (const Matrix& s : ds.samples()) out.push_back(stats.apply(s));
  return TimeSeriesDataset(std::move(out), ds.sample_ids(), ds.channel_names(), ds.sampling_meta());
}

TimeSeriesDataset denormalize(const TimeSeriesDataset& ds, const NormalizationStats& stats) {
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(ds.size()));
  for (const Matrix& s : ds.samples()) out.push_back(stats.invert(s));
  return TimeSeriesDataset(std::move(out), ds.sample_ids(), ds.channel_names(), ds.sampling_meta());
}

// ---------------------------------------------------------------------------

BoolArray sample_binary_mask(int channels, int length, double masking_rate, Rng& rng, MaskGeometry geometry,
                             double mean_span) {
  if (!(masking_rate >= 0.0 && masking_rate <= 1.0))
    throw ParameterError("masking rate " + std::to_string(masking_rate) + " outside [0,1]");
  require(channels >= 1 && length >= 1, "mask shape must be positive");
  if (masking_rate == 0.0) return BoolArray::Constant(channels, length, true);
  if (masking_rate == 1.0) return BoolArray::Constant(channels, length, false);
  BoolArray m(channels, length);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (geometry == MaskGeometry::iid) {
    for (int k = 0; k < length; ++k)
      for (int j = 0; j < channels; ++j) m(j, k) = u(rng) >= masking_rate;
    return m;
  }
  // Two-state Markov chain: masked runs have mean length `mean_span`, kept runs
  // mean_span * (1 - r) / r, so the stationary masked fraction is r.
  require(mean_span >= 1.0, "mean span must be >= 1");
  const double p_leave_masked = 1.0 / mean_span;
  const double p_leave_kept = p_leave_masked * masking_rate / (1.0 - masking_rate);
  for (int j = 0; j < channels; ++j) {
    bool kept = u(rng) >= masking_rate;
    for (int k = 0; k < length; ++k) {
      m(j, k) = kept;
      if (u(rng) < (kept ? p_leave_kept : p_leave_masked)) kept = !kept;
    }
  }
  return m;
}

BoolArray mask_from_positions(int channels, int length, const std::vector<std::pair<int, int>>& positions) {
  BoolArray m = BoolArray::Constant(channels, length, true);
  for (auto [j, k] : positions) {
    require(j >= 0 && j < channels && k >= 0 && k < length,
            "position (" + std::to_string(j) + "," + std::to_string(k) + ") out of range");
    m(j, k) = false;
  }
  return m;
}

TimeSeriesDataset slice_windows(const TimeSeriesDataset& ds, int window, int stride) {
  require(window >= 1 && stride >= 1, "window and stride must be positive");
  if (window > ds.length())
    throw ParameterError("window " + std::to_string(window) + " exceeds series length " + std::to_string(ds.length()));
  std::vector<Matrix> out;
  std::vector<std::string> ids;
  for (int i = 0; i < ds.size(); ++i)
    for (int start = 0; start + window <= ds.length(); start += stride) {
      out.push_back(ds.sample(i).middleCols(start, window));
      ids.push_back(ds.sample_ids()[static_cast<std::size_t>(i)] + "@" + std::to_string(start));
    }
  return TimeSeriesDataset(std::move(out), std::move(ids), ds.channel_names(), ds.sampling_meta());
}

}  // namespace units
