#include "units/pretrain.hpp"

#include "units/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace units {

namespace {

struct FamilyName {
  TemplateFamily family;
  const char* name;
};

constexpr FamilyName kFamilies[] = {
    {TemplateFamily::contrastive_series, "contrastive_series"},
    {TemplateFamily::contrastive_subsequence, "contrastive_subsequence"},
    {TemplateFamily::contrastive_timestamp, "contrastive_timestamp"},
    {TemplateFamily::autoregressive_mask, "autoregressive_mask"},
    {TemplateFamily::hybrid, "hybrid"},
};

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Matrix crop_resize(const Matrix& x, double ratio, Rng& rng) {
  const int t = static_cast<int>(x.cols());
  const int len = std::clamp(static_cast<int>(std::lround(ratio * t)), 2, t);
  const int start = uniform_int(rng, 0, t - len);
  Matrix out(x.rows(), t);
  for (int k = 0; k < t; ++k) {
    const double pos = t == 1 ? 0.0 : static_cast<double>(k) * (len - 1) / (t - 1);
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, len - 1);
    const double w = pos - lo;
    out.col(k) = (1.0 - w) * x.col(start + lo) + w * x.col(start + hi);
  }
  return out;
}

Matrix permute_segments(const Matrix& x, int segments, Rng& rng) {
  const int t = static_cast<int>(x.cols());
  segments = std::clamp(segments, 1, t);
  std::vector<int> order(static_cast<std::size_t>(segments));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Matrix out(x.rows(), t);
  int col = 0;
  for (int s : order) {
    const int begin = s * t / segments, end = (s + 1) * t / segments;
    out.middleCols(col, end - begin) = x.middleCols(begin, end - begin);
    col += end - begin;
  }
  return out;
}

ad::Var pooled(const Encoder& enc, const Binding& params, const Matrix& time_major, Eigen::Index length) {
  ad::Tape& tape = params.vars.front().tape();
  return ad::max_pool_blocks(enc.forward(params, tape.constant(time_major), length), length);
}

ad::Var series_contrast(const PretrainTemplateConfig& cfg, const Encoder& enc, const Binding& params,
                        const std::vector<const Matrix*>& batch, Rng& rng) {
  std::vector<Matrix> va, vb;
  for (const Matrix* x : batch) {
    va.push_back(augment(*x, cfg.augmentations, rng));
    vb.push_back(augment(*x, cfg.augmentations, rng));
  }
  const Eigen::Index t = batch.front()->cols();
  return nt_xent(pooled(enc, params, to_time_major(va), t), pooled(enc, params, to_time_major(vb), t),
                 cfg.temperature);
}

ad::Var timestamp_contrast(const PretrainTemplateConfig& cfg, const Encoder& enc, const Binding& params,
                           const std::vector<const Matrix*>& batch, Rng& rng) {
  const int t = static_cast<int>(batch.front()->cols());
  if (t < 2) throw ParameterError("timestamp template needs T >= 2");
  // Overlap [left, right) shared by view a = [a_begin, right) and view b = [left, b_end).
  const int overlap = uniform_int(rng, std::max(2, t / 4), t);
  const int left = uniform_int(rng, 0, t - overlap);
  const int right = left + overlap;
  const int a_begin = uniform_int(rng, 0, left);
  const int b_end = uniform_int(rng, right, t);
  std::vector<Matrix> va, vb;
  for (const Matrix* x : batch) {
    va.push_back(x->middleCols(a_begin, right - a_begin));
    vb.push_back(x->middleCols(left, b_end - left));
  }
  ad::Tape& tape = params.vars.front().tape();
  const Eigen::Index len_a = right - a_begin, len_b = b_end - left;
  const ad::Var ra = enc.forward(params, tape.constant(to_time_major(va)), len_a);
  const ad::Var rb = enc.forward(params, tape.constant(to_time_major(vb)), len_b);
  std::vector<ad::Var> losses;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto i = static_cast<Eigen::Index>(s);
    losses.push_back(timestamp_contrastive(ad::slice_rows(ra, i * len_a + (left - a_begin), overlap),
                                           ad::slice_rows(rb, i * len_b, overlap), cfg.temperature));
  }
  return ad::mean(ad::vstack(losses));
}

ad::Var masked_prediction(const PretrainTemplateConfig& cfg, const Encoder& enc, const Binding& params,
                          const Binding& head, const std::vector<const Matrix*>& batch, Rng& rng) {
  const Eigen::Index d = batch.front()->rows(), t = batch.front()->cols();
  std::vector<Matrix> inputs;
  Matrix observed(static_cast<Eigen::Index>(batch.size()) * t, d);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const BoolArray m = sample_binary_mask(static_cast<int>(d), static_cast<int>(t), cfg.masking_rate, rng,
                                           cfg.mask_geometry);
    inputs.push_back(apply_mask(*batch[s], m));
    observed.middleRows(static_cast<Eigen::Index>(s) * t, t) = m.cast<double>().matrix().transpose();
  }
  if ((observed.array() == 0.0).count() == 0) {
    const int s = uniform_int(rng, 0, static_cast<int>(batch.size()) - 1);
    const int j = uniform_int(rng, 0, static_cast<int>(d) - 1);
    const int k = uniform_int(rng, 0, static_cast<int>(t) - 1);
    inputs[static_cast<std::size_t>(s)](j, k) = 0.0;
    observed(s * t + k, j) = 0.0;
  }
  ad::Tape& tape = params.vars.front().tape();
  const ad::Var seq = enc.forward(params, tape.constant(to_time_major(inputs)), t);
  return masked_mse(affine(seq, head[0], head[1]), to_time_major(batch), observed);
}

}  // namespace

std::string to_string(TemplateFamily family) {
  for (const auto& f : kFamilies)
    if (f.family == family) return f.name;
  return "unknown";
}

TemplateFamily parse_template_family(const std::string& name) {
  for (const auto& f : kFamilies)
    if (name == f.name) return f.family;
  throw ParameterError("unknown template family '" + name + "'");
}

const std::vector<TemplateFamily>& all_template_families() {
  static const std::vector<TemplateFamily> all{TemplateFamily::contrastive_series,
                                               TemplateFamily::contrastive_subsequence,
                                               TemplateFamily::contrastive_timestamp,
                                               TemplateFamily::autoregressive_mask, TemplateFamily::hybrid};
  return all;
}

Augmentation parse_augmentation(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  Augmentation a;
  if (kind == "jitter")
    a.kind = Augmentation::Kind::jitter;
  else if (kind == "scale")
    a.kind = Augmentation::Kind::scale;
  else if (kind == "crop_resize")
    a.kind = Augmentation::Kind::crop_resize;
  else if (kind == "permute_segments")
    a.kind = Augmentation::Kind::permute_segments;
  else
    throw ParameterError("unknown augmentation policy '" + kind + "'");
  if (colon == std::string::npos) throw ParameterError("augmentation '" + spec + "' needs a parameter");
  try {
    a.param = std::stod(spec.substr(colon + 1));
  } catch (const std::exception&) {
    throw ParameterError("bad augmentation parameter in '" + spec + "'");
  }
  require(a.param >= 0.0, "augmentation parameter must be >= 0");
  return a;
}

std::string to_string(const Augmentation& aug) {
  static const char* names[] = {"jitter", "scale", "crop_resize", "permute_segments"};
  std::ostringstream p;
  p << aug.param;
  return std::string(names[static_cast<int>(aug.kind)]) + ":" + p.str();
}

Matrix augment(const Matrix& x, const std::vector<Augmentation>& policy, Rng& rng) {
  Matrix out = x;
  for (const Augmentation& a : policy) {
    switch (a.kind) {
      case Augmentation::Kind::jitter: {
        if (a.param == 0.0) break;
        std::normal_distribution<double> n(0.0, a.param);
        out = out.unaryExpr([&](double v) { return v + n(rng); });
        break;
      }
      case Augmentation::Kind::scale: {
        if (a.param == 0.0) break;
        std::normal_distribution<double> n(1.0, a.param);
        for (Eigen::Index j = 0; j < out.rows(); ++j) out.row(j) *= n(rng);
        break;
      }
      case Augmentation::Kind::crop_resize:
        if (a.param > 0.0 && a.param < 1.0) out = crop_resize(out, a.param, rng);
        break;
      case Augmentation::Kind::permute_segments:
        out = permute_segments(out, static_cast<int>(a.param), rng);
        break;
    }
  }
  return out;
}

PretrainTemplateConfig PretrainTemplateConfig::defaults(TemplateFamily family, int input_dims) {
  PretrainTemplateConfig c;
  c.family = family;
  c.encoder.input_dims = input_dims;
  if (family == TemplateFamily::hybrid) c.hybrid_weight = 0.5;
  return c;
}

void PretrainTemplateConfig::validate() const {
  encoder.validate();
  require(epochs >= 0, "epochs must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate > 0.0, "learning_rate must be > 0");
  require(temperature > 0.0, "temperature must be > 0");
  require(masking_rate >= 0.0 && masking_rate <= 1.0, "masking_rate must lie in [0,1]");
  require(n_negatives >= 0, "n_negatives must be >= 0");
  require(hybrid_weight.has_value() == (family == TemplateFamily::hybrid),
          "hybrid_weight is required for, and only for, the hybrid family");
  if (hybrid_weight) require(*hybrid_weight >= 0.0 && *hybrid_weight <= 1.0, "hybrid_weight must lie in [0,1]");
}

PretrainedInstance::PretrainedInstance(PretrainTemplateConfig config, Encoder encoder, ParameterStore head,
                                       std::vector<double> loss_curve, bool fitted)
    : config_(std::move(config)),
      encoder_(std::move(encoder)),
      head_(std::move(head)),
      loss_curve_(std::move(loss_curve)),
      fitted_(fitted) {}

Matrix PretrainedInstance::transform(const TimeSeriesDataset& data) const {
  if (!fitted_) throw StateError("transform called on an unfitted pre-training instance");
  constexpr int kChunk = 64;
  Matrix out(data.size(), repr_dim());
  for (int start = 0; start < data.size(); start += kChunk) {
    const int n = std::min(kChunk, data.size() - start);
    std::vector<Matrix> chunk(data.samples().begin() + start, data.samples().begin() + start + n);
    out.middleRows(start, n) = encoder_.encode_batch(chunk);
  }
  return out;
}

ad::Var PretrainedInstance::objective(const Binding& enc, const Binding& head, const std::vector<const Matrix*>& batch,
                                      Rng& rng) const {
  if (batch.empty()) throw ParameterError("empty batch");
  switch (config_.family) {
    case TemplateFamily::contrastive_series:
      return series_contrast(config_, encoder_, enc, batch, rng);
    case TemplateFamily::contrastive_subsequence:
      return triplet_subseries_loss(encoder_, enc, batch, config_.n_negatives, rng);
    case TemplateFamily::contrastive_timestamp:
      return timestamp_contrast(config_, encoder_, enc, batch, rng);
    case TemplateFamily::autoregressive_mask:
      return masked_prediction(config_, encoder_, enc, head, batch, rng);
    case TemplateFamily::hybrid: {
      const ad::Var c = series_contrast(config_, encoder_, enc, batch, rng);
      const ad::Var r = masked_prediction(config_, encoder_, enc, head, batch, rng);
      return hybrid_loss(c, r, *config_.hybrid_weight);
    }
  }
  throw ParameterError("unknown template family");
}

ad::Var triplet_subseries_loss(const Encoder& encoder, const Binding& params, const std::vector<const Matrix*>& batch,
                               int n_negatives, Rng& rng) {
  const int b = static_cast<int>(batch.size());
  if (b < 2 && n_negatives > 0) throw ParameterError("triplet loss: a batch of 1 has no other samples for negatives");
  const int t = static_cast<int>(batch.front()->cols());
  if (t < 8) throw ParameterError("triplet loss needs T >= 8");
  const int min_len = std::max(2, t / 4);
  const int ref_len = uniform_int(rng, min_len, t);
  const int pos_len = uniform_int(rng, min_len, ref_len);
  std::vector<Matrix> refs, poss, negs;
  for (const Matrix* x : batch) {
    const int ref_start = uniform_int(rng, 0, t - ref_len);
    refs.push_back(x->middleCols(ref_start, ref_len));
    const int pos_start = ref_start + uniform_int(rng, 0, ref_len - pos_len);
    poss.push_back(x->middleCols(pos_start, pos_len));
  }
  for (int j = 0; j < n_negatives; ++j)
    for (int s = 0; s < b; ++s) {
      int other = uniform_int(rng, 0, b - 2);
      if (other >= s) ++other;
      const int start = uniform_int(rng, 0, t - pos_len);
      negs.push_back(batch[static_cast<std::size_t>(other)]->middleCols(start, pos_len));
    }
  const ad::Var zr = pooled(encoder, params, to_time_major(refs), ref_len);
  const ad::Var zp = pooled(encoder, params, to_time_major(poss), pos_len);
  ad::Tape& tape = params.vars.front().tape();
  const ad::Var zn = n_negatives > 0 ? pooled(encoder, params, to_time_major(negs), pos_len)
                                     : tape.constant(Matrix(0, encoder.repr_dim()));
  return triplet_loss(zr, zp, zn, n_negatives);
}

PretrainedInstance make_instance(const PretrainTemplateConfig& config) {
  config.validate();
  Encoder enc(config.encoder);
  ParameterStore head;
  if (config.family == TemplateFamily::autoregressive_mask || config.family == TemplateFamily::hybrid) {
    Rng rng(config.seed ^ 0x9e3779b97f4a7c15ull);
    const int k = config.encoder.repr_dim, d = config.encoder.input_dims;
    head.add("head.weight", init_uniform(d, k, k, rng));
    head.add("head.bias", Matrix::Zero(1, d));
  }
  return PretrainedInstance(config, std::move(enc), std::move(head), {}, false);
}

std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng, bool shuffle) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n; start += batch_size)
    batches.emplace_back(order.begin() + start, order.begin() + std::min(n, start + batch_size));
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

PretrainedInstance fit(const PretrainTemplateConfig& config, const TimeSeriesDataset& data, const FitObserver& observer) {
  config.validate();
  if (data.channels() != config.encoder.input_dims)
    throw ShapeError("dataset has " + std::to_string(data.channels()) + " channels, encoder expects " +
                     std::to_string(config.encoder.input_dims));
  PretrainedInstance inst = make_instance(config);
  ParameterStore& enc = inst.encoder().parameters();
  ParameterStore& head = inst.head();
  OptimizerState enc_opt, head_opt;
  enc_opt.learning_rate = head_opt.learning_rate = config.learning_rate;
  Rng rng(config.seed);
  std::vector<double> curve;
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = make_batches(data.size(), config.batch_size, rng);
    for (const auto& idx : batches) {
      std::vector<const Matrix*> batch;
      for (int i : idx) batch.push_back(&data.sample(i));
      ad::Tape tape;
      const Binding eb = bind(tape, enc, true);
      const Binding hb = bind(tape, head, true);
      const ad::Var loss = inst.objective(eb, hb, batch, rng);
      const double value = loss.scalar();
      if (!std::isfinite(value))
        throw NumericError("non-finite pre-training loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step));
      tape.backward(loss);
      gradient_step(enc, gradients(eb), enc_opt);
      if (head.size()) gradient_step(head, gradients(hb), head_opt);
      if (observer) observer(epoch, step, value);
      total += value;
      ++step;
    }
    curve.push_back(total / static_cast<double>(batches.size()));
  }
  if (config.epochs > 0) {
    enc.round_to_float();
    head.round_to_float();
  }
  return PretrainedInstance(config, std::move(inst.encoder()), std::move(head), std::move(curve), true);
}

RepresentationSet transform_all(const std::vector<PretrainedInstance>& instances, const TimeSeriesDataset& data) {
  RepresentationSet out;
  for (const auto& inst : instances) out.matrices.push_back(inst.transform(data));
  return out;
}

}  // namespace units
