#include "units/model.hpp"

#include <bit>
#include <cmath>

namespace units {

void ParameterStore::add(std::string name, Matrix value) {
  if (contains(name)) throw ParameterError("duplicate parameter " + name);
  entries_.push_back({std::move(name), std::move(value)});
}

Matrix& ParameterStore::operator[](const std::string& name) {
  for (Entry& e : entries_)
    if (e.name == name) return e.value;
  throw NotFoundError("no parameter " + name);
}

const Matrix& ParameterStore::operator[](const std::string& name) const {
  for (const Entry& e : entries_)
    if (e.name == name) return e.value;
  throw NotFoundError("no parameter " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const Entry& e : entries_)
    if (e.name == name) return true;
  return false;
}

Eigen::Index ParameterStore::total_size() const {
  Eigen::Index n = 0;
  for (const Entry& e : entries_) n += e.value.size();
  return n;
}

Vector ParameterStore::flatten() const {
  Vector out(total_size());
  Eigen::Index off = 0;
  for (const Entry& e : entries_) {
    out.segment(off, e.value.size()) = e.value.reshaped();
    off += e.value.size();
  }
  return out;
}

void ParameterStore::unflatten(const Vector& flat) {
  if (flat.size() != total_size()) throw ShapeError("unflatten: size mismatch");
  Eigen::Index off = 0;
  for (Entry& e : entries_) {
    e.value.reshaped() = flat.segment(off, e.value.size());
    off += e.value.size();
  }
}

void ParameterStore::round_to_float() {
  for (Entry& e : entries_) e.value = e.value.cast<float>().cast<double>();
}

std::uint64_t ParameterStore::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  for (const Entry& e : entries_) {
    for (char c : e.name) mix(static_cast<unsigned char>(c));
    mix(static_cast<std::uint64_t>(e.value.rows()));
    mix(static_cast<std::uint64_t>(e.value.cols()));
    for (Eigen::Index i = 0; i < e.value.size(); ++i) mix(std::bit_cast<std::uint64_t>(e.value.data()[i]));
  }
  return h;
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Entry &a = entries_[i], &b = other.entries_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols() ||
        a.value != b.value)
      return false;
  }
  return true;
}

Binding bind(ad::Tape& tape, const ParameterStore& store, bool trainable) {
  Binding b;
  b.trainable = trainable;
  b.vars.reserve(store.size());
  for (const auto& e : store.entries()) b.vars.push_back(trainable ? tape.parameter(e.value) : tape.constant(e.value));
  return b;
}

std::vector<Matrix> gradients(const Binding& binding) {
  std::vector<Matrix> out;
  out.reserve(binding.vars.size());
  for (const ad::Var& v : binding.vars) out.push_back(v.grad());
  return out;
}

// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
  require(input_dims >= 1, "encoder input_dims must be >= 1");
  require(depth >= 1, "encoder depth must be >= 1");
  require(hidden_width >= 1, "encoder hidden_width must be >= 1");
  require(repr_dim >= 1, "encoder repr_dim (K) must be >= 1");
  require(kernel_size >= 1, "encoder kernel_size must be >= 1");
}

Matrix init_uniform(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = u(rng);
  return m;
}

Encoder::Encoder(const EncoderConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const int d = config_.input_dims, h = config_.hidden_width, k = config_.repr_dim;
  if (config_.architecture == Architecture::dilated_conv) {
    params_.add("input.weight", init_uniform(h, d, d, rng));
    params_.add("input.bias", init_uniform(1, h, d, rng));
    const int fan = h * config_.kernel_size;
    for (int b = 0; b < config_.depth; ++b) {
      // Residual branches start small so the stack begins near the identity.
      params_.add("block" + std::to_string(b) + ".weight", init_uniform(h, fan, fan, rng) * 0.5);
      params_.add("block" + std::to_string(b) + ".bias", Matrix::Zero(1, h));
    }
    params_.add("output.weight", init_uniform(k, h, h, rng));
    params_.add("output.bias", init_uniform(1, k, h, rng));
  } else {
    int in = d;
    for (int l = 0; l < config_.depth; ++l) {
      params_.add("layer" + std::to_string(l) + ".weight", init_uniform(h, in, in, rng));
      params_.add("layer" + std::to_string(l) + ".bias", init_uniform(1, h, in, rng));
      in = h;
    }
    params_.add("output.weight", init_uniform(k, h, h, rng));
    params_.add("output.bias", init_uniform(1, k, h, rng));
  }
}

Encoder::Encoder(const EncoderConfig& config, ParameterStore params) : config_(config), params_(std::move(params)) {
  config_.validate();
  const Encoder shape_ref(config_);
  const auto& want = shape_ref.parameters().entries();
  const auto& got = params_.entries();
  if (want.size() != got.size()) throw ShapeError("encoder parameters: expected " + std::to_string(want.size()) +
                                                  " tensors, got " + std::to_string(got.size()));
  for (std::size_t i = 0; i < want.size(); ++i)
    if (want[i].name != got[i].name || want[i].value.rows() != got[i].value.rows() ||
        want[i].value.cols() != got[i].value.cols())
      throw ShapeError("encoder parameter '" + got[i].name + "' does not match configuration (expected '" +
                       want[i].name + "' " + std::to_string(want[i].value.rows()) + "x" +
                       std::to_string(want[i].value.cols()) + ")");
}

ad::Var affine(ad::Var x, const ad::Var& weight, const ad::Var& bias) {
  return ad::add_row(ad::matmul_nt(x, weight), bias);
}

ad::Var Encoder::forward(const Binding& p, ad::Var input, Eigen::Index length) const {
  if (input.cols() != config_.input_dims)
    throw ShapeError("encoder expects " + std::to_string(config_.input_dims) + " channels, got " +
                     std::to_string(input.cols()));
  if (length < 1 || input.rows() % length != 0) throw ShapeError("encoder input rows not a multiple of length");
  std::size_t i = 0;
  if (config_.architecture == Architecture::dilated_conv) {
    ad::Var h = affine(input, p[i], p[i + 1]);
    i += 2;
    const int ks = config_.kernel_size;
    for (int b = 0; b < config_.depth; ++b) {
      const Eigen::Index dilation = Eigen::Index{1} << b;
      std::vector<ad::Var> taps;
      taps.reserve(static_cast<std::size_t>(ks));
      for (int tap = 0; tap < ks; ++tap) taps.push_back(ad::shift_within_blocks(h, length, (ks - 1 - tap) * dilation));
      ad::Var conv = affine(ks == 1 ? taps.front() : ad::hstack(taps), p[i], p[i + 1]);
      i += 2;
      h = ad::add(h, ad::relu(conv));
    }
    return affine(h, p[i], p[i + 1]);
  }
  ad::Var h = input;
  for (int l = 0; l < config_.depth; ++l, i += 2) h = ad::relu(affine(h, p[i], p[i + 1]));
  return affine(h, p[i], p[i + 1]);
}

Matrix to_time_major(const std::vector<const Matrix*>& samples) {
  if (samples.empty()) throw ParameterError("empty batch");
  const Eigen::Index d = samples.front()->rows(), t = samples.front()->cols();
  Matrix out(static_cast<Eigen::Index>(samples.size()) * t, d);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (samples[b]->rows() != d || samples[b]->cols() != t) throw ShapeError("batch samples differ in shape");
    out.middleRows(static_cast<Eigen::Index>(b) * t, t) = samples[b]->transpose();
  }
  return out;
}

Matrix to_time_major(const std::vector<Matrix>& samples) {
  std::vector<const Matrix*> ptrs;
  ptrs.reserve(samples.size());
  for (const Matrix& s : samples) ptrs.push_back(&s);
  return to_time_major(ptrs);
}

Matrix Encoder::encode_sequence(const Matrix& sample) const {
  if (sample.rows() != config_.input_dims)
    throw ShapeError("encode: sample has " + std::to_string(sample.rows()) + " channels, encoder expects " +
                     std::to_string(config_.input_dims));
  ad::Tape tape;
  const Binding b = bind(tape, params_, false);
  return forward(b, tape.constant(sample.transpose()), sample.cols()).value();
}

Vector Encoder::encode(const Matrix& sample) const { return encode_sequence(sample).colwise().maxCoeff().transpose(); }

Matrix Encoder::encode_batch(const std::vector<Matrix>& samples) const {
  for (const Matrix& s : samples)
    if (s.rows() != config_.input_dims) throw ShapeError("encode: channel count mismatch");
  ad::Tape tape;
  const Binding b = bind(tape, params_, false);
  const Eigen::Index t = samples.front().cols();
  return ad::max_pool_blocks(forward(b, tape.constant(to_time_major(samples)), t), t).value();
}

// ---------------------------------------------------------------------------

void gradient_step(ParameterStore& params, const std::vector<Matrix>& grads, OptimizerState& opt) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) throw ShapeError("gradient_step: gradient count mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].rows() != entries[i].value.rows() || grads[i].cols() != entries[i].value.cols())
      throw ShapeError("gradient_step: gradient shape mismatch for " + entries[i].name);
    if (!grads[i].allFinite()) throw NumericError("non-finite gradient in tensor '" + entries[i].name + "'");
  }
  if (opt.first_moment.empty() && opt.algorithm == Algorithm::adam) {
    for (const auto& e : entries) {
      opt.first_moment.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
      opt.second_moment.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
    }
  }
  ++opt.step;
  if (opt.algorithm == Algorithm::sgd) {
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].value -= opt.learning_rate * grads[i];
    return;
  }
  if (opt.first_moment.size() != entries.size()) throw ShapeError("optimizer state does not mirror parameters");
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Matrix& m = opt.first_moment[i];
    Matrix& v = opt.second_moment[i];
    m = opt.beta1 * m + (1.0 - opt.beta1) * grads[i];
    v = opt.beta2 * v + (1.0 - opt.beta2) * grads[i].cwiseAbs2();
    entries[i].value.array() -=
        opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
  }
}

Vector finite_difference_gradient(const std::function<double(const Vector&)>& loss, const Vector& params,
                                  double epsilon) {
  Vector g(params.size());
  Vector p = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double orig = p(i);
    p(i) = orig + epsilon;
    const double up = loss(p);
    p(i) = orig - epsilon;
    const double down = loss(p);
    p(i) = orig;
    g(i) = (up - down) / (2.0 * epsilon);
  }
  return g;
}

double relative_error(const Vector& a, const Vector& b) {
  const double denom = std::max(a.norm(), b.norm());
  return denom == 0.0 ? 0.0 : (a - b).norm() / denom;
}

}  // namespace units
