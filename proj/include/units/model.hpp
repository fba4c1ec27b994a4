#pragma once

#include "units/autograd.hpp"
#include "units/core.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace units {

/// Named dense tensors in registration order.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
  };

  void add(std::string name, Matrix value);
  Matrix& operator[](const std::string& name);
  const Matrix& operator[](const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Eigen::Index total_size() const;

  /// All values concatenated in entry order (column-major within an entry).
  Vector flatten() const;
  void unflatten(const Vector& flat);
  /// Rounds every value to the nearest 32-bit float.
  void round_to_float();
  /// Order-sensitive FNV-1a digest of names, shapes and float32 values.
  std::uint64_t checksum() const;

  bool operator==(const ParameterStore& other) const;

 private:
  std::vector<Entry> entries_;
};

/// Parameters of a store placed on a tape, aligned with store.entries().
struct Binding {
  std::vector<ad::Var> vars;
  bool trainable = false;

  const ad::Var& operator[](std::size_t i) const { return vars[i]; }
};

Binding bind(ad::Tape& tape, const ParameterStore& store, bool trainable);
/// Gradients of a bound store after tape.backward(); zero for constants.
std::vector<Matrix> gradients(const Binding& binding);

// ---------------------------------------------------------------------------
// Encoders

enum class Architecture { dilated_conv, mlp };

struct EncoderConfig {
  Architecture architecture = Architecture::dilated_conv;
  int input_dims = 1;
  /// Residual conv blocks (dilation 2^b) or hidden layers for mlp.
  int depth = 3;
  int hidden_width = 64;
  int repr_dim = 64;
  int kernel_size = 3;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// h_m: a D x T sample to a per-timestep T x K representation, max-pooled over
/// time for the K-vector.
class Encoder {
 public:
  Encoder() = default;
  explicit Encoder(const EncoderConfig& config);
  Encoder(const EncoderConfig& config, ParameterStore params);

  const EncoderConfig& config() const { return config_; }
  int repr_dim() const { return config_.repr_dim; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// Per-timestep encoding of a batch stored time-major: (B*T) x D -> (B*T) x K.
  ad::Var forward(const Binding& params, ad::Var input, Eigen::Index length) const;

  Matrix encode_sequence(const Matrix& sample) const;
  Vector encode(const Matrix& sample) const;
  /// Pooled encodings of several equal-length samples, one row each.
  Matrix encode_batch(const std::vector<Matrix>& samples) const;

 private:
  EncoderConfig config_;
  ParameterStore params_;
};

/// Stacks D x T samples into the time-major (B*T) x D tape layout.
Matrix to_time_major(const std::vector<Matrix>& samples);
Matrix to_time_major(const std::vector<const Matrix*>& samples);

/// Affine map on the tape: rows of x times W^T plus b, with W stored out x in.
ad::Var affine(ad::Var x, const ad::Var& weight, const ad::Var& bias);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
Matrix init_uniform(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng);

// ---------------------------------------------------------------------------
// Optimisation

enum class Algorithm { adam, sgd };

struct OptimizerState {
  Algorithm algorithm = Algorithm::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

/// One update of `params` in place. Throws NumericError naming the first
/// tensor with a non-finite gradient, leaving params and state untouched.
void gradient_step(ParameterStore& params, const std::vector<Matrix>& grads, OptimizerState& opt);

/// Central differences, one coordinate at a time.
Vector finite_difference_gradient(const std::function<double(const Vector&)>& loss, const Vector& params,
                                  double epsilon = 1e-6);

/// ||a - b|| / max(||a||, ||b||), or 0 when both vanish.
double relative_error(const Vector& a, const Vector& b);

}  // namespace units
