#pragma once

#include "units/core.hpp"

#include <functional>
#include <span>
#include <vector>

/// Reverse-mode differentiation over dense double matrices.
///
/// A Tape records every operation in creation order; `backward` walks the
/// record in reverse and accumulates gradients into every node that depends on
/// a parameter leaf. Sequences are stored time-major: a batch of B sequences
/// of length T with C features is a (B*T) x C matrix, sample b occupying rows
/// [b*T, (b+1)*T).
namespace units::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix& value() const;
  /// Zero when the node received no gradient.
  Matrix grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var parameter(Matrix value);
  Var record(Matrix value, std::vector<int> parents, Backward backward);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Matrix grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Adds `g` into the gradient of node `id` (no-op for constants).
  void accumulate(int id, const Matrix& g);

  /// Seeds d(root)/d(root) = 1 and back-propagates; root must be 1x1.
  void backward(Var root);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<int> parents;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Arithmetic
Var matmul(Var a, Var b);
/// a * b^T without materializing the transpose node.
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Adds the 1 x C row `bias` to every row of `a`.
Var add_row(Var a, Var bias);
/// Elementwise product with a constant matrix.
Var mul_const(Var a, const Matrix& c);
Var transpose(Var a);

// Elementwise nonlinearities
Var relu(Var a);
Var square(Var a);
Var abs(Var a);
Var exp(Var a);
Var log(Var a);
/// log(sigmoid(a)), numerically stable.
Var log_sigmoid(Var a);

// Reductions
Var sum(Var a);
Var mean(Var a);
/// Per-row Euclidean norm, (R x C) -> (R x 1); subgradient 0 at the origin.
Var row_norms(Var a);
/// Rows scaled to unit L2 norm (eps-guarded).
Var normalize_rows(Var a, double eps = 1e-12);

// Shape manipulation
Var hstack(std::span<const Var> parts);
Var vstack(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Reinterpret an R x C matrix as rows x cols (column-major order preserved).
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
/// Within each block of `block_len` rows, row t receives row t - shift
/// (zero-filled for t < shift).
Var shift_within_blocks(Var a, Eigen::Index block_len, Eigen::Index shift);
/// Column-wise max of each block of `block_len` rows: (B*T) x C -> B x C.
Var max_pool_blocks(Var a, Eigen::Index block_len);
/// Mean over rows inside each block: (B*T) x C -> B x C.
Var mean_pool_blocks(Var a, Eigen::Index block_len);
/// Rearranges a per-timestep (B*T) x D matrix into B x (D*T), channel-major.
Var blocks_to_rows(Var a, Eigen::Index block_len);

// Losses
/// Mean over rows of -log softmax(logits)[row, target]. With
/// `exclude_diagonal`, logits(i,i) take no part in the softmax.
Var softmax_cross_entropy(Var logits, std::span<const int> targets, bool exclude_diagonal = false);

}  // namespace units::ad
