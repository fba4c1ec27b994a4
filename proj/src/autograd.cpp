#include "units/autograd.hpp"

#include <cmath>
#include <limits>
#include <mutex>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace units::ad {

namespace {

// Tape buffers are short-lived and often > 128 KiB; glibc would otherwise
// mmap/munmap each one and pay a page fault per touched page.
void keep_large_allocations_pooled() {
#ifdef __GLIBC__
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

}  // namespace

Tape::Tape() { keep_large_allocations_pooled(); }

const Matrix& Var::value() const { return tape_->value(id_); }
Matrix Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}, {}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::vector<int> parents, Backward backward) {
  bool rg = false;
  for (int p : parents) rg = rg || nodes_[static_cast<std::size_t>(p)].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, rg, std::move(parents), rg ? std::move(backward) : Backward{}});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix Tape::grad(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward root must be a 1x1 value");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace

namespace {

// Products evaluated straight into fresh storage; a plain `Matrix m = a * b`
// goes through an aliasing temporary and runs at half speed.
template <typename L, typename R>
Matrix product(const L& lhs, const R& rhs) {
  Matrix out(lhs.rows(), rhs.cols());
  out.noalias() = lhs * rhs;
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(product(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, product(g, t.value(ib).transpose()));
    if (t.requires_grad(ib)) t.accumulate(ib, product(t.value(ia).transpose(), g));
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(product(a.value(), b.value().transpose()), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, product(g, t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, product(g.transpose(), t.value(ia)));
  });
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return a.tape().record(a.value() * s, {ia}, [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id();
  return a.tape().record((a.value().array() + s).matrix(), {ia},
                         [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

Var add_row(Var a, Var bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw ShapeError("add_row: bias must be 1x" + std::to_string(a.cols()));
  const int ia = a.id(), ib = bias.id();
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Var mul_const(Var a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw ShapeError("mul_const: shape mismatch");
  const int ia = a.id();
  return a.tape().record(a.value().cwiseProduct(c), {ia},
                         [ia, c](Tape& t, const Matrix& g) { t.accumulate(ia, g.cwiseProduct(c)); });
}

Var transpose(Var a) {
  const int ia = a.id();
  return a.tape().record(a.value().transpose(), {ia},
                         [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.transpose()); });
}

Var relu(Var a) {
  const int ia = a.id();
  return a.tape().record(a.value().cwiseMax(0.0), {ia}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0));
  });
}

Var square(Var a) {
  const int ia = a.id();
  return a.tape().record(a.value().cwiseAbs2(), {ia}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia)));
  });
}

Var abs(Var a) {
  const int ia = a.id();
  return a.tape().record(a.value().cwiseAbs(), {ia}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia).array().sign().matrix()));
  });
}

Var exp(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().exp().matrix();
  const int self = static_cast<int>(a.tape().size());
  return a.tape().record(std::move(out), {ia}, [ia, self](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(self)));
  });
}

Var log(Var a) {
  const int ia = a.id();
  return a.tape().record(a.value().array().log().matrix(), {ia}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
  });
}

Var log_sigmoid(Var a) {
  const int ia = a.id();
  // log sigmoid(x) = min(x, 0) - log1p(exp(-|x|))
  Matrix out = a.value().unaryExpr([](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); });
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, const Matrix& g) {
    // d/dx log sigmoid(x) = sigmoid(-x)
    const Matrix s = t.value(ia).unaryExpr([](double x) {
      return x >= 0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
    });
    t.accumulate(ia, g.cwiseProduct(s));
  });
}

Var sum(Var a) {
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, const Matrix& g) {
    const Matrix& v = t.value(ia);
    t.accumulate(ia, Matrix::Constant(v.rows(), v.cols(), g(0, 0)));
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_norms(Var a) {
  const int ia = a.id();
  Matrix out = a.value().rowwise().norm();
  const int self = static_cast<int>(a.tape().size());
  return a.tape().record(std::move(out), {ia}, [ia, self](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    const Matrix& n = t.value(self);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      d.row(r) = n(r, 0) > 0.0 ? (x.row(r) * (g(r, 0) / n(r, 0))).eval() : RowVector::Zero(x.cols()).eval();
    t.accumulate(ia, d);
  });
}

Var normalize_rows(Var a, double eps) {
  const int ia = a.id();
  const Vector norms = a.value().rowwise().norm().cwiseMax(eps);
  Matrix out = norms.cwiseInverse().asDiagonal() * a.value();
  const int self = static_cast<int>(a.tape().size());
  return a.tape().record(std::move(out), {ia}, [ia, self, norms](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    // dx = (g - y * <y, g>) / |x|
    const Vector dots = y.cwiseProduct(g).rowwise().sum();
    Matrix d = g - dots.asDiagonal() * y;
    t.accumulate(ia, norms.cwiseInverse().asDiagonal() * d);
  });
}

Var hstack(std::span<const Var> parts) {
  if (parts.empty()) throw ParameterError("hstack of nothing");
  const Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.rows() != r) throw ShapeError("hstack: row count mismatch");
    c += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(r, c);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts.front().tape().record(std::move(out), ids, [ids](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (int id : ids) {
      const Eigen::Index w = t.value(id).cols();
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(off, w));
      off += w;
    }
  });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw ParameterError("vstack of nothing");
  const Eigen::Index c = parts.front().cols();
  Eigen::Index r = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.cols() != c) throw ShapeError("vstack: column count mismatch");
    r += p.rows();
    ids.push_back(p.id());
  }
  Matrix out(r, c);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts.front().tape().record(std::move(out), ids, [ids](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (int id : ids) {
      const Eigen::Index h = t.value(id).rows();
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(off, h));
      off += h;
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  const int ia = a.id();
  return a.tape().record(a.value().middleRows(start, count), {ia}, [ia, start, count](Tape& t, const Matrix& g) {
    const Matrix& v = t.value(ia);
    Matrix d = Matrix::Zero(v.rows(), v.cols());
    d.middleRows(start, count) = g;
    t.accumulate(ia, d);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  const int ia = a.id();
  return a.tape().record(a.value().middleCols(start, count), {ia}, [ia, start, count](Tape& t, const Matrix& g) {
    const Matrix& v = t.value(ia);
    Matrix d = Matrix::Zero(v.rows(), v.cols());
    d.middleCols(start, count) = g;
    t.accumulate(ia, d);
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count mismatch");
  const int ia = a.id();
  Matrix out = a.value().reshaped(rows, cols);
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, const Matrix& g) {
    const Matrix& v = t.value(ia);
    t.accumulate(ia, g.reshaped(v.rows(), v.cols()));
  });
}

Var shift_within_blocks(Var a, Eigen::Index block_len, Eigen::Index shift) {
  const Matrix& v = a.value();
  if (block_len <= 0 || v.rows() % block_len != 0) throw ShapeError("shift_within_blocks: rows not a multiple of block");
  if (shift == 0) return a;
  const Eigen::Index blocks = v.rows() / block_len;
  Matrix out = Matrix::Zero(v.rows(), v.cols());
  const Eigen::Index keep = block_len - shift;
  if (keep > 0)
    for (Eigen::Index b = 0; b < blocks; ++b)
      out.middleRows(b * block_len + shift, keep) = v.middleRows(b * block_len, keep);
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, block_len, shift, blocks, keep](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(g.rows(), g.cols());
    if (keep > 0)
      for (Eigen::Index b = 0; b < blocks; ++b)
        d.middleRows(b * block_len, keep) = g.middleRows(b * block_len + shift, keep);
    t.accumulate(ia, d);
  });
}

Var max_pool_blocks(Var a, Eigen::Index block_len) {
  const Matrix& v = a.value();
  if (block_len <= 0 || v.rows() % block_len != 0) throw ShapeError("max_pool_blocks: rows not a multiple of block");
  const Eigen::Index blocks = v.rows() / block_len;
  Matrix out(blocks, v.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(blocks * v.cols()));
  for (Eigen::Index b = 0; b < blocks; ++b)
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      Eigen::Index best = 0;
      out(b, c) = v.col(c).segment(b * block_len, block_len).maxCoeff(&best);
      arg[static_cast<std::size_t>(b * v.cols() + c)] = b * block_len + best;
    }
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, arg, blocks](Tape& t, const Matrix& g) {
    const Matrix& v = t.value(ia);
    Matrix d = Matrix::Zero(v.rows(), v.cols());
    for (Eigen::Index b = 0; b < blocks; ++b)
      for (Eigen::Index c = 0; c < v.cols(); ++c) d(arg[static_cast<std::size_t>(b * v.cols() + c)], c) += g(b, c);
    t.accumulate(ia, d);
  });
}

Var mean_pool_blocks(Var a, Eigen::Index block_len) {
  const Matrix& v = a.value();
  if (block_len <= 0 || v.rows() % block_len != 0) throw ShapeError("mean_pool_blocks: rows not a multiple of block");
  const Eigen::Index blocks = v.rows() / block_len;
  Matrix out(blocks, v.cols());
  for (Eigen::Index b = 0; b < blocks; ++b)
    out.row(b) = v.middleRows(b * block_len, block_len).colwise().mean();
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, block_len, blocks](Tape& t, const Matrix& g) {
    Matrix d(blocks * block_len, g.cols());
    for (Eigen::Index b = 0; b < blocks; ++b)
      d.middleRows(b * block_len, block_len).rowwise() = g.row(b) / static_cast<double>(block_len);
    t.accumulate(ia, d);
  });
}

Var blocks_to_rows(Var a, Eigen::Index block_len) {
  const Matrix& v = a.value();
  if (block_len <= 0 || v.rows() % block_len != 0) throw ShapeError("blocks_to_rows: rows not a multiple of block");
  const Eigen::Index blocks = v.rows() / block_len, ch = v.cols();
  Matrix out(blocks, ch * block_len);
  for (Eigen::Index b = 0; b < blocks; ++b)
    for (Eigen::Index j = 0; j < ch; ++j)
      out.row(b).segment(j * block_len, block_len) = v.col(j).segment(b * block_len, block_len).transpose();
  const int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, block_len, blocks, ch](Tape& t, const Matrix& g) {
    Matrix d(blocks * block_len, ch);
    for (Eigen::Index b = 0; b < blocks; ++b)
      for (Eigen::Index j = 0; j < ch; ++j)
        d.col(j).segment(b * block_len, block_len) = g.row(b).segment(j * block_len, block_len).transpose();
    t.accumulate(ia, d);
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets, bool exclude_diagonal) {
  const Matrix& z = logits.value();
  const Eigen::Index n = z.rows(), c = z.cols();
  if (static_cast<Eigen::Index>(targets.size()) != n) throw ShapeError("softmax_cross_entropy: target count mismatch");
  Matrix probs(n, c);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= c || (exclude_diagonal && y == r)) throw ParameterError("softmax_cross_entropy: bad target");
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < c; ++k)
      if (!(exclude_diagonal && k == r)) mx = std::max(mx, z(r, k));
    double denom = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) {
      const double e = (exclude_diagonal && k == r) ? 0.0 : std::exp(z(r, k) - mx);
      probs(r, k) = e;
      denom += e;
    }
    probs.row(r) /= denom;
    loss += -(z(r, y) - mx - std::log(denom));
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(n);
  const int ia = logits.id();
  std::vector<int> ys(targets.begin(), targets.end());
  return logits.tape().record(std::move(out), {ia}, [ia, probs, ys](Tape& t, const Matrix& g) {
    Matrix d = probs;
    for (std::size_t r = 0; r < ys.size(); ++r) d(static_cast<Eigen::Index>(r), ys[r]) -= 1.0;
    d *= g(0, 0) / static_cast<double>(ys.size());
    t.accumulate(ia, d);
  });
}

}  // namespace units::ad
