#include "units/losses.hpp"

#include <vector>

namespace units {

ad::Var row_sums(ad::Var a) { return ad::matmul(a, a.tape().constant(Matrix::Ones(a.cols(), 1))); }

ad::Var nt_xent(ad::Var view_a, ad::Var view_b, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("contrastive temperature must be > 0");
  if (view_a.rows() != view_b.rows() || view_a.cols() != view_b.cols())
    throw ShapeError("nt_xent: views differ in shape");
  const Eigen::Index b = view_a.rows();
  if (b < 2) throw ParameterError("nt_xent needs a batch of at least 2 (no negatives with B=1)");
  const std::vector<ad::Var> parts{view_a, view_b};
  const ad::Var z = ad::normalize_rows(ad::vstack(parts));
  const ad::Var sim = ad::scale(ad::matmul_nt(z, z), 1.0 / temperature);
  std::vector<int> targets(static_cast<std::size_t>(2 * b));
  for (Eigen::Index i = 0; i < b; ++i) {
    targets[static_cast<std::size_t>(i)] = static_cast<int>(i + b);
    targets[static_cast<std::size_t>(i + b)] = static_cast<int>(i);
  }
  return ad::softmax_cross_entropy(sim, targets, true);
}

double nt_xent_loss(const Matrix& view_a, const Matrix& view_b, double temperature) {
  ad::Tape tape;
  return nt_xent(tape.constant(view_a), tape.constant(view_b), temperature).scalar();
}

ad::Var timestamp_contrastive(ad::Var repr_a, ad::Var repr_b, double temperature) {
  if (repr_a.rows() < 2) throw ParameterError("timestamp contrast needs an overlap of at least 2 timesteps");
  return nt_xent(repr_a, repr_b, temperature);
}

double timestamp_contrastive_loss(const Matrix& repr_a, const Matrix& repr_b, double temperature) {
  ad::Tape tape;
  return timestamp_contrastive(tape.constant(repr_a), tape.constant(repr_b), temperature).scalar();
}

ad::Var triplet_loss(ad::Var ref, ad::Var pos, ad::Var neg, int n_negatives) {
  const Eigen::Index b = ref.rows();
  if (pos.rows() != b || pos.cols() != ref.cols()) throw ShapeError("triplet: positive shape mismatch");
  if (n_negatives < 0 || neg.rows() != b * n_negatives) throw ShapeError("triplet: negative count mismatch");
  ad::Var loss = ad::scale(ad::sum(ad::log_sigmoid(row_sums(ad::mul(ref, pos)))), -1.0);
  if (n_negatives > 0) {
    const std::vector<ad::Var> reps(static_cast<std::size_t>(n_negatives), ref);
    const ad::Var dots = row_sums(ad::mul(ad::vstack(reps), neg));
    loss = ad::sub(loss, ad::sum(ad::log_sigmoid(ad::scale(dots, -1.0))));
  }
  return ad::scale(loss, 1.0 / static_cast<double>(b));
}

double triplet_loss(const Matrix& ref, const Matrix& pos, const Matrix& neg, int n_negatives) {
  ad::Tape tape;
  return triplet_loss(tape.constant(ref), tape.constant(pos), tape.constant(neg), n_negatives).scalar();
}

ad::Var masked_mse(ad::Var prediction, const Matrix& truth, const Matrix& observed) {
  if (prediction.rows() != truth.rows() || prediction.cols() != truth.cols() || observed.rows() != truth.rows() ||
      observed.cols() != truth.cols())
    throw ShapeError("masked_mse: shape mismatch");
  const Matrix hidden = (1.0 - observed.array()).matrix();
  const double count = hidden.sum();
  if (count <= 0.0) throw ParameterError("masked reconstruction needs at least one masked cell");
  const ad::Var diff = ad::sub(prediction, prediction.tape().constant(truth));
  return ad::scale(ad::sum(ad::mul_const(ad::square(diff), hidden)), 1.0 / count);
}

double masked_reconstruction_loss(const Matrix& x, const Matrix& x_hat, const BoolArray& mask) {
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) throw ShapeError("mask shape differs from sample");
  ad::Tape tape;
  return masked_mse(tape.constant(x_hat), x, mask.cast<double>().matrix()).scalar();
}

ad::Var mse(ad::Var prediction, const Matrix& target) {
  return ad::mean(ad::square(ad::sub(prediction, prediction.tape().constant(target))));
}

ad::Var mae(ad::Var prediction, const Matrix& target) {
  return ad::mean(ad::abs(ad::sub(prediction, prediction.tape().constant(target))));
}

double hybrid_loss(double contrastive, double reconstruction, double weight) {
  if (!(weight >= 0.0 && weight <= 1.0)) throw ParameterError("hybrid weight must lie in [0,1]");
  return weight * contrastive + (1.0 - weight) * reconstruction;
}

ad::Var hybrid_loss(ad::Var contrastive, ad::Var reconstruction, double weight) {
  if (!(weight >= 0.0 && weight <= 1.0)) throw ParameterError("hybrid weight must lie in [0,1]");
  return ad::add(ad::scale(contrastive, weight), ad::scale(reconstruction, 1.0 - weight));
}

}  // namespace units
