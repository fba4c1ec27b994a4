#pragma once

#include "units/autograd.hpp"
#include "units/core.hpp"

namespace units {

/// NT-Xent over the 2B rows of [view_a; view_b]: each row's positive is its
/// counterpart view, the other 2B-2 rows are negatives. Rows are L2-normalised
/// first; the result is the mean over all 2B anchors.
ad::Var nt_xent(ad::Var view_a, ad::Var view_b, double temperature);
double nt_xent_loss(const Matrix& view_a, const Matrix& view_b, double temperature);

/// Temporal contrast between two aligned T' x K crops of one sample: each
/// timestep must pick its counterpart in the other view out of the 2T'-1
/// candidates, symmetrically over both views.
ad::Var timestamp_contrastive(ad::Var repr_a, ad::Var repr_b, double temperature);
double timestamp_contrastive_loss(const Matrix& repr_a, const Matrix& repr_b, double temperature = 1.0);

/// -log s(z_r.z_p) - sum_j log s(-z_r.z_nj), averaged over the B anchors.
/// Negatives are stacked negative-major: row j*B + b belongs to anchor b.
ad::Var triplet_loss(ad::Var ref, ad::Var pos, ad::Var neg, int n_negatives);
double triplet_loss(const Matrix& ref, const Matrix& pos, const Matrix& neg, int n_negatives);

/// Squared error averaged over the cells where `observed` is 0. `truth` and
/// `observed` share the prediction's layout.
ad::Var masked_mse(ad::Var prediction, const Matrix& truth, const Matrix& observed);
/// D x T convenience form; mask true = kept.
double masked_reconstruction_loss(const Matrix& x, const Matrix& x_hat, const BoolArray& mask);

ad::Var mse(ad::Var prediction, const Matrix& target);
ad::Var mae(ad::Var prediction, const Matrix& target);

double hybrid_loss(double contrastive, double reconstruction, double weight);
ad::Var hybrid_loss(ad::Var contrastive, ad::Var reconstruction, double weight);

/// Row sums as a column: (R x C) -> (R x 1).
ad::Var row_sums(ad::Var a);

}  // namespace units
