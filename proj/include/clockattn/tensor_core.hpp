// Masked-sequence numerics: masked statistics, numerically stable masked
// softmax, left-padded cumulative sums and Gram-product squared distances.
// Pure functions, no internal state.
#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

#include "clockattn/types.hpp"

namespace clockattn {

/// Mean and population variance over valid positions only, per channel.
/// Throws on an all-false mask.
template <typename Scalar>
std::pair<RowVec<Scalar>, RowVec<Scalar>> masked_mean_var(const MaskedSeqT<Scalar>& x) {
  const Eigen::Index count = x.valid_count();
  if (count == 0) throw std::invalid_argument("masked_mean_var: empty sequence");
  const Eigen::Index d = x.width();
  RowVec<Scalar> mean = RowVec<Scalar>::Zero(d);
  for (Eigen::Index i = 0; i < x.len(); ++i)
    if (x.mask(i)) mean += x.values.row(i);
  mean /= static_cast<Scalar>(count);
  RowVec<Scalar> var = RowVec<Scalar>::Zero(d);
  for (Eigen::Index i = 0; i < x.len(); ++i)
    if (x.mask(i)) var += (x.values.row(i) - mean).cwiseAbs2();
  var /= static_cast<Scalar>(count);
  return {std::move(mean), std::move(var)};
}

template <typename Scalar>
struct MaskedSoftmaxResultT {
  Mat<Scalar> weights;          // [L_q x T_k], rows sum to 1 over allowed entries
  Mask empty_rows;              // true where a row had no allowed entry
};
using MaskedSoftmaxResult = MaskedSoftmaxResultT<double>;

/// Row softmax restricted to allowed entries, with per-row max subtraction.
/// Disallowed entries are exactly zero. Rows with no allowed entry come back
/// all-zero and flagged instead of NaN, so padded query rows stay inert.
template <typename Scalar>
MaskedSoftmaxResultT<Scalar> masked_softmax(const ScoreMatrixT<Scalar>& s) {
  const Eigen::Index rows = s.logits.rows(), cols = s.logits.cols();
  MaskedSoftmaxResultT<Scalar> out;
  out.weights = Mat<Scalar>::Zero(rows, cols);
  out.empty_rows = Mask::Constant(rows, false);
  for (Eigen::Index i = 0; i < rows; ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    bool any = false;
    for (Eigen::Index j = 0; j < cols; ++j)
      if (s.allow(i, j)) {
        any = true;
        mx = std::max(mx, s.logits(i, j));
      }
    if (!any) {
      out.empty_rows(i) = true;
      continue;
    }
    Scalar sum = 0;
    for (Eigen::Index j = 0; j < cols; ++j)
      if (s.allow(i, j)) {
        const Scalar e = std::exp(s.logits(i, j) - mx);
        out.weights(i, j) = e;
        sum += e;
      }
    out.weights.row(i) /= sum;
  }
  return out;
}

/// Cumulative sum over rows with a leading zero row: output row 0 is zero,
/// row i (i>=1) is the sum of input rows 0..i-1. An empty input (L=1 case)
/// yields the single zero row.
template <typename Scalar>
Mat<Scalar> cumsum_leftpad(const Mat<Scalar>& g) {
  const Eigen::Index d = g.cols();
  Mat<Scalar> z = Mat<Scalar>::Zero(g.rows() + 1, d);
  for (Eigen::Index i = 0; i < g.rows(); ++i) z.row(i + 1) = z.row(i) + g.row(i);
  return z;
}

/// Pairwise squared L2 distances via norms and a Gram product,
/// ||a_i||^2 + ||b_j||^2 - 2 a_i.b_j, clamped at zero to absorb cancellation.
/// Never materializes an [L_q x T_k x d] intermediate.
template <typename Scalar>
Mat<Scalar> pairwise_sqdist(const Mat<Scalar>& a, const Mat<Scalar>& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("pairwise_sqdist: dimension mismatch");
  Vec<Scalar> an = a.rowwise().squaredNorm();
  Vec<Scalar> bn = b.rowwise().squaredNorm();
  Mat<Scalar> d2 = (-2 * (a * b.transpose())).colwise() + an;
  d2.rowwise() += bn.transpose();
  return d2.cwiseMax(Scalar(0));
}

}  // namespace clockattn
