// Shared dense types for the clock-attention library. Everything is built on
// Eigen dynamic matrices; the numeric kernels are templated on the scalar so
// a float build is possible, but all verification tolerances assume double.
#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <utility>

namespace clockattn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatXd = Mat<double>;
using VecXd = Vec<double>;

using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;
using AllowMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

inline Mask full_mask(Eigen::Index n) { return Mask::Constant(n, true); }

inline Mask prefix_mask(Eigen::Index n, Eigen::Index n_valid) {
  Mask m = Mask::Constant(n, false);
  for (Eigen::Index i = 0; i < n_valid && i < n; ++i) m(i) = true;
  return m;
}

inline Eigen::Index mask_count(const Mask& m) {
  Eigen::Index c = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i) c += m(i) ? 1 : 0;
  return c;
}

// True iff all valid positions form one contiguous block starting at 0.
inline bool is_contiguous_prefix(const Mask& m) {
  bool seen_false = false;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (m(i)) {
      if (seen_false) return false;
    } else {
      seen_false = true;
    }
  }
  return true;
}

/// Length-L, width-D feature sequence plus a validity mask. Positions where
/// the mask is false are treated as nonexistent: their values never influence
/// any output statistic.
template <typename Scalar>
struct MaskedSeqT {
  Mat<Scalar> values;  // [L x D]
  Mask mask;           // [L]

  MaskedSeqT() = default;
  MaskedSeqT(Mat<Scalar> v, Mask m) : values(std::move(v)), mask(std::move(m)) {
    if (values.rows() != mask.size())
      throw std::invalid_argument("MaskedSeq: values/mask length mismatch");
  }

  Eigen::Index len() const { return values.rows(); }
  Eigen::Index width() const { return values.cols(); }
  Eigen::Index valid_count() const { return mask_count(mask); }

  static MaskedSeqT full(Mat<Scalar> v) {
    const Eigen::Index n = v.rows();
    return MaskedSeqT(std::move(v), full_mask(n));
  }
  static MaskedSeqT prefix(Mat<Scalar> v, Eigen::Index n_valid) {
    const Eigen::Index n = v.rows();
    return MaskedSeqT(std::move(v), prefix_mask(n, n_valid));
  }
};

using MaskedSeq = MaskedSeqT<double>;

/// Attention logits together with the validity pattern. Entries where allow
/// is false are conceptually -inf; the stored logit there is ignored.
template <typename Scalar>
struct ScoreMatrixT {
  Mat<Scalar> logits;  // [L_q x T_k]
  AllowMask allow;     // [L_q x T_k]

  ScoreMatrixT() = default;
  ScoreMatrixT(Mat<Scalar> l, AllowMask a) : logits(std::move(l)), allow(std::move(a)) {
    if (logits.rows() != allow.rows() || logits.cols() != allow.cols())
      throw std::invalid_argument("ScoreMatrix: logits/allow shape mismatch");
  }
};

using ScoreMatrix = ScoreMatrixT<double>;

}  // namespace clockattn
