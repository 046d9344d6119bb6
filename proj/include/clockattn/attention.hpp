// Stochastic clock attention forward pass and the scaled dot-product
// baseline. Both share projections, masked time normalization, masking and
// the softmax path; only the score rule differs.
//
// Two regimes:
//  - parallel: normalized clocks over the full sequences (no causal mask);
//  - autoregressive: unnormalized clocks where the clock, the time-norm
//    statistics and the length entering Sigma^2 for query row i are built
//    from the prefix 0..i only. A single full-sequence call therefore agrees
//    with step-by-step decoding on growing prefixes row for row.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "clockattn/clocks.hpp"
#include "clockattn/tensor_core.hpp"
#include "clockattn/types.hpp"

namespace clockattn {

template <typename Scalar>
struct AttentionParamsT {
  Mat<Scalar> Wq;  // [D_q x d]
  Mat<Scalar> Wk;  // [D_k x d]
  Mat<Scalar> Wv;  // [D_v x d_v]
  Scalar logit_scale = Scalar(1);
  Scalar eps = Scalar(1e-3);
  ClockMode mode = ClockMode::Normalized;
  bool causal = false;  // autoregressive regime; requires a causal_allow mask
};
using AttentionParams = AttentionParamsT<double>;

template <typename Scalar>
struct AttentionResultT {
  Mat<Scalar> context;  // [L_q x d_v]
  Mat<Scalar> weights;  // [L_q x T_k], row-stochastic over allowed entries
  Mask empty_row_flags; // [L_q]
};
using AttentionResult = AttentionResultT<double>;

/// Query-to-key visibility limits: allow(i,j) = j <= limit(i). Limits must be
/// non-decreasing and within [0, T_k).
inline AllowMask causal_allow_mask(Eigen::Index L_q, Eigen::Index T_k,
                                   const std::vector<Eigen::Index>& q_to_k_limit) {
  if (static_cast<Eigen::Index>(q_to_k_limit.size()) != L_q)
    throw std::invalid_argument("causal_allow_mask: one limit per query row required");
  AllowMask allow(L_q, T_k);
  Eigen::Index prev = 0;
  for (Eigen::Index i = 0; i < L_q; ++i) {
    const Eigen::Index lim = q_to_k_limit[i];
    if (lim < 0 || lim >= T_k) throw std::invalid_argument("causal_allow_mask: limit out of range");
    if (i > 0 && lim < prev) throw std::invalid_argument("causal_allow_mask: decreasing limits");
    prev = lim;
    for (Eigen::Index j = 0; j < T_k; ++j) allow(i, j) = (j <= lim);
  }
  return allow;
}

namespace detail {

template <typename Scalar>
Mat<Scalar> sigma_sq_matrix(const ClockTrajectoryT<Scalar>& cq, const ClockTrajectoryT<Scalar>& ck) {
  const Scalar len_q = static_cast<Scalar>(cq.valid_len);
  const Scalar len_k = static_cast<Scalar>(ck.valid_len);
  Mat<Scalar> s2(cq.lambda.rows(), ck.lambda.rows());
  for (Eigen::Index i = 0; i < s2.rows(); ++i)
    for (Eigen::Index j = 0; j < s2.cols(); ++j)
      s2(i, j) = cq.var_surrogate(i) / len_q + ck.var_surrogate(j) / len_k;
  return s2;
}

inline AllowMask outer_allow(const Mask& qm, const Mask& km) {
  AllowMask a(qm.size(), km.size());
  for (Eigen::Index i = 0; i < qm.size(); ++i)
    for (Eigen::Index j = 0; j < km.size(); ++j) a(i, j) = qm(i) && km(j);
  return a;
}

}  // namespace detail

/// Clock-difference score: S(i,j) = -||lambda_q(i)-lambda_k(j)||^2 /
/// (2 sqrt(d) Sigma^2(i,j) + eps) with Sigma^2 = var_q/len_q + var_k/len_k.
/// Non-positive everywhere; a Gaussian potential in the clock difference.
/// include_log_sigma adds the -1/2 log Sigma^2 term the meeting kernel
/// carries; it is dropped by default as approximately row-wise constant.
template <typename Scalar>
ScoreMatrixT<Scalar> clock_diff_score(const MaskedSeqT<Scalar>& eta_q,
                                      const MaskedSeqT<Scalar>& eta_k, ClockMode mode, Scalar eps,
                                      bool include_log_sigma = false) {
  if (eta_q.width() != eta_k.width())
    throw std::invalid_argument("clock_diff_score: clock width mismatch");
  if (eta_q.valid_count() == 0 || eta_k.valid_count() == 0)
    throw std::invalid_argument("clock_diff_score: empty sequence");
  const auto cq = build_clock(eta_q, mode, eps);
  const auto ck = build_clock(eta_k, mode, eps);
  const Scalar sqrt_d = std::sqrt(static_cast<Scalar>(eta_q.width()));
  Mat<Scalar> dist2 = pairwise_sqdist(cq.lambda, ck.lambda);
  Mat<Scalar> s2 = detail::sigma_sq_matrix(cq, ck);
  Mat<Scalar> logits =
      -dist2.cwiseQuotient(((Scalar(2) * sqrt_d * s2).array() + eps).matrix());
  if (include_log_sigma)
    logits -= Scalar(0.5) * s2.array().log().matrix();
  return ScoreMatrixT<Scalar>(std::move(logits), detail::outer_allow(eta_q.mask, eta_k.mask));
}

/// Row-wise spread (max - min over valid keys) of the -1/2 log Sigma^2 term,
/// reported so the "approximately row-wise constant" claim can be quantified.
template <typename Scalar>
Scalar log_sigma_row_spread(const MaskedSeqT<Scalar>& eta_q, const MaskedSeqT<Scalar>& eta_k,
                            ClockMode mode, Scalar eps) {
  const auto cq = build_clock(eta_q, mode, eps);
  const auto ck = build_clock(eta_k, mode, eps);
  Mat<Scalar> s2 = detail::sigma_sq_matrix(cq, ck);
  Scalar spread = 0;
  for (Eigen::Index i = 0; i < s2.rows(); ++i) {
    if (!eta_q.mask(i)) continue;
    Scalar lo = std::numeric_limits<Scalar>::infinity(), hi = -lo;
    for (Eigen::Index j = 0; j < s2.cols(); ++j) {
      if (!eta_k.mask(j)) continue;
      const Scalar term = Scalar(-0.5) * std::log(s2(i, j));
      lo = std::min(lo, term);
      hi = std::max(hi, term);
    }
    spread = std::max(spread, hi - lo);
  }
  return spread;
}

namespace detail {

template <typename Scalar>
void validate_forward_inputs(const MaskedSeqT<Scalar>& q, const MaskedSeqT<Scalar>& k,
                             const MaskedSeqT<Scalar>& v, const AttentionParamsT<Scalar>& params,
                             const AllowMask* causal_allow) {
  if (params.logit_scale <= Scalar(0)) throw std::invalid_argument("attention: logit_scale must be > 0");
  if (params.eps <= Scalar(0)) throw std::invalid_argument("attention: eps must be > 0");
  if (q.valid_count() == 0 || k.valid_count() == 0)
    throw std::invalid_argument("attention: empty query or key");
  if (k.len() != v.len() || (k.mask != v.mask).any())
    throw std::invalid_argument("attention: k and v must share mask and length");
  if (q.width() != params.Wq.rows() || k.width() != params.Wk.rows() ||
      v.width() != params.Wv.rows())
    throw std::invalid_argument("attention: projection shape mismatch");
  if (params.causal != (causal_allow != nullptr))
    throw std::invalid_argument("attention: causal flag and causal_allow must agree");
  if (causal_allow &&
      (causal_allow->rows() != q.len() || causal_allow->cols() != k.len()))
    throw std::invalid_argument("attention: causal_allow shape mismatch");
}

template <typename Scalar>
AttentionResultT<Scalar> finish_forward(Mat<Scalar> logits, AllowMask allow,
                                        const Mat<Scalar>& values_proj) {
  auto sm = masked_softmax(ScoreMatrixT<Scalar>(std::move(logits), std::move(allow)));
  AttentionResultT<Scalar> out;
  out.context = sm.weights * values_proj;
  out.weights = std::move(sm.weights);
  out.empty_row_flags = std::move(sm.empty_rows);
  return out;
}

// Projected values with padded rows zeroed, so non-finite garbage in padding
// can never reach the context through the 0-weight product.
template <typename Scalar>
Mat<Scalar> project_values(const MaskedSeqT<Scalar>& v, const Mat<Scalar>& Wv) {
  Mat<Scalar> V = v.values * Wv;
  for (Eigen::Index j = 0; j < v.len(); ++j)
    if (!v.mask(j)) V.row(j).setZero();
  return V;
}

}  // namespace detail

/// Full stochastic clock attention forward pass. Parallel regime by default;
/// supplying causal_allow (with params.causal = true and Unnormalized mode)
/// switches to the autoregressive regime where every query row is computed
/// from its own prefix.
template <typename Scalar>
AttentionResultT<Scalar> sca_forward(const MaskedSeqT<Scalar>& q, const MaskedSeqT<Scalar>& k,
                                     const MaskedSeqT<Scalar>& v,
                                     const AttentionParamsT<Scalar>& params,
                                     const AllowMask* causal_allow = nullptr) {
  detail::validate_forward_inputs(q, k, v, params, causal_allow);
  const Mat<Scalar> V = detail::project_values(v, params.Wv);
  const MaskedSeqT<Scalar> etak =
      masked_time_norm(MaskedSeqT<Scalar>(k.values * params.Wk, k.mask), params.eps);

  if (!causal_allow) {
    const MaskedSeqT<Scalar> etaq =
        masked_time_norm(MaskedSeqT<Scalar>(q.values * params.Wq, q.mask), params.eps);
    auto score = clock_diff_score(etaq, etak, params.mode, params.eps);
    return detail::finish_forward<Scalar>(score.logits * params.logit_scale,
                                          std::move(score.allow), V);
  }

  // Autoregressive regime.
  if (params.mode == ClockMode::Normalized)
    throw std::invalid_argument(
        "attention: normalized clocks need the full sequence; causal_allow requires "
        "unnormalized mode");
  if (!is_contiguous_prefix(q.mask))
    throw std::invalid_argument("attention: non-contiguous query mask");

  const auto ck = build_clock(etak, ClockMode::Unnormalized, params.eps);
  const Scalar sqrt_d = std::sqrt(static_cast<Scalar>(params.Wq.cols()));
  const Scalar len_k = static_cast<Scalar>(ck.valid_len);
  const Mat<Scalar> xq = q.values * params.Wq;

  const Eigen::Index Lq = q.len(), Tk = k.len();
  Mat<Scalar> logits = Mat<Scalar>::Zero(Lq, Tk);
  AllowMask allow(Lq, Tk);
  for (Eigen::Index i = 0; i < Lq; ++i) {
    for (Eigen::Index j = 0; j < Tk; ++j)
      allow(i, j) = q.mask(i) && k.mask(j) && (*causal_allow)(i, j);
    if (!q.mask(i)) continue;
    // Clock, time-norm statistics and Sigma^2 length for row i come from the
    // prefix 0..i only, so one full pass replays step-by-step decoding.
    const MaskedSeqT<Scalar> pref(xq.topRows(i + 1), full_mask(i + 1));
    const auto cq = build_clock(masked_time_norm(pref, params.eps), ClockMode::Unnormalized,
                                params.eps);
    const RowVec<Scalar> lam_i = cq.lambda.row(i);
    const Scalar var_i = static_cast<Scalar>(i) + Scalar(0.5);
    const Scalar len_i = static_cast<Scalar>(i + 1);
    for (Eigen::Index j = 0; j < Tk; ++j) {
      const Scalar s2 = var_i / len_i + ck.var_surrogate(j) / len_k;
      const Scalar d2 = std::max(Scalar(0), (lam_i - ck.lambda.row(j)).squaredNorm());
      logits(i, j) = -d2 / (Scalar(2) * sqrt_d * s2 + params.eps) * params.logit_scale;
    }
  }
  return detail::finish_forward<Scalar>(std::move(logits), std::move(allow), V);
}

/// Conventional scaled dot-product attention with the same projections,
/// masked time normalization, masking and softmax path as sca_forward. The
/// score is eta_q . eta_k / sqrt(d); logit_scale is not applied.
template <typename Scalar>
AttentionResultT<Scalar> sdpa_forward(const MaskedSeqT<Scalar>& q, const MaskedSeqT<Scalar>& k,
                                      const MaskedSeqT<Scalar>& v,
                                      const AttentionParamsT<Scalar>& params,
                                      const AllowMask* causal_allow = nullptr) {
  detail::validate_forward_inputs(q, k, v, params, causal_allow);
  const Mat<Scalar> V = detail::project_values(v, params.Wv);
  const MaskedSeqT<Scalar> etak =
      masked_time_norm(MaskedSeqT<Scalar>(k.values * params.Wk, k.mask), params.eps);
  const Scalar sqrt_d = std::sqrt(static_cast<Scalar>(params.Wq.cols()));

  if (!causal_allow) {
    const MaskedSeqT<Scalar> etaq =
        masked_time_norm(MaskedSeqT<Scalar>(q.values * params.Wq, q.mask), params.eps);
    Mat<Scalar> logits = etaq.values * etak.values.transpose() / sqrt_d;
    return detail::finish_forward<Scalar>(std::move(logits),
                                          detail::outer_allow(q.mask, k.mask), V);
  }

  if (!is_contiguous_prefix(q.mask))
    throw std::invalid_argument("attention: non-contiguous query mask");
  const Mat<Scalar> xq = q.values * params.Wq;
  const Eigen::Index Lq = q.len(), Tk = k.len();
  Mat<Scalar> logits = Mat<Scalar>::Zero(Lq, Tk);
  AllowMask allow(Lq, Tk);
  for (Eigen::Index i = 0; i < Lq; ++i) {
    for (Eigen::Index j = 0; j < Tk; ++j)
      allow(i, j) = q.mask(i) && k.mask(j) && (*causal_allow)(i, j);
    if (!q.mask(i)) continue;
    const MaskedSeqT<Scalar> pref(xq.topRows(i + 1), full_mask(i + 1));
    const auto etaq_p = masked_time_norm(pref, params.eps);
    logits.row(i) = etaq_p.values.row(i) * etak.values.transpose() / sqrt_d;
  }
  return detail::finish_forward<Scalar>(std::move(logits), std::move(allow), V);
}

/// Numerical check of the three-step reduction from unnormalized clock
/// attention to scaled dot-product attention: with lambda = eta, Sigma^2 = 1
/// and equal-norm keys, softmax(-||eta_q - eta_k||^2 / (2 sqrt(d))) equals
/// softmax(eta_q . eta_k / sqrt(d)) because the squared-norm terms are
/// row-constant and cancel. Unequal key norms void the precondition; the
/// report then flags it instead of passing or failing.
struct ReductionReport {
  double max_abs_dev = 0;       // max |softmax_L2 - softmax_dot| over entries
  double key_norm_spread = 0;   // relative spread of key row norms
  bool precondition_ok = false; // key norms equal (within 1e-9 relative)
  bool pass = false;            // precondition_ok && max_abs_dev <= 1e-9
};

template <typename Scalar>
ReductionReport reduction_equivalence_check(const MaskedSeqT<Scalar>& eta_q,
                                            const MaskedSeqT<Scalar>& eta_k) {
  if (eta_q.width() != eta_k.width())
    throw std::invalid_argument("reduction_equivalence_check: width mismatch");
  ReductionReport rep;
  double norm_min = std::numeric_limits<double>::infinity(), norm_max = 0;
  for (Eigen::Index j = 0; j < eta_k.len(); ++j) {
    if (!eta_k.mask(j)) continue;
    const double n = static_cast<double>(eta_k.values.row(j).norm());
    norm_min = std::min(norm_min, n);
    norm_max = std::max(norm_max, n);
  }
  rep.key_norm_spread = (norm_max - norm_min) / std::max(1.0, norm_max);
  rep.precondition_ok = rep.key_norm_spread <= 1e-9;

  const Scalar sqrt_d = std::sqrt(static_cast<Scalar>(eta_q.width()));
  const AllowMask allow = detail::outer_allow(eta_q.mask, eta_k.mask);
  Mat<Scalar> l2_logits =
      -pairwise_sqdist(eta_q.values, eta_k.values) / (Scalar(2) * sqrt_d);
  Mat<Scalar> dot_logits = eta_q.values * eta_k.values.transpose() / sqrt_d;
  auto w1 = masked_softmax(ScoreMatrixT<Scalar>(std::move(l2_logits), allow));
  auto w2 = masked_softmax(ScoreMatrixT<Scalar>(std::move(dot_logits), allow));
  rep.max_abs_dev = static_cast<double>((w1.weights - w2.weights).cwiseAbs().maxCoeff());
  rep.pass = rep.precondition_ok && rep.max_abs_dev <= 1e-9;
  return rep;
}

/// H independent clock-attention heads over split channels, contexts
/// concatenated. Each head builds its own clocks from its own projections.
template <typename Scalar>
struct MultiHeadResultT {
  Mat<Scalar> context;                    // [L_q x sum(d_v)]
  std::vector<Mat<Scalar>> head_weights;  // per head [L_q x T_k]
  Mask empty_row_flags;
};
using MultiHeadResult = MultiHeadResultT<double>;

template <typename Scalar>
MultiHeadResultT<Scalar> multihead_sca_forward(const MaskedSeqT<Scalar>& q,
                                               const MaskedSeqT<Scalar>& k,
                                               const MaskedSeqT<Scalar>& v,
                                               const std::vector<AttentionParamsT<Scalar>>& heads,
                                               const AllowMask* causal_allow = nullptr) {
  if (heads.empty()) throw std::invalid_argument("multihead_sca_forward: no heads");
  MultiHeadResultT<Scalar> out;
  Eigen::Index dv_total = 0;
  for (const auto& h : heads) dv_total += h.Wv.cols();
  out.context.resize(q.len(), dv_total);
  Eigen::Index col = 0;
  for (const auto& h : heads) {
    auto r = sca_forward(q, k, v, h, causal_allow);
    out.context.middleCols(col, h.Wv.cols()) = r.context;
    col += h.Wv.cols();
    out.head_weights.push_back(std::move(r.weights));
    out.empty_row_flags = r.empty_row_flags;
  }
  return out;
}

}  // namespace clockattn
