#include "clockattn/graph_attention.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace clockattn::graph {

namespace {

MatXd mask_matrix(const Mask& mask, Eigen::Index cols) {
  MatXd m(mask.size(), cols);
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    m.row(i).setConstant(mask(i) ? 1.0 : 0.0);
  return m;
}

Mask edge_mask(const Mask& mask) {
  const Eigen::Index L = mask.size();
  Mask pm(L > 0 ? L - 1 : 0);
  for (Eigen::Index e = 0; e + 1 < L; ++e) pm(e) = mask(e) && mask(e + 1);
  return pm;
}

// Sigma^2(i,j) = var_q(i)/len_q + var_k(j)/len_k from the masks alone.
MatXd sigma_sq_from_masks(const Mask& qm, const Mask& km, ClockMode mode) {
  const Vec<double> pq = clock_position_fractions(qm, mode);
  const Vec<double> pk = clock_position_fractions(km, mode);
  const double len_q = static_cast<double>(mask_count(qm));
  const double len_k = static_cast<double>(mask_count(km));
  MatXd s2(qm.size(), km.size());
  for (Eigen::Index i = 0; i < qm.size(); ++i)
    for (Eigen::Index j = 0; j < km.size(); ++j) {
      const double vq = mode == ClockMode::Normalized ? pq(i) * (1 - pq(i)) : pq(i);
      const double vk = mode == ClockMode::Normalized ? pk(j) * (1 - pk(j)) : pk(j);
      s2(i, j) = vq / len_q + vk / len_k;
    }
  return s2;
}

ad::Var squared_distance(ad::Tape& t, ad::Var lamq, ad::Var lamk) {
  ad::Var aq = t.rowsum(t.square(lamq));                       // [L x 1]
  ad::Var bk = t.rowsum(t.square(lamk));                       // [T x 1]
  ad::Var cross = t.matmul(lamq, t.transpose(lamk));           // [L x T]
  return t.add_colvec(t.add_rowvec(t.mul_scalar(cross, -2.0), t.transpose(bk)), aq);
}

ad::Var apply_scale(ad::Tape& t, ad::Var logits, ad::Var logit_scale) {
  return logit_scale.valid() ? t.mul_scalar_var(logits, logit_scale) : logits;
}

ad::Var masked_values(ad::Tape& t, ad::Var v, ad::Var Wv, const Mask& km) {
  ad::Var V = t.matmul(v, Wv);
  bool all = true;
  for (Eigen::Index j = 0; j < km.size(); ++j) all = all && km(j);
  if (all) return V;
  return t.cmul(V, mask_matrix(km, t.value(V).cols()));
}

}  // namespace

ad::Var masked_time_norm(ad::Tape& t, ad::Var x, const Mask& mask, double eps) {
  const Eigen::Index L = t.value(x).rows(), d = t.value(x).cols();
  if (mask.size() != L) throw std::invalid_argument("graph mtn: mask length mismatch");
  const double count = static_cast<double>(mask_count(mask));
  if (count == 0) throw std::invalid_argument("graph mtn: empty sequence");
  const MatXd mm = mask_matrix(mask, d);
  ad::Var mu = t.mul_scalar(t.colsum(t.cmul(x, mm)), 1.0 / count);          // [1 x d]
  ad::Var centered = t.sub(x, t.broadcast_row(mu, L));
  ad::Var var = t.mul_scalar(t.colsum(t.cmul(t.square(centered), mm)), 1.0 / count);
  ad::Var z = t.div_rowvec(centered, t.sqrt_elem(t.add_scalar(var, eps)));
  return t.cmul(z, mm);
}

ad::Var clock_lambda(ad::Tape& t, ad::Var eta, const Mask& mask, ClockMode mode, double eps) {
  const Eigen::Index L = t.value(eta).rows(), d = t.value(eta).cols();
  if (!is_contiguous_prefix(mask)) throw std::invalid_argument("graph clock: non-contiguous mask");
  const Eigen::Index valid = mask_count(mask);
  if (valid == 0) throw std::invalid_argument("graph clock: empty sequence");
  if (L == 1) return t.cmul(eta, MatXd::Zero(1, d));  // single frame: anchored at zero

  const Mask pm = edge_mask(mask);
  ad::Var y = t.mid_edge_avg(eta);                                   // [(L-1) x d]
  ad::Var gates = t.cmul(t.add_scalar(t.phi_elem(y), eps), mask_matrix(pm, d));
  ad::Var z = t.cumsum_leftpad(gates);                               // [L x d]
  if (mode == ClockMode::Normalized && valid > 1)
    z = t.div_rowvec(z, t.colsum(gates));
  return t.cmul(z, mask_matrix(mask, d));
}

Out sca_forward(ad::Tape& t, ad::Var q, const Mask& qm, ad::Var k, const Mask& km, ad::Var v,
                ad::Var Wq, ad::Var Wk, ad::Var Wv, ad::Var logit_scale, ClockMode mode,
                double eps) {
  ad::Var etaq = masked_time_norm(t, t.matmul(q, Wq), qm, eps);
  ad::Var etak = masked_time_norm(t, t.matmul(k, Wk), km, eps);
  ad::Var lamq = clock_lambda(t, etaq, qm, mode, eps);
  ad::Var lamk = clock_lambda(t, etak, km, mode, eps);
  ad::Var dist2 = squared_distance(t, lamq, lamk);

  const double sqrt_d = std::sqrt(static_cast<double>(t.value(Wq).cols()));
  const MatXd s2 = sigma_sq_from_masks(qm, km, mode);
  const MatXd neg_inv = (-((2.0 * sqrt_d * s2).array() + eps).inverse()).matrix();
  ad::Var logits = apply_scale(t, t.cmul(dist2, neg_inv), logit_scale);

  AllowMask allow(qm.size(), km.size());
  for (Eigen::Index i = 0; i < qm.size(); ++i)
    for (Eigen::Index j = 0; j < km.size(); ++j) allow(i, j) = qm(i) && km(j);
  Out out;
  out.weights = t.masked_softmax(logits, allow);
  out.context = t.matmul(out.weights, masked_values(t, v, Wv, km));
  return out;
}

Out sca_forward_ar(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, ad::Var Wq, ad::Var Wk,
                   ad::Var Wv, ad::Var logit_scale, double eps, const AllowMask* causal_allow) {
  const Eigen::Index T = t.value(q).rows();
  const Eigen::Index N = t.value(k).rows();
  const Eigen::Index d = t.value(Wq).cols();
  if (T < 2) throw std::invalid_argument("graph sca ar: need at least two query rows");

  // Prefix statistics per row via running moments: mu_i, sd_i over rows 0..i.
  ad::Var xq = t.matmul(q, Wq);  // [T x d]
  MatXd countinv(T, d);
  for (Eigen::Index i = 0; i < T; ++i) countinv.row(i).setConstant(1.0 / double(i + 1));
  ad::Var mu = t.cmul(t.cumsum_rows(xq), countinv);
  ad::Var ex2 = t.cmul(t.cumsum_rows(t.square(xq)), countinv);
  ad::Var sd = t.sqrt_elem(t.add_scalar(t.sub(ex2, t.square(mu)), eps));
  ad::Var y = t.mid_edge_avg(xq);  // raw mid-edges [T-1 x d]

  // Lower-triangular prefix-gate matrices, one channel at a time:
  // row i holds the gates of prefix 0..i (edges e < i), standardized with the
  // prefix statistics of row i. lambda_q(i) is their sum.
  MatXd tri = MatXd::Zero(T, T - 1);
  for (Eigen::Index i = 0; i < T; ++i)
    for (Eigen::Index e = 0; e < i; ++e) tri(i, e) = 1.0;
  std::vector<ad::Var> lam_cols;
  for (Eigen::Index c = 0; c < d; ++c) {
    ad::Var yc = t.transpose(t.col_block(y, c, 1));    // [1 x T-1]
    ad::Var muc = t.col_block(mu, c, 1);               // [T x 1]
    ad::Var sdc = t.col_block(sd, c, 1);               // [T x 1]
    ad::Var z = t.div(t.sub(t.broadcast_row(yc, T), t.broadcast_col(muc, T - 1)),
                      t.broadcast_col(sdc, T - 1));    // [T x T-1]
    ad::Var gates = t.cmul(t.add_scalar(t.phi_elem(z), eps), tri);
    lam_cols.push_back(t.rowsum(gates));               // [T x 1]
  }
  ad::Var lamq = t.concat_cols(lam_cols);  // [T x d]

  const Mask km = full_mask(N);
  ad::Var etak = masked_time_norm(t, t.matmul(k, Wk), km, eps);
  ad::Var lamk = clock_lambda(t, etak, km, ClockMode::Unnormalized, eps);
  ad::Var dist2 = squared_distance(t, lamq, lamk);

  const double sqrt_d = std::sqrt(static_cast<double>(d));
  const Vec<double> pk = clock_position_fractions(km, ClockMode::Unnormalized);
  MatXd neg_inv(T, N);
  for (Eigen::Index i = 0; i < T; ++i)
    for (Eigen::Index j = 0; j < N; ++j) {
      const double var_i = double(i) + 0.5;
      const double s2 = var_i / double(i + 1) + pk(j) / double(N);
      neg_inv(i, j) = -1.0 / (2.0 * sqrt_d * s2 + eps);
    }
  ad::Var logits = apply_scale(t, t.cmul(dist2, neg_inv), logit_scale);

  AllowMask allow = causal_allow ? *causal_allow : AllowMask::Constant(T, N, true);
  if (allow.rows() != T || allow.cols() != N)
    throw std::invalid_argument("graph sca ar: causal_allow shape mismatch");
  Out out;
  out.weights = t.masked_softmax(logits, allow);
  out.context = t.matmul(out.weights, t.matmul(v, Wv));
  return out;
}

Out sdpa_forward(ad::Tape& t, ad::Var q, const Mask& qm, ad::Var k, const Mask& km, ad::Var v,
                 ad::Var Wq, ad::Var Wk, ad::Var Wv, double eps) {
  ad::Var etaq = masked_time_norm(t, t.matmul(q, Wq), qm, eps);
  ad::Var etak = masked_time_norm(t, t.matmul(k, Wk), km, eps);
  const double sqrt_d = std::sqrt(static_cast<double>(t.value(Wq).cols()));
  ad::Var logits = t.mul_scalar(t.matmul(etaq, t.transpose(etak)), 1.0 / sqrt_d);
  AllowMask allow(qm.size(), km.size());
  for (Eigen::Index i = 0; i < qm.size(); ++i)
    for (Eigen::Index j = 0; j < km.size(); ++j) allow(i, j) = qm(i) && km(j);
  Out out;
  out.weights = t.masked_softmax(logits, allow);
  out.context = t.matmul(out.weights, masked_values(t, v, Wv, km));
  return out;
}

Out sdpa_forward_ar(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, ad::Var Wq, ad::Var Wk,
                    ad::Var Wv, double eps, const AllowMask* causal_allow) {
  const Eigen::Index T = t.value(q).rows();
  const Eigen::Index N = t.value(k).rows();
  ad::Var xq = t.matmul(q, Wq);
  MatXd countinv(T, t.value(xq).cols());
  for (Eigen::Index i = 0; i < T; ++i) countinv.row(i).setConstant(1.0 / double(i + 1));
  ad::Var mu = t.cmul(t.cumsum_rows(xq), countinv);
  ad::Var ex2 = t.cmul(t.cumsum_rows(t.square(xq)), countinv);
  ad::Var sd = t.sqrt_elem(t.add_scalar(t.sub(ex2, t.square(mu)), eps));
  // Row i standardized under its own prefix statistics.
  ad::Var etaq = t.div(t.sub(xq, mu), sd);

  const Mask km = full_mask(N);
  ad::Var etak = masked_time_norm(t, t.matmul(k, Wk), km, eps);
  const double sqrt_d = std::sqrt(static_cast<double>(t.value(Wq).cols()));
  ad::Var logits = t.mul_scalar(t.matmul(etaq, t.transpose(etak)), 1.0 / sqrt_d);
  AllowMask allow = causal_allow ? *causal_allow : AllowMask::Constant(T, N, true);
  if (allow.rows() != T || allow.cols() != N)
    throw std::invalid_argument("graph sdpa ar: causal_allow shape mismatch");
  Out out;
  out.weights = t.masked_softmax(logits, allow);
  out.context = t.matmul(out.weights, t.matmul(v, Wv));
  return out;
}

}  // namespace clockattn::graph
