#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "clockattn/attention.hpp"

using namespace clockattn;

namespace {

MatXd randn(std::mt19937& rng, int r, int c, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  MatXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

AttentionParams identity_params(int d, ClockMode mode) {
  AttentionParams p;
  p.Wq = MatXd::Identity(d, d);
  p.Wk = MatXd::Identity(d, d);
  p.Wv = MatXd::Identity(d, d);
  p.mode = mode;
  return p;
}

// Reference SDPA pipeline written with explicit elementwise loops: masked
// statistics, standardization, dot-product logits, stable softmax, context.
AttentionResult sdpa_bruteforce(const MaskedSeq& q, const MaskedSeq& k, const MaskedSeq& v,
                                const AttentionParams& p) {
  auto mtn = [&](const MatXd& x, const Mask& m) {
    const Eigen::Index L = x.rows(), D = x.cols();
    Eigen::Index cnt = 0;
    for (Eigen::Index i = 0; i < L; ++i) cnt += m(i) ? 1 : 0;
    MatXd z = MatXd::Zero(L, D);
    for (Eigen::Index c = 0; c < D; ++c) {
      double mu = 0;
      for (Eigen::Index i = 0; i < L; ++i)
        if (m(i)) mu += x(i, c);
      mu /= static_cast<double>(cnt);
      double var = 0;
      for (Eigen::Index i = 0; i < L; ++i)
        if (m(i)) var += (x(i, c) - mu) * (x(i, c) - mu);
      var /= static_cast<double>(cnt);
      for (Eigen::Index i = 0; i < L; ++i)
        if (m(i)) z(i, c) = (x(i, c) - mu) / std::sqrt(var + p.eps);
    }
    return z;
  };
  MatXd etaq = mtn(q.values * p.Wq, q.mask);
  MatXd etak = mtn(k.values * p.Wk, k.mask);
  MatXd V = v.values * p.Wv;
  const double sqrt_d = std::sqrt(static_cast<double>(p.Wq.cols()));
  AttentionResult out;
  out.weights = MatXd::Zero(q.len(), k.len());
  out.context = MatXd::Zero(q.len(), p.Wv.cols());
  out.empty_row_flags = Mask::Constant(q.len(), false);
  for (Eigen::Index i = 0; i < q.len(); ++i) {
    if (!q.mask(i)) {
      out.empty_row_flags(i) = true;
      continue;
    }
    std::vector<double> logit(k.len());
    double mx = -1e300;
    for (Eigen::Index j = 0; j < k.len(); ++j) {
      if (!k.mask(j)) continue;
      double s = 0;
      for (Eigen::Index c = 0; c < etaq.cols(); ++c) s += etaq(i, c) * etak(j, c);
      logit[j] = s / sqrt_d;
      mx = std::max(mx, logit[j]);
    }
    double sum = 0;
    for (Eigen::Index j = 0; j < k.len(); ++j)
      if (k.mask(j)) sum += std::exp(logit[j] - mx);
    for (Eigen::Index j = 0; j < k.len(); ++j)
      if (k.mask(j)) out.weights(i, j) = std::exp(logit[j] - mx) / sum;
    for (Eigen::Index c = 0; c < V.cols(); ++c)
      for (Eigen::Index j = 0; j < k.len(); ++j)
        out.context(i, c) += out.weights(i, j) * V(j, c);
  }
  return out;
}

std::vector<int> row_argmax(const MatXd& w, const Mask& valid_rows) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    if (!valid_rows(i)) continue;
    Eigen::Index j;
    w.row(i).maxCoeff(&j);
    out.push_back(static_cast<int>(j));
  }
  return out;
}

}  // namespace

TEST_CASE("clock_diff_score: identical constant sequences peak on the diagonal") {
  MaskedSeq eta = MaskedSeq::full(MatXd::Zero(5, 1));
  auto s = clock_diff_score(eta, eta, ClockMode::Normalized, 1e-3);
  for (int i = 0; i < 5; ++i) {
    CHECK(s.logits(i, i) == doctest::Approx(0.0).epsilon(1e-12));
    for (int j = 0; j < 5; ++j) CHECK(s.logits(i, j) <= 1e-15);
  }
}

TEST_CASE("clock_diff_score hand trace, L=4 constant, normalized, d=1") {
  MaskedSeq eta = MaskedSeq::full(MatXd::Zero(4, 1));
  auto s = clock_diff_score(eta, eta, ClockMode::Normalized, 1e-3);
  // lambda = [0, 1/3, 2/3, 1] both sides; var = pos(1-pos) with pos =
  // [0.125, ...]; Sigma^2(0,0) = 2 * 0.109375 / 4.
  const double sigma00 = 2 * 0.109375 / 4.0;
  CHECK(sigma00 == doctest::Approx(0.0546875));
  CHECK(std::abs(s.logits(0, 0)) <= 1e-9);
  const double expected03 = -1.0 / (2.0 * 1.0 * 0.0546875 + 1e-3);
  CHECK(std::abs(s.logits(0, 3) - expected03) <= 1e-9);
  CHECK(s.logits(0, 3) == doctest::Approx(-9.05).epsilon(0.0025));
}

TEST_CASE("clock_diff_score: unnormalized clocks share the left anchor") {
  std::mt19937 rng(2);
  auto eq = MaskedSeq::full(randn(rng, 6, 3));
  auto ek = MaskedSeq::full(randn(rng, 4, 3));
  auto s = clock_diff_score(eq, ek, ClockMode::Unnormalized, 1e-3);
  CHECK(s.logits(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("clock_diff_score rejects width mismatches") {
  CHECK_THROWS_AS(clock_diff_score(MaskedSeq::full(MatXd::Zero(3, 2)),
                                   MaskedSeq::full(MatXd::Zero(3, 3)), ClockMode::Normalized,
                                   1e-3),
                  std::invalid_argument);
}

TEST_CASE("clock_diff_score is non-positive and peaks where the scaled distance is minimal") {
  std::mt19937 rng(3);
  for (int t = 0; t < 30; ++t) {
    auto eq = MaskedSeq::full(randn(rng, 3 + t % 6, 2));
    auto ek = MaskedSeq::full(randn(rng, 2 + t % 7, 2));
    const double eps = 1e-3;
    auto s = clock_diff_score(eq, ek, ClockMode::Normalized, eps);
    auto cq = build_clock(eq, ClockMode::Normalized, eps);
    auto ck = build_clock(ek, ClockMode::Normalized, eps);
    MatXd d2 = pairwise_sqdist(cq.lambda, ck.lambda);
    const double sqrt_d = std::sqrt(2.0);
    for (Eigen::Index i = 0; i < s.logits.rows(); ++i) {
      Eigen::Index jmax, jmin, jratio;
      s.logits.row(i).maxCoeff(&jmax);
      d2.row(i).minCoeff(&jmin);
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < s.logits.cols(); ++j) {
        CHECK(s.logits(i, j) <= 0.0);
        const double sigma2 = cq.var_surrogate(i) / double(cq.valid_len) +
                              ck.var_surrogate(j) / double(ck.valid_len);
        const double ratio = d2(i, j) / (2 * sqrt_d * sigma2 + eps);
        if (ratio < best) {
          best = ratio;
          jratio = j;
        }
      }
      // Exact consistency: the score maximum is the variance-scaled distance
      // minimum. The raw-distance argmin can drift by a key or two when the
      // bridge variance modulates a near tie, so only exact meetings pin it.
      CHECK(jmax == jratio);
      if (d2(i, jmin) == 0.0) {
        CHECK(jmax == jmin);
        CHECK(s.logits(i, jmax) == 0.0);
      }
    }
  }
}

TEST_CASE("sca_forward: single valid key collapses every row onto it") {
  std::mt19937 rng(5);
  auto q = MaskedSeq::full(randn(rng, 4, 3));
  MaskedSeq k(randn(rng, 3, 3), prefix_mask(3, 1));
  MaskedSeq v(randn(rng, 3, 3), prefix_mask(3, 1));
  auto p = identity_params(3, ClockMode::Normalized);
  auto r = sca_forward(q, k, v, p);
  for (int i = 0; i < 4; ++i) {
    CHECK(r.weights(i, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.weights(i, 1) == 0.0);
    CHECK((r.context.row(i) - (v.values.row(0) * p.Wv)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("sca_forward: constant equal-length sequences peak on the diagonal") {
  // The score matrix is symmetric here (identical clocks, symmetric Sigma^2);
  // the row softmax then puts every argmax on the identity permutation. The
  // weights themselves are not symmetric because each row normalizes on its
  // own.
  const int L = 6;
  auto q = MaskedSeq::full(MatXd::Constant(L, 2, 0.3));
  auto k = MaskedSeq::full(MatXd::Constant(L, 2, -1.1));
  auto v = MaskedSeq::full(MatXd::Identity(L, 2));
  auto p = identity_params(2, ClockMode::Normalized);

  auto etaq = masked_time_norm(MaskedSeq(q.values * p.Wq, q.mask), p.eps);
  auto etak = masked_time_norm(MaskedSeq(k.values * p.Wk, k.mask), p.eps);
  auto score = clock_diff_score(etaq, etak, p.mode, p.eps);
  for (int i = 0; i < L; ++i)
    for (int jj = 0; jj < L; ++jj)
      CHECK(score.logits(i, jj) == doctest::Approx(score.logits(jj, i)).epsilon(1e-12));

  auto r = sca_forward(q, k, v, p);
  for (int i = 0; i < L; ++i) {
    Eigen::Index j;
    r.weights.row(i).maxCoeff(&j);
    CHECK(j == i);
  }
}

TEST_CASE("sca_forward rows are stochastic and zero outside the allow mask") {
  std::mt19937 rng(7);
  for (int t = 0; t < 25; ++t) {
    const int Lq = 2 + t % 6, Tk = 2 + (t * 3) % 7;
    const int vq = 1 + static_cast<int>(rng() % static_cast<unsigned>(Lq));
    const int vk = 1 + static_cast<int>(rng() % static_cast<unsigned>(Tk));
    MaskedSeq q(randn(rng, Lq, 3), prefix_mask(Lq, vq));
    MaskedSeq k(randn(rng, Tk, 3), prefix_mask(Tk, vk));
    MaskedSeq v(randn(rng, Tk, 2), prefix_mask(Tk, vk));
    AttentionParams p;
    p.Wq = randn(rng, 3, 2);
    p.Wk = randn(rng, 3, 2);
    p.Wv = randn(rng, 2, 2);
    p.mode = ClockMode::Normalized;
    auto r = sca_forward(q, k, v, p);
    for (int i = 0; i < Lq; ++i) {
      double sum = r.weights.row(i).sum();
      if (i < vq) {
        CHECK(std::abs(sum - 1.0) <= 1e-9);
        CHECK_FALSE(r.empty_row_flags(i));
      } else {
        CHECK(sum == 0.0);
        CHECK(r.empty_row_flags(i));
      }
      for (int j = vk; j < Tk; ++j) CHECK(r.weights(i, j) == 0.0);
    }
    MatXd V = v.values * p.Wv;
    for (int j = 0; j < Tk; ++j)
      if (!v.mask(j)) V.row(j).setZero();
    CHECK((r.context - r.weights * V).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("sca_forward length equivariance for constant-rate inputs") {
  for (int T : {8, 10, 14}) {
    const int Lq = T;
    auto q = MaskedSeq::full(MatXd::Zero(Lq, 1));
    auto p = identity_params(1, ClockMode::Normalized);
    auto k1 = MaskedSeq::full(MatXd::Zero(T, 1));
    auto v1 = MaskedSeq::full(MatXd::Ones(T, 1));
    auto k2 = MaskedSeq::full(MatXd::Zero(2 * T, 1));
    auto v2 = MaskedSeq::full(MatXd::Ones(2 * T, 1));
    auto r1 = sca_forward(q, k1, v1, p);
    auto r2 = sca_forward(q, k2, v2, p);
    auto a1 = row_argmax(r1.weights, q.mask);
    auto a2 = row_argmax(r2.weights, q.mask);
    for (size_t i = 0; i < a1.size(); ++i) CHECK(std::abs(a2[i] - 2 * a1[i]) <= 1);
  }
}

TEST_CASE("autoregressive consistency: full pass equals stepwise prefixes") {
  std::mt19937 rng(11);
  for (int t = 0; t < 10; ++t) {
    const int T = 4 + t, N = 3 + t % 4;
    MaskedSeq q = MaskedSeq::full(randn(rng, T, 3));
    MaskedSeq k = MaskedSeq::full(randn(rng, N, 3));
    MaskedSeq v = MaskedSeq::full(randn(rng, N, 2));
    AttentionParams p;
    p.Wq = randn(rng, 3, 2);
    p.Wk = randn(rng, 3, 2);
    p.Wv = randn(rng, 2, 2);
    p.mode = ClockMode::Unnormalized;
    p.causal = true;
    AllowMask full_allow = AllowMask::Constant(T, N, true);
    auto full = sca_forward(q, k, v, p, &full_allow);
    for (int i = 0; i < T; ++i) {
      MaskedSeq qp = MaskedSeq::full(MatXd(q.values.topRows(i + 1)));
      AllowMask pa = AllowMask::Constant(i + 1, N, true);
      auto step = sca_forward(qp, k, v, p, &pa);
      CHECK((step.weights.row(i) - full.weights.row(i)).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK((step.context.row(i) - full.context.row(i)).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("normalized mode rejects causal_allow") {
  std::mt19937 rng(13);
  auto q = MaskedSeq::full(randn(rng, 3, 2));
  auto k = MaskedSeq::full(randn(rng, 3, 2));
  auto p = identity_params(2, ClockMode::Normalized);
  p.causal = true;
  AllowMask allow = AllowMask::Constant(3, 3, true);
  CHECK_THROWS_AS(sca_forward(q, k, k, p, &allow), std::invalid_argument);
}

TEST_CASE("causal flag and mask must agree") {
  std::mt19937 rng(14);
  auto q = MaskedSeq::full(randn(rng, 3, 2));
  auto p = identity_params(2, ClockMode::Unnormalized);
  p.causal = true;  // but no mask supplied
  CHECK_THROWS_AS(sca_forward(q, q, q, p), std::invalid_argument);
}

TEST_CASE("sdpa_forward equals the brute-force oracle") {
  std::mt19937 rng(17);
  for (int t = 0; t < 30; ++t) {
    const int Lq = 1 + t % 8, Tk = 1 + (t * 5) % 8, d = 1 + t % 4;
    const int vq = 1 + static_cast<int>(rng() % static_cast<unsigned>(Lq));
    const int vk = 1 + static_cast<int>(rng() % static_cast<unsigned>(Tk));
    MaskedSeq q(randn(rng, Lq, 3), prefix_mask(Lq, vq));
    MaskedSeq k(randn(rng, Tk, 3), prefix_mask(Tk, vk));
    MaskedSeq v(randn(rng, Tk, 3), prefix_mask(Tk, vk));
    AttentionParams p;
    p.Wq = randn(rng, 3, d);
    p.Wk = randn(rng, 3, d);
    p.Wv = randn(rng, 3, 2);
    auto fast = sdpa_forward(q, k, v, p);
    auto ref = sdpa_bruteforce(q, k, v, p);
    CHECK((fast.weights - ref.weights).cwiseAbs().maxCoeff() <= 1e-10);
    for (int i = 0; i < vq; ++i)
      CHECK((fast.context.row(i) - ref.context.row(i)).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("sdpa_forward: matching unit-norm rows put the argmax on the diagonal") {
  // Orthonormal-ish rows: identity features, identity projections.
  const int L = 4;
  auto q = MaskedSeq::full(MatXd::Identity(L, L));
  auto p = identity_params(L, ClockMode::Normalized);
  auto r = sdpa_forward(q, q, q, p);
  for (int i = 0; i < L; ++i) {
    Eigen::Index j;
    r.weights.row(i).maxCoeff(&j);
    CHECK(j == i);
  }
}

TEST_CASE("reduction to SDPA holds exactly for equal-norm keys") {
  std::mt19937 rng(19);
  int passes = 0;
  for (int t = 0; t < 100; ++t) {
    const int Lq = 2 + t % 6, Tk = 2 + (t * 3) % 6, d = 1 + t % 5;
    MatXd keys = randn(rng, Tk, d);
    for (int j = 0; j < Tk; ++j) keys.row(j) *= 1.7 / keys.row(j).norm();
    auto rep = reduction_equivalence_check(MaskedSeq::full(randn(rng, Lq, d)),
                                           MaskedSeq::full(keys));
    CHECK(rep.precondition_ok);
    CHECK(rep.max_abs_dev <= 1e-9);
    passes += rep.pass ? 1 : 0;
  }
  CHECK(passes == 100);
}

TEST_CASE("reduction check flags unequal key norms instead of failing") {
  std::mt19937 rng(23);
  MatXd keys = randn(rng, 5, 3);
  keys.row(0) *= 10.0;
  auto rep = reduction_equivalence_check(MaskedSeq::full(randn(rng, 4, 3)),
                                         MaskedSeq::full(keys));
  CHECK_FALSE(rep.precondition_ok);
  CHECK_FALSE(rep.pass);
}

TEST_CASE("reduction check symmetric two-point case") {
  MatXd eta(2, 1);
  eta << 1, -1;
  auto rep = reduction_equivalence_check(MaskedSeq::full(eta), MaskedSeq::full(eta));
  CHECK(rep.precondition_ok);
  CHECK(rep.max_abs_dev <= 1e-12);
}

TEST_CASE("causal limits zero out attention mass beyond the allowed keys") {
  std::mt19937 rng(15);
  const int T = 5;
  MaskedSeq q = MaskedSeq::full(randn(rng, T, 2));
  MaskedSeq k = MaskedSeq::full(randn(rng, T, 2));
  auto p = identity_params(2, ClockMode::Unnormalized);
  p.causal = true;
  AllowMask tri = causal_allow_mask(T, T, {0, 1, 2, 3, 4});
  auto r = sca_forward(q, k, k, p, &tri);
  for (int i = 0; i < T; ++i) {
    for (int j = i + 1; j < T; ++j) CHECK(r.weights(i, j) == 0.0);
    CHECK(r.weights.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("causal_allow_mask examples") {
  {
    auto a = causal_allow_mask(3, 4, {3, 3, 3});
    CHECK(a.cast<int>().sum() == 12);
  }
  {
    auto a = causal_allow_mask(3, 3, {0, 1, 2});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(a(i, j) == (j <= i));
  }
  {
    auto a = causal_allow_mask(3, 3, {0, 0, 2});
    CHECK(a(0, 0));
    CHECK_FALSE(a(0, 1));
    CHECK_FALSE(a(1, 1));
    CHECK(a(2, 2));
  }
  CHECK_THROWS_AS(causal_allow_mask(3, 3, {2, 1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(causal_allow_mask(3, 3, {0, 1, 3}), std::invalid_argument);
}

TEST_CASE("log-sigma diagnostic reports a finite spread") {
  std::mt19937 rng(29);
  auto eq = MaskedSeq::full(randn(rng, 8, 2));
  auto ek = MaskedSeq::full(randn(rng, 6, 2));
  const double spread = log_sigma_row_spread(eq, ek, ClockMode::Normalized, 1e-3);
  CHECK(spread >= 0.0);
  CHECK(std::isfinite(spread));
  // And the diagnostic score variant actually shifts logits.
  auto plain = clock_diff_score(eq, ek, ClockMode::Normalized, 1e-3, false);
  auto diag = clock_diff_score(eq, ek, ClockMode::Normalized, 1e-3, true);
  CHECK((plain.logits - diag.logits).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("multihead with one head equals the single head forward") {
  std::mt19937 rng(31);
  MaskedSeq q = MaskedSeq::full(randn(rng, 5, 4));
  MaskedSeq k = MaskedSeq::full(randn(rng, 4, 4));
  MaskedSeq v = MaskedSeq::full(randn(rng, 4, 4));
  AttentionParams p;
  p.Wq = randn(rng, 4, 2);
  p.Wk = randn(rng, 4, 2);
  p.Wv = randn(rng, 4, 3);
  p.mode = ClockMode::Normalized;
  auto single = sca_forward(q, k, v, p);
  auto multi = multihead_sca_forward(q, k, v, std::vector<AttentionParams>{p});
  CHECK((single.context - multi.context).cwiseAbs().maxCoeff() == 0.0);
  CHECK((single.weights - multi.head_weights[0]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("multihead concatenates per-head contexts") {
  std::mt19937 rng(37);
  MaskedSeq q = MaskedSeq::full(randn(rng, 5, 4));
  MaskedSeq k = MaskedSeq::full(randn(rng, 4, 4));
  MaskedSeq v = MaskedSeq::full(randn(rng, 4, 4));
  std::vector<AttentionParams> heads(2);
  for (auto& h : heads) {
    h.Wq = randn(rng, 4, 2);
    h.Wk = randn(rng, 4, 2);
    h.Wv = randn(rng, 4, 2);
    h.mode = ClockMode::Normalized;
  }
  auto multi = multihead_sca_forward(q, k, v, heads);
  CHECK(multi.context.cols() == 4);
  CHECK(multi.head_weights.size() == 2);
  for (const auto& w : multi.head_weights)
    for (int i = 0; i < 5; ++i) CHECK(w.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
  auto h0 = sca_forward(q, k, v, heads[0]);
  CHECK((multi.context.leftCols(2) - h0.context).cwiseAbs().maxCoeff() == 0.0);
}
