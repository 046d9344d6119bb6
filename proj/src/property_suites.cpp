#include "clockattn/property_suites.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "clockattn/attention.hpp"
#include "clockattn/graph_attention.hpp"

namespace clockattn::suites {

namespace {

struct Ctx {
  const SuiteOptions& opts;
  std::vector<CheckResult>& out;
  const std::string& filter;

  void run(const std::string& name, const std::function<std::string()>& body) {
    if (!filter.empty() && name.find(filter) == std::string::npos) return;
    CheckResult r;
    r.suite = name;
    try {
      r.detail = body();  // empty string = pass
      r.pass = r.detail.empty();
      if (r.pass) r.detail = "ok";
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    out.push_back(std::move(r));
  }
};

MatXd randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd = 1.5) {
  std::normal_distribution<double> n(0.0, sd);
  MatXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

std::string fail(const std::string& what, double got, double want) {
  std::ostringstream ss;
  ss << what << " (got " << got << ", bound " << want << ")";
  return ss.str();
}

MaskedSeq random_instance(std::mt19937_64& rng, const SuiteOptions& o, int min_valid = 1) {
  const Eigen::Index L = min_valid + 1 + static_cast<Eigen::Index>(rng() % (o.max_len - 1));
  const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % o.max_width);
  const Eigen::Index valid =
      min_valid + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(L - min_valid + 1));
  return MaskedSeq(randn(rng, L, d), prefix_mask(L, std::max<Eigen::Index>(min_valid, valid)));
}

// ---------------------------------------------------------------- tensor core

std::string check_mask_independence(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < o.clock_instances; ++t) {
    MaskedSeq x = random_instance(rng, o, 1);
    MatXd perturbed = x.values;
    bool any_masked = false;
    for (Eigen::Index i = 0; i < x.len(); ++i)
      if (!x.mask(i)) {
        perturbed.row(i).setConstant(1e7 + double(i));
        any_masked = true;
      }
    if (!any_masked) continue;
    auto [m1, v1] = masked_mean_var(x);
    auto [m2, v2] = masked_mean_var(MaskedSeq(perturbed, x.mask));
    if ((m1 - m2).cwiseAbs().maxCoeff() != 0 || (v1 - v2).cwiseAbs().maxCoeff() != 0)
      return "masked_mean_var leaked masked values";
    auto z1 = masked_time_norm(x, 1e-3);
    auto z2 = masked_time_norm(MaskedSeq(perturbed, x.mask), 1e-3);
    if ((z1.values - z2.values).cwiseAbs().maxCoeff() != 0)
      return "masked_time_norm leaked masked values";
    if (x.valid_count() >= 1) {
      auto c1 = build_clock(x, ClockMode::Normalized, 1e-3);
      auto c2 = build_clock(MaskedSeq(perturbed, x.mask), ClockMode::Normalized, 1e-3);
      if ((c1.lambda - c2.lambda).cwiseAbs().maxCoeff() != 0)
        return "build_clock leaked masked values";
    }
  }
  return "";
}

std::string check_softmax_rows(std::mt19937_64& rng, const SuiteOptions& o) {
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  std::bernoulli_distribution coin(0.75);
  for (int t = 0; t < o.clock_instances; ++t) {
    const Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng() % 8);
    const Eigen::Index cols = 1 + static_cast<Eigen::Index>(rng() % 8);
    MatXd logits(rows, cols);
    AllowMask allow(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        logits(i, j) = u(rng);
        allow(i, j) = coin(rng);
      }
    auto r = masked_softmax(ScoreMatrix(logits, allow));
    for (Eigen::Index i = 0; i < rows; ++i) {
      double sum = 0;
      bool any = false;
      for (Eigen::Index j = 0; j < cols; ++j) {
        if (!allow(i, j) && r.weights(i, j) != 0) return "nonzero weight at disallowed entry";
        if (!std::isfinite(r.weights(i, j))) return "non-finite softmax weight";
        sum += r.weights(i, j);
        any = any || allow(i, j);
      }
      if (any && std::abs(sum - 1.0) > 1e-12) return fail("row sum off", sum, 1.0);
      if (!any && (sum != 0 || !r.empty_rows(i))) return "all-disallowed row not inert";
    }
  }
  return "";
}

std::string check_sqdist_oracle(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < o.clock_instances; ++t) {
    const Eigen::Index L = 1 + static_cast<Eigen::Index>(rng() % 16);
    const Eigen::Index T = 1 + static_cast<Eigen::Index>(rng() % 16);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 16);
    MatXd a = randn(rng, L, d), b = randn(rng, T, d);
    MatXd fast = pairwise_sqdist(a, b);
    for (Eigen::Index i = 0; i < L; ++i)
      for (Eigen::Index j = 0; j < T; ++j) {
        if (fast(i, j) < 0) return "negative squared distance";
        double ref = 0;
        for (Eigen::Index k = 0; k < d; ++k) {
          const double diff = a(i, k) - b(j, k);
          ref += diff * diff;
        }
        if (std::abs(fast(i, j) - ref) > 1e-10 * std::max(1.0, ref))
          return fail("sqdist oracle mismatch", fast(i, j), ref);
      }
  }
  return "";
}

std::string check_cumsum_monotone(std::mt19937_64& rng, const SuiteOptions& o) {
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int t = 0; t < o.clock_instances; ++t) {
    const Eigen::Index E = 1 + static_cast<Eigen::Index>(rng() % 20);
    MatXd g(E, 2);
    for (Eigen::Index i = 0; i < E; ++i)
      for (int j = 0; j < 2; ++j) g(i, j) = u(rng);
    MatXd z = cumsum_leftpad(g);
    if (z.row(0).cwiseAbs().maxCoeff() != 0) return "cumsum first row not zero";
    for (Eigen::Index i = 1; i < z.rows(); ++i)
      for (int j = 0; j < 2; ++j)
        if (z(i, j) < z(i - 1, j)) return "cumsum decreased on non-negative input";
  }
  return "";
}

// --------------------------------------------------------------------- clocks

std::string check_phi(std::mt19937_64&, const SuiteOptions&) {
  double prev = -1;
  for (int i = 0; i <= 40000; ++i) {
    const double x = -1000.0 + i * (2000.0 / 40000.0);
    const double y = phi(x);
    if (!(y > 0)) return fail("phi not positive", y, 0);
    if (y < prev) return "phi not monotone";
    prev = y;
    const double h = 1e-6 * std::max(1.0, std::abs(x));
    const double slope = (phi(x + h) - phi(x - h)) / (2 * h);
    if (slope > 1.0 + 1e-6) return fail("phi slope above 1", slope, 1.0 + 1e-6);
  }
  return "";
}

std::string check_clock_monotonicity(std::mt19937_64& rng, const SuiteOptions& o) {
  // Includes a strongly negative constant sequence where phi alone is below
  // the contract and only the +eps on the gates keeps increments >= eps.
  std::vector<MaskedSeq> cases;
  cases.push_back(MaskedSeq::full(MatXd::Constant(8, 1, -1000.0)));
  for (int t = 0; t < o.clock_instances; ++t) cases.push_back(random_instance(rng, o, 2));
  for (const auto& x : cases) {
    const Eigen::Index valid = x.valid_count();
    if (valid < 2) continue;
    MatXd gates = clock_gates(x, o.eps_build);
    for (Eigen::Index e = 0; e + 1 < valid; ++e)
      for (Eigen::Index k = 0; k < x.width(); ++k)
        if (gates(e, k) < o.eps_contract)
          return fail("gate below eps on a valid edge", gates(e, k), o.eps_contract);
    for (auto mode : {ClockMode::Normalized, ClockMode::Unnormalized}) {
      auto c = build_clock_from_gates(gates, x.mask, mode);
      for (Eigen::Index i = 1; i < valid; ++i)
        for (Eigen::Index k = 0; k < x.width(); ++k)
          if (!(c.lambda(i, k) > c.lambda(i - 1, k))) return "clock not strictly increasing";
    }
  }
  return "";
}

std::string check_clock_normalization(std::mt19937_64& rng, const SuiteOptions& o) {
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int t = 0; t < o.clock_instances; ++t) {
    MaskedSeq x = random_instance(rng, o, 2);
    const Eigen::Index valid = x.valid_count();
    auto c = build_clock(x, ClockMode::Normalized, o.eps_build);
    for (Eigen::Index k = 0; k < x.width(); ++k) {
      if (std::abs(c.lambda(valid - 1, k) - 1.0) > 1e-9)
        return fail("normalized endpoint", c.lambda(valid - 1, k), 1.0);
      for (Eigen::Index i = 0; i < valid; ++i)
        if (c.lambda(i, k) < 0 || c.lambda(i, k) > 1 + 1e-12)
          return "normalized clock outside [0,1]";
    }
    // Gate rescaling invariance.
    MatXd g = clock_gates(x, o.eps_build);
    const double cscale = scale(rng);
    auto base = build_clock_from_gates(g, x.mask, ClockMode::Normalized);
    auto scaled = build_clock_from_gates((cscale * g).eval(), x.mask, ClockMode::Normalized);
    for (Eigen::Index i = 0; i < x.len(); ++i)
      for (Eigen::Index k = 0; k < x.width(); ++k) {
        const double a = base.lambda(i, k), b = scaled.lambda(i, k);
        if (std::abs(a - b) > 1e-12 * std::max(1.0, std::abs(a)))
          return fail("rescaling broke normalized clock", b, a);
      }
  }
  return "";
}

std::string check_clock_translation(std::mt19937_64&, const SuiteOptions& o) {
  for (double c : {-250.0, -3.0, 0.0, 1.7, 99.0}) {
    auto clk =
        build_clock(MaskedSeq::full(MatXd::Constant(7, 2, c)), ClockMode::Normalized, o.eps_build);
    for (Eigen::Index i = 0; i < 7; ++i)
      for (int k = 0; k < 2; ++k)
        if (std::abs(clk.lambda(i, k) - double(i) / 6.0) > 1e-12)
          return "constant sequence is not a uniform ramp";
  }
  return "";
}

std::string check_prefix_consistency(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < o.clock_instances; ++t) {
    MaskedSeq x = random_instance(rng, o, 2);
    MaskedSeq full_valid(x.values.topRows(x.valid_count()), full_mask(x.valid_count()));
    auto full = build_clock(full_valid, ClockMode::Unnormalized, o.eps_build);
    const Eigen::Index p =
        1 + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(x.valid_count()));
    auto part = build_clock(MaskedSeq(full_valid.values.topRows(p), full_mask(p)),
                            ClockMode::Unnormalized, o.eps_build);
    if ((full.lambda.topRows(p) - part.lambda).cwiseAbs().maxCoeff() != 0)
      return "unnormalized clock prefix mismatch";
  }
  return "";
}

std::string check_bridge_symmetry(std::mt19937_64&, const SuiteOptions& o) {
  for (int L : {2, 4, 9, 16, 63}) {
    auto c = build_clock(MaskedSeq::full(MatXd::Zero(L, 1)), ClockMode::Normalized, o.eps_build);
    for (int i = 0; i < L; ++i)
      if (std::abs(c.var_surrogate(i) - c.var_surrogate(L - 1 - i)) > 1e-12)
        return "bridge variance not symmetric";
  }
  return "";
}

// ------------------------------------------------------------------ attention

AttentionParams rand_params(std::mt19937_64& rng, int dq, int dk, int dv, int d, ClockMode mode) {
  AttentionParams p;
  p.Wq = randn(rng, dq, d, 0.7);
  p.Wk = randn(rng, dk, d, 0.7);
  p.Wv = randn(rng, dv, d, 0.7);
  p.mode = mode;
  return p;
}

std::string check_row_stochastic(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < o.clock_instances / 4; ++t) {
    const Eigen::Index Lq = 2 + static_cast<Eigen::Index>(rng() % 10);
    const Eigen::Index Tk = 2 + static_cast<Eigen::Index>(rng() % 10);
    const Eigen::Index vq = 1 + static_cast<Eigen::Index>(rng() % Lq);
    const Eigen::Index vk = 1 + static_cast<Eigen::Index>(rng() % Tk);
    MaskedSeq q(randn(rng, Lq, 3), prefix_mask(Lq, vq));
    MaskedSeq k(randn(rng, Tk, 3), prefix_mask(Tk, vk));
    MaskedSeq v(randn(rng, Tk, 3), prefix_mask(Tk, vk));
    auto p = rand_params(rng, 3, 3, 3, 2, ClockMode::Normalized);
    auto r = sca_forward(q, k, v, p);
    for (Eigen::Index i = 0; i < Lq; ++i) {
      const double sum = r.weights.row(i).sum();
      if (i < vq && std::abs(sum - 1.0) > 1e-9) return fail("weight row sum", sum, 1.0);
      if (i >= vq && (sum != 0 || !r.empty_row_flags(i))) return "padded row not inert";
      for (Eigen::Index j = vk; j < Tk; ++j)
        if (r.weights(i, j) != 0) return "weight outside allow mask";
    }
  }
  return "";
}

std::string check_score_nonpositive(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < o.clock_instances / 4; ++t) {
    MaskedSeq eq = MaskedSeq::full(randn(rng, 3 + static_cast<Eigen::Index>(rng() % 8), 2));
    MaskedSeq ek = MaskedSeq::full(randn(rng, 3 + static_cast<Eigen::Index>(rng() % 8), 2));
    const double eps = 1e-3;
    auto s = clock_diff_score(eq, ek, ClockMode::Normalized, eps);
    auto cq = build_clock(eq, ClockMode::Normalized, eps);
    auto ck = build_clock(ek, ClockMode::Normalized, eps);
    MatXd d2 = pairwise_sqdist(cq.lambda, ck.lambda);
    const double sqrt_d = std::sqrt(double(eq.width()));
    for (Eigen::Index i = 0; i < s.logits.rows(); ++i) {
      Eigen::Index jmax, jmin, jratio = 0;
      s.logits.row(i).maxCoeff(&jmax);
      d2.row(i).minCoeff(&jmin);
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < s.logits.cols(); ++j) {
        if (s.logits(i, j) > 0) return "positive clock score";
        const double sigma2 = cq.var_surrogate(i) / double(cq.valid_len) +
                              ck.var_surrogate(j) / double(ck.valid_len);
        const double ratio = d2(i, j) / (2 * sqrt_d * sigma2 + eps);
        if (ratio < best) {
          best = ratio;
          jratio = j;
        }
      }
      if (jmax != jratio) return "score argmax disagrees with scaled-distance argmin";
      if (d2(i, jmin) == 0.0 && s.logits(i, jmax) != 0.0)
        return "exact clock meeting did not win the row";
    }
  }
  return "";
}

std::string check_diagonal_bias(std::mt19937_64&, const SuiteOptions&) {
  for (int L : {3, 5, 9, 14}) {
    auto q = MaskedSeq::full(MatXd::Constant(L, 2, 0.4));
    auto k = MaskedSeq::full(MatXd::Constant(L, 2, -2.0));
    auto v = MaskedSeq::full(MatXd::Identity(L, 2));
    AttentionParams p;
    p.Wq = MatXd::Identity(2, 2);
    p.Wk = MatXd::Identity(2, 2);
    p.Wv = MatXd::Identity(2, 2);
    p.mode = ClockMode::Normalized;
    auto r = sca_forward(q, k, v, p);
    for (Eigen::Index i = 0; i < L; ++i) {
      Eigen::Index j;
      r.weights.row(i).maxCoeff(&j);
      if (j != i) return "row argmax off the identity permutation";
    }
  }
  return "";
}

std::string check_length_equivariance(std::mt19937_64&, const SuiteOptions&) {
  for (int T : {6, 10, 16}) {
    const int Lq = T;
    auto q = MaskedSeq::full(MatXd::Zero(Lq, 1));
    AttentionParams p;
    p.Wq = MatXd::Identity(1, 1);
    p.Wk = MatXd::Identity(1, 1);
    p.Wv = MatXd::Identity(1, 1);
    p.mode = ClockMode::Normalized;
    auto r1 = sca_forward(q, MaskedSeq::full(MatXd::Zero(T, 1)),
                          MaskedSeq::full(MatXd::Ones(T, 1)), p);
    auto r2 = sca_forward(q, MaskedSeq::full(MatXd::Zero(2 * T, 1)),
                          MaskedSeq::full(MatXd::Ones(2 * T, 1)), p);
    for (int i = 0; i < Lq; ++i) {
      Eigen::Index j1, j2;
      r1.weights.row(i).maxCoeff(&j1);
      r2.weights.row(i).maxCoeff(&j2);
      if (std::abs(double(j2) - 2.0 * double(j1)) > 1.0)
        return "doubled keys did not double the argmax position";
    }
  }
  return "";
}

std::string check_ar_consistency(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < std::max(5, o.clock_instances / 20); ++t) {
    const Eigen::Index T = 4 + static_cast<Eigen::Index>(rng() % 8);
    const Eigen::Index N = 3 + static_cast<Eigen::Index>(rng() % 6);
    MaskedSeq q = MaskedSeq::full(randn(rng, T, 3));
    MaskedSeq k = MaskedSeq::full(randn(rng, N, 3));
    MaskedSeq v = MaskedSeq::full(randn(rng, N, 2));
    auto p = rand_params(rng, 3, 3, 2, 2, ClockMode::Unnormalized);
    p.causal = true;
    AllowMask allow = AllowMask::Constant(T, N, true);
    auto full = sca_forward(q, k, v, p, &allow);
    for (Eigen::Index i = 0; i < T; ++i) {
      MaskedSeq qp = MaskedSeq::full(MatXd(q.values.topRows(i + 1)));
      AllowMask pa = AllowMask::Constant(i + 1, N, true);
      auto step = sca_forward(qp, k, v, p, &pa);
      if ((step.weights.row(i) - full.weights.row(i)).cwiseAbs().maxCoeff() > 1e-12)
        return "stepwise weights deviate from the full pass";
    }
  }
  return "";
}

std::string check_sdpa_bruteforce(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < o.clock_instances / 4; ++t) {
    const Eigen::Index L = 1 + static_cast<Eigen::Index>(rng() % 8);
    const Eigen::Index T = 1 + static_cast<Eigen::Index>(rng() % 8);
    const int d = 1 + static_cast<int>(rng() % 4);
    MaskedSeq q = MaskedSeq::full(randn(rng, L, 3));
    MaskedSeq k = MaskedSeq::full(randn(rng, T, 3));
    MaskedSeq v = MaskedSeq::full(randn(rng, T, 3));
    auto p = rand_params(rng, 3, 3, 3, d, ClockMode::Normalized);
    auto fast = sdpa_forward(q, k, v, p);
    // Naive logits/softmax with explicit loops.
    auto etaq = masked_time_norm(MaskedSeq(q.values * p.Wq, q.mask), p.eps);
    auto etak = masked_time_norm(MaskedSeq(k.values * p.Wk, k.mask), p.eps);
    const double sq = std::sqrt(double(d));
    for (Eigen::Index i = 0; i < L; ++i) {
      std::vector<double> logit(static_cast<std::size_t>(T));
      double mx = -1e300;
      for (Eigen::Index j = 0; j < T; ++j) {
        double s = 0;
        for (int c = 0; c < d; ++c) s += etaq.values(i, c) * etak.values(j, c);
        logit[static_cast<std::size_t>(j)] = s / sq;
        mx = std::max(mx, s / sq);
      }
      double sum = 0;
      for (double l : logit) sum += std::exp(l - mx);
      for (Eigen::Index j = 0; j < T; ++j) {
        const double w = std::exp(logit[static_cast<std::size_t>(j)] - mx) / sum;
        if (std::abs(fast.weights(i, j) - w) > 1e-10)
          return fail("sdpa brute-force mismatch", fast.weights(i, j), w);
      }
    }
  }
  return "";
}

std::string check_reduction(std::mt19937_64& rng, const SuiteOptions& o) {
  for (int t = 0; t < std::max(20, o.clock_instances / 3); ++t) {
    const Eigen::Index L = 2 + static_cast<Eigen::Index>(rng() % 6);
    const Eigen::Index T = 2 + static_cast<Eigen::Index>(rng() % 6);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 5);
    MatXd keys = randn(rng, T, d);
    for (Eigen::Index j = 0; j < T; ++j) keys.row(j) *= 2.0 / keys.row(j).norm();
    auto rep = reduction_equivalence_check(MaskedSeq::full(randn(rng, L, d)),
                                           MaskedSeq::full(keys));
    if (!rep.precondition_ok) return "equal-norm precondition unexpectedly violated";
    if (rep.max_abs_dev > 1e-9) return fail("reduction deviation", rep.max_abs_dev, 1e-9);
  }
  return "";
}

}  // namespace

std::vector<CheckResult> run_property_suites(const std::string& filter, const SuiteOptions& opts) {
  std::vector<CheckResult> out;
  Ctx ctx{opts, out, filter};
  std::mt19937_64 rng(opts.seed);

  ctx.run("tensor_core.mask_independence", [&] { return check_mask_independence(rng, opts); });
  ctx.run("tensor_core.softmax_rows", [&] { return check_softmax_rows(rng, opts); });
  ctx.run("tensor_core.sqdist_oracle", [&] { return check_sqdist_oracle(rng, opts); });
  ctx.run("tensor_core.cumsum_monotone", [&] { return check_cumsum_monotone(rng, opts); });

  ctx.run("clocks.phi", [&] { return check_phi(rng, opts); });
  ctx.run("clocks.monotonicity", [&] { return check_clock_monotonicity(rng, opts); });
  ctx.run("clocks.normalization", [&] { return check_clock_normalization(rng, opts); });
  ctx.run("clocks.translation", [&] { return check_clock_translation(rng, opts); });
  ctx.run("clocks.prefix_consistency", [&] { return check_prefix_consistency(rng, opts); });
  ctx.run("clocks.bridge_symmetry", [&] { return check_bridge_symmetry(rng, opts); });

  ctx.run("attention.row_stochastic", [&] { return check_row_stochastic(rng, opts); });
  ctx.run("attention.score_nonpositive", [&] { return check_score_nonpositive(rng, opts); });
  ctx.run("attention.diagonal_bias", [&] { return check_diagonal_bias(rng, opts); });
  ctx.run("attention.length_equivariance", [&] { return check_length_equivariance(rng, opts); });
  ctx.run("attention.ar_consistency", [&] { return check_ar_consistency(rng, opts); });
  ctx.run("attention.sdpa_bruteforce", [&] { return check_sdpa_bruteforce(rng, opts); });
  ctx.run("attention.reduction", [&] { return check_reduction(rng, opts); });
  return out;
}

// -------------------------------------------------------------- grad checks

namespace {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct OpCase {
  std::string name;
  int n_params;
  std::function<std::vector<MatXd>(std::mt19937_64&)> make_params;
  Builder build;
};

std::vector<MatXd> one(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return {m};
}

}  // namespace

std::vector<CheckResult> run_gradcheck_suites(std::uint64_t seed, int instances) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(seed);
  auto posify = [](MatXd m) { return (m.array().abs() + 0.5).matrix(); };

  std::vector<OpCase> cases;
  cases.push_back({"add", 2,
                   [&](std::mt19937_64& r) {
                     auto a = one(r, 3, 4);
                     auto b = one(r, 3, 4);
                     return std::vector<MatXd>{a[0], b[0]};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.add(p[0], p[1])));
                   }});
  cases.push_back({"sub_hadamard", 2,
                   [&](std::mt19937_64& r) {
                     return std::vector<MatXd>{one(r, 3, 3)[0], one(r, 3, 3)[0]};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.hadamard(t.sub(p[0], p[1]), p[0]));
                   }});
  cases.push_back({"div", 2,
                   [&](std::mt19937_64& r) {
                     return std::vector<MatXd>{one(r, 2, 5)[0], posify(one(r, 2, 5)[0])};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.div(p[0], p[1])));
                   }});
  cases.push_back({"matmul_transpose", 2,
                   [&](std::mt19937_64& r) {
                     return std::vector<MatXd>{one(r, 3, 4)[0], one(r, 4, 2)[0]};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.transpose(t.matmul(p[0], p[1]))));
                   }});
  cases.push_back({"scalar_ops", 1, [&](std::mt19937_64& r) { return one(r, 3, 3); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.add_scalar(t.mul_scalar(p[0], -1.7), 0.3));
                   }});
  cases.push_back({"cmul", 1, [&](std::mt19937_64& r) { return one(r, 4, 3); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     MatXd m(4, 3);
                     for (int i = 0; i < 4; ++i)
                       for (int j = 0; j < 3; ++j) m(i, j) = ((i + j) % 2) ? 0.0 : 2.0 + j;
                     return t.sum_all(t.square(t.cmul(p[0], m)));
                   }});
  cases.push_back({"sqrt", 1,
                   [&](std::mt19937_64& r) { return std::vector<MatXd>{posify(one(r, 3, 3)[0])}; },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.sqrt_elem(p[0]));
                   }});
  cases.push_back({"phi", 1, [&](std::mt19937_64& r) { return one(r, 4, 4); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.phi_elem(p[0])));
                   }});
  cases.push_back({"mul_scalar_var", 2,
                   [&](std::mt19937_64& r) {
                     return std::vector<MatXd>{one(r, 3, 3)[0], one(r, 1, 1)[0]};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.mul_scalar_var(p[0], p[1])));
                   }});
  cases.push_back({"row_col_sums", 1, [&](std::mt19937_64& r) { return one(r, 4, 3); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.matmul(t.rowsum(p[0]), t.colsum(p[0]))));
                   }});
  cases.push_back({"broadcasts", 2,
                   [&](std::mt19937_64& r) {
                     return std::vector<MatXd>{one(r, 1, 4)[0], one(r, 3, 1)[0]};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     ad::Var m = t.hadamard(t.broadcast_row(p[0], 3), t.broadcast_col(p[1], 4));
                     return t.sum_all(t.square(m));
                   }});
  cases.push_back({"add_row_col_vec", 3,
                   [&](std::mt19937_64& r) {
                     return std::vector<MatXd>{one(r, 3, 4)[0], one(r, 1, 4)[0], one(r, 3, 1)[0]};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.add_colvec(t.add_rowvec(p[0], p[1]), p[2])));
                   }});
  cases.push_back({"div_rowvec", 2,
                   [&](std::mt19937_64& r) {
                     return std::vector<MatXd>{one(r, 3, 4)[0], posify(one(r, 1, 4)[0])};
                   },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.div_rowvec(p[0], p[1])));
                   }});
  cases.push_back({"blocks_concat", 1, [&](std::mt19937_64& r) { return one(r, 5, 4); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     ad::Var top = t.row_block(p[0], 0, 2);
                     ad::Var bot = t.row_block(p[0], 2, 3);
                     ad::Var cat = t.concat_rows({t.mul_scalar(top, 2.0), bot});
                     ad::Var left = t.col_block(cat, 0, 2);
                     ad::Var right = t.col_block(cat, 2, 2);
                     return t.sum_all(t.square(t.concat_cols({right, left})));
                   }});
  cases.push_back({"gather_rows", 1, [&](std::mt19937_64& r) { return one(r, 5, 3); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.gather_rows(p[0], {0, 2, 2, 4})));
                   }});
  cases.push_back({"mid_edge_cumsum", 1, [&](std::mt19937_64& r) { return one(r, 5, 2); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     ad::Var g = t.phi_elem(t.mid_edge_avg(p[0]));
                     return t.sum_all(t.square(t.cumsum_leftpad(g)));
                   }});
  cases.push_back({"cumsum_rows", 1, [&](std::mt19937_64& r) { return one(r, 5, 2); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     return t.sum_all(t.square(t.cumsum_rows(p[0])));
                   }});
  cases.push_back({"masked_softmax", 1, [&](std::mt19937_64& r) { return one(r, 4, 5); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     AllowMask allow(4, 5);
                     for (int i = 0; i < 4; ++i)
                       for (int j = 0; j < 5; ++j) allow(i, j) = (i + j) % 7 != 0;
                     MatXd probe = MatXd::Ones(5, 1);
                     probe(2, 0) = -1.0;
                     return t.sum_all(
                         t.square(t.matmul(t.masked_softmax(p[0], allow), t.constant(probe))));
                   }});
  cases.push_back({"l1_loss", 1, [&](std::mt19937_64& r) { return one(r, 4, 3); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     // Irrational offsets keep the check away from the kink.
                     MatXd target = MatXd::Constant(4, 3, 0.123456789 + std::sqrt(2.0));
                     return t.l1_loss(p[0], target);
                   }});
  cases.push_back({"graph_mtn", 1, [&](std::mt19937_64& r) { return one(r, 6, 3); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     ad::Var z = graph::masked_time_norm(t, p[0], prefix_mask(6, 4), 1e-3);
                     return t.sum_all(t.square(z));
                   }});
  cases.push_back({"graph_clock", 1, [&](std::mt19937_64& r) { return one(r, 6, 2); },
                   [](ad::Tape& t, const std::vector<ad::Var>& p) {
                     ad::Var lam =
                         graph::clock_lambda(t, p[0], full_mask(6), ClockMode::Normalized, 1e-3);
                     return t.sum_all(t.square(lam));
                   }});

  for (const auto& c : cases) {
    CheckResult r;
    r.suite = "gradcheck." + c.name;
    double worst = 0;
    bool ok = true;
    for (int k = 0; k < instances; ++k) {
      auto params = c.make_params(rng);
      auto rep = ad::gradcheck(c.build, params, 1e-5, 1e-4);
      worst = std::max(worst, rep.max_rel_err);
      ok = ok && rep.pass;
    }
    std::ostringstream ss;
    ss << "max rel err " << worst;
    r.detail = ss.str();
    r.pass = ok;
    out.push_back(std::move(r));
  }

  // Full attention forwards, parallel and autoregressive, including the
  // scalar logit_scale.
  auto full_case = [&](const std::string& name, bool sca, bool ar) {
    CheckResult r;
    r.suite = "gradcheck." + name;
    double worst = 0;
    bool ok = true;
    for (int k = 0; k < instances; ++k) {
      const Eigen::Index T = 5, N = 4, D = 3, d = 2;
      std::normal_distribution<double> nd(0.0, 0.8);
      auto mk = [&](Eigen::Index rr, Eigen::Index cc) {
        MatXd m(rr, cc);
        for (Eigen::Index i = 0; i < rr; ++i)
          for (Eigen::Index j = 0; j < cc; ++j) m(i, j) = nd(rng);
        return m;
      };
      std::vector<MatXd> params{mk(T, D), mk(N, D), mk(D, d), mk(D, d), mk(D, d)};
      MatXd scale(1, 1);
      scale(0, 0) = 1.3;
      if (sca) params.push_back(scale);
      MatXd target = mk(T, d);
      target.array() += std::sqrt(2.0);  // move off L1 kinks
      auto build = [=](ad::Tape& t, const std::vector<ad::Var>& p) {
        graph::Out o;
        if (sca && !ar)
          o = graph::sca_forward(t, p[0], full_mask(T), p[1], full_mask(N), p[1], p[2], p[3],
                                 p[4], p[5], ClockMode::Normalized, 1e-3);
        else if (sca && ar)
          o = graph::sca_forward_ar(t, p[0], p[1], p[1], p[2], p[3], p[4], p[5], 1e-3);
        else if (!sca && !ar)
          o = graph::sdpa_forward(t, p[0], full_mask(T), p[1], full_mask(N), p[1], p[2], p[3],
                                  p[4], 1e-3);
        else
          o = graph::sdpa_forward_ar(t, p[0], p[1], p[1], p[2], p[3], p[4], 1e-3);
        return t.l1_loss(o.context, target);
      };
      auto rep = ad::gradcheck(build, params, 1e-5, 1e-4);
      worst = std::max(worst, rep.max_rel_err);
      ok = ok && rep.pass;
    }
    std::ostringstream ss;
    ss << "max rel err " << worst;
    r.detail = ss.str();
    r.pass = ok;
    out.push_back(std::move(r));
  };
  full_case("sca_forward_full", true, false);
  full_case("sca_forward_ar_full", true, true);
  full_case("sdpa_forward_full", false, false);
  full_case("sdpa_forward_ar_full", false, true);
  return out;
}

bool all_pass(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace clockattn::suites
