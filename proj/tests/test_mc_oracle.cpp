#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "clockattn/mc_oracle.hpp"

using namespace clockattn;
using namespace clockattn::mc;

namespace {

FieldSpec make_spec(int L, double sigma, KernelFamily kernel = KernelFamily::White,
                    double corr_len = 3.0, double mean = 0.0) {
  FieldSpec s;
  s.mean_path = VecXd::Constant(L, mean);
  s.kernel = kernel;
  s.sigma = sigma;
  s.corr_len = corr_len;
  s.grid_step = 1.0;
  return s;
}

}  // namespace

TEST_CASE("sample_field returns the mean path exactly when sigma is zero") {
  FieldSpec s = make_spec(16, 0.0);
  s.mean_path = VecXd::LinSpaced(16, -1.0, 2.0);
  VecXd draw = sample_field(s, 42);
  CHECK((draw - s.mean_path).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("white-noise sample means satisfy the CLT bound") {
  const int n = 100000, L = 8;
  const double sigma = 0.3;
  FieldSampler sampler(make_spec(L, sigma));
  VecXd mean = VecXd::Zero(L);
  for (int i = 0; i < n; ++i) mean += sampler.sample_stream(9, static_cast<std::uint64_t>(i));
  mean /= double(n);
  const double bound = 4.0 * sigma / std::sqrt(double(n));
  for (int i = 0; i < L; ++i) CHECK(std::abs(mean(i)) <= bound);
}

TEST_CASE("OU samples reproduce the exponential autocovariance within 5%") {
  const int n = 100000, L = 32;
  const double sigma = 0.4, ell = 3.0;
  FieldSampler sampler(make_spec(L, sigma, KernelFamily::OrnsteinUhlenbeck, ell));
  const int kmax = 9;  // 3 * ell
  VecXd acc = VecXd::Zero(kmax + 1), cnt = VecXd::Zero(kmax + 1);
  double mean_acc = 0;
  for (int i = 0; i < n; ++i) {
    VecXd eta = sampler.sample_stream(11, static_cast<std::uint64_t>(i));
    mean_acc += eta.mean();
    for (int k = 0; k <= kmax; ++k) {
      for (int j = 0; j + k < L; ++j) acc(k) += eta(j) * eta(j + k);
      cnt(k) += double(L - k);
    }
  }
  const double mu = mean_acc / double(n);
  for (int k = 0; k <= kmax; ++k) {
    const double emp = acc(k) / cnt(k) - mu * mu;
    const double ref = sigma * sigma * std::exp(-double(k) / ell);
    CHECK(std::abs(emp - ref) <= 0.05 * ref);
  }
}

TEST_CASE("squared-exponential covariance is sampleable after jitter") {
  FieldSampler sampler(make_spec(24, 0.2, KernelFamily::SquaredExponential, 4.0));
  VecXd draw = sampler.sample(3);
  CHECK(draw.size() == 24);
  CHECK(draw.allFinite());
}

TEST_CASE("sampling is deterministic per seed and per stream") {
  FieldSampler sampler(make_spec(12, 0.5, KernelFamily::OrnsteinUhlenbeck, 2.0));
  CHECK((sampler.sample(5) - sampler.sample(5)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((sampler.sample_stream(5, 3) - sampler.sample_stream(5, 3)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((sampler.sample_stream(5, 3) - sampler.sample_stream(5, 4)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("estimate_mu_k on a deterministic field gives phi(c) and zero K") {
  FieldSpec s = make_spec(16, 0.0, KernelFamily::White, 1.0, 0.7);
  auto est = estimate_mu_k(s, 1000, 1);
  CHECK(est.mu_hat == doctest::Approx(phi(0.7)).epsilon(1e-12));
  // Zero up to the moment-accumulation noise floor.
  CHECK(std::abs(est.k_hat) <= 1e-10);
}

TEST_CASE("estimate_mu_k rejects non-stationary mean paths") {
  FieldSpec s = make_spec(8, 0.1);
  s.mean_path(3) = 1.0;
  CHECK_THROWS_AS(estimate_mu_k(s, 100, 1), std::invalid_argument);
}

TEST_CASE("white-noise K equals the variance of phi(eta) within 10%") {
  const double sigma = 0.1;
  FieldSpec s = make_spec(16, sigma);
  auto est = estimate_mu_k(s, 100000, 21);
  // Independent reference: direct MC variance of phi over fresh draws.
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n(0.0, sigma);
  double sum = 0, sumsq = 0;
  const int m = 200000;
  for (int i = 0; i < m; ++i) {
    const double v = phi(n(rng));
    sum += v;
    sumsq += v * v;
  }
  const double var = sumsq / m - (sum / m) * (sum / m);
  CHECK(est.k_hat == doctest::Approx(var).epsilon(0.10));
}

TEST_CASE("OU K matches a direct double-loop estimator within 10%") {
  FieldSpec s = make_spec(48, 0.15, KernelFamily::OrnsteinUhlenbeck, 3.0);
  const int n = 60000;
  auto est = estimate_mu_k(s, n, 13);

  // Independent double-loop estimator over fresh draws: c(k) for all pairs,
  // summed two-sided without the 1% truncation rule.
  FieldSampler sampler(s);
  const int L = 48, kmax = 24;
  VecXd acc = VecXd::Zero(kmax + 1), cnt = VecXd::Zero(kmax + 1);
  double mu_acc = 0;
  for (int i = 0; i < n; ++i) {
    VecXd eta = sampler.sample_stream(999, static_cast<std::uint64_t>(i));
    VecXd rates(L);
    for (int j = 0; j < L; ++j) rates(j) = phi(eta(j));
    mu_acc += rates.mean();
    for (int k = 0; k <= kmax; ++k)
      for (int j = 0; j + k < L; ++j) acc(k) += rates(j) * rates(j + k);
    for (int k = 0; k <= kmax; ++k) cnt(k) += double(L - k);
  }
  const double mu = mu_acc / n;
  double ref = acc(0) / cnt(0) - mu * mu;
  for (int k = 1; k <= kmax; ++k) ref += 2.0 * (acc(k) / cnt(k) - mu * mu);
  ref *= s.grid_step;
  CHECK(est.k_hat == doctest::Approx(ref).epsilon(0.10));
}

TEST_CASE("deterministic fields give the kernel bump at the offset") {
  FieldSpec s = make_spec(16, 0.0);
  MeetingConfig cfg;
  cfg.n_samples = 2000;
  cfg.seed = 3;
  auto est = mc_meeting_density(s, s, cfg);
  // Equal deterministic ramps: Delta = 0 on the diagonal, bandwidth floored.
  const double kappa0 = 1.0 / (1e-4 * std::sqrt(2.0 * 3.14159265358979323846));
  for (int i = 0; i <= 16; ++i)
    CHECK(est.density(i, i) == doctest::Approx(kappa0).epsilon(1e-9));
  // Off-diagonal offsets are many bandwidths away: exactly zero mass.
  CHECK(est.density(2, 14) == 0.0);
}

TEST_CASE("meeting density is reproducible bit for bit given the seed") {
  FieldSpec s = make_spec(12, 0.05);
  MeetingConfig cfg;
  cfg.n_samples = 3000;
  cfg.n_mu_samples = 3000;
  cfg.seed = 17;
  auto a = mc_meeting_density(s, s, cfg);
  auto b = mc_meeting_density(s, s, cfg);
  CHECK((a.density - b.density).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.closed_form - b.closed_form).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.max_rel_err == b.max_rel_err);
}

TEST_CASE("normalized-mode meeting density tracks the closed form at desk scale") {
  FieldSpec s = make_spec(32, 0.05);
  MeetingConfig cfg;
  cfg.n_samples = 30000;
  cfg.n_mu_samples = 30000;
  cfg.seed = 5;
  auto est = mc_meeting_density(s, s, cfg);
  CHECK(est.compared.cast<int>().sum() > 0);
  CHECK(est.max_rel_err <= 0.2);  // acceptance runs the strict 15% at n=2e5
}

TEST_CASE("unnormalized-mode empirical variance fits the linear profile") {
  FieldSpec s = make_spec(48, 0.05);
  auto fit = bridge_variance_fit(s, ClockMode::Unnormalized, 30000, 7);
  CHECK(fit.r2 >= 0.95);
  CHECK(fit.endpoint_var_lo <= 1e-12);
  // Diffusive growth: variance is maximal at the right end.
  CHECK(fit.var_empirical(fit.var_empirical.size() - 1) ==
        doctest::Approx(fit.var_empirical.maxCoeff()).epsilon(1e-12));
}

TEST_CASE("normalized-mode variance fits the bridge shape with a calibrated coefficient") {
  FieldSpec s = make_spec(48, 0.05);
  auto fit = bridge_variance_fit(s, ClockMode::Normalized, 40000, 9);
  CHECK(fit.r2 >= 0.95);
  CHECK(fit.ratio >= 0.75);
  CHECK(fit.ratio <= 1.3);
  CHECK(fit.endpoint_var_lo <= 1e-12);
  CHECK(fit.endpoint_var_hi <= 1e-12);
}

TEST_CASE("halving sigma halves the clock fluctuation at interior positions") {
  const int L = 32, n = 20000;
  auto std_at_mid = [&](double sigma) {
    FieldSampler sampler(make_spec(L, sigma));
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
      VecXd clock = clock_path(sampler.sample_stream(23, static_cast<std::uint64_t>(i)), 1.0,
                               ClockMode::Normalized);
      const double v = clock(L / 2);
      sum += v;
      sumsq += v * v;
    }
    const double mean = sum / n;
    return std::sqrt(std::max(0.0, sumsq / n - mean * mean));
  };
  const double ratio = std_at_mid(0.08) / std_at_mid(0.04);
  CHECK(ratio == doctest::Approx(2.0).epsilon(0.10));
}

TEST_CASE("the KDE of the clock difference integrates to one at every probed position") {
  FieldSpec s = make_spec(24, 0.05);
  for (Eigen::Index pos : {4, 12, 20}) {
    const double mass = kde_mass(s, s, ClockMode::Normalized, pos, pos, 8000, 31);
    CHECK(mass == doctest::Approx(1.0).epsilon(0.02));
  }
}

TEST_CASE("cross-correlated fields are a characterization run, not a failure") {
  FieldSpec s = make_spec(24, 0.05);
  MeetingConfig cfg;
  cfg.n_samples = 8000;
  cfg.n_mu_samples = 8000;
  cfg.seed = 41;
  cfg.cross_corr = 0.8;
  auto est = mc_meeting_density(s, s, cfg);
  CHECK(std::isfinite(est.max_rel_err));
  // Shared noise shrinks Var(lambdaX - lambdaY); the independent closed form
  // undershoots the empirical peak. Record that it degrades, nothing more.
  auto indep = cfg;
  indep.cross_corr = 0.0;
  auto base = mc_meeting_density(s, s, indep);
  CHECK(est.max_rel_err > base.max_rel_err);
}

TEST_CASE("insufficient samples are rejected, degenerate configs throw") {
  FieldSpec s = make_spec(8, 0.05);
  MeetingConfig cfg;
  cfg.n_samples = 0;
  CHECK_THROWS_AS(mc_meeting_density(s, s, cfg), std::invalid_argument);
  FieldSpec bad = make_spec(8, -1.0);
  CHECK_THROWS_AS(covariance_matrix(bad), std::invalid_argument);
}
