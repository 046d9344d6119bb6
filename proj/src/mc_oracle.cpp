#include "clockattn/mc_oracle.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace clockattn::mc {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double gauss_pdf(double x, double var) {
  return std::exp(-0.5 * x * x / var) / std::sqrt(2.0 * kPi * var);
}

}  // namespace

bool FieldSpec::stationary_mean() const {
  for (Eigen::Index i = 1; i < mean_path.size(); ++i)
    if (mean_path(i) != mean_path(0)) return false;
  return true;
}

MatXd covariance_matrix(const FieldSpec& spec) {
  if (spec.sigma < 0) throw std::invalid_argument("FieldSpec: sigma must be >= 0");
  if (spec.kernel != KernelFamily::White && spec.corr_len <= 0)
    throw std::invalid_argument("FieldSpec: corr_len must be > 0");
  const Eigen::Index L = spec.grid_len();
  MatXd c(L, L);
  const double s2 = spec.sigma * spec.sigma;
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index j = 0; j < L; ++j) {
      const double lag = std::abs(double(i - j));
      switch (spec.kernel) {
        case KernelFamily::White:
          c(i, j) = i == j ? s2 : 0.0;
          break;
        case KernelFamily::OrnsteinUhlenbeck:
          c(i, j) = s2 * std::exp(-lag / spec.corr_len);
          break;
        case KernelFamily::SquaredExponential:
          c(i, j) = s2 * std::exp(-0.5 * lag * lag / (spec.corr_len * spec.corr_len));
          break;
      }
    }
  return c;
}

FieldSampler::FieldSampler(const FieldSpec& spec) : spec_(spec) {
  const Eigen::Index L = spec.grid_len();
  if (L < 1) throw std::invalid_argument("FieldSpec: empty grid");
  if (spec.sigma == 0) {
    chol_ = MatXd::Zero(L, L);
    return;
  }
  MatXd c = covariance_matrix(spec);
  // Cholesky with escalating jitter; squared-exponential kernels are
  // numerically rank deficient without it.
  double jitter = 0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::LLT<MatXd> llt(c + jitter * MatXd::Identity(L, L));
    if (llt.info() == Eigen::Success) {
      chol_ = llt.matrixL();
      return;
    }
    jitter = jitter == 0 ? 1e-12 * spec.sigma * spec.sigma : jitter * 100;
  }
  throw std::runtime_error("FieldSampler: Cholesky failed after jitter escalation");
}

VecXd FieldSampler::standard_normal_stream(std::uint64_t master_seed, std::uint64_t index) const {
  std::mt19937_64 rng(splitmix64(master_seed ^ splitmix64(index)));
  std::normal_distribution<double> n(0.0, 1.0);
  VecXd z(spec_.grid_len());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n(rng);
  return z;
}

VecXd FieldSampler::colour(const VecXd& z) const { return spec_.mean_path + chol_ * z; }

VecXd FieldSampler::sample(std::uint64_t seed) const {
  return colour(standard_normal_stream(seed, 0));
}

VecXd FieldSampler::sample_stream(std::uint64_t master_seed, std::uint64_t index) const {
  return colour(standard_normal_stream(master_seed, index));
}

VecXd sample_field(const FieldSpec& spec, std::uint64_t rng_seed) {
  return FieldSampler(spec).sample(rng_seed);
}

MuKEstimate estimate_mu_k(const FieldSpec& spec, int n_samples, std::uint64_t seed) {
  if (!spec.stationary_mean())
    throw std::invalid_argument("estimate_mu_k: non-stationary mean path rejected");
  if (n_samples < 1) throw std::invalid_argument("estimate_mu_k: need samples");
  const Eigen::Index L = spec.grid_len();
  FieldSampler sampler(spec);

  double mu_sum = 0;
  VecXd lag_sum = VecXd::Zero(L);
  VecXd lag_count = VecXd::Zero(L);
  VecXd rates(L);
  for (int s = 0; s < n_samples; ++s) {
    const VecXd eta = sampler.sample_stream(seed, static_cast<std::uint64_t>(s));
    for (Eigen::Index i = 0; i < L; ++i) rates(i) = phi(eta(i));
    mu_sum += rates.mean();
    for (Eigen::Index k = 0; k < L; ++k) {
      for (Eigen::Index j = 0; j + k < L; ++j) lag_sum(k) += rates(j) * rates(j + k);
      lag_count(k) += double(L - k);
    }
  }
  MuKEstimate est;
  est.mu_hat = mu_sum / double(n_samples);

  VecXd autocov(L);
  for (Eigen::Index k = 0; k < L; ++k)
    autocov(k) = lag_sum(k) / lag_count(k) - est.mu_hat * est.mu_hat;
  double acc = autocov(0);
  int lags = 1;
  for (Eigen::Index k = 1; k < L; ++k) {
    if (std::abs(autocov(k)) < 0.01 * std::abs(autocov(0))) break;
    acc += 2.0 * autocov(k);  // two-sided integral
    ++lags;
  }
  est.k_hat = spec.grid_step * acc;
  est.lags_used = lags;
  return est;
}

VecXd clock_path(const VecXd& eta, double grid_step, ClockMode mode, double unnorm_scale) {
  const Eigen::Index L = eta.size();
  VecXd clock(L + 1);
  clock(0) = 0;
  for (Eigen::Index i = 0; i < L; ++i) clock(i + 1) = clock(i) + grid_step * phi(eta(i));
  if (mode == ClockMode::Normalized)
    clock /= clock(L);
  else
    clock /= unnorm_scale;
  return clock;
}

namespace {

// Variance surrogate A(s) = (1/S)(K/mu^2) * profile(s_hat).
double surrogate_variance(double s_frac, double span, const MuKEstimate& mk, ClockMode mode) {
  const double coef = (mk.k_hat / (mk.mu_hat * mk.mu_hat)) / span;
  return coef * (mode == ClockMode::Normalized ? s_frac * (1 - s_frac) : s_frac);
}

}  // namespace

MeetingEstimate mc_meeting_density(const FieldSpec& spec_x, const FieldSpec& spec_y,
                                   const MeetingConfig& cfg) {
  if (cfg.n_samples < 1) throw std::invalid_argument("mc_meeting_density: need samples");
  if (cfg.cross_corr < 0 || cfg.cross_corr >= 1)
    throw std::invalid_argument("mc_meeting_density: cross_corr in [0,1) required");
  if (cfg.cross_corr > 0 && spec_x.grid_len() != spec_y.grid_len())
    throw std::invalid_argument("mc_meeting_density: cross correlation needs equal grids");

  FieldSampler sx(spec_x), sy(spec_y);
  const Eigen::Index Lx = spec_x.grid_len(), Ly = spec_y.grid_len();
  const double span_x = double(Lx) * spec_x.grid_step;
  const double span_y = double(Ly) * spec_y.grid_step;

  MeetingEstimate est;
  est.n_samples = cfg.n_samples;
  est.seed = cfg.seed;
  const MuKEstimate mkx = estimate_mu_k(spec_x, cfg.n_mu_samples, splitmix64(cfg.seed ^ 0xA1));
  const MuKEstimate mky = estimate_mu_k(spec_y, cfg.n_mu_samples, splitmix64(cfg.seed ^ 0xB2));
  est.mu_hat = mkx.mu_hat;
  est.k_hat = mkx.k_hat;
  est.mu_hat_y = mky.mu_hat;
  est.k_hat_y = mky.k_hat;

  // Deterministic clocks from the mean paths set the offsets Delta(s,t).
  const VecXd det_x = clock_path(spec_x.mean_path, spec_x.grid_step, cfg.mode,
                                 mkx.mu_hat * span_x);
  const VecXd det_y = clock_path(spec_y.mean_path, spec_y.grid_step, cfg.mode,
                                 mky.mu_hat * span_y);

  est.closed_form.resize(Lx + 1, Ly + 1);
  est.sigma_sq.resize(Lx + 1, Ly + 1);
  for (Eigen::Index i = 0; i <= Lx; ++i)
    for (Eigen::Index j = 0; j <= Ly; ++j) {
      const double s2 = surrogate_variance(double(i) / double(Lx), span_x, mkx, cfg.mode) +
                        surrogate_variance(double(j) / double(Ly), span_y, mky, cfg.mode);
      est.sigma_sq(i, j) = s2;
      est.closed_form(i, j) =
          s2 > 0 ? gauss_pdf(det_x(i) - det_y(j), s2)
                 : 0.0;  // endpoints of the bridge have no fluctuation
    }

  auto draw_pair = [&](std::uint64_t idx, VecXd& cx, VecXd& cy) {
    const VecXd zx = sx.standard_normal_stream(cfg.seed, 2 * idx);
    VecXd zy = sy.standard_normal_stream(cfg.seed, 2 * idx + 1);
    if (cfg.cross_corr > 0)
      zy = cfg.cross_corr * zx + std::sqrt(1 - cfg.cross_corr * cfg.cross_corr) * zy;
    cx = clock_path(sx.colour(zx), spec_x.grid_step, cfg.mode, mkx.mu_hat * span_x);
    cy = clock_path(sy.colour(zy), spec_y.grid_step, cfg.mode, mky.mu_hat * span_y);
  };

  // Pass 1: per-pair moments of Z = lambdaX_s - lambdaY_t for the bandwidth.
  MatXd z_sum = MatXd::Zero(Lx + 1, Ly + 1), z_sumsq = MatXd::Zero(Lx + 1, Ly + 1);
  VecXd cx, cy;
  for (int s = 0; s < cfg.n_samples; ++s) {
    draw_pair(static_cast<std::uint64_t>(s), cx, cy);
    for (Eigen::Index i = 0; i <= Lx; ++i)
      for (Eigen::Index j = 0; j <= Ly; ++j) {
        const double z = cx(i) - cy(j);
        z_sum(i, j) += z;
        z_sumsq(i, j) += z * z;
      }
  }
  est.bandwidth.resize(Lx + 1, Ly + 1);
  const double n = double(cfg.n_samples);
  const double n_pow = std::pow(n, -0.2);
  for (Eigen::Index i = 0; i <= Lx; ++i)
    for (Eigen::Index j = 0; j <= Ly; ++j) {
      const double mean = z_sum(i, j) / n;
      const double var = std::max(0.0, z_sumsq(i, j) / n - mean * mean);
      est.bandwidth(i, j) = std::max(1e-4, 1.06 * std::sqrt(var) * n_pow);
    }

  // Pass 2: Gaussian KDE evaluated at zero, same streams.
  est.density = MatXd::Zero(Lx + 1, Ly + 1);
  for (int s = 0; s < cfg.n_samples; ++s) {
    draw_pair(static_cast<std::uint64_t>(s), cx, cy);
    for (Eigen::Index i = 0; i <= Lx; ++i)
      for (Eigen::Index j = 0; j <= Ly; ++j) {
        const double h = est.bandwidth(i, j);
        const double z = (cx(i) - cy(j)) / h;
        if (std::abs(z) < 8.0)
          est.density(i, j) += std::exp(-0.5 * z * z) / (h * std::sqrt(2.0 * kPi));
      }
  }
  est.density /= n;

  // Relative error at interior pairs where the closed form carries mass.
  est.compared = AllowMask::Constant(Lx + 1, Ly + 1, false);
  est.max_rel_err = 0;
  for (Eigen::Index i = 0; i <= Lx; ++i) {
    const double sf = double(i) / double(Lx);
    if (sf < cfg.interior_lo || sf > cfg.interior_hi) continue;
    double row_max = 0;
    for (Eigen::Index j = 0; j <= Ly; ++j) {
      const double tf = double(j) / double(Ly);
      if (tf < cfg.interior_lo || tf > cfg.interior_hi) continue;
      row_max = std::max(row_max, est.closed_form(i, j));
    }
    if (row_max <= 0) continue;
    for (Eigen::Index j = 0; j <= Ly; ++j) {
      const double tf = double(j) / double(Ly);
      if (tf < cfg.interior_lo || tf > cfg.interior_hi) continue;
      if (est.closed_form(i, j) < cfg.row_max_fraction * row_max) continue;
      est.compared(i, j) = true;
      const double rel =
          std::abs(est.density(i, j) - est.closed_form(i, j)) / est.closed_form(i, j);
      est.max_rel_err = std::max(est.max_rel_err, rel);
    }
  }
  return est;
}

BridgeFitReport bridge_variance_fit(const FieldSpec& spec, ClockMode mode, int n_samples,
                                    std::uint64_t seed) {
  if (!spec.stationary_mean())
    throw std::invalid_argument("bridge_variance_fit: constant mean path required");
  const Eigen::Index L = spec.grid_len();
  const double span = double(L) * spec.grid_step;
  FieldSampler sampler(spec);
  BridgeFitReport rep;
  rep.mu_k = estimate_mu_k(spec, std::min(n_samples, 100000), splitmix64(seed ^ 0xC3));

  VecXd sum = VecXd::Zero(L + 1), sumsq = VecXd::Zero(L + 1);
  for (int s = 0; s < n_samples; ++s) {
    const VecXd clock = clock_path(sampler.sample_stream(seed, static_cast<std::uint64_t>(s)),
                                   spec.grid_step, mode, rep.mu_k.mu_hat * span);
    sum += clock;
    sumsq += clock.cwiseAbs2();
  }
  const double n = double(n_samples);
  VecXd var(L + 1);
  for (Eigen::Index i = 0; i <= L; ++i) {
    const double mean = sum(i) / n;
    var(i) = std::max(0.0, sumsq(i) / n - mean * mean);
  }
  rep.endpoint_var_lo = var(0);
  rep.endpoint_var_hi = var(L);

  // Interior least squares of var against the mode's shape function.
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i <= L; ++i) {
    const double sf = double(i) / double(L);
    if (sf >= 0.1 && sf <= 0.9) keep.push_back(i);
  }
  const Eigen::Index m = static_cast<Eigen::Index>(keep.size());
  rep.s_frac.resize(m);
  rep.var_empirical.resize(m);
  VecXd shape(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const double sf = double(keep[static_cast<std::size_t>(r)]) / double(L);
    rep.s_frac(r) = sf;
    rep.var_empirical(r) = var(keep[static_cast<std::size_t>(r)]);
    shape(r) = mode == ClockMode::Normalized ? sf * (1 - sf) : sf;
  }
  rep.c_fit = shape.dot(rep.var_empirical) / shape.dot(shape);
  rep.var_fitted = rep.c_fit * shape;
  rep.c_predicted = (rep.mu_k.k_hat / (rep.mu_k.mu_hat * rep.mu_k.mu_hat)) / span;
  rep.ratio = rep.c_fit / rep.c_predicted;
  const double mean_var = rep.var_empirical.mean();
  const double ss_tot = (rep.var_empirical.array() - mean_var).matrix().squaredNorm();
  const double ss_res = (rep.var_empirical - rep.var_fitted).squaredNorm();
  rep.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
  return rep;
}

double kde_mass(const FieldSpec& spec_x, const FieldSpec& spec_y, ClockMode mode,
                Eigen::Index s_idx, Eigen::Index t_idx, int n_samples, std::uint64_t seed) {
  FieldSampler sx(spec_x), sy(spec_y);
  const double span_x = double(spec_x.grid_len()) * spec_x.grid_step;
  const double span_y = double(spec_y.grid_len()) * spec_y.grid_step;
  const MuKEstimate mkx = estimate_mu_k(spec_x, std::min(n_samples, 20000), splitmix64(seed ^ 0xA1));
  const MuKEstimate mky = estimate_mu_k(spec_y, std::min(n_samples, 20000), splitmix64(seed ^ 0xB2));

  std::vector<double> zs(static_cast<std::size_t>(n_samples));
  double zmean = 0;
  for (int s = 0; s < n_samples; ++s) {
    const VecXd cx = clock_path(sx.sample_stream(seed, 2 * static_cast<std::uint64_t>(s)),
                                spec_x.grid_step, mode, mkx.mu_hat * span_x);
    const VecXd cy = clock_path(sy.sample_stream(seed, 2 * static_cast<std::uint64_t>(s) + 1),
                                spec_y.grid_step, mode, mky.mu_hat * span_y);
    zs[static_cast<std::size_t>(s)] = cx(s_idx) - cy(t_idx);
    zmean += zs[static_cast<std::size_t>(s)];
  }
  zmean /= double(n_samples);
  double zvar = 0;
  for (double z : zs) zvar += (z - zmean) * (z - zmean);
  zvar /= double(n_samples);
  const double h = std::max(1e-4, 1.06 * std::sqrt(zvar) * std::pow(double(n_samples), -0.2));

  // Trapezoid over +-6 effective std around the sample mean.
  const double width = 6.0 * (std::sqrt(zvar) + h);
  const int grid = 400;
  double mass = 0, prev = 0;
  for (int g = 0; g <= grid; ++g) {
    const double e = zmean - width + 2.0 * width * double(g) / double(grid);
    double p = 0;
    for (double z : zs) {
      const double u = (z - e) / h;
      if (std::abs(u) < 8.0) p += std::exp(-0.5 * u * u);
    }
    p /= double(n_samples) * h * std::sqrt(2.0 * kPi);
    if (g > 0) mass += 0.5 * (p + prev) * (2.0 * width / double(grid));
    prev = p;
  }
  return mass;
}

}  // namespace clockattn::mc
