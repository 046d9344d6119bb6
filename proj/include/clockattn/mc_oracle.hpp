// Monte-Carlo verification of the clock-attention theory: Gaussian rate
// fields on a grid, empirical meeting-kernel densities against the
// closed-form Gaussian score, and variance-profile fits (Brownian-bridge
// shape for normalized clocks, linear growth for unnormalized ones).
//
// The oracle uses scalar clocks and its own left-Riemann discretization of
// the clock integral, independent of the attention implementation it checks.
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "clockattn/clocks.hpp"
#include "clockattn/types.hpp"

namespace clockattn::mc {

enum class KernelFamily { White, OrnsteinUhlenbeck, SquaredExponential };

/// Gaussian rate-field description: deterministic mean path plus a
/// stationary fluctuation kernel. corr_len is in grid steps.
struct FieldSpec {
  VecXd mean_path;                           // [L]
  KernelFamily kernel = KernelFamily::White;
  double sigma = 0.05;
  double corr_len = 1.0;
  double grid_step = 1.0;

  Eigen::Index grid_len() const { return mean_path.size(); }
  bool stationary_mean() const;
};

MatXd covariance_matrix(const FieldSpec& spec);

/// Samples eta = mean + chol(C) z with a cached Cholesky factor. Draws are
/// deterministic per (seed) and per (seed, index) stream, so sampling is
/// reproducible independent of ordering.
class FieldSampler {
 public:
  explicit FieldSampler(const FieldSpec& spec);
  VecXd sample(std::uint64_t seed) const;
  VecXd sample_stream(std::uint64_t master_seed, std::uint64_t index) const;
  VecXd standard_normal_stream(std::uint64_t master_seed, std::uint64_t index) const;
  VecXd colour(const VecXd& z) const;  // mean + chol * z
  const FieldSpec& spec() const { return spec_; }

 private:
  FieldSpec spec_;
  MatXd chol_;
};

/// One field draw; convenience wrapper over FieldSampler.
VecXd sample_field(const FieldSpec& spec, std::uint64_t rng_seed);

struct MuKEstimate {
  double mu_hat = 0;   // MC mean of phi(eta)
  double k_hat = 0;    // integrated autocovariance of phi(eta), two-sided
  int lags_used = 0;   // lags entering k_hat before the 1% truncation
};

/// Stationary-field estimate of mu = E[phi(eta)] and the integrated
/// covariance K = sum over lags of Cov(phi_0, phi_tau) * grid_step
/// (two-sided; truncated at the first lag below 1% of lag zero).
MuKEstimate estimate_mu_k(const FieldSpec& spec, int n_samples, std::uint64_t seed);

/// Discrete clock over grid rates: positions 0..L with left-Riemann partial
/// sums of phi(eta) * grid_step. Normalized mode divides by the total;
/// unnormalized mode divides by `unnorm_scale` (mu * S) so trajectories are
/// dimensionless in both modes.
VecXd clock_path(const VecXd& eta, double grid_step, ClockMode mode, double unnorm_scale = 1.0);

struct MeetingConfig {
  ClockMode mode = ClockMode::Normalized;
  int n_samples = 200000;
  int n_mu_samples = 100000;
  std::uint64_t seed = 1;
  double interior_lo = 0.1;   // compared pin fractions, inclusive
  double interior_hi = 0.9;
  double row_max_fraction = 0.1;  // compare where closed form >= this * row max
  double cross_corr = 0.0;    // deliberate X/Y noise correlation (characterization)
};

struct MeetingEstimate {
  MatXd density;       // [(Lx+1) x (Ly+1)] KDE of lambdaX_s - lambdaY_t at 0
  MatXd closed_form;   // Gaussian meeting kernel from the variance surrogates
  MatXd sigma_sq;      // surrogate Sigma^2 = A_X(s) + A_Y(t) per pair
  MatXd bandwidth;     // per-pair Silverman bandwidth (floored)
  AllowMask compared;  // pairs entering max_rel_err
  double mu_hat = 0, k_hat = 0;      // X-side estimates
  double mu_hat_y = 0, k_hat_y = 0;  // Y-side estimates
  int n_samples = 0;
  std::uint64_t seed = 0;
  double max_rel_err = 0;
};

/// Empirical meeting density via a Gaussian KDE at zero versus the
/// closed-form Gaussian with Sigma^2 = A_X(s) + A_Y(t) built from the
/// bridge/diffusive surrogates and (mu_hat, k_hat).
MeetingEstimate mc_meeting_density(const FieldSpec& spec_x, const FieldSpec& spec_y,
                                   const MeetingConfig& cfg);

struct BridgeFitReport {
  VecXd s_frac;         // interior pin fractions
  VecXd var_empirical;  // empirical Var(lambda_s) at those positions
  VecXd var_fitted;     // c_fit * profile
  double c_fit = 0;
  double c_predicted = 0;  // (1/S)(K/mu^2)
  double ratio = 0;        // c_fit / c_predicted
  double r2 = 0;
  double endpoint_var_lo = 0, endpoint_var_hi = 0;  // Var at s=0 and s=S
  MuKEstimate mu_k;
};

/// Least-squares fit of the per-position clock variance against the
/// Brownian-bridge profile s(1-s) (normalized) or the linear profile s
/// (unnormalized, clocks rescaled by mu S).
BridgeFitReport bridge_variance_fit(const FieldSpec& spec, ClockMode mode, int n_samples,
                                    std::uint64_t seed);

/// Integral of the KDE of lambdaX_s - lambdaY_t over its support; should be
/// 1 up to quadrature and MC error. Used by the normalization sanity check.
double kde_mass(const FieldSpec& spec_x, const FieldSpec& spec_y, ClockMode mode,
                Eigen::Index s_idx, Eigen::Index t_idx, int n_samples, std::uint64_t seed);

}  // namespace clockattn::mc
