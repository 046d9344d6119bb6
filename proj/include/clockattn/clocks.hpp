// Clock construction: the rational gate nonlinearity, masked time
// normalization, normalized/unnormalized clock trajectories and their
// position-dependent variance surrogates.
#pragma once

#include <cmath>
#include <stdexcept>

#include "clockattn/tensor_core.hpp"
#include "clockattn/types.hpp"

namespace clockattn {

enum class ClockMode {
  Normalized,    // clock spans [0,1]; needs the full sequence
  Unnormalized,  // raw accumulated clock; computable prefix-by-prefix
};

/// Rational gate nonlinearity phi(x) = (1 + x(1+x+|x|)/(1+|x|)) / 2.
/// Strictly positive, monotone increasing, asymptotically x for x >> 0 and
/// 0 for x << 0, smooth at the origin (phi(0) = 1/2, phi'(0) = 1/2).
template <typename Scalar>
Scalar phi(Scalar x) {
  const Scalar ax = std::abs(x);
  return Scalar(0.5) * (Scalar(1) + x * (Scalar(1) + x + ax) / (Scalar(1) + ax));
}

/// Closed-form derivative of phi: 1 - 1/(2(1+x)^2) for x >= 0,
/// 1/(2(1-x)^2) for x < 0. Bounded in (0, 1).
template <typename Scalar>
Scalar phi_grad(Scalar x) {
  const Scalar t = Scalar(1) + std::abs(x);
  const Scalar inv = Scalar(1) / (Scalar(2) * t * t);
  return x >= Scalar(0) ? Scalar(1) - inv : inv;
}

/// Per-channel standardization over valid positions: z = (x - mu)/sqrt(v + eps),
/// zeroed at invalid positions. Masked mean of the output is 0 and its masked
/// variance is v/(v+eps) per channel.
template <typename Scalar>
MaskedSeqT<Scalar> masked_time_norm(const MaskedSeqT<Scalar>& x, Scalar eps) {
  if (eps <= Scalar(0)) throw std::invalid_argument("masked_time_norm: eps must be > 0");
  auto [mean, var] = masked_mean_var(x);
  RowVec<Scalar> denom = (var.array() + eps).sqrt().matrix();
  Mat<Scalar> z(x.len(), x.width());
  for (Eigen::Index i = 0; i < x.len(); ++i)
    z.row(i) = x.mask(i) ? ((x.values.row(i) - mean).cwiseQuotient(denom)).eval()
                         : RowVec<Scalar>::Zero(x.width()).eval();
  return MaskedSeqT<Scalar>(std::move(z), x.mask);
}

/// Clock values per position and channel plus the scalar variance surrogate
/// per position. lambda(0,:) = 0 always; in Normalized mode the last valid
/// row is exactly 1 per channel.
template <typename Scalar>
struct ClockTrajectoryT {
  Mat<Scalar> lambda;         // [L x d]
  Vec<Scalar> var_surrogate;  // [L]
  ClockMode mode = ClockMode::Normalized;
  Eigen::Index valid_len = 0;
};
using ClockTrajectory = ClockTrajectoryT<double>;

/// Mid-edge gates of Algorithm-style clock accumulation: for each edge with
/// both endpoints valid, g = phi(midpoint average) + eps; other edges are 0.
/// Returns an [(L-1) x d] matrix (empty for L = 1).
template <typename Scalar>
Mat<Scalar> clock_gates(const MaskedSeqT<Scalar>& x, Scalar eps) {
  const Eigen::Index L = x.len(), d = x.width();
  Mat<Scalar> g = Mat<Scalar>::Zero(L > 0 ? L - 1 : 0, d);
  for (Eigen::Index e = 0; e + 1 < L; ++e) {
    if (!(x.mask(e) && x.mask(e + 1))) continue;
    for (Eigen::Index k = 0; k < d; ++k)
      g(e, k) = phi(Scalar(0.5) * (x.values(e, k) + x.values(e + 1, k))) + eps;
  }
  return g;
}

inline Vec<double> clock_position_fractions(const Mask& mask, ClockMode mode) {
  const Eigen::Index L = mask.size();
  const double count = static_cast<double>(mask_count(mask));
  Vec<double> pos(L);
  double c = 0;
  for (Eigen::Index i = 0; i < L; ++i) {
    if (mask(i)) c += 1;
    pos(i) = c - 0.5;
  }
  if (mode == ClockMode::Normalized) pos /= count;
  return pos;
}

/// Accumulate gates into a clock trajectory. Separated from gate computation
/// so gate-level invariances (e.g. positive rescaling) can be exercised
/// directly.
template <typename Scalar>
ClockTrajectoryT<Scalar> build_clock_from_gates(const Mat<Scalar>& gates, const Mask& mask,
                                                ClockMode mode) {
  const Eigen::Index L = mask.size(), d = gates.cols();
  const Eigen::Index v = mask_count(mask);
  if (v == 0) throw std::invalid_argument("build_clock: empty sequence");
  if (!is_contiguous_prefix(mask))
    throw std::invalid_argument("build_clock: non-contiguous mask");
  if (gates.rows() != L - 1)
    throw std::invalid_argument("build_clock: gates must have L-1 rows");

  Mat<Scalar> z = cumsum_leftpad(gates);  // [L x d]
  if (mode == ClockMode::Normalized && v > 1) {
    // Total accumulation per channel is the cumsum row at the last valid
    // position, so the endpoint divides to exactly 1.
    const RowVec<Scalar> total = z.row(v - 1);
    for (Eigen::Index k = 0; k < d; ++k) z.col(k) /= total(k);
  }
  // Degenerate single-frame sequence keeps lambda = 0: one frame carries no
  // ordering information.
  for (Eigen::Index i = 0; i < L; ++i)
    if (!mask(i)) z.row(i).setZero();

  ClockTrajectoryT<Scalar> out;
  out.lambda = std::move(z);
  out.mode = mode;
  out.valid_len = v;
  Vec<double> pos = clock_position_fractions(mask, mode);
  out.var_surrogate.resize(L);
  for (Eigen::Index i = 0; i < L; ++i) {
    const Scalar p = static_cast<Scalar>(pos(i));
    out.var_surrogate(i) = mode == ClockMode::Normalized ? p * (Scalar(1) - p) : p;
  }
  return out;
}

/// Full clock construction from projected features: mid-edge gates, left-zero
/// padded accumulation, optional normalization to [0,1], and the bridge
/// (normalized) or diffusive (unnormalized) variance surrogate.
/// The mask must be a contiguous prefix with at least one valid position.
template <typename Scalar>
ClockTrajectoryT<Scalar> build_clock(const MaskedSeqT<Scalar>& x, ClockMode mode, Scalar eps) {
  if (eps <= Scalar(0)) throw std::invalid_argument("build_clock: eps must be > 0");
  if (x.valid_count() == 0) throw std::invalid_argument("build_clock: empty sequence");
  if (!is_contiguous_prefix(x.mask))
    throw std::invalid_argument("build_clock: non-contiguous mask");
  return build_clock_from_gates(clock_gates(x, eps), x.mask, mode);
}

/// Variance profile value at a fractional position: pos(1-pos) for normalized
/// clocks (Brownian-bridge shape), pos for unnormalized (diffusive) clocks.
/// Constant prefactors are the caller's business.
template <typename Scalar>
Scalar variance_profile(Scalar pos_frac, ClockMode mode) {
  if (mode == ClockMode::Normalized) {
    if (pos_frac < Scalar(0) || pos_frac > Scalar(1))
      throw std::invalid_argument("variance_profile: normalized pos_frac outside [0,1]");
    return pos_frac * (Scalar(1) - pos_frac);
  }
  if (pos_frac < Scalar(0))
    throw std::invalid_argument("variance_profile: unnormalized pos_frac must be >= 0");
  return pos_frac;
}

}  // namespace clockattn
