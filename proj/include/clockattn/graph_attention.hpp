// Attention forwards expressed as tape operations so the toy task can train
// end-to-end and every gradient can be certified against finite differences.
// Values agree with the plain forwards in attention.hpp; only the backward
// machinery differs.
#pragma once

#include "clockattn/attention.hpp"
#include "clockattn/autodiff.hpp"

namespace clockattn::graph {

/// Masked time normalization as tape ops; mask handling matches
/// clockattn::masked_time_norm (output zeroed at invalid positions, zero
/// gradient through them).
ad::Var masked_time_norm(ad::Tape& t, ad::Var x, const Mask& mask, double eps);

/// Clock trajectory lambda over a contiguous-prefix mask.
ad::Var clock_lambda(ad::Tape& t, ad::Var eta, const Mask& mask, ClockMode mode, double eps);

struct Out {
  ad::Var context;
  ad::Var weights;
};

/// Parallel-regime stochastic clock attention. logit_scale may be an invalid
/// Var to skip scaling. Wq/Wk/Wv are tape Vars (typically params).
Out sca_forward(ad::Tape& t, ad::Var q, const Mask& qm, ad::Var k, const Mask& km, ad::Var v,
                ad::Var Wq, ad::Var Wk, ad::Var Wv, ad::Var logit_scale, ClockMode mode,
                double eps);

/// Autoregressive-regime stochastic clock attention: unnormalized clocks and
/// per-row prefix statistics (row i depends on query rows 0..i only). Query
/// and key masks must be all-valid; causal_allow is ANDed into the mask.
Out sca_forward_ar(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, ad::Var Wq, ad::Var Wk,
                   ad::Var Wv, ad::Var logit_scale, double eps,
                   const AllowMask* causal_allow = nullptr);

/// Scaled dot-product baseline with the same masked-time-norm path.
Out sdpa_forward(ad::Tape& t, ad::Var q, const Mask& qm, ad::Var k, const Mask& km, ad::Var v,
                 ad::Var Wq, ad::Var Wk, ad::Var Wv, double eps);

/// Autoregressive SDPA: row i is standardized with prefix-0..i statistics.
Out sdpa_forward_ar(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, ad::Var Wq, ad::Var Wk,
                    ad::Var Wv, double eps, const AllowMask* causal_allow = nullptr);

}  // namespace clockattn::graph
