// Desk-scale monotonic seq2seq testbed: synthetic token/feature pairs with a
// known alignment path, a tiny encoder-decoder whose cross-attention is the
// only varied component (clock attention vs scaled dot-product, parallel vs
// autoregressive), alignment metrics, and the length-ratio sweep.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clockattn/attention.hpp"
#include "clockattn/autodiff.hpp"
#include "clockattn/types.hpp"

namespace clockattn::toy {

struct DatasetConfig {
  int vocab = 20;
  int n_min = 5, n_max = 12;        // source tokens per instance
  int dur_min = 2, dur_max = 6;     // frames per token
  int feat_dim = 8;
  double noise_std = 0.05;
  double ramp_amplitude = 0.0;      // optional smooth ramp added to targets
  int n_instances = 2000;
  std::uint64_t seed = 1;
};

struct AlignmentInstance {
  std::vector<int> source_tokens;  // [N]
  std::vector<int> durations;      // [N], frames per token
  MatXd target;                    // [T x F], T = sum(durations)
  std::vector<int> gt_path;        // [T], source index per frame, non-decreasing
};

struct Dataset {
  DatasetConfig config;
  MatXd token_features;  // [V x F] ground-truth feature per token id
  std::vector<AlignmentInstance> instances;
};

Dataset generate_dataset(const DatasetConfig& cfg);

enum class Variant { ScaNormParallel, ScaUnnormAR, SdpaParallel, SdpaAR };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);
bool variant_is_parallel(Variant v);
bool variant_is_sca(Variant v);

struct ModelConfig {
  int d_model = 64;
  int head_dim = 16;
  double eps = 1e-3;
  bool learn_logit_scale = true;  // clock-attention variants only
};

struct ToyModel {
  Variant variant = Variant::ScaNormParallel;
  ModelConfig cfg;
  int vocab = 0;
  int feat_dim = 0;

  MatXd embed;         // [V x Dm]
  MatXd enc_Wq, enc_Wk, enc_Wv;  // encoder self-attention, [Dm x Dm]
  MatXd dec_in_proj;   // parallel: [Dm x Dm] on sinusoid features; AR: [F x Dm]
  MatXd x_Wq, x_Wk, x_Wv;        // cross-attention projections [Dm x hd]
  MatXd out_proj;      // [hd x F]
  double logit_scale = 1.0;

  bool is_parallel() const { return variant_is_parallel(variant); }
  bool is_sca() const { return variant_is_sca(variant); }
  std::size_t param_count() const;

  // Parameter access in a fixed order (logit_scale last, SCA only).
  std::vector<MatXd*> matrices();
  std::vector<const MatXd*> matrices() const;
  std::vector<std::string> matrix_names() const;
};

ToyModel init_model(Variant variant, const ModelConfig& cfg, int vocab, int feat_dim,
                    std::uint64_t seed);

/// Sinusoidal position features, [T x dim].
MatXd sinusoid_features(Eigen::Index T, Eigen::Index dim);

struct ForwardOut {
  MatXd pred;     // [T x F]
  MatXd weights;  // cross-attention weights [T x N]
};

/// Teacher-forced forward at the instance's native length (AR variants) or
/// position-query forward (parallel variants).
ForwardOut forward_plain(const ToyModel& m, const AlignmentInstance& inst);

/// Parallel decode at an arbitrary target length.
ForwardOut decode_parallel(const ToyModel& m, const std::vector<int>& tokens, Eigen::Index T_out);

/// Teacher-forced stepwise decode: row i recomputed from the prefix 0..i.
/// Agrees with forward_plain row for row on AR variants.
ForwardOut decode_ar_stepwise(const ToyModel& m, const AlignmentInstance& inst);

/// Free-running autoregressive decode feeding predictions back.
ForwardOut decode_ar_free(const ToyModel& m, const std::vector<int>& tokens, Eigen::Index T_out);

struct Metrics {
  double l1 = 0;
  double diagonality = 0;           // weight mass within +-w of the ideal path
  int monotonicity_violations = 0;  // count of row-argmax decreases
  double path_mae = 0;              // mean |argmax path - gt_path|
  double coverage = 0;              // fraction of source tokens receiving argmax mass
};

Metrics compute_metrics(const MatXd& weights, const std::vector<int>& gt_path, int window);

struct TrainConfig {
  int steps = 5000;
  int batch_size = 16;
  double lr = 1e-4;
  double weight_decay = 0.01;
  int log_every = 250;
  std::uint64_t seed = 1;
  int metric_window = 2;
  double eval_fraction = 0.1;  // held-out tail of the dataset
};

struct TrainLogRow {
  int step = 0;
  double loss = 0;
  double grad_norm = 0;
  double logit_scale = 1.0;
};

struct TrainResult {
  ToyModel model;
  std::vector<TrainLogRow> log;
  double initial_l1 = 0;  // mean plain-forward L1 on the probe slice, untrained
  double final_l1 = 0;    // same slice, trained
  Metrics eval_metrics;   // held-out slice, trained
};

TrainResult train(Variant variant, const Dataset& ds, const ModelConfig& mc,
                  const TrainConfig& tc);

struct SweepRow {
  double ratio = 0;
  double l1 = 0;
  double diagonality = 0;
  double coverage = 0;
  int violations = 0;
};

/// Decode the held-out slice at T' = round(ratio * N) per instance and score
/// against the linearly rescaled ground-truth path.
std::vector<SweepRow> length_sweep(const ToyModel& m, const Dataset& ds,
                                   const std::vector<double>& ratios, int window,
                                   double eval_fraction = 0.1);

struct GraphOut {
  ad::Var loss;     // scalar
  ad::Var weights;  // cross-attention weights
};

/// Per-instance loss as tape ops; used by the trainer and by gradient
/// certification. params follow ToyModel::matrices() order, with a trailing
/// 1x1 logit_scale for clock-attention variants. `shape` supplies variant,
/// dims and eps; parameter values come from the Vars.
GraphOut build_toy_graph(ad::Tape& t, const std::vector<ad::Var>& params, const ToyModel& shape,
                         const AlignmentInstance& inst);

}  // namespace clockattn::toy
