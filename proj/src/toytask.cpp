#include "clockattn/toytask.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "clockattn/graph_attention.hpp"

namespace clockattn::toy {

namespace {

MatXd randn_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double std) {
  std::normal_distribution<double> n(0.0, std);
  MatXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

std::vector<Eigen::Index> to_index(const std::vector<int>& v) {
  std::vector<Eigen::Index> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i];
  return out;
}

MatXd shifted_decoder_input(const MatXd& target) {
  MatXd dec_in = MatXd::Zero(target.rows(), target.cols());
  if (target.rows() > 1) dec_in.bottomRows(target.rows() - 1) = target.topRows(target.rows() - 1);
  return dec_in;
}

}  // namespace

Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.vocab < 1 || cfg.n_min < 1 || cfg.n_max < cfg.n_min || cfg.dur_min < 1 ||
      cfg.dur_max < cfg.dur_min || cfg.feat_dim < 1 || cfg.n_instances < 1 ||
      cfg.noise_std < 0)
    throw std::invalid_argument("generate_dataset: invalid config");

  std::mt19937_64 rng(cfg.seed);
  Dataset ds;
  ds.config = cfg;
  ds.token_features = randn_mat(rng, cfg.vocab, cfg.feat_dim, 1.0);

  std::uniform_int_distribution<int> tok(0, cfg.vocab - 1);
  std::uniform_int_distribution<int> nlen(cfg.n_min, cfg.n_max);
  std::uniform_int_distribution<int> dur(cfg.dur_min, cfg.dur_max);
  std::normal_distribution<double> noise(0.0, 1.0);

  ds.instances.reserve(static_cast<std::size_t>(cfg.n_instances));
  for (int idx = 0; idx < cfg.n_instances; ++idx) {
    AlignmentInstance inst;
    const int N = nlen(rng);
    inst.source_tokens.resize(static_cast<std::size_t>(N));
    inst.durations.resize(static_cast<std::size_t>(N));
    int T = 0;
    for (int i = 0; i < N; ++i) {
      inst.source_tokens[static_cast<std::size_t>(i)] = tok(rng);
      inst.durations[static_cast<std::size_t>(i)] = dur(rng);
      T += inst.durations[static_cast<std::size_t>(i)];
    }
    inst.gt_path.reserve(static_cast<std::size_t>(T));
    for (int i = 0; i < N; ++i)
      for (int r = 0; r < inst.durations[static_cast<std::size_t>(i)]; ++r)
        inst.gt_path.push_back(i);
    inst.target.resize(T, cfg.feat_dim);
    for (int t = 0; t < T; ++t) {
      inst.target.row(t) = ds.token_features.row(inst.source_tokens[
          static_cast<std::size_t>(inst.gt_path[static_cast<std::size_t>(t)])]);
      if (cfg.ramp_amplitude != 0.0 && T > 1)
        inst.target.row(t).array() += cfg.ramp_amplitude * (double(t) / double(T - 1));
      for (int f = 0; f < cfg.feat_dim; ++f)
        inst.target(t, f) += cfg.noise_std * noise(rng);
    }
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::ScaNormParallel: return "sca-norm-parallel";
    case Variant::ScaUnnormAR: return "sca-unnorm-ar";
    case Variant::SdpaParallel: return "sdpa-parallel";
    case Variant::SdpaAR: return "sdpa-ar";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::ScaNormParallel, Variant::ScaUnnormAR, Variant::SdpaParallel,
                    Variant::SdpaAR})
    if (name == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant: " + name);
}

bool variant_is_parallel(Variant v) {
  return v == Variant::ScaNormParallel || v == Variant::SdpaParallel;
}

bool variant_is_sca(Variant v) {
  return v == Variant::ScaNormParallel || v == Variant::ScaUnnormAR;
}

std::size_t ToyModel::param_count() const {
  std::size_t n = 0;
  for (const MatXd* m : matrices()) n += static_cast<std::size_t>(m->size());
  if (is_sca()) n += 1;  // logit_scale
  return n;
}

std::vector<MatXd*> ToyModel::matrices() {
  return {&embed, &enc_Wq, &enc_Wk, &enc_Wv, &dec_in_proj, &x_Wq, &x_Wk, &x_Wv, &out_proj};
}

std::vector<const MatXd*> ToyModel::matrices() const {
  return {&embed, &enc_Wq, &enc_Wk, &enc_Wv, &dec_in_proj, &x_Wq, &x_Wk, &x_Wv, &out_proj};
}

std::vector<std::string> ToyModel::matrix_names() const {
  return {"embed", "enc_Wq", "enc_Wk", "enc_Wv", "dec_in_proj", "x_Wq", "x_Wk", "x_Wv",
          "out_proj"};
}

ToyModel init_model(Variant variant, const ModelConfig& cfg, int vocab, int feat_dim,
                    std::uint64_t seed) {
  ToyModel m;
  m.variant = variant;
  m.cfg = cfg;
  m.vocab = vocab;
  m.feat_dim = feat_dim;
  std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
  const int D = cfg.d_model, H = cfg.head_dim;
  const double sD = 1.0 / std::sqrt(double(D));
  m.embed = randn_mat(rng, vocab, D, 0.5);
  m.enc_Wq = randn_mat(rng, D, D, sD);
  m.enc_Wk = randn_mat(rng, D, D, sD);
  m.enc_Wv = randn_mat(rng, D, D, sD);
  const int dec_rows = variant_is_parallel(variant) ? D : feat_dim;
  m.dec_in_proj = randn_mat(rng, dec_rows, D, 1.0 / std::sqrt(double(dec_rows)));
  m.x_Wq = randn_mat(rng, D, H, sD);
  m.x_Wk = randn_mat(rng, D, H, sD);
  m.x_Wv = randn_mat(rng, D, H, sD);
  m.out_proj = randn_mat(rng, H, feat_dim, 1.0 / std::sqrt(double(H)));
  m.logit_scale = 1.0;
  return m;
}

MatXd sinusoid_features(Eigen::Index T, Eigen::Index dim) {
  MatXd pe = MatXd::Zero(T, dim);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -double(i) / double(dim));
      pe(t, i) = std::sin(double(t) * freq);
      if (i + 1 < dim) pe(t, i + 1) = std::cos(double(t) * freq);
    }
  return pe;
}

namespace {

// Shared encoder: token embedding + positions, one residual SDPA block.
MatXd encode_plain(const ToyModel& m, const std::vector<int>& tokens) {
  const Eigen::Index N = static_cast<Eigen::Index>(tokens.size());
  MatXd X(N, m.cfg.d_model);
  for (Eigen::Index i = 0; i < N; ++i) X.row(i) = m.embed.row(tokens[static_cast<std::size_t>(i)]);
  X += sinusoid_features(N, m.cfg.d_model);
  AttentionParams p;
  p.Wq = m.enc_Wq;
  p.Wk = m.enc_Wk;
  p.Wv = m.enc_Wv;
  p.eps = m.cfg.eps;
  auto self = sdpa_forward(MaskedSeq::full(X), MaskedSeq::full(X), MaskedSeq::full(X), p);
  return X + self.context;
}

AttentionParams cross_params(const ToyModel& m, bool causal) {
  AttentionParams p;
  p.Wq = m.x_Wq;
  p.Wk = m.x_Wk;
  p.Wv = m.x_Wv;
  p.logit_scale = m.logit_scale;
  p.eps = m.cfg.eps;
  p.mode = m.variant == Variant::ScaNormParallel ? ClockMode::Normalized
                                                 : ClockMode::Unnormalized;
  p.causal = causal;
  return p;
}

ForwardOut cross_and_project(const ToyModel& m, const MatXd& Q, const MatXd& H, bool causal) {
  const auto q = MaskedSeq::full(Q);
  const auto kv = MaskedSeq::full(H);
  AttentionParams p = cross_params(m, causal);
  AttentionResult r;
  if (causal) {
    AllowMask allow = AllowMask::Constant(Q.rows(), H.rows(), true);
    r = m.is_sca() ? sca_forward(q, kv, kv, p, &allow) : sdpa_forward(q, kv, kv, p, &allow);
  } else {
    r = m.is_sca() ? sca_forward(q, kv, kv, p) : sdpa_forward(q, kv, kv, p);
  }
  ForwardOut out;
  out.pred = r.context * m.out_proj;
  out.weights = std::move(r.weights);
  return out;
}

}  // namespace

ForwardOut decode_parallel(const ToyModel& m, const std::vector<int>& tokens,
                           Eigen::Index T_out) {
  if (!m.is_parallel()) throw std::invalid_argument("decode_parallel: parallel model required");
  const MatXd H = encode_plain(m, tokens);
  const MatXd Q = sinusoid_features(T_out, m.cfg.d_model) * m.dec_in_proj;
  return cross_and_project(m, Q, H, false);
}

ForwardOut forward_plain(const ToyModel& m, const AlignmentInstance& inst) {
  if (m.is_parallel()) return decode_parallel(m, inst.source_tokens, inst.target.rows());
  const MatXd H = encode_plain(m, inst.source_tokens);
  const MatXd dec_in = shifted_decoder_input(inst.target);
  const MatXd Q = dec_in * m.dec_in_proj + sinusoid_features(inst.target.rows(), m.cfg.d_model);
  return cross_and_project(m, Q, H, true);
}

ForwardOut decode_ar_stepwise(const ToyModel& m, const AlignmentInstance& inst) {
  if (m.is_parallel()) throw std::invalid_argument("decode_ar_stepwise: AR model required");
  const MatXd H = encode_plain(m, inst.source_tokens);
  const MatXd dec_in = shifted_decoder_input(inst.target);
  const Eigen::Index T = inst.target.rows();
  ForwardOut out;
  out.pred.resize(T, m.feat_dim);
  out.weights.resize(T, H.rows());
  for (Eigen::Index p = 1; p <= T; ++p) {
    const MatXd prefix = dec_in.topRows(p);
    const MatXd Q = prefix * m.dec_in_proj + sinusoid_features(p, m.cfg.d_model);
    auto step = cross_and_project(m, Q, H, true);
    out.pred.row(p - 1) = step.pred.row(p - 1);
    out.weights.row(p - 1) = step.weights.row(p - 1);
  }
  return out;
}

ForwardOut decode_ar_free(const ToyModel& m, const std::vector<int>& tokens,
                          Eigen::Index T_out) {
  if (m.is_parallel()) throw std::invalid_argument("decode_ar_free: AR model required");
  const MatXd H = encode_plain(m, tokens);
  MatXd dec_in = MatXd::Zero(T_out, m.feat_dim);
  ForwardOut out;
  out.pred.resize(T_out, m.feat_dim);
  out.weights.resize(T_out, H.rows());
  for (Eigen::Index p = 1; p <= T_out; ++p) {
    const MatXd Q =
        dec_in.topRows(p) * m.dec_in_proj + sinusoid_features(p, m.cfg.d_model);
    auto step = cross_and_project(m, Q, H, true);
    out.pred.row(p - 1) = step.pred.row(p - 1);
    out.weights.row(p - 1) = step.weights.row(p - 1);
    if (p < T_out) dec_in.row(p) = out.pred.row(p - 1);
  }
  return out;
}

Metrics compute_metrics(const MatXd& weights, const std::vector<int>& gt_path, int window) {
  const Eigen::Index T = weights.rows(), N = weights.cols();
  if (static_cast<Eigen::Index>(gt_path.size()) != T)
    throw std::invalid_argument("compute_metrics: gt_path length mismatch");
  Metrics m;
  std::set<Eigen::Index> hit;
  Eigen::Index prev_arg = -1;
  double diag_sum = 0, mae_sum = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const int g = gt_path[static_cast<std::size_t>(t)];
    for (Eigen::Index j = std::max<Eigen::Index>(0, g - window);
         j <= std::min<Eigen::Index>(N - 1, g + window); ++j)
      diag_sum += weights(t, j);
    Eigen::Index arg;
    weights.row(t).maxCoeff(&arg);
    hit.insert(arg);
    mae_sum += std::abs(double(arg) - double(g));
    if (prev_arg >= 0 && arg < prev_arg) ++m.monotonicity_violations;
    prev_arg = arg;
  }
  m.diagonality = diag_sum / double(T);
  m.path_mae = mae_sum / double(T);
  m.coverage = double(hit.size()) / double(N);
  return m;
}

GraphOut build_toy_graph(ad::Tape& t, const std::vector<ad::Var>& params, const ToyModel& shape,
                         const AlignmentInstance& inst) {
  const std::size_t expected = 9 + (shape.is_sca() ? 1u : 0u);
  if (params.size() != expected) throw std::invalid_argument("build_toy_graph: bad param count");
  const ad::Var embed = params[0], enc_Wq = params[1], enc_Wk = params[2], enc_Wv = params[3],
                dec_in_proj = params[4], x_Wq = params[5], x_Wk = params[6], x_Wv = params[7],
                out_proj = params[8];
  ad::Var logit_scale;  // invalid for SDPA variants
  if (shape.is_sca()) logit_scale = params[9];

  const Eigen::Index N = static_cast<Eigen::Index>(inst.source_tokens.size());
  const Eigen::Index T = inst.target.rows();
  const double eps = shape.cfg.eps;

  // Encoder.
  ad::Var X = t.add(t.gather_rows(embed, to_index(inst.source_tokens)),
                    t.constant(sinusoid_features(N, shape.cfg.d_model)));
  const Mask mN = full_mask(N);
  auto self = graph::sdpa_forward(t, X, mN, X, mN, X, enc_Wq, enc_Wk, enc_Wv, eps);
  ad::Var H = t.add(X, self.context);

  // Decoder queries + cross-attention.
  graph::Out cross;
  if (shape.is_parallel()) {
    ad::Var Q = t.matmul(t.constant(sinusoid_features(T, shape.cfg.d_model)), dec_in_proj);
    const Mask mT = full_mask(T);
    cross = shape.is_sca()
                ? graph::sca_forward(t, Q, mT, H, mN, H, x_Wq, x_Wk, x_Wv, logit_scale,
                                     ClockMode::Normalized, eps)
                : graph::sdpa_forward(t, Q, mT, H, mN, H, x_Wq, x_Wk, x_Wv, eps);
  } else {
    ad::Var Q = t.add(t.matmul(t.constant(shifted_decoder_input(inst.target)), dec_in_proj),
                      t.constant(sinusoid_features(T, shape.cfg.d_model)));
    cross = shape.is_sca()
                ? graph::sca_forward_ar(t, Q, H, H, x_Wq, x_Wk, x_Wv, logit_scale, eps)
                : graph::sdpa_forward_ar(t, Q, H, H, x_Wq, x_Wk, x_Wv, eps);
  }

  GraphOut out;
  out.weights = cross.weights;
  out.loss = t.l1_loss(t.matmul(cross.context, out_proj), inst.target);
  return out;
}

namespace {

struct AdamState {
  std::vector<MatXd> m, v;
  double m_scale = 0, v_scale = 0;  // logit_scale moments
  int step = 0;
};

double probe_l1(const ToyModel& m, const Dataset& ds, std::size_t probe_count) {
  double sum = 0;
  for (std::size_t i = 0; i < probe_count; ++i)
    sum += (forward_plain(m, ds.instances[i]).pred - ds.instances[i].target)
               .cwiseAbs()
               .mean();
  return sum / double(probe_count);
}

}  // namespace

TrainResult train(Variant variant, const Dataset& ds, const ModelConfig& mc,
                  const TrainConfig& tc) {
  if (ds.instances.empty()) throw std::invalid_argument("train: empty dataset");
  const std::size_t n_total = ds.instances.size();
  const std::size_t n_eval =
      std::min(n_total - 1, std::max<std::size_t>(1, std::size_t(tc.eval_fraction * n_total)));
  const std::size_t n_train = n_total - n_eval;
  const std::size_t n_probe = std::min<std::size_t>(64, n_train);

  TrainResult res;
  res.model = init_model(variant, mc, ds.config.vocab, ds.config.feat_dim, tc.seed);
  ToyModel& model = res.model;
  res.initial_l1 = probe_l1(model, ds, n_probe);

  AdamState opt;
  auto mats = model.matrices();
  for (MatXd* p : mats) {
    opt.m.push_back(MatXd::Zero(p->rows(), p->cols()));
    opt.v.push_back(MatXd::Zero(p->rows(), p->cols()));
  }

  std::mt19937_64 rng(tc.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n_train - 1);
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

  for (int step = 1; step <= tc.steps; ++step) {
    ad::Tape tape;
    std::vector<ad::Var> params;
    for (MatXd* p : mats) params.push_back(tape.param(*p));
    ad::Var scale_var;
    if (model.is_sca()) {
      MatXd s(1, 1);
      s(0, 0) = model.logit_scale;
      scale_var = tape.param(s);
      params.push_back(scale_var);
    }

    ad::Var total;
    for (int b = 0; b < tc.batch_size; ++b) {
      auto g = build_toy_graph(tape, params, model, ds.instances[pick(rng)]);
      total = b == 0 ? g.loss : tape.add(total, g.loss);
    }
    ad::Var loss = tape.mul_scalar(total, 1.0 / double(tc.batch_size));
    const double loss_val = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_val))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    tape.backward(loss);

    opt.step = step;
    const double bc1 = 1.0 - std::pow(b1, step), bc2 = 1.0 - std::pow(b2, step);
    double grad_norm_sq = 0;
    for (std::size_t p = 0; p < mats.size(); ++p) {
      MatXd g = tape.grad_or_zero(params[p]);
      grad_norm_sq += g.squaredNorm();
      opt.m[p] = b1 * opt.m[p] + (1 - b1) * g;
      opt.v[p] = b2 * opt.v[p] + (1 - b2) * g.cwiseAbs2();
      MatXd update = (opt.m[p] / bc1).array() / ((opt.v[p] / bc2).array().sqrt() + adam_eps);
      *mats[p] -= tc.lr * (update.matrix() + tc.weight_decay * (*mats[p]));
    }
    if (model.is_sca() && model.cfg.learn_logit_scale) {
      const double g = tape.grad_or_zero(scale_var)(0, 0);
      grad_norm_sq += g * g;
      opt.m_scale = b1 * opt.m_scale + (1 - b1) * g;
      opt.v_scale = b2 * opt.v_scale + (1 - b2) * g * g;
      // No weight decay on the scalar sharpness knob.
      model.logit_scale -=
          tc.lr * (opt.m_scale / bc1) / (std::sqrt(opt.v_scale / bc2) + adam_eps);
      model.logit_scale = std::max(1e-3, model.logit_scale);
    }
    const double grad_norm = std::sqrt(grad_norm_sq);
    if (!std::isfinite(grad_norm))
      throw std::runtime_error("train: non-finite gradient at step " + std::to_string(step));

    if (step == 1 || step % tc.log_every == 0 || step == tc.steps)
      res.log.push_back({step, loss_val, grad_norm, model.logit_scale});
  }

  res.final_l1 = probe_l1(model, ds, n_probe);

  // Held-out metrics.
  double l1 = 0, diag = 0, mae = 0, cov = 0;
  int viol = 0;
  for (std::size_t i = n_train; i < n_total; ++i) {
    const auto& inst = ds.instances[i];
    auto fw = forward_plain(model, inst);
    Metrics mrow = compute_metrics(fw.weights, inst.gt_path, tc.metric_window);
    l1 += (fw.pred - inst.target).cwiseAbs().mean();
    diag += mrow.diagonality;
    mae += mrow.path_mae;
    cov += mrow.coverage;
    viol += mrow.monotonicity_violations;
  }
  res.eval_metrics.l1 = l1 / double(n_eval);
  res.eval_metrics.diagonality = diag / double(n_eval);
  res.eval_metrics.path_mae = mae / double(n_eval);
  res.eval_metrics.coverage = cov / double(n_eval);
  res.eval_metrics.monotonicity_violations = viol;
  return res;
}

std::vector<SweepRow> length_sweep(const ToyModel& m, const Dataset& ds,
                                   const std::vector<double>& ratios, int window,
                                   double eval_fraction) {
  if (!m.is_parallel()) throw std::invalid_argument("length_sweep: parallel model required");
  for (double r : ratios)
    if (r <= 0) throw std::invalid_argument("length_sweep: ratios must be > 0");
  const std::size_t n_total = ds.instances.size();
  const std::size_t n_eval =
      std::min(n_total, std::max<std::size_t>(1, std::size_t(eval_fraction * n_total)));
  const std::size_t start = n_total - n_eval;

  std::vector<SweepRow> rows;
  for (double r : ratios) {
    SweepRow row;
    row.ratio = r;
    for (std::size_t i = start; i < n_total; ++i) {
      const auto& inst = ds.instances[i];
      const Eigen::Index N = static_cast<Eigen::Index>(inst.source_tokens.size());
      const Eigen::Index T = inst.target.rows();
      const Eigen::Index Tp = std::max<Eigen::Index>(2, std::llround(r * double(N)));
      auto fw = decode_parallel(m, inst.source_tokens, Tp);
      // Linear rescaling of the ground-truth path and target to length Tp.
      std::vector<int> gt(static_cast<std::size_t>(Tp));
      MatXd tgt(Tp, inst.target.cols());
      for (Eigen::Index tt = 0; tt < Tp; ++tt) {
        const Eigen::Index src =
            Tp == 1 ? 0 : std::llround(double(tt) * double(T - 1) / double(Tp - 1));
        gt[static_cast<std::size_t>(tt)] = inst.gt_path[static_cast<std::size_t>(src)];
        tgt.row(tt) = inst.target.row(src);
      }
      Metrics mt = compute_metrics(fw.weights, gt, window);
      row.l1 += (fw.pred - tgt).cwiseAbs().mean();
      row.diagonality += mt.diagonality;
      row.coverage += mt.coverage;
      row.violations += mt.monotonicity_violations;
    }
    row.l1 /= double(n_eval);
    row.diagonality /= double(n_eval);
    row.coverage /= double(n_eval);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace clockattn::toy
