#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clockattn/toytask.hpp"

using namespace clockattn;
using namespace clockattn::toy;

namespace {

DatasetConfig tiny_dataset_config() {
  DatasetConfig cfg;
  cfg.vocab = 12;
  cfg.n_min = 4;
  cfg.n_max = 7;
  cfg.dur_min = 2;
  cfg.dur_max = 4;
  cfg.feat_dim = 6;
  cfg.noise_std = 0.05;
  cfg.n_instances = 80;
  cfg.seed = 3;
  return cfg;
}

ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.d_model = 16;
  mc.head_dim = 4;
  return mc;
}

}  // namespace

TEST_CASE("unit durations give the identity alignment path") {
  DatasetConfig cfg = tiny_dataset_config();
  cfg.dur_min = cfg.dur_max = 1;
  auto ds = generate_dataset(cfg);
  for (const auto& inst : ds.instances) {
    CHECK(inst.gt_path.size() == inst.source_tokens.size());
    for (std::size_t i = 0; i < inst.gt_path.size(); ++i)
      CHECK(inst.gt_path[i] == static_cast<int>(i));
  }
}

TEST_CASE("noiseless duration-2 targets repeat each token embedding twice") {
  DatasetConfig cfg = tiny_dataset_config();
  cfg.dur_min = cfg.dur_max = 2;
  cfg.noise_std = 0.0;
  auto ds = generate_dataset(cfg);
  for (const auto& inst : ds.instances) {
    for (std::size_t i = 0; i < inst.source_tokens.size(); ++i) {
      const auto row = ds.token_features.row(inst.source_tokens[i]);
      CHECK((inst.target.row(2 * i) - row).cwiseAbs().maxCoeff() == 0.0);
      CHECK((inst.target.row(2 * i + 1) - row).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("durations always sum to the target length and paths are monotone") {
  auto ds = generate_dataset(tiny_dataset_config());
  for (const auto& inst : ds.instances) {
    int total = 0;
    for (int d : inst.durations) total += d;
    CHECK(total == inst.target.rows());
    CHECK(inst.gt_path.front() == 0);
    CHECK(inst.gt_path.back() == static_cast<int>(inst.source_tokens.size()) - 1);
    for (std::size_t t = 1; t < inst.gt_path.size(); ++t)
      CHECK(inst.gt_path[t] >= inst.gt_path[t - 1]);
  }
}

TEST_CASE("dataset generation is deterministic and validates its config") {
  auto a = generate_dataset(tiny_dataset_config());
  auto b = generate_dataset(tiny_dataset_config());
  CHECK((a.token_features - b.token_features).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.instances.size() == b.instances.size());
  for (std::size_t i = 0; i < a.instances.size(); ++i)
    CHECK((a.instances[i].target - b.instances[i].target).cwiseAbs().maxCoeff() == 0.0);

  DatasetConfig bad = tiny_dataset_config();
  bad.n_max = 2;  // below n_min
  CHECK_THROWS_AS(generate_dataset(bad), std::invalid_argument);
  bad = tiny_dataset_config();
  bad.dur_min = 0;
  CHECK_THROWS_AS(generate_dataset(bad), std::invalid_argument);
}

TEST_CASE("clock and dot-product variants differ by exactly the logit_scale scalar") {
  const auto mc = tiny_model_config();
  auto sca = init_model(Variant::ScaNormParallel, mc, 12, 6, 1);
  auto sdpa = init_model(Variant::SdpaParallel, mc, 12, 6, 1);
  CHECK(sca.param_count() == sdpa.param_count() + 1);
  auto sca_ar = init_model(Variant::ScaUnnormAR, mc, 12, 6, 1);
  auto sdpa_ar = init_model(Variant::SdpaAR, mc, 12, 6, 1);
  CHECK(sca_ar.param_count() == sdpa_ar.param_count() + 1);
}

TEST_CASE("compute_metrics on canonical weight matrices") {
  const int T = 9, N = 5;
  std::vector<int> gt = {0, 0, 1, 1, 2, 2, 3, 3, 4};
  MatXd onehot = MatXd::Zero(T, N);
  for (int t = 0; t < T; ++t) onehot(t, gt[static_cast<std::size_t>(t)]) = 1.0;
  auto m = compute_metrics(onehot, gt, 2);
  CHECK(m.diagonality == doctest::Approx(1.0));
  CHECK(m.monotonicity_violations == 0);
  CHECK(m.path_mae == doctest::Approx(0.0));
  CHECK(m.coverage == doctest::Approx(1.0));

  // Uniform weights with an interior path: (2w+1)/N per row.
  const int w = 1, Nu = 7;
  std::vector<int> gt_mid(4, 3);
  MatXd uniform = MatXd::Constant(4, Nu, 1.0 / Nu);
  auto mu = compute_metrics(uniform, gt_mid, w);
  CHECK(mu.diagonality == doctest::Approx(double(2 * w + 1) / Nu).epsilon(1e-12));

  // Reversed one-hot path: every step decreases.
  std::vector<int> gt_any(5, 0);
  MatXd rev = MatXd::Zero(5, 5);
  for (int t = 0; t < 5; ++t) rev(t, 4 - t) = 1.0;
  auto mr = compute_metrics(rev, gt_any, 0);
  CHECK(mr.monotonicity_violations == 5 - 1);
}

TEST_CASE("graph loss equals the plain forward for all four variants") {
  auto ds = generate_dataset(tiny_dataset_config());
  const auto& inst = ds.instances[0];
  for (Variant v : {Variant::ScaNormParallel, Variant::SdpaParallel, Variant::ScaUnnormAR,
                    Variant::SdpaAR}) {
    auto model = init_model(v, tiny_model_config(), ds.config.vocab, ds.config.feat_dim, 5);
    auto plain = forward_plain(model, inst);
    const double plain_l1 = (plain.pred - inst.target).cwiseAbs().mean();

    ad::Tape tape;
    std::vector<ad::Var> params;
    for (MatXd* m : model.matrices()) params.push_back(tape.param(*m));
    if (model.is_sca()) {
      MatXd s(1, 1);
      s(0, 0) = model.logit_scale;
      params.push_back(tape.param(s));
    }
    auto g = build_toy_graph(tape, params, model, inst);
    INFO("variant ", variant_name(v));
    CHECK(std::abs(tape.value(g.loss)(0, 0) - plain_l1) <= 1e-10);
    CHECK((tape.value(g.weights) - plain.weights).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("AR prefix property end to end: stepwise equals teacher-forced forward") {
  auto ds = generate_dataset(tiny_dataset_config());
  for (Variant v : {Variant::ScaUnnormAR, Variant::SdpaAR}) {
    auto model = init_model(v, tiny_model_config(), ds.config.vocab, ds.config.feat_dim, 7);
    const auto& inst = ds.instances[1];
    auto full = forward_plain(model, inst);
    auto step = decode_ar_stepwise(model, inst);
    INFO("variant ", variant_name(v));
    CHECK((full.weights - step.weights).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((full.pred - step.pred).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("causal isolation: future teacher-forcing inputs cannot reach earlier rows") {
  auto ds = generate_dataset(tiny_dataset_config());
  auto model = init_model(Variant::ScaUnnormAR, tiny_model_config(), ds.config.vocab,
                          ds.config.feat_dim, 9);
  AlignmentInstance inst = ds.instances[2];
  auto base = forward_plain(model, inst);
  const Eigen::Index T = inst.target.rows();
  AlignmentInstance poked = inst;
  poked.target.row(T - 2).setConstant(1e3);  // reaches only decoder input row T-1
  auto poked_fw = forward_plain(model, poked);
  CHECK((base.weights.topRows(T - 1) - poked_fw.weights.topRows(T - 1)).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK((base.weights.row(T - 1) - poked_fw.weights.row(T - 1)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("toy losses pass gradient certification on a small instance") {
  DatasetConfig dc = tiny_dataset_config();
  dc.n_min = 3;
  dc.n_max = 3;
  dc.dur_min = 2;
  dc.dur_max = 2;
  dc.n_instances = 2;
  auto ds = generate_dataset(dc);
  ModelConfig mc;
  mc.d_model = 6;
  mc.head_dim = 2;
  for (Variant v : {Variant::ScaNormParallel, Variant::ScaUnnormAR}) {
    auto model = init_model(v, mc, dc.vocab, dc.feat_dim, 11);
    std::vector<MatXd> params;
    for (const MatXd* m : std::as_const(model).matrices()) params.push_back(*m);
    MatXd s(1, 1);
    s(0, 0) = 1.2;
    params.push_back(s);
    auto build = [&](ad::Tape& t, const std::vector<ad::Var>& p) {
      return build_toy_graph(t, p, model, ds.instances[0]).loss;
    };
    auto rep = ad::gradcheck(build, params, 1e-5, 1e-4);
    INFO("variant ", variant_name(v), " max rel err ", rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("short training runs reduce the loss deterministically") {
  DatasetConfig dc = tiny_dataset_config();
  dc.n_instances = 60;
  auto ds = generate_dataset(dc);
  TrainConfig tc;
  tc.steps = 120;
  tc.batch_size = 8;
  tc.lr = 3e-4;
  tc.log_every = 40;
  tc.seed = 13;
  auto res = train(Variant::ScaNormParallel, ds, tiny_model_config(), tc);
  CHECK(res.final_l1 < res.initial_l1);
  CHECK(res.log.size() >= 3);
  for (const auto& row : res.log) CHECK(std::isfinite(row.grad_norm));

  auto res2 = train(Variant::ScaNormParallel, ds, tiny_model_config(), tc);
  CHECK(res2.final_l1 == res.final_l1);  // bitwise determinism
  CHECK(res2.initial_l1 == res.initial_l1);
}

TEST_CASE("training aborts with a diagnostic on non-finite data") {
  DatasetConfig dc = tiny_dataset_config();
  dc.n_instances = 8;
  auto ds = generate_dataset(dc);
  ds.instances[0].target(0, 0) = std::numeric_limits<double>::infinity();
  TrainConfig tc;
  tc.steps = 10;
  tc.batch_size = 8;
  CHECK_THROWS_AS(train(Variant::ScaNormParallel, ds, tiny_model_config(), tc),
                  std::runtime_error);
}

TEST_CASE("length_sweep runs on a parallel model and rejects AR models") {
  auto ds = generate_dataset(tiny_dataset_config());
  auto model = init_model(Variant::ScaNormParallel, tiny_model_config(), ds.config.vocab,
                          ds.config.feat_dim, 15);
  auto rows = length_sweep(model, ds, {1.5, 3.0, 6.0}, 2);
  CHECK(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.coverage >= 0.0);
    CHECK(r.coverage <= 1.0);
    CHECK(r.diagonality >= 0.0);
    CHECK(std::isfinite(r.l1));
  }
  auto ar = init_model(Variant::ScaUnnormAR, tiny_model_config(), ds.config.vocab,
                       ds.config.feat_dim, 15);
  CHECK_THROWS_AS(length_sweep(ar, ds, {3.0}, 2), std::invalid_argument);
  CHECK_THROWS_AS(length_sweep(model, ds, {-1.0}, 2), std::invalid_argument);
}

TEST_CASE("free-running AR decode produces finite monotone-ish alignments") {
  auto ds = generate_dataset(tiny_dataset_config());
  auto model = init_model(Variant::ScaUnnormAR, tiny_model_config(), ds.config.vocab,
                          ds.config.feat_dim, 17);
  const auto& inst = ds.instances[0];
  auto out = decode_ar_free(model, inst.source_tokens, inst.target.rows());
  CHECK(out.pred.allFinite());
  for (Eigen::Index i = 0; i < out.weights.rows(); ++i)
    CHECK(out.weights.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
}
