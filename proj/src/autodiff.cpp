#include "clockattn/autodiff.hpp"

#include <cmath>
#include <stdexcept>

#include "clockattn/clocks.hpp"
#include "clockattn/tensor_core.hpp"

namespace clockattn::ad {

Var Tape::push(MatXd value, bool tracked, std::function<void(Tape&)> pull) {
  Node n;
  n.value = std::move(value);
  n.tracked = tracked;
  if (tracked) n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accum(int id, const MatXd& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.tracked) return;
  if (n.grad.size() == 0) n.grad = MatXd::Zero(n.value.rows(), n.value.cols());
  n.grad += g;
}

const MatXd& Tape::value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

const MatXd& Tape::grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

MatXd Tape::grad_or_zero(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) return MatXd::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::param(const MatXd& value) { return push(value, true, nullptr); }

Var Tape::constant(const MatXd& value) { return push(value, false, nullptr); }

// Each op captures its own output id through `out` so the pull closure can
// read the accumulated output gradient.
#define CLOCKATTN_DEFINE_PULL(...)                                     \
  Var out = push(std::move(v), tr, nullptr);                           \
  if (tr)                                                              \
    nodes_[static_cast<std::size_t>(out.id)].pull = [=](Tape& t) {     \
      const MatXd& g = t.grd(out.id);                                  \
      __VA_ARGS__                                                      \
    };                                                                 \
  return out;

Var Tape::add(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  const bool tr = tracked(a) || tracked(b);
  MatXd v = val(ia) + val(ib);
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, g);
    t.accum(ib, g);
  })
}

Var Tape::sub(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  const bool tr = tracked(a) || tracked(b);
  MatXd v = val(ia) - val(ib);
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, g);
    t.accum(ib, (-g).eval());
  })
}

Var Tape::hadamard(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  const bool tr = tracked(a) || tracked(b);
  MatXd v = val(ia).cwiseProduct(val(ib));
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, g.cwiseProduct(t.val(ib)));
    t.accum(ib, g.cwiseProduct(t.val(ia)));
  })
}

Var Tape::div(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  const bool tr = tracked(a) || tracked(b);
  MatXd v = val(ia).cwiseQuotient(val(ib));
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, g.cwiseQuotient(t.val(ib)));
    t.accum(ib, (-g.cwiseProduct(t.val(out.id)).cwiseQuotient(t.val(ib))).eval());
  })
}

Var Tape::add_scalar(Var a, double c) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).array() + c;
  CLOCKATTN_DEFINE_PULL({ t.accum(ia, g); })
}

Var Tape::mul_scalar(Var a, double c) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia) * c;
  CLOCKATTN_DEFINE_PULL({ t.accum(ia, (g * c).eval()); })
}

Var Tape::cmul(Var a, const MatXd& m) {
  const int ia = a.id;
  const bool tr = tracked(a);
  const MatXd mc = m;
  MatXd v = val(ia).cwiseProduct(mc);
  CLOCKATTN_DEFINE_PULL({ t.accum(ia, g.cwiseProduct(mc)); })
}

Var Tape::square(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).cwiseAbs2();
  CLOCKATTN_DEFINE_PULL({ t.accum(ia, (2.0 * g.cwiseProduct(t.val(ia))).eval()); })
}

Var Tape::sqrt_elem(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).cwiseSqrt();
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, (0.5 * g.cwiseQuotient(t.val(out.id))).eval());
  })
}

Var Tape::phi_elem(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).unaryExpr([](double x) { return phi(x); });
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, g.cwiseProduct(t.val(ia).unaryExpr([](double x) { return phi_grad(x); })));
  })
}

Var Tape::mul_scalar_var(Var a, Var s) {
  if (value(s).rows() != 1 || value(s).cols() != 1)
    throw std::invalid_argument("mul_scalar_var: scale must be 1x1");
  const int ia = a.id, is = s.id;
  const bool tr = tracked(a) || tracked(s);
  MatXd v = val(ia) * val(is)(0, 0);
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, (g * t.val(is)(0, 0)).eval());
    MatXd gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.val(ia)).sum();
    t.accum(is, gs);
  })
}

Var Tape::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows())
    throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id, ib = b.id;
  const bool tr = tracked(a) || tracked(b);
  MatXd v = val(ia) * val(ib);
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, (g * t.val(ib).transpose()).eval());
    t.accum(ib, (t.val(ia).transpose() * g).eval());
  })
}

Var Tape::transpose(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).transpose();
  CLOCKATTN_DEFINE_PULL({ t.accum(ia, g.transpose().eval()); })
}

Var Tape::rowsum(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).rowwise().sum();
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, (g * MatXd::Ones(1, t.val(ia).cols())).eval());
  })
}

Var Tape::colsum(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).colwise().sum();
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, (MatXd::Ones(t.val(ia).rows(), 1) * g).eval());
  })
}

Var Tape::sum_all(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v(1, 1);
  v(0, 0) = val(ia).sum();
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, MatXd::Constant(t.val(ia).rows(), t.val(ia).cols(), g(0, 0)));
  })
}

Var Tape::broadcast_row(Var r, Eigen::Index rows) {
  if (value(r).rows() != 1) throw std::invalid_argument("broadcast_row: expected row vector");
  const int ir = r.id;
  const bool tr = tracked(r);
  MatXd v = val(ir).replicate(rows, 1);
  CLOCKATTN_DEFINE_PULL({ t.accum(ir, g.colwise().sum().eval()); })
}

Var Tape::broadcast_col(Var c, Eigen::Index cols) {
  if (value(c).cols() != 1) throw std::invalid_argument("broadcast_col: expected column vector");
  const int ic = c.id;
  const bool tr = tracked(c);
  MatXd v = val(ic).replicate(1, cols);
  CLOCKATTN_DEFINE_PULL({ t.accum(ic, g.rowwise().sum().eval()); })
}

Var Tape::add_rowvec(Var a, Var r) {
  if (value(r).rows() != 1 || value(r).cols() != value(a).cols())
    throw std::invalid_argument("add_rowvec: shape mismatch");
  const int ia = a.id, ir = r.id;
  const bool tr = tracked(a) || tracked(r);
  MatXd v = val(ia).rowwise() + val(ir).row(0);
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, g);
    t.accum(ir, g.colwise().sum().eval());
  })
}

Var Tape::add_colvec(Var a, Var c) {
  if (value(c).cols() != 1 || value(c).rows() != value(a).rows())
    throw std::invalid_argument("add_colvec: shape mismatch");
  const int ia = a.id, ic = c.id;
  const bool tr = tracked(a) || tracked(c);
  MatXd v = val(ia).colwise() + val(ic).col(0);
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, g);
    t.accum(ic, g.rowwise().sum().eval());
  })
}

Var Tape::div_rowvec(Var a, Var r) {
  if (value(r).rows() != 1 || value(r).cols() != value(a).cols())
    throw std::invalid_argument("div_rowvec: shape mismatch");
  const int ia = a.id, ir = r.id;
  const bool tr = tracked(a) || tracked(r);
  MatXd v = val(ia).array().rowwise() / val(ir).row(0).array();
  CLOCKATTN_DEFINE_PULL({
    t.accum(ia, (g.array().rowwise() / t.val(ir).row(0).array()).matrix().eval());
    MatXd gr = -(g.cwiseProduct(t.val(out.id))).colwise().sum();
    gr.array() /= t.val(ir).row(0).array();
    t.accum(ir, gr);
  })
}

Var Tape::row_block(Var a, Eigen::Index r0, Eigen::Index n) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).middleRows(r0, n);
  CLOCKATTN_DEFINE_PULL({
    MatXd ga = MatXd::Zero(t.val(ia).rows(), t.val(ia).cols());
    ga.middleRows(r0, n) = g;
    t.accum(ia, ga);
  })
}

Var Tape::col_block(Var a, Eigen::Index c0, Eigen::Index n) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = val(ia).middleCols(c0, n);
  CLOCKATTN_DEFINE_PULL({
    MatXd ga = MatXd::Zero(t.val(ia).rows(), t.val(ia).cols());
    ga.middleCols(c0, n) = g;
    t.accum(ia, ga);
  })
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Eigen::Index rows = 0;
  const Eigen::Index cols = value(parts[0]).cols();
  bool tr = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (Var p : parts) {
    if (value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += value(p).rows();
    heights.push_back(value(p).rows());
    ids.push_back(p.id);
    tr = tr || tracked(p);
  }
  MatXd v(rows, cols);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    v.middleRows(at, heights[i]) = val(ids[i]);
    at += heights[i];
  }
  CLOCKATTN_DEFINE_PULL({
    Eigen::Index row_at = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      t.accum(ids[i], g.middleRows(row_at, heights[i]).eval());
      row_at += heights[i];
    }
  })
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index cols = 0;
  const Eigen::Index rows = value(parts[0]).rows();
  bool tr = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += value(p).cols();
    widths.push_back(value(p).cols());
    ids.push_back(p.id);
    tr = tr || tracked(p);
  }
  MatXd v(rows, cols);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    v.middleCols(at, widths[i]) = val(ids[i]);
    at += widths[i];
  }
  CLOCKATTN_DEFINE_PULL({
    Eigen::Index col_at = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      t.accum(ids[i], g.middleCols(col_at, widths[i]).eval());
      col_at += widths[i];
    }
  })
}

Var Tape::gather_rows(Var table, const std::vector<Eigen::Index>& ids_in) {
  const int it = table.id;
  const bool tr = tracked(table);
  const std::vector<Eigen::Index> ids = ids_in;
  MatXd v(static_cast<Eigen::Index>(ids.size()), val(it).cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= val(it).rows())
      throw std::invalid_argument("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = val(it).row(ids[i]);
  }
  CLOCKATTN_DEFINE_PULL({
    MatXd gt = MatXd::Zero(t.val(it).rows(), t.val(it).cols());
    for (std::size_t i = 0; i < ids.size(); ++i)
      gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accum(it, gt);
  })
}

Var Tape::mid_edge_avg(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  const Eigen::Index L = val(ia).rows();
  if (L < 1) throw std::invalid_argument("mid_edge_avg: empty input");
  MatXd v = 0.5 * (val(ia).topRows(L - 1) + val(ia).bottomRows(L - 1));
  CLOCKATTN_DEFINE_PULL({
    MatXd ga = MatXd::Zero(L, t.val(ia).cols());
    ga.topRows(L - 1) += 0.5 * g;
    ga.bottomRows(L - 1) += 0.5 * g;
    t.accum(ia, ga);
  })
}

Var Tape::cumsum_leftpad(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  MatXd v = clockattn::cumsum_leftpad(val(ia));
  CLOCKATTN_DEFINE_PULL({
    // dL/dg_e = sum of output grads at rows > e.
    const Eigen::Index E = t.val(ia).rows(), d = t.val(ia).cols();
    MatXd ga(E, d);
    MatXd suffix = MatXd::Zero(1, d);
    for (Eigen::Index e = E - 1; e >= 0; --e) {
      suffix += g.row(e + 1);
      ga.row(e) = suffix;
    }
    t.accum(ia, ga);
  })
}

Var Tape::cumsum_rows(Var a) {
  const int ia = a.id;
  const bool tr = tracked(a);
  const Eigen::Index L = val(ia).rows(), d = val(ia).cols();
  MatXd v(L, d);
  MatXd run = MatXd::Zero(1, d);
  for (Eigen::Index i = 0; i < L; ++i) {
    run += val(ia).row(i);
    v.row(i) = run;
  }
  CLOCKATTN_DEFINE_PULL({
    MatXd ga(L, d);
    MatXd suffix = MatXd::Zero(1, d);
    for (Eigen::Index i = L - 1; i >= 0; --i) {
      suffix += g.row(i);
      ga.row(i) = suffix;
    }
    t.accum(ia, ga);
  })
}

Var Tape::masked_softmax(Var logits, const AllowMask& allow) {
  const int il = logits.id;
  const bool tr = tracked(logits);
  auto sm = clockattn::masked_softmax(ScoreMatrix(val(il), allow));
  const AllowMask allow_c = allow;
  MatXd v = std::move(sm.weights);
  CLOCKATTN_DEFINE_PULL({
    const MatXd& w = t.val(out.id);
    MatXd gl = MatXd::Zero(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      double dot = 0;
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        if (allow_c(i, j)) dot += g(i, j) * w(i, j);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        if (allow_c(i, j)) gl(i, j) = w(i, j) * (g(i, j) - dot);
    }
    t.accum(il, gl);
  })
}

Var Tape::l1_loss(Var pred, const MatXd& target) {
  if (value(pred).rows() != target.rows() || value(pred).cols() != target.cols())
    throw std::invalid_argument("l1_loss: shape mismatch");
  const int ip = pred.id;
  const bool tr = tracked(pred);
  const MatXd tgt = target;
  const double n = static_cast<double>(target.size());
  MatXd v(1, 1);
  v(0, 0) = (val(ip) - tgt).cwiseAbs().sum() / n;
  CLOCKATTN_DEFINE_PULL({
    // Subgradient at 0 defined as 0.
    MatXd sg = (t.val(ip) - tgt).unaryExpr([](double x) {
      return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
    });
    t.accum(ip, (g(0, 0) / n * sg).eval());
  })
}

#undef CLOCKATTN_DEFINE_PULL

void Tape::backward(Var loss) {
  if (!loss.valid() || loss.tape != this) throw std::invalid_argument("backward: foreign node");
  if (value(loss).rows() != 1 || value(loss).cols() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  accum(loss.id, MatXd::Ones(1, 1));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.tracked || !n.pull || n.grad.size() == 0) continue;
    n.pull(*this);
  }
}

GradCheckReport gradcheck(const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                          const std::vector<MatXd>& params, double h, double tol,
                          const std::vector<std::string>& names) {
  auto eval = [&](const std::vector<MatXd>& p) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(p.size());
    for (const auto& m : p) vars.push_back(t.param(m));
    Var loss = build(t, vars);
    return t.value(loss)(0, 0);
  };

  // Analytic gradients.
  Tape t;
  std::vector<Var> vars;
  for (const auto& m : params) vars.push_back(t.param(m));
  Var loss = build(t, vars);
  t.backward(loss);

  GradCheckReport rep;
  std::vector<MatXd> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = p < names.size() ? names[p] : ("param" + std::to_string(p));
    MatXd analytic = t.grad_or_zero(vars[p]);
    for (Eigen::Index i = 0; i < params[p].rows(); ++i)
      for (Eigen::Index j = 0; j < params[p].cols(); ++j) {
        const double keep = work[p](i, j);
        work[p](i, j) = keep + h;
        const double fp = eval(work);
        work[p](i, j) = keep - h;
        const double fm = eval(work);
        work[p](i, j) = keep;
        const double numeric = (fp - fm) / (2 * h);
        const double a = analytic(i, j);
        if (!std::isfinite(a) || !std::isfinite(numeric)) entry.finite = false;
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        entry.max_rel_err = std::max(entry.max_rel_err, rel);
      }
    rep.max_rel_err = std::max(rep.max_rel_err, entry.max_rel_err);
    if (!entry.finite) rep.max_rel_err = std::numeric_limits<double>::infinity();
    rep.entries.push_back(std::move(entry));
  }
  rep.pass = std::isfinite(rep.max_rel_err) && rep.max_rel_err <= tol;
  for (const auto& e : rep.entries) rep.pass = rep.pass && e.finite;
  return rep;
}

}  // namespace clockattn::ad
