// Reverse-mode differentiation over exactly the operation set the attention
// forwards and the toy model need. A Tape owns the nodes; Var is a cheap
// handle. Ops append nodes, backward() walks them in reverse creation order
// (creation order is already topological).
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "clockattn/types.hpp"

namespace clockattn::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  // Leaves.
  Var param(const MatXd& value);     // tracked, gradient accumulated
  Var constant(const MatXd& value);  // untracked

  // Elementwise / scalar.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var div(Var a, Var b);
  Var add_scalar(Var a, double c);
  Var mul_scalar(Var a, double c);
  Var cmul(Var a, const MatXd& m);  // elementwise by a constant matrix
  Var square(Var a);
  Var sqrt_elem(Var a);
  Var phi_elem(Var a);
  Var mul_scalar_var(Var a, Var s);  // s is 1x1

  // Linear algebra and reshaping.
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var rowsum(Var a);  // [L x d] -> [L x 1]
  Var colsum(Var a);  // [L x d] -> [1 x d]
  Var sum_all(Var a); // -> [1 x 1]
  Var broadcast_row(Var r, Eigen::Index rows);  // [1 x d] -> [rows x d]
  Var broadcast_col(Var c, Eigen::Index cols);  // [L x 1] -> [L x cols]
  Var add_rowvec(Var a, Var r);
  Var add_colvec(Var a, Var c);
  Var div_rowvec(Var a, Var r);
  Var row_block(Var a, Eigen::Index r0, Eigen::Index n);
  Var col_block(Var a, Eigen::Index c0, Eigen::Index n);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_rows(Var table, const std::vector<Eigen::Index>& ids);

  // Sequence / attention primitives.
  Var mid_edge_avg(Var a);      // [L x d] -> [(L-1) x d]
  Var cumsum_leftpad(Var a);    // [(L-1) x d] -> [L x d], row 0 = 0
  Var cumsum_rows(Var a);       // running sums including the current row
  Var masked_softmax(Var logits, const AllowMask& allow);
  Var l1_loss(Var pred, const MatXd& target);  // mean |pred - target|, 1x1

  // Runs the reverse sweep from a scalar (1x1) loss node.
  void backward(Var loss);

  const MatXd& value(Var v) const;
  const MatXd& grad(Var v) const;  // zero-sized if never touched
  MatXd grad_or_zero(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    MatXd value;
    MatXd grad;
    bool tracked = false;  // gradient needed for this node or an ancestor
    std::function<void(Tape&)> pull;
  };

  Var push(MatXd value, bool tracked, std::function<void(Tape&)> pull);
  void accum(int id, const MatXd& g);
  bool tracked(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].tracked; }
  const MatXd& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  MatXd& grd(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

  std::vector<Node> nodes_;
};

/// Per-parameter report of analytic vs central-difference gradients.
struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0;
  bool pass = false;
};

/// Certifies the gradient of a scalar-valued function of a parameter list.
/// build must construct the graph from scratch on the given tape; rel error
/// per entry is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport gradcheck(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<MatXd>& params, double h = 1e-5, double tol = 1e-4,
    const std::vector<std::string>& names = {});

}  // namespace clockattn::ad
