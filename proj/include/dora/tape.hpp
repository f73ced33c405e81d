// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dora/matrix.hpp"

namespace dora {

enum class LossKind { Mse, SoftmaxXent };

// Grads keyed by leaf name.
using GradMap = std::map<std::string, Matrix>;

// Eager reverse-mode tape over whole matrices. Build ops forward (values are
// computed immediately with the tensor kernels), then backward(loss) sweeps
// the tape once and returns gradients for every named leaf.
class Tape {
 public:
  using NodeId = int;

  enum class Op {
    Leaf,             // named parameter or unnamed constant
    Matmul,           // a(d x m) * b(m x n)
    Add,              // same shape
    Scale,            // scalar() * a
    Hadamard,         // same shape
    Relu,             // max(0, a)
    Transpose,        // a^T
    RowBroadcastMul,  // v(1 x k) scales columns of a(d x k)
    RowBroadcastDiv,  // columns of a(d x k) divided by v(1 x k)
    ColBroadcastAdd,  // b(d x 1) added to every column of a(d x n)
    ColBroadcastMul,  // b(d x 1) scales rows of a(d x n)
    ColumnNormalize,  // each column divided by its norm; scalar() is eps
    ColumnNorms,      // 1 x k row of column norms; scalar() is eps
    SoftmaxCols,      // softmax over each column
    Mse,              // mean squared error over all entries, 1 x 1
    SoftmaxXent,      // mean cross-entropy of column softmax vs one-hot, 1 x 1
    Detach,           // identity value, zero gradient flow
  };

  struct Node {
    Op op;
    NodeId a = -1;
    NodeId b = -1;
    double scalar = 0.0;
    Matrix value;
    std::string name;  // nonempty only for named leaves
  };

  // Named trainable leaf. Duplicate names are an error.
  NodeId leaf(const std::string& name, Matrix value);
  // Unnamed leaf; receives no entry in the gradient map.
  NodeId constant(Matrix value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  NodeId transpose(NodeId a);
  NodeId row_broadcast_mul(NodeId v, NodeId a);
  NodeId row_broadcast_div(NodeId a, NodeId v);
  NodeId col_broadcast_add(NodeId a, NodeId b);
  NodeId col_broadcast_mul(NodeId a, NodeId b);
  // Throws DegenerateColumnError at build time when any column norm <= eps.
  NodeId column_normalize(NodeId a, double eps = kDefaultEps);
  NodeId column_norms(NodeId a, double eps = kDefaultEps);
  NodeId softmax_cols(NodeId a);
  NodeId mse(NodeId pred, NodeId target);
  NodeId softmax_xent(NodeId logits, NodeId labels);
  NodeId detach(NodeId a);

  const Matrix& value(NodeId id) const { return nodes_[id].value; }
  const Node& node(NodeId id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }
  const std::map<std::string, NodeId>& leaves() const { return leaves_; }

  // Reverse sweep from a scalar (1x1) loss node. Returns gradients for every
  // named leaf, zero matrices included. Identical tape => bit-identical map.
  GradMap backward(NodeId loss) const;

 private:
  NodeId push(Node n);
  void check_id(NodeId id, const char* op) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> leaves_;
};

// ----- numerical gradient checking -----

// Builds a fresh tape over the given parameter values and returns the loss
// node. Must name leaves after the map keys for the comparison to see them.
using TapeBuilder = std::function<Tape::NodeId(Tape&, const std::map<std::string, Matrix>&)>;

struct GradCheckEntry {
  std::string name;
  double max_abs_diff = 0.0;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double h = 0.0;
  double tol = 0.0;
  bool all_pass() const;
};

// Central finite differences against tape gradients. Per parameter scalar the
// step is h * max(1, |theta|); an entry passes when |ad - fd| <= 1e-9 or the
// relative error |ad - fd| / max(|ad|, |fd|) is <= tol.
GradCheckReport grad_check(const TapeBuilder& build,
                           const std::map<std::string, Matrix>& params,
                           double h = 1e-6, double tol = 1e-6);

// Relative error with an absolute floor: 0 when |a-b| <= floor.
double rel_err(double a, double b, double floor = 1e-9);

}  // namespace dora
