// SPDX-License-Identifier: Apache-2.0
#include "dora/tape.hpp"

#include <algorithm>
#include <cmath>

namespace dora {

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::check_id(NodeId id, const char* op) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ShapeError(std::string(op) + ": invalid node id " + std::to_string(id));
  }
}

Tape::NodeId Tape::leaf(const std::string& name, Matrix value) {
  if (name.empty()) throw ShapeError("leaf: name must be nonempty");
  if (leaves_.count(name)) throw ShapeError("leaf: duplicate name '" + name + "'");
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  n.name = name;
  const NodeId id = push(std::move(n));
  leaves_[name] = id;
  return id;
}

Tape::NodeId Tape::constant(Matrix value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  check_id(a, "matmul");
  check_id(b, "matmul");
  Node n;
  n.op = Op::Matmul;
  n.a = a;
  n.b = b;
  n.value = dora::matmul(nodes_[a].value, nodes_[b].value);
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  check_id(a, "add");
  check_id(b, "add");
  Node n;
  n.op = Op::Add;
  n.a = a;
  n.b = b;
  n.value = dora::add(nodes_[a].value, nodes_[b].value);
  return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double c) {
  check_id(a, "scale");
  Node n;
  n.op = Op::Scale;
  n.a = a;
  n.scalar = c;
  n.value = dora::scale(nodes_[a].value, c);
  return push(std::move(n));
}

Tape::NodeId Tape::hadamard(NodeId a, NodeId b) {
  check_id(a, "hadamard");
  check_id(b, "hadamard");
  Node n;
  n.op = Op::Hadamard;
  n.a = a;
  n.b = b;
  n.value = dora::hadamard(nodes_[a].value, nodes_[b].value);
  return push(std::move(n));
}

Tape::NodeId Tape::relu(NodeId a) {
  check_id(a, "relu");
  Node n;
  n.op = Op::Relu;
  n.a = a;
  n.value = nodes_[a].value;
  for (double& v : n.value.data()) v = std::max(0.0, v);
  return push(std::move(n));
}

Tape::NodeId Tape::transpose(NodeId a) {
  check_id(a, "transpose");
  Node n;
  n.op = Op::Transpose;
  n.a = a;
  n.value = dora::transpose(nodes_[a].value);
  return push(std::move(n));
}

Tape::NodeId Tape::row_broadcast_mul(NodeId v, NodeId a) {
  check_id(v, "row_broadcast_mul");
  check_id(a, "row_broadcast_mul");
  const Matrix& vv = nodes_[v].value;
  const Matrix& va = nodes_[a].value;
  if (vv.rows() != 1 || vv.cols() != va.cols()) {
    throw ShapeError("row_broadcast_mul: row " + vv.shape_str() + " vs matrix " + va.shape_str());
  }
  Node n;
  n.op = Op::RowBroadcastMul;
  n.a = v;
  n.b = a;
  n.value = va;
  for (std::size_t i = 0; i < va.rows(); ++i) {
    for (std::size_t j = 0; j < va.cols(); ++j) n.value(i, j) = vv(0, j) * va(i, j);
  }
  return push(std::move(n));
}

Tape::NodeId Tape::row_broadcast_div(NodeId a, NodeId v) {
  check_id(a, "row_broadcast_div");
  check_id(v, "row_broadcast_div");
  const Matrix& va = nodes_[a].value;
  const Matrix& vv = nodes_[v].value;
  if (vv.rows() != 1 || vv.cols() != va.cols()) {
    throw ShapeError("row_broadcast_div: matrix " + va.shape_str() + " vs row " + vv.shape_str());
  }
  for (std::size_t j = 0; j < vv.cols(); ++j) {
    if (vv(0, j) == 0.0) {
      throw DegenerateColumnError("row_broadcast_div: zero divisor at column " + std::to_string(j));
    }
  }
  Node n;
  n.op = Op::RowBroadcastDiv;
  n.a = a;
  n.b = v;
  n.value = va;
  for (std::size_t i = 0; i < va.rows(); ++i) {
    for (std::size_t j = 0; j < va.cols(); ++j) n.value(i, j) = va(i, j) / vv(0, j);
  }
  return push(std::move(n));
}

Tape::NodeId Tape::col_broadcast_add(NodeId a, NodeId b) {
  check_id(a, "col_broadcast_add");
  check_id(b, "col_broadcast_add");
  const Matrix& va = nodes_[a].value;
  const Matrix& vb = nodes_[b].value;
  if (vb.cols() != 1 || vb.rows() != va.rows()) {
    throw ShapeError("col_broadcast_add: matrix " + va.shape_str() + " vs column " + vb.shape_str());
  }
  Node n;
  n.op = Op::ColBroadcastAdd;
  n.a = a;
  n.b = b;
  n.value = va;
  for (std::size_t i = 0; i < va.rows(); ++i) {
    for (std::size_t j = 0; j < va.cols(); ++j) n.value(i, j) = va(i, j) + vb(i, 0);
  }
  return push(std::move(n));
}

Tape::NodeId Tape::col_broadcast_mul(NodeId a, NodeId b) {
  check_id(a, "col_broadcast_mul");
  check_id(b, "col_broadcast_mul");
  const Matrix& va = nodes_[a].value;
  const Matrix& vb = nodes_[b].value;
  if (vb.cols() != 1 || vb.rows() != va.rows()) {
    throw ShapeError("col_broadcast_mul: matrix " + va.shape_str() + " vs column " + vb.shape_str());
  }
  Node n;
  n.op = Op::ColBroadcastMul;
  n.a = a;
  n.b = b;
  n.value = va;
  for (std::size_t i = 0; i < va.rows(); ++i) {
    for (std::size_t j = 0; j < va.cols(); ++j) n.value(i, j) = va(i, j) * vb(i, 0);
  }
  return push(std::move(n));
}

Tape::NodeId Tape::column_normalize(NodeId a, double eps) {
  check_id(a, "column_normalize");
  const Matrix& va = nodes_[a].value;
  const RowVector norms = dora::column_norms(va);
  for (std::size_t j = 0; j < norms.cols(); ++j) {
    if (norms[j] <= eps) {
      throw DegenerateColumnError("column_normalize: column " + std::to_string(j) +
                                  " has norm " + std::to_string(norms[j]) + " <= eps");
    }
  }
  Node n;
  n.op = Op::ColumnNormalize;
  n.a = a;
  n.scalar = eps;
  n.value = va;
  for (std::size_t j = 0; j < va.cols(); ++j) {
    for (std::size_t i = 0; i < va.rows(); ++i) n.value(i, j) = va(i, j) / norms[j];
  }
  return push(std::move(n));
}

Tape::NodeId Tape::column_norms(NodeId a, double eps) {
  check_id(a, "column_norms");
  const Matrix& va = nodes_[a].value;
  const RowVector norms = dora::column_norms(va);
  for (std::size_t j = 0; j < norms.cols(); ++j) {
    if (norms[j] <= eps) {
      throw DegenerateColumnError("column_norms: column " + std::to_string(j) + " has norm " +
                                  std::to_string(norms[j]) + " <= eps");
    }
  }
  Node n;
  n.op = Op::ColumnNorms;
  n.a = a;
  n.scalar = eps;
  n.value = norms.to_matrix();
  return push(std::move(n));
}

Tape::NodeId Tape::softmax_cols(NodeId a) {
  check_id(a, "softmax_cols");
  Node n;
  n.op = Op::SoftmaxCols;
  n.a = a;
  n.value = softmax_columns(nodes_[a].value);
  return push(std::move(n));
}

Tape::NodeId Tape::mse(NodeId pred, NodeId target) {
  check_id(pred, "mse");
  check_id(target, "mse");
  const Matrix& p = nodes_[pred].value;
  const Matrix& t = nodes_[target].value;
  if (!p.same_shape(t)) {
    throw ShapeError("mse: shape mismatch " + p.shape_str() + " vs " + t.shape_str());
  }
  if (p.size() == 0) throw ShapeError("mse: empty operands");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p.data()[i] - t.data()[i];
    s += d * d;
  }
  Node n;
  n.op = Op::Mse;
  n.a = pred;
  n.b = target;
  n.value = Matrix(1, 1, {s / static_cast<double>(p.size())});
  return push(std::move(n));
}

Tape::NodeId Tape::softmax_xent(NodeId logits, NodeId labels) {
  check_id(logits, "softmax_xent");
  check_id(labels, "softmax_xent");
  const Matrix& x = nodes_[logits].value;
  const Matrix& y = nodes_[labels].value;
  if (!x.same_shape(y)) {
    throw ShapeError("softmax_xent: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
  }
  if (x.cols() == 0 || x.rows() == 0) throw ShapeError("softmax_xent: empty operands");
  const Matrix ls = log_softmax_columns(x);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += y.data()[i] * ls.data()[i];
  Node n;
  n.op = Op::SoftmaxXent;
  n.a = logits;
  n.b = labels;
  n.value = Matrix(1, 1, {-s / static_cast<double>(x.cols())});
  return push(std::move(n));
}

Tape::NodeId Tape::detach(NodeId a) {
  check_id(a, "detach");
  Node n;
  n.op = Op::Detach;
  n.a = a;
  n.value = nodes_[a].value;
  return push(std::move(n));
}

GradMap Tape::backward(NodeId loss) const {
  check_id(loss, "backward");
  const Matrix& lv = nodes_[loss].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + lv.shape_str());
  }

  std::vector<Matrix> g(nodes_.size());
  std::vector<char> reached(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    g[i] = Matrix(nodes_[i].value.rows(), nodes_[i].value.cols());
  }
  g[loss](0, 0) = 1.0;
  reached[loss] = 1;

  for (NodeId id = loss; id >= 0; --id) {
    if (!reached[id]) continue;
    const Node& n = nodes_[id];
    const Matrix& G = g[id];
    auto touch = [&](NodeId p) { reached[p] = 1; };

    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Matmul: {
        const Matrix& A = nodes_[n.a].value;
        const Matrix& B = nodes_[n.b].value;
        g[n.a] = dora::add(g[n.a], dora::matmul(G, dora::transpose(B)));
        g[n.b] = dora::add(g[n.b], dora::matmul(dora::transpose(A), G));
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::Add:
        g[n.a] = dora::add(g[n.a], G);
        g[n.b] = dora::add(g[n.b], G);
        touch(n.a);
        touch(n.b);
        break;
      case Op::Scale:
        g[n.a] = dora::add(g[n.a], dora::scale(G, n.scalar));
        touch(n.a);
        break;
      case Op::Hadamard:
        g[n.a] = dora::add(g[n.a], dora::hadamard(G, nodes_[n.b].value));
        g[n.b] = dora::add(g[n.b], dora::hadamard(G, nodes_[n.a].value));
        touch(n.a);
        touch(n.b);
        break;
      case Op::Relu: {
        const Matrix& A = nodes_[n.a].value;
        Matrix& da = g[n.a];
        for (std::size_t i = 0; i < A.size(); ++i) {
          if (A.data()[i] > 0.0) da.data()[i] += G.data()[i];
        }
        touch(n.a);
        break;
      }
      case Op::Transpose:
        g[n.a] = dora::add(g[n.a], dora::transpose(G));
        touch(n.a);
        break;
      case Op::RowBroadcastMul: {
        const Matrix& V = nodes_[n.a].value;  // 1 x k
        const Matrix& A = nodes_[n.b].value;  // d x k
        Matrix& dv = g[n.a];
        Matrix& da = g[n.b];
        for (std::size_t i = 0; i < A.rows(); ++i) {
          for (std::size_t j = 0; j < A.cols(); ++j) {
            dv(0, j) += G(i, j) * A(i, j);
            da(i, j) += G(i, j) * V(0, j);
          }
        }
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::RowBroadcastDiv: {
        const Matrix& A = nodes_[n.a].value;  // d x k
        const Matrix& V = nodes_[n.b].value;  // 1 x k
        Matrix& da = g[n.a];
        Matrix& dv = g[n.b];
        for (std::size_t i = 0; i < A.rows(); ++i) {
          for (std::size_t j = 0; j < A.cols(); ++j) {
            da(i, j) += G(i, j) / V(0, j);
            dv(0, j) -= G(i, j) * A(i, j) / (V(0, j) * V(0, j));
          }
        }
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::ColBroadcastAdd: {
        Matrix& da = g[n.a];
        Matrix& db = g[n.b];
        for (std::size_t i = 0; i < G.rows(); ++i) {
          for (std::size_t j = 0; j < G.cols(); ++j) {
            da(i, j) += G(i, j);
            db(i, 0) += G(i, j);
          }
        }
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::ColBroadcastMul: {
        const Matrix& A = nodes_[n.a].value;
        const Matrix& B = nodes_[n.b].value;  // d x 1
        Matrix& da = g[n.a];
        Matrix& db = g[n.b];
        for (std::size_t i = 0; i < A.rows(); ++i) {
          for (std::size_t j = 0; j < A.cols(); ++j) {
            da(i, j) += G(i, j) * B(i, 0);
            db(i, 0) += G(i, j) * A(i, j);
          }
        }
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::ColumnNormalize: {
        // d(v/|v|) pullback per column: (g - vhat (vhat . g)) / |v|.
        const Matrix& A = nodes_[n.a].value;
        Matrix& da = g[n.a];
        for (std::size_t j = 0; j < A.cols(); ++j) {
          double nn = 0.0;
          for (std::size_t i = 0; i < A.rows(); ++i) nn += A(i, j) * A(i, j);
          const double nj = std::sqrt(nn);
          double vg = 0.0;
          for (std::size_t i = 0; i < A.rows(); ++i) vg += (A(i, j) / nj) * G(i, j);
          for (std::size_t i = 0; i < A.rows(); ++i) {
            da(i, j) += (G(i, j) - (A(i, j) / nj) * vg) / nj;
          }
        }
        touch(n.a);
        break;
      }
      case Op::ColumnNorms: {
        // d|v|/dv = vhat.
        const Matrix& A = nodes_[n.a].value;
        Matrix& da = g[n.a];
        for (std::size_t j = 0; j < A.cols(); ++j) {
          const double nj = n.value(0, j);
          for (std::size_t i = 0; i < A.rows(); ++i) {
            da(i, j) += G(0, j) * A(i, j) / nj;
          }
        }
        touch(n.a);
        break;
      }
      case Op::SoftmaxCols: {
        const Matrix& P = n.value;
        Matrix& da = g[n.a];
        for (std::size_t j = 0; j < P.cols(); ++j) {
          double pg = 0.0;
          for (std::size_t i = 0; i < P.rows(); ++i) pg += P(i, j) * G(i, j);
          for (std::size_t i = 0; i < P.rows(); ++i) da(i, j) += P(i, j) * (G(i, j) - pg);
        }
        touch(n.a);
        break;
      }
      case Op::Mse: {
        const Matrix& P = nodes_[n.a].value;
        const Matrix& T = nodes_[n.b].value;
        const double c = 2.0 * G(0, 0) / static_cast<double>(P.size());
        Matrix& dp = g[n.a];
        Matrix& dt = g[n.b];
        for (std::size_t i = 0; i < P.size(); ++i) {
          const double d = c * (P.data()[i] - T.data()[i]);
          dp.data()[i] += d;
          dt.data()[i] -= d;
        }
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::SoftmaxXent: {
        const Matrix& X = nodes_[n.a].value;
        const Matrix& Y = nodes_[n.b].value;
        const Matrix P = softmax_columns(X);
        const Matrix LS = log_softmax_columns(X);
        const double c = G(0, 0) / static_cast<double>(X.cols());
        Matrix& dx = g[n.a];
        Matrix& dy = g[n.b];
        for (std::size_t j = 0; j < X.cols(); ++j) {
          double ysum = 0.0;
          for (std::size_t i = 0; i < X.rows(); ++i) ysum += Y(i, j);
          for (std::size_t i = 0; i < X.rows(); ++i) {
            dx(i, j) += c * (P(i, j) * ysum - Y(i, j));
            dy(i, j) -= c * LS(i, j);
          }
        }
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::Detach:
        break;
    }
  }

  GradMap out;
  for (const auto& [name, id] : leaves_) out[name] = g[id];
  return out;
}

// ----- numerical gradient checking -----

bool GradCheckReport::all_pass() const {
  return std::all_of(entries.begin(), entries.end(),
                     [](const GradCheckEntry& e) { return e.pass; });
}

double rel_err(double a, double b, double floor) {
  const double d = std::abs(a - b);
  if (d <= floor) return 0.0;
  return d / std::max(std::abs(a), std::abs(b));
}

GradCheckReport grad_check(const TapeBuilder& build,
                           const std::map<std::string, Matrix>& params, double h, double tol) {
  GradCheckReport rep;
  rep.h = h;
  rep.tol = tol;

  Tape t;
  const Tape::NodeId loss = build(t, params);
  const GradMap analytic = t.backward(loss);

  const auto eval = [&](const std::map<std::string, Matrix>& p) {
    Tape tt;
    const Tape::NodeId l = build(tt, p);
    return tt.value(l)(0, 0);
  };

  std::map<std::string, Matrix> work = params;
  for (const auto& [name, value] : params) {
    GradCheckEntry e;
    e.name = name;
    const auto it = analytic.find(name);
    const Matrix grad_ad =
        it != analytic.end() ? it->second : Matrix(value.rows(), value.cols());
    Matrix& wv = work.at(name);
    for (std::size_t idx = 0; idx < wv.size(); ++idx) {
      const double orig = wv.data()[idx];
      const double step = h * std::max(1.0, std::abs(orig));
      wv.data()[idx] = orig + step;
      const double lp = eval(work);
      wv.data()[idx] = orig - step;
      const double lm = eval(work);
      wv.data()[idx] = orig;
      const double fd = (lp - lm) / (2.0 * step);
      const double ad = grad_ad.data()[idx];
      e.max_abs_diff = std::max(e.max_abs_diff, std::abs(ad - fd));
      const double re = rel_err(ad, fd);
      e.max_rel_err = std::max(e.max_rel_err, re);
      if (re > tol) e.pass = false;
    }
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

}  // namespace dora
