// SPDX-License-Identifier: Apache-2.0
#include "dora/adapters.hpp"

#include <algorithm>
#include <cmath>

namespace dora {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::FT: return "FT";
    case Variant::LoRA: return "LoRA";
    case Variant::DoRA: return "DoRA";
    case Variant::DoRADetached: return "DoRADetached";
    case Variant::VeRA: return "VeRA";
    case Variant::DVoRA: return "DVoRA";
    case Variant::MagnitudeOnly: return "MagnitudeOnly";
  }
  return "?";
}

std::optional<Variant> variant_from_name(std::string_view s) {
  for (Variant v : {Variant::FT, Variant::LoRA, Variant::DoRA, Variant::DoRADetached,
                    Variant::VeRA, Variant::DVoRA, Variant::MagnitudeOnly}) {
    if (s == variant_name(v)) return v;
  }
  return std::nullopt;
}

bool has_magnitude(Variant v) {
  return v == Variant::DoRA || v == Variant::DoRADetached || v == Variant::DVoRA ||
         v == Variant::MagnitudeOnly;
}

bool has_low_rank(Variant v) {
  return v == Variant::LoRA || v == Variant::DoRA || v == Variant::DoRADetached;
}

bool is_vera_family(Variant v) { return v == Variant::VeRA || v == Variant::DVoRA; }

bool has_directional_norm(Variant v) { return has_magnitude(v); }

namespace {

// Columns divided by their norms; degeneracy is an error here, unlike the
// guarded tensor-level normalize_columns.
Matrix unit_columns_strict(const Matrix& v, double eps, const char* who) {
  const RowVector n = column_norms(v);
  for (std::size_t j = 0; j < n.cols(); ++j) {
    if (n[j] <= eps) {
      throw DegenerateColumnError(std::string(who) + ": column " + std::to_string(j) +
                                  " has norm " + std::to_string(n[j]) + " <= eps");
    }
  }
  Matrix out = v;
  for (std::size_t j = 0; j < v.cols(); ++j) {
    for (std::size_t i = 0; i < v.rows(); ++i) out(i, j) /= n[j];
  }
  return out;
}

Matrix scale_columns(const Matrix& m, const Matrix& row) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = row(0, j) * m(i, j);
  }
  return out;
}

Matrix scale_rows(const Matrix& m, const Matrix& colv) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) * colv(i, 0);
  }
  return out;
}

// W0 + diag(lambda_b) B_shared diag(lambda_d) A_shared, evaluated in the
// same association order as the tape path.
Matrix vera_delta(const AdapterLayer& l) {
  return matmul(scale_rows(scale_columns(l.B_shared, l.lambda_d), l.lambda_b), l.A_shared);
}

Matrix low_rank_vprime(const AdapterLayer& l) {
  return add(l.W0, scale(matmul(l.B, l.A), l.config.scaling()));
}

// Pre-normalization direction matrix for variants with a directional norm.
Matrix direction_input(const AdapterLayer& l) {
  switch (l.config.variant) {
    case Variant::DoRA:
    case Variant::DoRADetached:
      return low_rank_vprime(l);
    case Variant::DVoRA:
      return add(l.W0, vera_delta(l));
    case Variant::MagnitudeOnly:
      return l.W0;
    default:
      throw ConfigError(std::string("direction_input: variant ") +
                        variant_name(l.config.variant) + " has no directional norm");
  }
}

void validate_config(const Matrix& w0, const AdapterConfig& cfg) {
  if (w0.rows() == 0 || w0.cols() == 0) {
    throw ConfigError("init_adapter: empty base weight " + w0.shape_str());
  }
  if (!w0.all_finite()) throw ConfigError("init_adapter: base weight has non-finite entries");
  if (cfg.eps <= 0.0) throw ConfigError("init_adapter: eps must be positive");
  if (cfg.alpha < 0.0) throw ConfigError("init_adapter: alpha must be positive (or 0 for default)");
  if (cfg.dropout_p < 0.0 || cfg.dropout_p >= 1.0) {
    throw ConfigError("init_adapter: dropout_p must be in [0, 1)");
  }
  const bool uses_rank = has_low_rank(cfg.variant) || is_vera_family(cfg.variant);
  if (uses_rank && cfg.rank < 1) {
    throw ConfigError("init_adapter: rank must be >= 1 for " +
                      std::string(variant_name(cfg.variant)));
  }
  if (has_low_rank(cfg.variant)) {
    const std::size_t cap = std::min(w0.rows(), w0.cols());
    if (static_cast<std::size_t>(cfg.rank) > cap) {
      throw ConfigError("init_adapter: rank " + std::to_string(cfg.rank) + " exceeds min(d,k) = " +
                        std::to_string(cap));
    }
  }
  if (has_magnitude(cfg.variant)) {
    const RowVector n = column_norms(w0);
    for (std::size_t j = 0; j < n.cols(); ++j) {
      if (n[j] <= cfg.eps) {
        throw DegenerateColumnError("init_adapter: base column " + std::to_string(j) +
                                    " has norm <= eps; magnitude init undefined");
      }
    }
  }
}

}  // namespace

AdapterLayer init_adapter(const Matrix& w0, const AdapterConfig& cfg) {
  validate_config(w0, cfg);
  AdapterLayer l;
  l.config = cfg;
  l.W0 = w0;
  const std::size_t d = w0.rows();
  const std::size_t k = w0.cols();
  const std::size_t r = static_cast<std::size_t>(cfg.rank);
  Rng rng(cfg.seed);

  switch (cfg.variant) {
    case Variant::FT:
      l.W_full = w0;
      break;
    case Variant::LoRA:
    case Variant::DoRA:
    case Variant::DoRADetached: {
      l.B = Matrix(d, r);  // zeros, so the delta starts at zero
      l.A = Matrix(r, k);
      const double bound = std::sqrt(6.0 / static_cast<double>(k));
      for (double& v : l.A.data()) v = rng.uniform(-bound, bound);
      if (has_magnitude(cfg.variant)) l.m = column_norms(w0);
      break;
    }
    case Variant::VeRA:
    case Variant::DVoRA: {
      l.B_shared = Matrix(d, r);
      l.A_shared = Matrix(r, k);
      for (double& v : l.B_shared.data()) v = rng.gaussian();
      for (double& v : l.A_shared.data()) v = rng.gaussian();
      l.lambda_b = Matrix(d, 1);  // zeros, so the delta starts at zero
      l.lambda_d = Matrix(1, r);
      for (double& v : l.lambda_d.data()) v = 0.1;
      if (cfg.variant == Variant::DVoRA) l.m = column_norms(w0);
      break;
    }
    case Variant::MagnitudeOnly:
      l.m = column_norms(w0);
      break;
  }
  return l;
}

Matrix effective_weight(const AdapterLayer& l) {
  const AdapterConfig& cfg = l.config;
  switch (cfg.variant) {
    case Variant::FT:
      return l.W_full;
    case Variant::LoRA:
      return low_rank_vprime(l);
    case Variant::VeRA:
      return add(l.W0, vera_delta(l));
    case Variant::DoRA:
    case Variant::DoRADetached:
    case Variant::DVoRA:
    case Variant::MagnitudeOnly: {
      const Matrix dir = unit_columns_strict(direction_input(l), cfg.eps, "effective_weight");
      return scale_columns(dir, l.m.to_matrix());
    }
  }
  throw ConfigError("effective_weight: unknown variant");
}

Matrix adapter_forward(const AdapterLayer& l, const Matrix& x) {
  return matmul(effective_weight(l), x);
}

Matrix adapter_forward_train(const AdapterLayer& l, const Matrix& x, Rng& rng) {
  const double p = l.config.dropout_p;
  if (p == 0.0 || l.config.variant == Variant::FT) return adapter_forward(l, x);
  const double keep = 1.0 - p;
  Matrix xd = x;
  for (double& v : xd.data()) {
    if (rng.uniform() < p) {
      v = 0.0;
    } else {
      v /= keep;
    }
  }
  const Matrix delta = sub(effective_weight(l), l.W0);
  return add(matmul(l.W0, x), matmul(delta, xd));
}

std::int64_t count_trainable(const AdapterLayer& l) {
  const auto d = static_cast<std::int64_t>(l.d());
  const auto k = static_cast<std::int64_t>(l.k());
  const auto r = static_cast<std::int64_t>(l.config.rank);
  switch (l.config.variant) {
    case Variant::FT: return d * k;
    case Variant::LoRA: return r * (d + k);
    case Variant::DoRA:
    case Variant::DoRADetached: return r * (d + k) + k;
    case Variant::VeRA: return d + r;
    case Variant::DVoRA: return d + r + k;
    case Variant::MagnitudeOnly: return k;
  }
  throw ConfigError("count_trainable: unknown variant");
}

std::map<std::string, Matrix> trainable_params(const AdapterLayer& l) {
  std::map<std::string, Matrix> out;
  switch (l.config.variant) {
    case Variant::FT:
      out["W"] = l.W_full;
      break;
    case Variant::LoRA:
      out["B"] = l.B;
      out["A"] = l.A;
      break;
    case Variant::DoRA:
    case Variant::DoRADetached:
      out["m"] = l.m.to_matrix();
      out["B"] = l.B;
      out["A"] = l.A;
      break;
    case Variant::VeRA:
      out["lambda_b"] = l.lambda_b;
      out["lambda_d"] = l.lambda_d;
      break;
    case Variant::DVoRA:
      out["m"] = l.m.to_matrix();
      out["lambda_b"] = l.lambda_b;
      out["lambda_d"] = l.lambda_d;
      break;
    case Variant::MagnitudeOnly:
      out["m"] = l.m.to_matrix();
      break;
  }
  return out;
}

void set_trainable_params(AdapterLayer& l, const std::map<std::string, Matrix>& params) {
  for (const auto& [name, value] : params) {
    if (name == "W") {
      if (!value.same_shape(l.W_full)) throw ShapeError("set_trainable_params: W shape");
      l.W_full = value;
    } else if (name == "m") {
      if (value.rows() != 1 || value.cols() != l.k()) {
        throw ShapeError("set_trainable_params: m shape " + value.shape_str());
      }
      l.m = RowVector::from_matrix(value);
    } else if (name == "B") {
      if (!value.same_shape(l.B)) throw ShapeError("set_trainable_params: B shape");
      l.B = value;
    } else if (name == "A") {
      if (!value.same_shape(l.A)) throw ShapeError("set_trainable_params: A shape");
      l.A = value;
    } else if (name == "lambda_b") {
      if (!value.same_shape(l.lambda_b)) throw ShapeError("set_trainable_params: lambda_b shape");
      l.lambda_b = value;
    } else if (name == "lambda_d") {
      if (!value.same_shape(l.lambda_d)) throw ShapeError("set_trainable_params: lambda_d shape");
      l.lambda_d = value;
    } else {
      throw ConfigError("set_trainable_params: unknown parameter '" + name + "'");
    }
  }
}

// ----- tape construction -----

Tape::NodeId effective_weight_node(Tape& t, const AdapterLayer& l, const std::string& prefix) {
  const AdapterConfig& cfg = l.config;
  switch (cfg.variant) {
    case Variant::FT:
      return t.leaf(prefix + "W", l.W_full);
    case Variant::LoRA: {
      const auto b = t.leaf(prefix + "B", l.B);
      const auto a = t.leaf(prefix + "A", l.A);
      return t.add(t.constant(l.W0), t.scale(t.matmul(b, a), cfg.scaling()));
    }
    case Variant::DoRA: {
      const auto m = t.leaf(prefix + "m", l.m.to_matrix());
      const auto b = t.leaf(prefix + "B", l.B);
      const auto a = t.leaf(prefix + "A", l.A);
      const auto vp = t.add(t.constant(l.W0), t.scale(t.matmul(b, a), cfg.scaling()));
      return t.row_broadcast_mul(m, t.column_normalize(vp, cfg.eps));
    }
    case Variant::DoRADetached: {
      // Same value as DoRA; the norm divisor is cut out of the grad graph.
      const auto m = t.leaf(prefix + "m", l.m.to_matrix());
      const auto b = t.leaf(prefix + "B", l.B);
      const auto a = t.leaf(prefix + "A", l.A);
      const auto vp = t.add(t.constant(l.W0), t.scale(t.matmul(b, a), cfg.scaling()));
      const auto norms = t.detach(t.column_norms(vp, cfg.eps));
      return t.row_broadcast_mul(m, t.row_broadcast_div(vp, norms));
    }
    case Variant::VeRA: {
      const auto lb = t.leaf(prefix + "lambda_b", l.lambda_b);
      const auto ld = t.leaf(prefix + "lambda_d", l.lambda_d);
      const auto scaled = t.col_broadcast_mul(t.row_broadcast_mul(ld, t.constant(l.B_shared)), lb);
      const auto delta = t.matmul(scaled, t.constant(l.A_shared));
      return t.add(t.constant(l.W0), delta);
    }
    case Variant::DVoRA: {
      const auto m = t.leaf(prefix + "m", l.m.to_matrix());
      const auto lb = t.leaf(prefix + "lambda_b", l.lambda_b);
      const auto ld = t.leaf(prefix + "lambda_d", l.lambda_d);
      const auto scaled = t.col_broadcast_mul(t.row_broadcast_mul(ld, t.constant(l.B_shared)), lb);
      const auto vp = t.add(t.constant(l.W0), t.matmul(scaled, t.constant(l.A_shared)));
      return t.row_broadcast_mul(m, t.column_normalize(vp, cfg.eps));
    }
    case Variant::MagnitudeOnly: {
      const auto m = t.leaf(prefix + "m", l.m.to_matrix());
      const auto dir = t.constant(unit_columns_strict(l.W0, cfg.eps, "effective_weight_node"));
      return t.row_broadcast_mul(m, dir);
    }
  }
  throw ConfigError("effective_weight_node: unknown variant");
}

Tape::NodeId effective_weight_node_pinned_norm(Tape& t, const AdapterLayer& l,
                                               const std::string& prefix,
                                               const RowVector& frozen_norms) {
  if (l.config.variant != Variant::DoRADetached) {
    throw ConfigError("effective_weight_node_pinned_norm: only meaningful for DoRADetached, got " +
                      std::string(variant_name(l.config.variant)));
  }
  if (frozen_norms.cols() != l.k()) {
    throw ShapeError("effective_weight_node_pinned_norm: frozen_norms length " +
                     std::to_string(frozen_norms.cols()) + ", layer has k = " +
                     std::to_string(l.k()));
  }
  const auto m = t.leaf(prefix + "m", l.m.to_matrix());
  const auto b = t.leaf(prefix + "B", l.B);
  const auto a = t.leaf(prefix + "A", l.A);
  const auto vp = t.add(t.constant(l.W0), t.scale(t.matmul(b, a), l.config.scaling()));
  return t.row_broadcast_mul(m, t.row_broadcast_div(vp, t.constant(frozen_norms.to_matrix())));
}

LayerTape build_tape(const AdapterLayer& l, const Matrix& x, const Matrix& target,
                     LossKind kind) {
  LayerTape lt;
  lt.weight = effective_weight_node(lt.tape, l, "");
  lt.pred = lt.tape.matmul(lt.weight, lt.tape.constant(x));
  const auto tgt = lt.tape.constant(target);
  lt.loss = kind == LossKind::Mse ? lt.tape.mse(lt.pred, tgt) : lt.tape.softmax_xent(lt.pred, tgt);
  return lt;
}

// ----- closed-form gradients -----

Matrix loss_weight_gradient(const Matrix& w_prime, const Matrix& x, const Matrix& target,
                            LossKind kind) {
  const Matrix pred = matmul(w_prime, x);
  if (!pred.same_shape(target)) {
    throw ShapeError("loss_weight_gradient: prediction " + pred.shape_str() + " vs target " +
                     target.shape_str());
  }
  Matrix gpred(pred.rows(), pred.cols());
  if (kind == LossKind::Mse) {
    const double c = 2.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      gpred.data()[i] = c * (pred.data()[i] - target.data()[i]);
    }
  } else {
    const Matrix p = softmax_columns(pred);
    const double c = 1.0 / static_cast<double>(pred.cols());
    for (std::size_t j = 0; j < pred.cols(); ++j) {
      double ysum = 0.0;
      for (std::size_t i = 0; i < pred.rows(); ++i) ysum += target(i, j);
      for (std::size_t i = 0; i < pred.rows(); ++i) {
        gpred(i, j) = c * (p(i, j) * ysum - target(i, j));
      }
    }
  }
  return matmul(gpred, transpose(x));
}

DirectionalGrads closed_form_grads(const AdapterLayer& l, const Matrix& upstream) {
  if (!has_directional_norm(l.config.variant)) {
    throw ConfigError(std::string("closed_form_grads: variant ") + variant_name(l.config.variant) +
                      " has no directional norm");
  }
  const Matrix vp = direction_input(l);
  if (!upstream.same_shape(vp)) {
    throw ShapeError("closed_form_grads: upstream " + upstream.shape_str() + " vs weight " +
                     vp.shape_str());
  }
  const std::size_t d = vp.rows();
  const std::size_t k = vp.cols();
  DirectionalGrads out;
  out.grad_m = RowVector(k);
  out.grad_vprime = Matrix(d, k);
  const bool detached = l.config.variant == Variant::DoRADetached;
  const bool frozen_dir = l.config.variant == Variant::MagnitudeOnly;

  for (std::size_t j = 0; j < k; ++j) {
    double nn = 0.0;
    for (std::size_t i = 0; i < d; ++i) nn += vp(i, j) * vp(i, j);
    const double n = std::sqrt(nn);
    if (n <= l.config.eps) {
      throw DegenerateColumnError("closed_form_grads: column " + std::to_string(j) +
                                  " has norm <= eps");
    }
    double uv = 0.0;
    for (std::size_t i = 0; i < d; ++i) uv += upstream(i, j) * (vp(i, j) / n);
    out.grad_m[j] = uv;  // u . vhat
    if (frozen_dir) continue;
    const double mj = l.m[j];
    for (std::size_t i = 0; i < d; ++i) {
      const double proj = detached ? 0.0 : (vp(i, j) / n) * uv;
      out.grad_vprime(i, j) = (mj / n) * (upstream(i, j) - proj);
    }
  }
  return out;
}

GradMap closed_form_param_grads(const AdapterLayer& l, const Matrix& upstream) {
  GradMap out;
  const double s = l.config.scaling();
  switch (l.config.variant) {
    case Variant::FT:
      out["W"] = upstream;
      break;
    case Variant::LoRA:
      out["B"] = scale(matmul(upstream, transpose(l.A)), s);
      out["A"] = scale(matmul(transpose(l.B), upstream), s);
      break;
    case Variant::DoRA:
    case Variant::DoRADetached: {
      const DirectionalGrads dg = closed_form_grads(l, upstream);
      out["m"] = dg.grad_m.to_matrix();
      out["B"] = scale(matmul(dg.grad_vprime, transpose(l.A)), s);
      out["A"] = scale(matmul(transpose(l.B), dg.grad_vprime), s);
      break;
    }
    case Variant::VeRA:
    case Variant::DVoRA: {
      Matrix gv = upstream;
      if (l.config.variant == Variant::DVoRA) {
        const DirectionalGrads dg = closed_form_grads(l, upstream);
        out["m"] = dg.grad_m.to_matrix();
        gv = dg.grad_vprime;
      }
      // delta = diag(lambda_b) Bs diag(lambda_d) As; chain rule by hand.
      const Matrix m1_as = matmul(scale_columns(l.B_shared, l.lambda_d), l.A_shared);
      Matrix glb(l.d(), 1);
      for (std::size_t i = 0; i < l.d(); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < l.k(); ++j) sum += gv(i, j) * m1_as(i, j);
        glb(i, 0) = sum;
      }
      const Matrix m2 = scale_rows(l.B_shared, l.lambda_b);
      const Matrix tt = matmul(matmul(transpose(m2), gv), transpose(l.A_shared));
      Matrix gld(1, static_cast<std::size_t>(l.config.rank));
      for (std::size_t p = 0; p < gld.cols(); ++p) gld(0, p) = tt(p, p);
      out["lambda_b"] = glb;
      out["lambda_d"] = gld;
      break;
    }
    case Variant::MagnitudeOnly: {
      const DirectionalGrads dg = closed_form_grads(l, upstream);
      out["m"] = dg.grad_m.to_matrix();
      break;
    }
  }
  return out;
}

// ----- magnitude-gradient identities -----

std::pair<double, double> grad_m_identity_check(const std::vector<double>& v,
                                                const std::vector<double>& u) {
  const double nv = norm(v);
  const double nu = norm(u);
  if (nv == 0.0) throw DegenerateColumnError("grad_m_identity_check: zero direction vector");
  if (nu == 0.0) throw DegenerateColumnError("grad_m_identity_check: zero upstream vector");
  const double lhs = dot(u, v) / nv;
  const double rhs = nu * column_cosine(u, v);
  return {lhs, rhs};
}

bool scenario_ordering_check(const std::vector<double>& v, const std::vector<double>& g1,
                             const std::vector<double>& g2) {
  const double nv = norm(v);
  const double n1 = norm(g1);
  const double n2 = norm(g2);
  if (nv == 0.0 || n1 == 0.0 || n2 == 0.0) {
    throw ConfigError("scenario_ordering_check: zero vector input");
  }
  if (std::abs(n1 - n2) > 1e-9 * std::max(n1, n2)) {
    throw ConfigError("scenario_ordering_check: upstream norms differ beyond tolerance");
  }
  const double c1 = std::abs(column_cosine(g1, v));
  const double c2 = std::abs(column_cosine(g2, v));
  if (!(c1 > c2)) {
    throw ConfigError("scenario_ordering_check: |cos(g1,v)| must exceed |cos(g2,v)|");
  }
  const double gm1 = std::abs(dot(g1, v) / nv);
  const double gm2 = std::abs(dot(g2, v) / nv);
  return gm1 > gm2;
}

}  // namespace dora
