// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dora/matrix.hpp"
#include "dora/rng.hpp"
#include "dora/tape.hpp"

namespace dora {

// Adaptation variants over a frozen base weight W0 (d x k).
//
//   FT             full weight trainable
//   LoRA           W0 + (alpha/r) B A
//   DoRA           m * unit_columns(W0 + (alpha/r) B A)
//   DoRADetached   DoRA with the column-norm divisor cut out of the
//                  gradient graph (magnitude-direction coupling removed)
//   VeRA           W0 + diag(lambda_b) B_shared diag(lambda_d) A_shared
//   DVoRA          m * unit_columns(W0 + VeRA delta)
//   MagnitudeOnly  m * unit_columns(W0), direction frozen
enum class Variant { FT, LoRA, DoRA, DoRADetached, VeRA, DVoRA, MagnitudeOnly };

const char* variant_name(Variant v);
std::optional<Variant> variant_from_name(std::string_view s);

// True for variants that carry a trainable magnitude row m.
bool has_magnitude(Variant v);
// True for variants with trainable low-rank factors B, A.
bool has_low_rank(Variant v);
// True for variants built on a frozen shared pair plus scaling vectors.
bool is_vera_family(Variant v);
// True for variants whose effective weight divides by column norms.
bool has_directional_norm(Variant v);

struct AdapterConfig {
  Variant variant = Variant::LoRA;
  int rank = 4;
  double alpha = 0.0;  // <= 0 means "default to rank", giving scaling 1
  double dropout_p = 0.0;
  std::uint64_t seed = 0;
  double eps = kDefaultEps;

  double scaling() const {
    return (alpha > 0.0 ? alpha : static_cast<double>(rank)) / static_cast<double>(rank);
  }
};

// One adapted layer. Which fields are live depends on config.variant; the
// unused ones stay empty.
struct AdapterLayer {
  AdapterConfig config;
  Matrix W0;        // d x k, frozen base
  Matrix W_full;    // FT only: the trainable copy
  RowVector m;      // magnitude row, length k
  Matrix B;         // d x r
  Matrix A;         // r x k
  Matrix B_shared;  // d x r, frozen
  Matrix A_shared;  // r x k, frozen
  Matrix lambda_b;  // d x 1
  Matrix lambda_d;  // 1 x r

  std::size_t d() const { return W0.rows(); }
  std::size_t k() const { return W0.cols(); }
};

// Validates config against W0's shape and initializes per variant:
// m = column norms of W0, B = 0, A ~ Kaiming-uniform in +/- sqrt(6/k),
// shared pair ~ N(0,1) from config.seed, lambda_b = 0, lambda_d = 0.1,
// W_full = W0. Same (W0, config) gives a bit-identical layer.
AdapterLayer init_adapter(const Matrix& w0, const AdapterConfig& cfg);

// The merged weight a deployment would use; inference-equivalent to forward.
// Throws DegenerateColumnError when a directional denominator column norm
// is <= config.eps.
Matrix effective_weight(const AdapterLayer& layer);
inline Matrix merge(const AdapterLayer& layer) { return effective_weight(layer); }

// Inference forward: effective_weight(layer) * x.
Matrix adapter_forward(const AdapterLayer& layer, const Matrix& x);

// Training forward with adapter-branch dropout (inverted scaling):
// W0 x + (effective - W0) drop(x). With dropout_p == 0 this is bit-identical
// to adapter_forward. FT has no adapter branch and never drops.
Matrix adapter_forward_train(const AdapterLayer& layer, const Matrix& x, Rng& rng);

// Trainable scalar count for the variant:
// FT d*k; LoRA r(d+k); DoRA/DoRADetached r(d+k)+k; VeRA d+r; DVoRA d+r+k;
// MagnitudeOnly k.
std::int64_t count_trainable(const AdapterLayer& layer);

// Trainable leaves as (unprefixed name -> value) and the write-back.
std::map<std::string, Matrix> trainable_params(const AdapterLayer& layer);
void set_trainable_params(AdapterLayer& layer, const std::map<std::string, Matrix>& params);

// ----- tape construction -----

// Appends the variant's parameterization subgraph to t, creating one leaf per
// trainable tensor named prefix + {"W","m","B","A","lambda_b","lambda_d"}.
// Returns the effective-weight node.
Tape::NodeId effective_weight_node(Tape& t, const AdapterLayer& layer, const std::string& prefix);

// DoRADetached only: the same subgraph with the norm divisor pinned to the
// constant row frozen_norms instead of flowing from B, A. The detached
// gradient is the true derivative of THIS function, so central finite
// differences of it (with frozen_norms = the current column norms of
// W0 + scaling * B A) are the right oracle for the detached tape.
Tape::NodeId effective_weight_node_pinned_norm(Tape& t, const AdapterLayer& layer,
                                               const std::string& prefix,
                                               const RowVector& frozen_norms);

struct LayerTape {
  Tape tape;
  Tape::NodeId weight = -1;  // effective weight node
  Tape::NodeId pred = -1;    // weight * x
  Tape::NodeId loss = -1;
};

// Single-layer training graph: loss(effective_weight * x, target).
LayerTape build_tape(const AdapterLayer& layer, const Matrix& x, const Matrix& target,
                     LossKind kind);

// ----- closed-form gradients -----

// Analytic gradient of the loss at the merged weight W' = weight * x vs
// target, derived by hand per loss (no tape involved):
//   Mse:         (2/N) (W'x - y) x^T
//   SoftmaxXent: (1/n) (softmax(W'x) .colsum(y) - y) x^T
Matrix loss_weight_gradient(const Matrix& w_prime, const Matrix& x, const Matrix& target,
                            LossKind kind);

struct DirectionalGrads {
  RowVector grad_m;    // length k
  Matrix grad_vprime;  // d x k
};

// Hand-derived magnitude/direction gradients given upstream = dL/dW'.
// Per column j with v = V'[:,j], n = |v|, u = upstream[:,j]:
//   grad_m[j]          = u . v / n
//   grad_vprime[:,j]   = (m_j / n) (u - vhat (vhat . u))   DoRA, DVoRA
//                        (m_j / n) u                       DoRADetached
// Requires a variant with a directional norm.
DirectionalGrads closed_form_grads(const AdapterLayer& layer, const Matrix& upstream);

// Closed-form gradients mapped all the way to the variant's trainable
// parameters (chain rule applied by hand; independent of the tape).
GradMap closed_form_param_grads(const AdapterLayer& layer, const Matrix& upstream);

// ----- magnitude-gradient identities (zero directional-update regime) -----

// Returns {u.v/|v|, |u| cos(u,v)}; the two sides of the magnitude-gradient
// identity, equal up to fp. Throws DegenerateColumnError on a zero vector.
std::pair<double, double> grad_m_identity_check(const std::vector<double>& v,
                                                const std::vector<double>& u);

// For two upstream gradients of equal norm where |cos(g1,v)| > |cos(g2,v)|,
// checks that the magnitude gradient is strictly larger in absolute value for
// g1. Preconditions violated -> ConfigError.
bool scenario_ordering_check(const std::vector<double>& v, const std::vector<double>& g1,
                             const std::vector<double>& g2);

}  // namespace dora
