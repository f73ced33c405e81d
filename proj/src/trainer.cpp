// SPDX-License-Identifier: Apache-2.0
#include "dora/trainer.hpp"

#include <algorithm>
#include <cmath>

namespace dora {

using nlohmann::json;

const char* task_name(TaskKind t) {
  switch (t) {
    case TaskKind::TeacherRegression: return "teacher_regression";
    case TaskKind::BlobClassification: return "blob_classification";
    case TaskKind::AttentionCopy: return "attention_copy";
  }
  return "?";
}

const char* backbone_name(BackboneKind b) {
  switch (b) {
    case BackboneKind::Mlp: return "mlp";
    case BackboneKind::Attention: return "attention";
  }
  return "?";
}

const char* schedule_name(Schedule s) {
  switch (s) {
    case Schedule::Constant: return "constant";
    case Schedule::LinearDecay: return "linear_decay";
    case Schedule::CosineDecay: return "cosine_decay";
  }
  return "?";
}

// ----- config validation and schedule -----

void validate_train_config(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("config.lr must be positive");
  if (cfg.batch_size < 1) throw ConfigError("config.batch_size must be >= 1");
  if (cfg.steps < 1) throw ConfigError("config.steps must be >= 1");
  if (cfg.weight_decay < 0.0) throw ConfigError("config.weight_decay must be >= 0");
  if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0)) throw ConfigError("config.betas[0] must be in (0,1)");
  if (!(cfg.beta2 > 0.0 && cfg.beta2 < 1.0)) throw ConfigError("config.betas[1] must be in (0,1)");
  if (!(cfg.adam_eps > 0.0)) throw ConfigError("config.adam_eps must be positive");
  if (cfg.warmup < 0.0) throw ConfigError("config.warmup must be >= 0");
  if (cfg.warmup >= 1.0) {
    if (std::floor(cfg.warmup) != cfg.warmup) {
      throw ConfigError("config.warmup >= 1 means whole steps; got a fraction");
    }
    if (cfg.warmup > static_cast<double>(cfg.steps)) {
      throw ConfigError("config.warmup exceeds config.steps");
    }
  }
  int prev = 0;
  for (int s : cfg.checkpoint_steps) {
    if (s < 1 || s > cfg.steps) {
      throw ConfigError("config.checkpoint_steps entries must lie in [1, steps]");
    }
    if (s <= prev) throw ConfigError("config.checkpoint_steps must be strictly increasing");
    prev = s;
  }
  const bool mlp_task = cfg.task != TaskKind::AttentionCopy;
  if (mlp_task && cfg.backbone != BackboneKind::Mlp) {
    throw ConfigError(std::string("config.task ") + task_name(cfg.task) +
                      " requires the mlp backbone");
  }
  if (!mlp_task && cfg.backbone != BackboneKind::Attention) {
    throw ConfigError("config.task attention_copy requires the attention backbone");
  }
  const auto names = adapted_layer_names(cfg.backbone);
  for (const auto& [name, _] : cfg.overrides) {
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw ConfigError("config.overrides: '" + name + "' is not an adapted layer of the " +
                        std::string(backbone_name(cfg.backbone)) + " backbone");
    }
  }
}

int resolve_warmup(const TrainConfig& cfg) {
  if (cfg.warmup >= 1.0) return static_cast<int>(cfg.warmup);
  return static_cast<int>(std::floor(cfg.warmup * static_cast<double>(cfg.steps)));
}

double lr_at(int step, const TrainConfig& cfg) {
  if (step < 1 || step > cfg.steps) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " outside [1, " +
                      std::to_string(cfg.steps) + "]");
  }
  const int w = resolve_warmup(cfg);
  if (w > 0 && step <= w) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(w);
  }
  const int rem = cfg.steps - w;
  if (rem == 0) return cfg.lr;  // the whole run is warmup
  const double u = static_cast<double>(step - w) / static_cast<double>(rem);
  switch (cfg.schedule) {
    case Schedule::Constant: return cfg.lr;
    case Schedule::LinearDecay: return cfg.lr * (1.0 - u);
    case Schedule::CosineDecay:
      return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
  }
  throw ConfigError("lr_at: unknown schedule");
}

// ----- model -----

std::vector<std::string> adapted_layer_names(BackboneKind b) {
  if (b == BackboneKind::Mlp) return {"fc1", "fc2"};
  return {"wq", "wv"};
}

namespace {

constexpr std::size_t kInDim = 16;
constexpr std::size_t kHidden = 32;
constexpr std::size_t kOutDim = 4;
constexpr std::size_t kModelDim = 16;
constexpr std::size_t kSeqLen = 8;

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng rng, double sdev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = sdev * rng.gaussian();
  return m;
}

// The deterministic "pretrained" base weights for a seed.
struct BaseWeights {
  std::vector<std::pair<std::string, Matrix>> weights;  // ordered
  const Matrix& at(const std::string& name) const {
    for (const auto& [n, w] : weights) {
      if (n == name) return w;
    }
    throw ConfigError("BaseWeights: unknown layer '" + name + "'");
  }
};

BaseWeights make_base_weights(BackboneKind backbone, std::uint64_t seed) {
  const Rng root(seed);
  BaseWeights out;
  if (backbone == BackboneKind::Mlp) {
    out.weights.emplace_back(
        "fc1", gaussian_matrix(kHidden, kInDim, root.fork(10), 1.0 / std::sqrt(double(kInDim))));
    out.weights.emplace_back(
        "fc2", gaussian_matrix(kHidden, kHidden, root.fork(11), 1.0 / std::sqrt(double(kHidden))));
    out.weights.emplace_back(
        "fc3", gaussian_matrix(kOutDim, kHidden, root.fork(12), 1.0 / std::sqrt(double(kHidden))));
    out.weights.emplace_back("fc1.bias", Matrix(kHidden, 1));
    out.weights.emplace_back("fc2.bias", Matrix(kHidden, 1));
    out.weights.emplace_back("fc3.bias", Matrix(kOutDim, 1));
  } else {
    const double sd = 1.0 / std::sqrt(double(kModelDim));
    out.weights.emplace_back("we", gaussian_matrix(kModelDim, kModelDim, root.fork(20), sd));
    out.weights.emplace_back("wq", gaussian_matrix(kModelDim, kModelDim, root.fork(21), sd));
    out.weights.emplace_back("wk", gaussian_matrix(kModelDim, kModelDim, root.fork(22), sd));
    out.weights.emplace_back("wv", gaussian_matrix(kModelDim, kModelDim, root.fork(23), sd));
    out.weights.emplace_back("wo", gaussian_matrix(kModelDim, kModelDim, root.fork(24), sd));
  }
  return out;
}

}  // namespace

const AdapterLayer* ToyModel::find_adapted(const std::string& name) const {
  for (const auto& [n, l] : adapted) {
    if (n == name) return &l;
  }
  return nullptr;
}

const NamedParam* ToyModel::find_plain(const std::string& name) const {
  for (const NamedParam& p : plain) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

ToyModel make_model(const TrainConfig& cfg) {
  validate_train_config(cfg);
  const BaseWeights base = make_base_weights(cfg.backbone, cfg.seed);
  const auto adapted_names = adapted_layer_names(cfg.backbone);
  const bool ft_mode = cfg.adapter.variant == Variant::FT;

  ToyModel model;
  model.backbone = cfg.backbone;
  std::size_t idx = 0;
  for (const std::string& name : adapted_names) {
    AdapterConfig acfg = cfg.adapter;
    const auto ov = cfg.overrides.find(name);
    if (ov != cfg.overrides.end()) acfg.variant = ov->second;
    // VeRA-family layers share the run-level adapter seed so equal-shaped
    // layers draw the same frozen pair; low-rank layers get their own stream.
    if (!is_vera_family(acfg.variant)) {
      acfg.seed = mix_seed(cfg.adapter.seed, 40 + idx);
    }
    model.adapted.emplace_back(name, init_adapter(base.at(name), acfg));
    ++idx;
  }
  for (const auto& [name, w] : base.weights) {
    if (std::find(adapted_names.begin(), adapted_names.end(), name) != adapted_names.end()) {
      continue;
    }
    model.plain.push_back({name, w, ft_mode});
  }
  return model;
}

// ----- tasks -----

namespace {

Matrix relu_value(const Matrix& a) {
  Matrix out = a;
  for (double& v : out.data()) v = std::max(0.0, v);
  return out;
}

Matrix mlp_forward_raw(const Matrix& w1, const Matrix& w2, const Matrix& w3, const Matrix& x) {
  return matmul(w3, relu_value(matmul(w2, relu_value(matmul(w1, x)))));
}

Matrix scale_columns_by(const Matrix& m, const std::vector<double>& c) {
  Matrix out = m;
  for (std::size_t j = 0; j < m.cols(); ++j) {
    for (std::size_t i = 0; i < m.rows(); ++i) out(i, j) *= c[j];
  }
  return out;
}

// Fixed positional pattern added to every attention input so position is
// recoverable from content.
Matrix positional_pattern() {
  Matrix e(kModelDim, kSeqLen);
  for (std::size_t i = 0; i < kModelDim; ++i) {
    for (std::size_t p = 0; p < kSeqLen; ++p) {
      e(i, p) = 0.8 * std::sin(0.6 * static_cast<double>(i + 1) * static_cast<double>(p + 1));
    }
  }
  return e;
}

}  // namespace

Dataset make_teacher_regression(const TrainConfig& cfg, double noise_sigma) {
  if (cfg.backbone != BackboneKind::Mlp) {
    throw ConfigError("make_teacher_regression: requires the mlp backbone");
  }
  const BaseWeights base = make_base_weights(cfg.backbone, cfg.seed);
  const Rng root(mix_seed(cfg.seed, 777));

  // Teacher = student base with only the adapted layers perturbed: a
  // per-column scaling plus a small rank-2 term. The residual is reachable
  // by magnitude+direction adapters of rank >= 2 by construction.
  std::vector<Matrix> teacher;
  const auto names = adapted_layer_names(cfg.backbone);
  for (std::size_t li = 0; li < names.size(); ++li) {
    const Matrix& w0 = base.at(names[li]);
    Rng r = root.fork(li);
    std::vector<double> c(w0.cols());
    for (double& v : c) v = r.uniform(0.75, 1.3);
    const Matrix u = gaussian_matrix(w0.rows(), 2, r.fork(1), 0.18);
    const Matrix v = gaussian_matrix(2, w0.cols(), r.fork(2), 0.18);
    teacher.push_back(add(scale_columns_by(w0, c), matmul(u, v)));
  }

  const std::size_t n = 256;
  Dataset data;
  data.loss = LossKind::Mse;
  data.inputs = gaussian_matrix(kInDim, n, root.fork(100), 1.0);
  data.targets = mlp_forward_raw(teacher[0], teacher[1], base.at("fc3"), data.inputs);
  if (noise_sigma > 0.0) {
    Rng noise = root.fork(101);
    for (double& v : data.targets.data()) v += noise_sigma * noise.gaussian();
  }
  return data;
}

namespace {

Dataset make_blob_classification(const TrainConfig& cfg) {
  const Rng root(mix_seed(cfg.seed, 880));
  constexpr std::size_t n = 256;
  constexpr std::size_t live_dims = 8;

  std::vector<std::vector<double>> centers;
  Rng crng = root.fork(1);
  for (std::size_t c = 0; c < kOutDim; ++c) {
    std::vector<double> v(live_dims);
    for (double& x : v) x = crng.gaussian();
    const double nv = norm(v);
    for (double& x : v) x = 2.5 * x / nv;
    centers.push_back(std::move(v));
  }

  Dataset data;
  data.loss = LossKind::SoftmaxXent;
  data.inputs = Matrix(kInDim, n);
  data.targets = Matrix(kOutDim, n);
  Rng xr = root.fork(2);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % kOutDim;  // balanced by construction
    for (std::size_t d0 = 0; d0 < live_dims; ++d0) {
      data.inputs(d0, i) = centers[cls][d0] + 0.5 * xr.gaussian();
    }
    data.targets(cls, i) = 1.0;
  }
  return data;
}

Dataset make_attention_copy(const TrainConfig& cfg) {
  const Rng root(mix_seed(cfg.seed, 990));
  constexpr std::size_t n = 64;
  const Matrix pos = positional_pattern();

  Dataset data;
  data.loss = LossKind::Mse;
  for (std::size_t s = 0; s < n; ++s) {
    Matrix x = gaussian_matrix(kModelDim, kSeqLen, root.fork(1000 + s), 0.5);
    x = add(x, pos);
    Matrix y(kModelDim, kSeqLen);
    for (std::size_t p = 0; p < kSeqLen; ++p) {
      for (std::size_t i = 0; i < kModelDim; ++i) y(i, p) = x(i, kSeqLen - 1 - p);
    }
    data.seq_inputs.push_back(std::move(x));
    data.seq_targets.push_back(std::move(y));
  }
  return data;
}

}  // namespace

Dataset make_task(const TrainConfig& cfg) {
  validate_train_config(cfg);
  switch (cfg.task) {
    case TaskKind::TeacherRegression: return make_teacher_regression(cfg, 0.01);
    case TaskKind::BlobClassification: return make_blob_classification(cfg);
    case TaskKind::AttentionCopy: return make_attention_copy(cfg);
  }
  throw ConfigError("make_task: unknown task");
}

// ----- tape construction over the whole model -----

namespace {

Tape::NodeId plain_node(Tape& t, const NamedParam& p) {
  return p.trainable ? t.leaf(p.name, p.value) : t.constant(p.value);
}

// Adapter-branch dropout around a precomputed effective-weight node:
// W0 x + (W' - W0) drop(x). Identity to matmul(w, x) when inactive.
Tape::NodeId linear_with_dropout(Tape& t, Tape::NodeId w, const AdapterLayer& l,
                                 Tape::NodeId input, bool training, Rng* drop_rng) {
  const double p = l.config.dropout_p;
  if (!training || p == 0.0 || l.config.variant == Variant::FT) return t.matmul(w, input);
  if (drop_rng == nullptr) {
    throw ConfigError("model_loss_node: dropout active but no rng supplied");
  }
  const Matrix& in_v = t.value(input);
  const double keep = 1.0 - p;
  Matrix mask(in_v.rows(), in_v.cols());
  for (double& v : mask.data()) v = (drop_rng->uniform() < p) ? 0.0 : 1.0 / keep;
  const auto w0c = t.constant(l.W0);
  const auto masked = t.hadamard(input, t.constant(mask));
  const auto delta = t.add(w, t.scale(w0c, -1.0));
  return t.add(t.matmul(w0c, input), t.matmul(delta, masked));
}

const NamedParam& require_plain(const ToyModel& model, const std::string& name) {
  const NamedParam* p = model.find_plain(name);
  if (p == nullptr) throw ConfigError("model: missing plain tensor '" + name + "'");
  return *p;
}

}  // namespace

Tape::NodeId model_loss_node(Tape& t, const ToyModel& model, const Batch& batch, bool training,
                             Rng* drop_rng) {
  if (model.backbone == BackboneKind::Mlp) {
    if (batch.x == nullptr || batch.y == nullptr) {
      throw ConfigError("model_loss_node: mlp batch needs x and y");
    }
    Tape::NodeId h = t.constant(*batch.x);
    for (const auto& [name, layer] : model.adapted) {
      const auto w = effective_weight_node(t, layer, name + ".");
      auto z = linear_with_dropout(t, w, layer, h, training, drop_rng);
      z = t.col_broadcast_add(z, plain_node(t, require_plain(model, name + ".bias")));
      h = t.relu(z);
    }
    const auto w3 = plain_node(t, require_plain(model, "fc3"));
    const auto z3 =
        t.col_broadcast_add(t.matmul(w3, h), plain_node(t, require_plain(model, "fc3.bias")));
    const auto target = t.constant(*batch.y);
    return batch.loss == LossKind::Mse ? t.mse(z3, target) : t.softmax_xent(z3, target);
  }

  if (batch.xs.empty() || batch.xs.size() != batch.ys.size()) {
    throw ConfigError("model_loss_node: attention batch needs matched sequences");
  }
  const auto we = plain_node(t, require_plain(model, "we"));
  const auto wk = plain_node(t, require_plain(model, "wk"));
  const auto wo = plain_node(t, require_plain(model, "wo"));
  const AdapterLayer& ql = model.adapted[0].second;
  const AdapterLayer& vl = model.adapted[1].second;
  const auto wq = effective_weight_node(t, ql, model.adapted[0].first + ".");
  const auto wv = effective_weight_node(t, vl, model.adapted[1].first + ".");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kModelDim));

  Tape::NodeId total = -1;
  for (std::size_t s = 0; s < batch.xs.size(); ++s) {
    const auto x = t.constant(*batch.xs[s]);
    const auto hh = t.matmul(we, x);
    const auto q = linear_with_dropout(t, wq, ql, hh, training, drop_rng);
    const auto k = t.matmul(wk, hh);
    const auto v = linear_with_dropout(t, wv, vl, hh, training, drop_rng);
    const auto scores = t.scale(t.matmul(t.transpose(k), q), inv_sqrt_d);
    const auto attn = t.softmax_cols(scores);
    const auto out = t.matmul(wo, t.matmul(v, attn));
    const auto l = t.mse(out, t.constant(*batch.ys[s]));
    total = total < 0 ? l : t.add(total, l);
  }
  return t.scale(total, 1.0 / static_cast<double>(batch.xs.size()));
}

// ----- inference-mode loss -----

namespace {

double mse_value(const Matrix& pred, const Matrix& target) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

double xent_value(const Matrix& logits, const Matrix& labels) {
  const Matrix ls = log_softmax_columns(logits);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += labels.data()[i] * ls.data()[i];
  return -s / static_cast<double>(logits.cols());
}

}  // namespace

double model_loss(const ToyModel& model, const Dataset& data) {
  if (model.backbone == BackboneKind::Mlp) {
    Matrix h = data.inputs;
    for (const auto& [name, layer] : model.adapted) {
      const Matrix z = matmul(effective_weight(layer), h);
      const NamedParam& b = require_plain(model, name + ".bias");
      Matrix zb = z;
      for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t j = 0; j < z.cols(); ++j) zb(i, j) += b.value(i, 0);
      }
      h = relu_value(zb);
    }
    Matrix pred = matmul(require_plain(model, "fc3").value, h);
    const NamedParam& b3 = require_plain(model, "fc3.bias");
    for (std::size_t i = 0; i < pred.rows(); ++i) {
      for (std::size_t j = 0; j < pred.cols(); ++j) pred(i, j) += b3.value(i, 0);
    }
    return data.loss == LossKind::Mse ? mse_value(pred, data.targets)
                                      : xent_value(pred, data.targets);
  }

  const Matrix& we = require_plain(model, "we").value;
  const Matrix& wk = require_plain(model, "wk").value;
  const Matrix& wo = require_plain(model, "wo").value;
  const Matrix wq = effective_weight(model.adapted[0].second);
  const Matrix wv = effective_weight(model.adapted[1].second);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kModelDim));
  double total = 0.0;
  for (std::size_t s = 0; s < data.seq_inputs.size(); ++s) {
    const Matrix hh = matmul(we, data.seq_inputs[s]);
    const Matrix scores = scale(matmul(transpose(matmul(wk, hh)), matmul(wq, hh)), inv_sqrt_d);
    const Matrix out = matmul(wo, matmul(matmul(wv, hh), softmax_columns(scores)));
    total += mse_value(out, data.seq_targets[s]);
  }
  return total / static_cast<double>(data.seq_inputs.size());
}

// ----- parameter plumbing -----

std::map<std::string, Matrix> collect_params(const ToyModel& model) {
  std::map<std::string, Matrix> out;
  for (const auto& [name, layer] : model.adapted) {
    for (const auto& [pname, value] : trainable_params(layer)) out[name + "." + pname] = value;
  }
  for (const NamedParam& p : model.plain) {
    if (p.trainable) out[p.name] = p.value;
  }
  return out;
}

void apply_params(ToyModel& model, const std::map<std::string, Matrix>& params) {
  for (auto& [name, layer] : model.adapted) {
    std::map<std::string, Matrix> sub;
    const std::string prefix = name + ".";
    for (const auto& [pname, value] : params) {
      if (pname.rfind(prefix, 0) == 0) {
        const std::string suffix = pname.substr(prefix.size());
        if (suffix.find('.') == std::string::npos) sub[suffix] = value;
      }
    }
    // ".bias" tensors are plain, not adapter params; drop them from sub.
    sub.erase("bias");
    set_trainable_params(layer, sub);
  }
  for (NamedParam& p : model.plain) {
    const auto it = params.find(p.name);
    if (it != params.end()) {
      if (!p.trainable) throw ConfigError("apply_params: frozen tensor '" + p.name + "' updated");
      p.value = it->second;
    }
  }
}

std::int64_t count_model_trainable(const ToyModel& model) {
  std::int64_t total = 0;
  for (const auto& [_, layer] : model.adapted) total += count_trainable(layer);
  for (const NamedParam& p : model.plain) {
    if (p.trainable) total += static_cast<std::int64_t>(p.value.size());
  }
  return total;
}

// ----- optimizer -----

void adamw_step(std::map<std::string, Matrix>& params, const GradMap& grads, AdamState& state,
                double lr, const TrainConfig& cfg) {
  state.t += 1;
  const double b1 = cfg.beta1;
  const double b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));

  for (auto& [name, theta] : params) {
    const auto git = grads.find(name);
    const Matrix g = git != grads.end() ? git->second : Matrix(theta.rows(), theta.cols());
    if (!g.same_shape(theta)) {
      throw ShapeError("adamw_step: grad for '" + name + "' is " + g.shape_str() +
                       ", parameter is " + theta.shape_str());
    }
    AdamSlot& slot = state.slots[name];
    if (slot.m1.size() == 0) {
      slot.m1 = Matrix(theta.rows(), theta.cols());
      slot.m2 = Matrix(theta.rows(), theta.cols());
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.data()[i];
      double& m1 = slot.m1.data()[i];
      double& m2 = slot.m2.data()[i];
      m1 = b1 * m1 + (1.0 - b1) * gi;
      m2 = b2 * m2 + (1.0 - b2) * gi * gi;
      const double mhat = m1 / bc1;
      const double vhat = m2 / bc2;
      double& th = theta.data()[i];
      th -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * th);
    }
  }
}

// ----- checkpointing -----

json train_config_to_json(const TrainConfig& cfg) {
  json overrides = json::object();
  for (const auto& [name, v] : cfg.overrides) overrides[name] = variant_name(v);
  return json{{"task", task_name(cfg.task)},
              {"backbone", backbone_name(cfg.backbone)},
              {"adapter",
               {{"variant", variant_name(cfg.adapter.variant)},
                {"rank", cfg.adapter.rank},
                {"alpha", cfg.adapter.alpha},
                {"dropout_p", cfg.adapter.dropout_p},
                {"seed", cfg.adapter.seed},
                {"eps", cfg.adapter.eps}}},
              {"overrides", overrides},
              {"lr", cfg.lr},
              {"schedule", schedule_name(cfg.schedule)},
              {"warmup", cfg.warmup},
              {"batch_size", cfg.batch_size},
              {"steps", cfg.steps},
              {"weight_decay", cfg.weight_decay},
              {"betas", {cfg.beta1, cfg.beta2}},
              {"adam_eps", cfg.adam_eps},
              {"seed", cfg.seed},
              {"checkpoint_steps", cfg.checkpoint_steps}};
}

Checkpoint snapshot(const ToyModel& model, const TrainConfig& cfg, std::int64_t step) {
  Checkpoint c;
  c.method_tag = cfg.method_label();
  c.step = step;
  c.seed = cfg.seed;
  c.config_echo = train_config_to_json(cfg);

  for (const auto& [name, l] : model.adapted) {
    const auto push = [&](Role role, const Matrix& m) { c.layers.push_back({name, role, m}); };
    switch (l.config.variant) {
      case Variant::FT:
        push(Role::full, l.W_full);
        break;
      case Variant::LoRA:
        push(Role::W0, l.W0);
        push(Role::B, l.B);
        push(Role::A, l.A);
        break;
      case Variant::DoRA:
      case Variant::DoRADetached:
        push(Role::W0, l.W0);
        push(Role::m, l.m.to_matrix());
        push(Role::B, l.B);
        push(Role::A, l.A);
        break;
      case Variant::VeRA:
        push(Role::W0, l.W0);
        push(Role::B, l.B_shared);
        push(Role::A, l.A_shared);
        push(Role::lambda_b, l.lambda_b);
        push(Role::lambda_d, l.lambda_d);
        break;
      case Variant::DVoRA:
        push(Role::W0, l.W0);
        push(Role::m, l.m.to_matrix());
        push(Role::B, l.B_shared);
        push(Role::A, l.A_shared);
        push(Role::lambda_b, l.lambda_b);
        push(Role::lambda_d, l.lambda_d);
        break;
      case Variant::MagnitudeOnly:
        push(Role::W0, l.W0);
        push(Role::m, l.m.to_matrix());
        break;
    }
  }
  for (const NamedParam& p : model.plain) {
    c.layers.push_back({p.name, p.trainable ? Role::full : Role::W0, p.value});
  }
  return c;
}

// ----- the loop -----

namespace {

struct OwnedBatch {
  Matrix x;
  Matrix y;
  std::vector<const Matrix*> xs;
  std::vector<const Matrix*> ys;
  LossKind loss = LossKind::Mse;

  Batch view() const {
    Batch b;
    b.loss = loss;
    if (xs.empty()) {
      b.x = &x;
      b.y = &y;
    } else {
      b.xs = xs;
      b.ys = ys;
    }
    return b;
  }
};

// Deterministic cyclic minibatch: columns/sequences [start, start + bs) mod N.
OwnedBatch make_batch(const Dataset& data, int step, int batch_size) {
  const std::size_t n = data.size();
  const std::size_t bs = static_cast<std::size_t>(batch_size);
  const std::size_t start = (static_cast<std::size_t>(step - 1) * bs) % n;
  OwnedBatch b;
  b.loss = data.loss;
  if (data.seq_inputs.empty()) {
    b.x = Matrix(data.inputs.rows(), bs);
    b.y = Matrix(data.targets.rows(), bs);
    for (std::size_t i = 0; i < bs; ++i) {
      const std::size_t c = (start + i) % n;
      for (std::size_t r = 0; r < data.inputs.rows(); ++r) b.x(r, i) = data.inputs(r, c);
      for (std::size_t r = 0; r < data.targets.rows(); ++r) b.y(r, i) = data.targets(r, c);
    }
  } else {
    for (std::size_t i = 0; i < bs; ++i) {
      const std::size_t c = (start + i) % n;
      b.xs.push_back(&data.seq_inputs[c]);
      b.ys.push_back(&data.seq_targets[c]);
    }
  }
  return b;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
  validate_train_config(cfg);
  TrainResult res;
  res.model = make_model(cfg);
  const Dataset data = make_task(cfg);
  if (static_cast<std::size_t>(cfg.batch_size) > data.size()) {
    throw ConfigError("config.batch_size exceeds dataset size " + std::to_string(data.size()));
  }

  std::map<std::string, Matrix> params = collect_params(res.model);
  res.trainable_scalars = count_model_trainable(res.model);
  res.baseline_loss = model_loss(res.model, data);
  res.init_checkpoint = snapshot(res.model, cfg, 0);

  AdamState state;
  Rng drop_rng(mix_seed(cfg.seed, 555));
  auto next_ckpt = cfg.checkpoint_steps.begin();

  for (int step = 1; step <= cfg.steps; ++step) {
    const OwnedBatch batch = make_batch(data, step, cfg.batch_size);
    Tape t;
    const Tape::NodeId loss = model_loss_node(t, res.model, batch.view(), true, &drop_rng);
    const double loss_value = t.value(loss)(0, 0);
    if (!std::isfinite(loss_value)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step));
    }
    const GradMap grads = t.backward(loss);
    const double lr_t = lr_at(step, cfg);
    adamw_step(params, grads, state, lr_t, cfg);
    apply_params(res.model, params);
    res.curve.push_back({step, lr_t, loss_value});
    if (next_ckpt != cfg.checkpoint_steps.end() && *next_ckpt == step) {
      res.checkpoints.push_back(snapshot(res.model, cfg, step));
      ++next_ckpt;
    }
  }

  res.final_loss = model_loss(res.model, data);
  return res;
}

}  // namespace dora
