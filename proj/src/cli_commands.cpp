// SPDX-License-Identifier: Apache-2.0
#include "dora/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dora/adapters.hpp"
#include "dora/analysis.hpp"
#include "dora/checkpoint.hpp"
#include "dora/errors.hpp"
#include "dora/fsio.hpp"
#include "dora/trainer.hpp"

namespace dora {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// 64-bit FNV-1a over the canonical (key-sorted) config dump.
std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string step_filename(std::int64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "step_%06lld%s", static_cast<long long>(step),
                kCheckpointExtension);
  return buf;
}

// ----- run-config parsing (strict: unknown keys are errors) -----

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& ctx) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (allowed.find(it.key()) == allowed.end()) {
      throw ConfigError(ctx + ": unknown key '" + it.key() + "'");
    }
  }
}

const json* maybe(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double as_number(const json& v, const std::string& ctx) {
  if (!v.is_number()) throw ConfigError(ctx + ": expected a number");
  return v.get<double>();
}

int as_int(const json& v, const std::string& ctx) {
  if (!v.is_number_integer()) throw ConfigError(ctx + ": expected an integer");
  return v.get<int>();
}

std::uint64_t as_seed(const json& v, const std::string& ctx) {
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0)) {
    throw ConfigError(ctx + ": expected a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

std::string as_string(const json& v, const std::string& ctx) {
  if (!v.is_string()) throw ConfigError(ctx + ": expected a string");
  return v.get<std::string>();
}

Variant as_variant(const json& v, const std::string& ctx) {
  const std::string s = as_string(v, ctx);
  const auto parsed = variant_from_name(s);
  if (!parsed) {
    throw ConfigError(ctx + ": unknown variant '" + s +
                      "' (valid: FT, LoRA, DoRA, DoRADetached, VeRA, DVoRA, MagnitudeOnly)");
  }
  return *parsed;
}

TaskKind as_task(const json& v, const std::string& ctx) {
  const std::string s = as_string(v, ctx);
  for (TaskKind t :
       {TaskKind::TeacherRegression, TaskKind::BlobClassification, TaskKind::AttentionCopy}) {
    if (s == task_name(t)) return t;
  }
  throw ConfigError(ctx + ": unknown task '" + s +
                    "' (valid: teacher_regression, blob_classification, attention_copy)");
}

BackboneKind as_backbone(const json& v, const std::string& ctx) {
  const std::string s = as_string(v, ctx);
  for (BackboneKind b : {BackboneKind::Mlp, BackboneKind::Attention}) {
    if (s == backbone_name(b)) return b;
  }
  throw ConfigError(ctx + ": unknown backbone '" + s + "' (valid: mlp, attention)");
}

Schedule as_schedule(const json& v, const std::string& ctx) {
  const std::string s = as_string(v, ctx);
  for (Schedule sc : {Schedule::Constant, Schedule::LinearDecay, Schedule::CosineDecay}) {
    if (s == schedule_name(sc)) return sc;
  }
  throw ConfigError(ctx + ": unknown schedule '" + s +
                    "' (valid: constant, linear_decay, cosine_decay)");
}

struct RunSpec {
  TrainConfig cfg;
  std::string output_dir;  // from the config file; flags/env may override
};

RunSpec parse_run_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  check_keys(j,
             {"task", "backbone", "adapter", "overrides", "lr", "schedule", "warmup", "batch_size",
              "steps", "weight_decay", "betas", "adam_eps", "seed", "checkpoint_steps",
              "output_dir"},
             "config");
  RunSpec spec;
  TrainConfig& cfg = spec.cfg;

  if (const json* v = maybe(j, "task")) cfg.task = as_task(*v, "config.task");
  if (const json* v = maybe(j, "backbone")) {
    cfg.backbone = as_backbone(*v, "config.backbone");
  } else {
    cfg.backbone =
        cfg.task == TaskKind::AttentionCopy ? BackboneKind::Attention : BackboneKind::Mlp;
  }

  const json* a = maybe(j, "adapter");
  if (a == nullptr) throw ConfigError("config: missing required key 'adapter'");
  if (!a->is_object()) throw ConfigError("config.adapter: expected an object");
  check_keys(*a, {"variant", "rank", "alpha", "dropout_p", "seed", "eps"}, "config.adapter");
  if (const json* v = maybe(*a, "variant")) {
    cfg.adapter.variant = as_variant(*v, "config.adapter.variant");
  } else {
    throw ConfigError("config.adapter: missing required key 'variant'");
  }
  if (const json* v = maybe(*a, "rank")) cfg.adapter.rank = as_int(*v, "config.adapter.rank");
  if (const json* v = maybe(*a, "alpha")) cfg.adapter.alpha = as_number(*v, "config.adapter.alpha");
  if (const json* v = maybe(*a, "dropout_p")) {
    cfg.adapter.dropout_p = as_number(*v, "config.adapter.dropout_p");
  }
  if (const json* v = maybe(*a, "seed")) cfg.adapter.seed = as_seed(*v, "config.adapter.seed");
  if (const json* v = maybe(*a, "eps")) cfg.adapter.eps = as_number(*v, "config.adapter.eps");

  if (const json* v = maybe(j, "overrides")) {
    if (!v->is_object()) throw ConfigError("config.overrides: expected an object");
    for (auto it = v->begin(); it != v->end(); ++it) {
      cfg.overrides[it.key()] = as_variant(it.value(), "config.overrides." + it.key());
    }
  }

  if (const json* v = maybe(j, "lr")) cfg.lr = as_number(*v, "config.lr");
  if (const json* v = maybe(j, "schedule")) cfg.schedule = as_schedule(*v, "config.schedule");
  if (const json* v = maybe(j, "warmup")) cfg.warmup = as_number(*v, "config.warmup");
  if (const json* v = maybe(j, "batch_size")) cfg.batch_size = as_int(*v, "config.batch_size");
  if (const json* v = maybe(j, "steps")) cfg.steps = as_int(*v, "config.steps");
  if (const json* v = maybe(j, "weight_decay")) {
    cfg.weight_decay = as_number(*v, "config.weight_decay");
  }
  if (const json* v = maybe(j, "betas")) {
    if (!v->is_array() || v->size() != 2) {
      throw ConfigError("config.betas: expected an array of two numbers");
    }
    cfg.beta1 = as_number((*v)[0], "config.betas[0]");
    cfg.beta2 = as_number((*v)[1], "config.betas[1]");
  }
  if (const json* v = maybe(j, "adam_eps")) cfg.adam_eps = as_number(*v, "config.adam_eps");
  if (const json* v = maybe(j, "seed")) {
    cfg.seed = as_seed(*v, "config.seed");
    if (maybe(*a, "seed") == nullptr) cfg.adapter.seed = cfg.seed;
  }
  if (const json* v = maybe(j, "checkpoint_steps")) {
    if (!v->is_array()) throw ConfigError("config.checkpoint_steps: expected an array");
    for (std::size_t i = 0; i < v->size(); ++i) {
      cfg.checkpoint_steps.push_back(
          as_int((*v)[i], "config.checkpoint_steps[" + std::to_string(i) + "]"));
    }
  }
  if (const json* v = maybe(j, "output_dir")) spec.output_dir = as_string(*v, "config.output_dir");

  validate_train_config(cfg);
  return spec;
}

json load_json_config(const fs::path& path) {
  const std::string text = read_text_file(path, "config");
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": malformed JSON: " + std::string(e.what()));
  }
}

// ----- train -----

int cmd_train(const std::string& config_path, const std::string& out_flag) {
  RunSpec spec = parse_run_config(load_json_config(config_path));
  TrainConfig& cfg = spec.cfg;

  std::string out_dir = out_flag;
  if (out_dir.empty()) {
    if (const char* env = std::getenv("DORA_OUTPUT_DIR")) out_dir = env;
  }
  if (out_dir.empty()) out_dir = spec.output_dir;
  if (out_dir.empty()) {
    throw ConfigError("no output directory: pass --out, set DORA_OUTPUT_DIR, or put "
                      "output_dir in the config");
  }
  if (cfg.checkpoint_steps.empty()) cfg.checkpoint_steps = {cfg.steps};

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("train: cannot create output directory " + out_dir + ": " + ec.message());

  const TrainResult res = train(cfg);

  const fs::path dir(out_dir);
  const std::string init_name = step_filename(0);
  save_checkpoint(res.init_checkpoint, dir / init_name);
  std::vector<std::string> ckpt_names;
  for (const Checkpoint& c : res.checkpoints) {
    ckpt_names.push_back(step_filename(c.step));
    save_checkpoint(c, dir / ckpt_names.back());
  }

  std::string csv = "step,lr,loss\n";
  for (const LossPoint& p : res.curve) {
    csv += std::to_string(p.step) + "," + fmt17(p.lr) + "," + fmt17(p.loss) + "\n";
  }
  write_text_atomic(dir / "loss.csv", csv, "train");

  const json cfg_json = train_config_to_json(cfg);
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"method", cfg.method_label()},
                {"task", task_name(cfg.task)},
                {"backbone", backbone_name(cfg.backbone)},
                {"seed", cfg.seed},
                {"steps", cfg.steps},
                {"trainable_scalars", res.trainable_scalars},
                {"baseline_loss", res.baseline_loss},
                {"final_loss", res.final_loss},
                {"config", cfg_json},
                {"config_hash", fnv1a_hex(cfg_json.dump())},
                {"files",
                 {{"loss_csv", "loss.csv"},
                  {"init_checkpoint", init_name},
                  {"checkpoints", ckpt_names}}}};
  // Written last: its presence marks a complete run.
  write_text_atomic(dir / "manifest.json", manifest.dump(1) + "\n", "train");

  std::cout << "method " << cfg.method_label() << " on " << task_name(cfg.task) << " ("
            << backbone_name(cfg.backbone) << "), seed " << cfg.seed << "\n"
            << "trainable scalars: " << res.trainable_scalars << "\n"
            << "steps: " << cfg.steps << ", dataset loss " << fmt17(res.baseline_loss) << " -> "
            << fmt17(res.final_loss) << "\n"
            << "wrote " << (dir / "manifest.json").string() << " (" << 1 + ckpt_names.size()
            << " checkpoints, loss.csv)\n";
  return kExitOk;
}

// ----- analyze -----

int cmd_analyze(const std::string& run_dir, std::string baseline,
                std::vector<std::string> checkpoints, const std::string& out_prefix,
                const std::string& pattern) {
  if (!run_dir.empty()) {
    const fs::path dir(run_dir);
    const std::string text = read_text_file(dir / "manifest.json", "analyze");
    json manifest;
    try {
      manifest = json::parse(text);
    } catch (const json::parse_error& e) {
      throw IoError("analyze: " + (dir / "manifest.json").string() + ": malformed JSON: " +
                    std::string(e.what()));
    }
    if (!manifest.contains("files") || !manifest["files"].is_object()) {
      throw IoError("analyze: manifest has no 'files' object");
    }
    const json& files = manifest["files"];
    if (!files.contains("init_checkpoint") || !files["init_checkpoint"].is_string() ||
        !files.contains("checkpoints") || !files["checkpoints"].is_array()) {
      throw IoError("analyze: manifest 'files' is missing init_checkpoint or checkpoints");
    }
    baseline = (dir / files["init_checkpoint"].get<std::string>()).string();
    checkpoints.clear();
    for (const json& name : files["checkpoints"]) {
      if (!name.is_string()) throw IoError("analyze: manifest checkpoint names must be strings");
      checkpoints.push_back((dir / name.get<std::string>()).string());
    }
  }
  if (baseline.empty()) throw ConfigError("analyze: need --run or --baseline");
  if (checkpoints.empty()) throw ConfigError("analyze: no checkpoints to analyze");

  const Checkpoint base = load_checkpoint(baseline);
  const std::map<std::string, Matrix> w0 = to_effective(base);
  std::vector<Checkpoint> loaded;
  for (const std::string& p : checkpoints) loaded.push_back(load_checkpoint(p));

  const AnalysisResult result = analyze_run(w0, loaded, pattern);
  const fs::path csv_path(out_prefix + ".csv");
  const fs::path json_path(out_prefix + ".json");
  emit_analysis_csv(result, csv_path);
  emit_scatter_json(result, json_path);

  std::cout << result.records.size() << " decomposition points from " << loaded.size()
            << " checkpoint(s)\n";
  for (const MethodSummary& m : result.methods) {
    std::cout << m.method << ": n_points=" << m.n_points;
    if (m.stats_ok) {
      std::cout << " pearson_r=" << fmt17(m.pearson_r) << " slope=" << fmt17(m.slope) << "\n";
    } else {
      std::cout << " (statistics degenerate: " << m.note << ")\n";
    }
  }
  std::cout << "wrote " << csv_path.string() << " and " << json_path.string() << "\n";
  return kExitOk;
}

// ----- merge -----

int cmd_merge(const std::string& ckpt_path, const std::string& out_path, int probes) {
  if (probes < 1) throw ConfigError("merge: --probes must be >= 1");
  const Checkpoint c = load_checkpoint(ckpt_path);
  const std::map<std::string, AdapterLayer> layers = reconstruct_layers(c);
  const std::map<std::string, Matrix> merged = to_effective(c);

  const double tol = 1e-12;
  double worst = 0.0;
  std::string worst_layer;
  const Rng root(mix_seed(c.seed, 0x6D657267ULL));
  std::uint64_t stream = 0;
  for (const auto& [name, layer] : layers) {
    Rng rng = root.fork(stream++);
    Matrix x(layer.k(), static_cast<std::size_t>(probes));
    for (double& v : x.data()) v = rng.gaussian();

    // Adapter-structured forward through the training graph vs the single
    // merged matrix a deployment would use.
    Tape t;
    const auto w = effective_weight_node(t, layer, "");
    const Matrix y_adapter = t.value(t.matmul(w, t.constant(x)));
    const Matrix y_merged = matmul(merged.at(name), x);

    double dev = 0.0;
    for (std::size_t i = 0; i < y_adapter.size(); ++i) {
      dev = std::max(dev, std::abs(y_adapter.data()[i] - y_merged.data()[i]));
    }
    std::cout << "layer " << name << ": max forward deviation " << fmt17(dev) << " over "
              << probes << " probes\n";
    if (dev > worst) {
      worst = dev;
      worst_layer = name;
    }
  }
  if (worst > tol) {
    throw NumericError("merge: forward deviation " + fmt17(worst) + " on layer '" + worst_layer +
                       "' exceeds " + fmt17(tol));
  }

  Checkpoint out;
  out.method_tag = variant_name(Variant::FT);  // merged weights are plain full tensors
  out.step = c.step;
  out.seed = c.seed;
  out.config_echo = c.config_echo;
  out.config_echo["merged_from"] = c.method_tag;
  for (const auto& [name, w] : merged) out.layers.push_back({name, Role::full, w});
  save_checkpoint(out, out_path);

  const Checkpoint reread = load_checkpoint(out_path);
  const std::map<std::string, Matrix> round_trip = to_effective(reread);
  for (const auto& [name, w] : merged) {
    if (round_trip.at(name) != w) {
      throw NumericError("merge: round trip of '" + name + "' is not bit-exact");
    }
  }

  std::cout << "merge OK: " << layers.size() << " layer(s), max deviation " << fmt17(worst)
            << " (tol " << fmt17(tol) << "), round trip bit-exact\n"
            << "wrote " << out_path << "\n";
  return kExitOk;
}

// ----- gradcheck -----

struct Dims {
  std::size_t d = 6;
  std::size_t k = 5;
  int r = 3;
};

Dims parse_dims(const std::string& s) {
  Dims out;
  unsigned long long d = 0, k = 0, r = 0;
  char extra = 0;
  if (std::sscanf(s.c_str(), "%llux%llux%llu%c", &d, &k, &r, &extra) != 3 || d == 0 || k == 0 ||
      r == 0) {
    throw ConfigError("gradcheck: --dims must look like 6x5x3 (d x k x r)");
  }
  out.d = d;
  out.k = k;
  out.r = static_cast<int>(r);
  return out;
}

std::vector<double> random_unit(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double nv = 0.0;
  do {
    for (double& x : v) x = rng.gaussian();
    nv = norm(v);
  } while (nv < 1e-8);
  for (double& x : v) x /= nv;
  return v;
}

// Unit vector orthogonal to unit vector v.
std::vector<double> random_perp(Rng& rng, const std::vector<double>& v) {
  while (true) {
    std::vector<double> w = random_unit(rng, v.size());
    const double c = dot(w, v);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= c * v[i];
    const double nw = norm(w);
    if (nw > 1e-6) {
      for (double& x : w) x /= nw;
      return w;
    }
  }
}

bool report_line(const char* label, bool pass, const std::string& detail) {
  std::cout << label << ": " << (pass ? "PASS" : "FAIL") << " (" << detail << ")\n";
  return pass;
}

int cmd_gradcheck(const std::string& variant_str, const std::string& dims_str, std::uint64_t seed,
                  const std::string& loss_str) {
  const auto variant = variant_from_name(variant_str);
  if (!variant) {
    std::cerr << "gradcheck: unknown variant '" << variant_str
              << "'; valid: FT, LoRA, DoRA, DoRADetached, VeRA, DVoRA, MagnitudeOnly\n";
    return kExitUsage;
  }
  LossKind kind;
  if (loss_str == "mse") {
    kind = LossKind::Mse;
  } else if (loss_str == "xent") {
    kind = LossKind::SoftmaxXent;
  } else {
    throw ConfigError("gradcheck: --loss must be mse or xent");
  }
  const Dims dims = parse_dims(dims_str);

  const Rng root(seed);
  Rng wrng = root.fork(1);
  Matrix w0(dims.d, dims.k);
  for (double& v : w0.data()) v = wrng.gaussian();

  AdapterConfig acfg;
  acfg.variant = *variant;
  acfg.rank = std::min<int>(dims.r, static_cast<int>(std::min(dims.d, dims.k)));
  acfg.seed = mix_seed(seed, 2);
  AdapterLayer layer = init_adapter(w0, acfg);

  // Kick every trainable tensor off its initialization so the gradients are
  // generic (B and lambda_b start at zero, which would mask coupling bugs).
  Rng prng = root.fork(3);
  std::map<std::string, Matrix> params = trainable_params(layer);
  for (auto& [name, value] : params) {
    for (double& v : value.data()) {
      if (name == "m") {
        v *= prng.uniform(0.8, 1.25);
      } else {
        v += 0.3 * prng.gaussian();
      }
    }
  }
  set_trainable_params(layer, params);
  params = trainable_params(layer);

  constexpr std::size_t kBatch = 5;
  Rng xrng = root.fork(4);
  Matrix x(dims.k, kBatch);
  for (double& v : x.data()) v = xrng.gaussian();
  Matrix target(dims.d, kBatch);
  if (kind == LossKind::Mse) {
    for (double& v : target.data()) v = xrng.gaussian();
  } else {
    for (std::size_t j = 0; j < kBatch; ++j) target(j % dims.d, j) = 1.0;
  }

  std::cout << "variant " << variant_name(*variant) << ", dims " << dims.d << "x" << dims.k << "x"
            << acfg.rank << " (d x k x r), loss " << loss_str << ", seed " << seed << "\n";

  bool all_pass = true;

  // 1. Reverse-mode tape vs hand-derived closed forms.
  LayerTape lt = build_tape(layer, x, target, kind);
  const GradMap auto_grads = lt.tape.backward(lt.loss);
  const Matrix upstream = loss_weight_gradient(effective_weight(layer), x, target, kind);
  const GradMap closed = closed_form_param_grads(layer, upstream);
  double cf_err = 0.0;
  for (const auto& [name, g] : auto_grads) {
    const auto it = closed.find(name);
    if (it == closed.end()) throw NumericError("gradcheck: no closed form for leaf '" + name + "'");
    for (std::size_t i = 0; i < g.size(); ++i) {
      cf_err = std::max(cf_err, rel_err(g.data()[i], it->second.data()[i]));
    }
  }
  const double cf_tol = 1e-10;
  all_pass &= report_line("autodiff vs closed form", cf_err <= cf_tol,
                          "max rel err " + fmt17(cf_err) + ", tol " + fmt17(cf_tol));

  // 2. Reverse-mode tape vs central finite differences. For the detached
  //    variant the norm divisor is a stop-gradient quantity, so the FD
  //    oracle differentiates the function with the norms pinned at their
  //    current values; everywhere else the plain graph is the function.
  const AdapterLayer base_layer = layer;
  const bool detached = *variant == Variant::DoRADetached;
  const RowVector frozen_norms =
      detached ? column_norms(add(layer.W0, scale(matmul(layer.B, layer.A),
                                                  layer.config.scaling())))
               : RowVector();
  const TapeBuilder builder = [&](Tape& t, const std::map<std::string, Matrix>& p) {
    AdapterLayer l2 = base_layer;
    set_trainable_params(l2, p);
    const auto w = detached ? effective_weight_node_pinned_norm(t, l2, "", frozen_norms)
                            : effective_weight_node(t, l2, "");
    const auto pred = t.matmul(w, t.constant(x));
    const auto tgt = t.constant(target);
    return kind == LossKind::Mse ? t.mse(pred, tgt) : t.softmax_xent(pred, tgt);
  };
  const GradCheckReport report = grad_check(builder, params);
  double fd_err = 0.0;
  for (const GradCheckEntry& e : report.entries) fd_err = std::max(fd_err, e.max_rel_err);
  all_pass &= report_line("autodiff vs finite differences", report.all_pass(),
                          "max rel err " + fmt17(fd_err) + ", tol " + fmt17(report.tol));

  // 3. Magnitude-gradient identity u.v/|v| == |u| cos(u, v).
  Rng vrng = root.fork(5);
  constexpr int kPairs = 200;
  double id_err = 0.0;
  for (int i = 0; i < kPairs; ++i) {
    std::vector<double> v(8), u(8);
    for (double& t : v) t = vrng.gaussian();
    for (double& t : u) t = vrng.gaussian();
    const auto [lhs, rhs] = grad_m_identity_check(v, u);
    id_err = std::max(id_err, rel_err(lhs, rhs, 1e-15));
  }
  const double id_tol = 1e-12;
  all_pass &= report_line("magnitude-gradient identity", id_err <= id_tol,
                          "max rel err " + fmt17(id_err) + ", tol " + fmt17(id_tol) + ", " +
                              std::to_string(kPairs) + " pairs");

  // 4. Equal-norm upstreams: better alignment with the column direction must
  //    give the strictly larger magnitude gradient.
  Rng orng = root.fork(6);
  int violations = 0;
  for (int i = 0; i < kPairs; ++i) {
    const std::vector<double> vhat = random_unit(orng, 8);
    std::vector<double> v(8);
    const double vn = orng.uniform(0.5, 2.0);
    for (std::size_t t = 0; t < 8; ++t) v[t] = vn * vhat[t];
    double c1 = orng.uniform(0.0, 1.0);
    double c2 = orng.uniform(0.0, 1.0);
    if (std::abs(c1) < std::abs(c2)) std::swap(c1, c2);
    if (std::abs(c1) - std::abs(c2) < 1e-3) c1 = std::min(1.0, std::abs(c2) + 1e-2);
    if (orng.uniform() < 0.5) c1 = -c1;  // sign must not matter
    if (orng.uniform() < 0.5) c2 = -c2;
    const double g = orng.uniform(0.5, 2.0);
    const std::vector<double> w1 = random_perp(orng, vhat);
    const std::vector<double> w2 = random_perp(orng, vhat);
    std::vector<double> g1(8), g2(8);
    const double s1 = std::sqrt(std::max(0.0, 1.0 - c1 * c1));
    const double s2 = std::sqrt(std::max(0.0, 1.0 - c2 * c2));
    for (std::size_t t = 0; t < 8; ++t) {
      g1[t] = g * (c1 * vhat[t] + s1 * w1[t]);
      g2[t] = g * (c2 * vhat[t] + s2 * w2[t]);
    }
    if (!scenario_ordering_check(v, g1, g2)) ++violations;
  }
  all_pass &= report_line("alignment ordering", violations == 0,
                          std::to_string(violations) + " violations in " + std::to_string(kPairs) +
                              " pairs");

  if (!all_pass) {
    std::cerr << "gradcheck: FAILED\n";
    return kExitCheckFailed;
  }
  std::cout << "gradcheck: all checks passed\n";
  return kExitOk;
}

}  // namespace

// ----- dispatch -----

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Weight-decomposed low-rank adaptation toolkit"};
  app.require_subcommand(1);

  std::string train_config;
  std::string train_out;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a toy model with an adapter variant");
  train_cmd->add_option("--config", train_config, "Run config JSON file")->required();
  train_cmd->add_option("--out", train_out,
                        "Output directory (overrides DORA_OUTPUT_DIR and config output_dir)");

  std::string an_run, an_baseline, an_out, an_pattern;
  std::vector<std::string> an_ckpts;
  CLI::App* an_cmd =
      app.add_subcommand("analyze", "Magnitude/direction decomposition of checkpoints");
  CLI::Option* run_opt =
      an_cmd->add_option("--run", an_run, "Training output directory with a manifest.json");
  an_cmd->add_option("--baseline", an_baseline, "Baseline (step 0) checkpoint")
      ->excludes(run_opt);
  an_cmd->add_option("--checkpoints", an_ckpts, "Trained checkpoints to analyze")
      ->excludes(run_opt);
  an_cmd->add_option("--out", an_out, "Output prefix (writes <prefix>.csv and <prefix>.json)")
      ->required();
  an_cmd->add_option("--pattern", an_pattern, "Layer-name glob filter (* and ?)");

  std::string mg_ckpt, mg_out;
  int mg_probes = 32;
  CLI::App* mg_cmd =
      app.add_subcommand("merge", "Fold an adapter checkpoint into deployment weights");
  mg_cmd->add_option("--checkpoint", mg_ckpt, "Adapter checkpoint to merge")->required();
  mg_cmd->add_option("--out", mg_out, "Merged checkpoint path (.dckpt.json)")->required();
  mg_cmd->add_option("--probes", mg_probes, "Random probe inputs per layer (default 32)");

  std::string gc_variant, gc_dims = "6x5x3", gc_loss = "mse";
  std::uint64_t gc_seed = 42;
  CLI::App* gc_cmd =
      app.add_subcommand("gradcheck", "Verify gradients against closed forms and finite differences");
  gc_cmd->add_option("--variant", gc_variant, "Adapter variant to check")->required();
  gc_cmd->add_option("--dims", gc_dims, "Layer dims d x k x r (default 6x5x3)");
  gc_cmd->add_option("--seed", gc_seed, "Random seed (default 42)");
  gc_cmd->add_option("--loss", gc_loss, "Loss: mse or xent (default mse)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_config, train_out);
    if (an_cmd->parsed()) return cmd_analyze(an_run, an_baseline, an_ckpts, an_out, an_pattern);
    if (mg_cmd->parsed()) return cmd_merge(mg_ckpt, mg_out, mg_probes);
    if (gc_cmd->parsed()) return cmd_gradcheck(gc_variant, gc_dims, gc_seed, gc_loss);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DegenerateColumnError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const DegenerateVarianceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitUsage;  // unreachable with require_subcommand(1)
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace dora
