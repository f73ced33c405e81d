// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dora/adapters.hpp"
#include "dora/checkpoint.hpp"
#include "dora/matrix.hpp"
#include "dora/rng.hpp"
#include "dora/tape.hpp"

namespace dora {

enum class TaskKind { TeacherRegression, BlobClassification, AttentionCopy };
enum class BackboneKind { Mlp, Attention };
enum class Schedule { Constant, LinearDecay, CosineDecay };

const char* task_name(TaskKind t);
const char* backbone_name(BackboneKind b);
const char* schedule_name(Schedule s);

struct TrainConfig {
  TaskKind task = TaskKind::TeacherRegression;
  BackboneKind backbone = BackboneKind::Mlp;
  AdapterConfig adapter;
  std::map<std::string, Variant> overrides;  // per-layer variant override

  double lr = 1e-2;
  Schedule schedule = Schedule::Constant;
  double warmup = 0.0;  // >= 1: warmup steps; in [0, 1): fraction of steps
  int batch_size = 16;
  int steps = 100;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::vector<int> checkpoint_steps;  // strictly increasing, within [1, steps]

  std::string method_label() const { return variant_name(adapter.variant); }
};

// Throws ConfigError on any out-of-range field or invalid task/backbone pair.
void validate_train_config(const TrainConfig& cfg);

int resolve_warmup(const TrainConfig& cfg);

// Learning rate for 1-indexed step: linear warmup 0 -> lr hitting exactly lr
// at step == warmup, then the schedule decays over the remaining steps
// (constant holds lr; linear and cosine reach 0 at the final step).
double lr_at(int step, const TrainConfig& cfg);

// ----- tasks -----

struct Dataset {
  LossKind loss = LossKind::Mse;
  Matrix inputs;   // in_dim x N (MLP tasks)
  Matrix targets;  // out_dim x N
  std::vector<Matrix> seq_inputs;  // attention task
  std::vector<Matrix> seq_targets;
  std::size_t size() const {
    return seq_inputs.empty() ? inputs.cols() : seq_inputs.size();
  }
};

// Deterministic dataset for (cfg.task, cfg.seed); same config gives
// bit-identical data.
Dataset make_task(const TrainConfig& cfg);

// Teacher-regression internals, exposed so tests can zero the noise.
Dataset make_teacher_regression(const TrainConfig& cfg, double noise_sigma);

// ----- model -----

struct NamedParam {
  std::string name;
  Matrix value;
  bool trainable = false;  // true only in FT runs
};

struct ToyModel {
  BackboneKind backbone = BackboneKind::Mlp;
  std::vector<std::pair<std::string, AdapterLayer>> adapted;  // ordered
  std::vector<NamedParam> plain;                              // ordered

  const AdapterLayer* find_adapted(const std::string& name) const;
  const NamedParam* find_plain(const std::string& name) const;
};

// MLP 16 -> 32 -> 32 -> 4 with adapters on fc1, fc2; or a one-block
// attention model (d_model 16, seq 8) with adapters on wq, wv. Base weights
// are the deterministic "pretrained" state for cfg.seed.
ToyModel make_model(const TrainConfig& cfg);

// Names of the layers that carry adapters for the backbone.
std::vector<std::string> adapted_layer_names(BackboneKind b);

struct Batch {
  const Matrix* x = nullptr;
  const Matrix* y = nullptr;
  std::vector<const Matrix*> xs;  // attention sequences
  std::vector<const Matrix*> ys;
  LossKind loss = LossKind::Mse;
};

// Builds the full forward graph for one batch and returns the loss node.
// Trainable tensors become leaves named "<layer>.<param>" (adapted) or
// "<name>" (plain FT tensors); frozen ones enter as constants. In training
// mode with dropout_p > 0 each adapter branch sees an inverted-dropout mask
// drawn from drop_rng.
Tape::NodeId model_loss_node(Tape& t, const ToyModel& model, const Batch& batch, bool training,
                             Rng* drop_rng);

// Inference-mode loss over a whole dataset (no tape, no dropout).
double model_loss(const ToyModel& model, const Dataset& data);

// Current trainable tensors as a flat name -> value map (tape leaf names).
std::map<std::string, Matrix> collect_params(const ToyModel& model);
// Writes the map back into adapter fields / plain tensors.
void apply_params(ToyModel& model, const std::map<std::string, Matrix>& params);

// Total trainable scalar count: sum over adapters plus plain FT tensors;
// matches the scalar count across leaves of the training tape.
std::int64_t count_model_trainable(const ToyModel& model);

// ----- optimizer -----

struct AdamSlot {
  Matrix m1;
  Matrix m2;
};

struct AdamState {
  std::map<std::string, AdamSlot> slots;
  std::int64_t t = 0;
};

// Bias-corrected AdamW with decoupled weight decay:
// theta -= lr * (mhat / (sqrt(vhat) + adam_eps) + weight_decay * theta).
void adamw_step(std::map<std::string, Matrix>& params, const GradMap& grads, AdamState& state,
                double lr, const TrainConfig& cfg);

// ----- training -----

struct LossPoint {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  ToyModel model;
  std::vector<LossPoint> curve;       // one point per step
  Checkpoint init_checkpoint;         // step 0 snapshot (the W0 baseline)
  std::vector<Checkpoint> checkpoints;  // one per cfg.checkpoint_steps entry
  std::int64_t trainable_scalars = 0;
  double baseline_loss = 0.0;  // whole-dataset loss before step 1
  double final_loss = 0.0;     // whole-dataset loss after the last step
};

// Runs the full loop. Frozen tensors provably never move; identical config
// reruns give bit-identical curves and checkpoints. Non-finite loss throws
// NumericError naming the step.
TrainResult train(const TrainConfig& cfg);

// Checkpoint (role-set encoding per variant) of the current model state.
Checkpoint snapshot(const ToyModel& model, const TrainConfig& cfg, std::int64_t step);

// The run config as JSON (the same shape the CLI parses); used as the
// checkpoint config echo and for config hashing.
nlohmann::json train_config_to_json(const TrainConfig& cfg);

}  // namespace dora
