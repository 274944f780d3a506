#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vidt/eval.hpp"

namespace vidt {

struct TrainConfig {
  Real lr = 1e-4;
  Real weight_decay = 1e-4;
  Real grad_clip = 0.1;  // global L2 norm; 0 disables clipping
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  std::string model_config;  // path; empty keeps the default model
  LossWeights weights;
  bool aux_loss = true;
  Real no_object_weight = 0.1;
  // Distillation: used when lambda_dis > 0 and a teacher is supplied.
  std::string teacher_checkpoint;
  std::string teacher_config;
  Real lambda_dis = 0;
  std::size_t eval_every = 1;  // epochs between evaluations; 0 evaluates only after the last epoch
  std::size_t max_steps = 0;   // stop early after this many optimizer steps (0 = whole schedule)
  std::size_t threads = 1;     // evaluation workers

  void validate() const;
};

// Cosine-annealed learning rate for optimizer step `step` of `total`.
Real cosine_lr(Real base, std::uint64_t step, std::uint64_t total);

// Decoupled-weight-decay Adam over a fixed, ordered parameter list.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(std::size_t count);

  // Applies one update at learning rate `lr`; gradients are read from the
  // parameters and assumed already clipped.
  void step(std::vector<Tensor>& params, Real lr, const TrainConfig& cfg);

  std::uint64_t steps() const { return steps_; }
  void save(NamedTensors& out, const NamedTensors& params) const;
  void load(const NamedTensors& entries, const NamedTensors& params);

 private:
  std::vector<Buffer> m_, v_;
  std::uint64_t steps_ = 0;
};

// Scales all gradients so their joint L2 norm is at most `max_norm`; returns
// the norm before clipping. NumericError names the first parameter holding a
// non-finite gradient.
Real clip_gradients(const NamedTensors& params, Real max_norm);

struct EpochLog {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  Real lr = 0;
  Real loss = 0, cls = 0, l1 = 0, giou = 0, distill = 0;  // means over the epoch's batches
  std::optional<EvalReport> eval;
};

struct TrainResult {
  Detector model;
  Real initial_loss = 0;  // mean detection loss over the training set before the first step
  Real final_loss = 0;    // the same after the last step
  std::uint64_t steps = 0;
  std::vector<EpochLog> epochs;
  std::optional<EvalReport> final_eval;
  std::vector<std::string> log_lines;  // the JSONL metrics log
};

// Trains a detector on `train_set`. With a non-empty `eval_set` each
// evaluated epoch reports AP on it and picks the best checkpoint by AP50;
// otherwise the best checkpoint has the lowest epoch loss. When `out_dir` is
// non-empty it receives metrics.jsonl, model.cfg, final.vidt and best.vidt.
// `resume` names a checkpoint written by an earlier run of the same config;
// training continues from its step. `teacher` (forward-only) enables the
// distillation term when cfg.lambda_dis > 0.
TrainResult train(const TrainConfig& cfg, const DetectorConfig& model_cfg, const std::vector<SyntheticScene>& train_set,
                  const std::vector<SyntheticScene>& eval_set, const std::string& out_dir = "",
                  const Detector* teacher = nullptr, const std::string& resume = "");

// Mean detection loss over `scenes` without recording gradients.
Real mean_detection_loss(const Detector& model, const std::vector<SyntheticScene>& scenes, const LossConfig& loss);

LossConfig loss_config_for(const TrainConfig& cfg, const DetectorConfig& model_cfg);

// Checks that teacher and student produce distillation token sets of equal
// cardinality and width on `probe`; ConfigError citing both configs if not.
void check_distill_compatible(const Detector& teacher, const Detector& student, const Tensor& probe);

// Full training checkpoint: model.<param>, adam.m.<param>, adam.v.<param>,
// state.* and meta.classes, stored as f64.
void save_checkpoint(const std::string& path, const Detector& model, const AdamW& opt,
                     const std::vector<std::pair<std::string, Real>>& state);

}  // namespace vidt
