#pragma once

#include <string>
#include <vector>

#include "vidt/data.hpp"
#include "vidt/model.hpp"

namespace vidt {

struct Detection {
  std::size_t scene = 0;
  std::size_t label = 0;
  Real score = 0;
  Box box{};
};

// Detections read from one layer's predictions. Focal heads yield one
// detection per (token, class) pair scored by its sigmoid; cross-entropy heads
// yield one per token, the most probable non-background class.
std::vector<Detection> to_detections(const LayerPrediction& pred, ClassMode mode, std::size_t scene);

// Mean over classes that have ground truth of the per-class average
// precision. Detections are taken in descending confidence (ties by scene,
// then input order); each claims the unclaimed same-class ground truth of its
// scene with the highest IoU if that IoU reaches `iou_threshold`. AP is the
// area under the precision envelope over recall.
Real average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& truth,
                       std::size_t classes, Real iou_threshold);

struct EvalReport {
  Real ap50 = 0;
  Real ap75 = 0;
  Real mean_giou = 0;  // over Hungarian-matched (prediction, ground truth) pairs
  Real loss = 0;       // mean detection loss per scene
  std::vector<std::size_t> gt_per_class;
  std::vector<std::size_t> pred_per_class;  // detections scoring at least 0.5
  std::vector<std::size_t> tp50_per_class;
  std::vector<Real> loss_curve;  // filled by training, one entry per epoch
};

EvalReport evaluate(const Detector& model, const std::vector<SyntheticScene>& scenes, const LossConfig& loss,
                    std::size_t threads = 1);

// Loads a checkpoint written by training into a model built from `cfg`.
// ConfigError if the checkpoint's class count or architecture differ.
Detector load_checkpoint_model(const std::string& checkpoint, const DetectorConfig& cfg);

EvalReport evaluate_checkpoint(const std::string& checkpoint, const DetectorConfig& cfg,
                               const std::vector<SyntheticScene>& scenes, std::size_t threads = 1);

// class,name,gt,predicted,tp50 rows followed by metric,value rows.
std::string eval_csv(const EvalReport& report);
std::string eval_json(const EvalReport& report);

struct LayerDropRow {
  std::size_t drop = 0;
  std::size_t layers = 0;
  Real ap50 = 0;
  Real ap75 = 0;
  std::uint64_t macs = 0;  // one forward pass on the first scene
};

std::vector<LayerDropRow> layer_drop_sweep(const Detector& model, const std::vector<SyntheticScene>& scenes,
                                           std::size_t threads = 1);
std::string layer_drop_csv(const std::vector<LayerDropRow>& rows);

}  // namespace vidt
