#pragma once

#include <array>
#include <vector>

#include "vidt/neck.hpp"

namespace vidt {

using Box = std::array<Real, 4>;  // (cx, cy, w, h), normalized

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<std::size_t> labels;

  std::size_t size() const { return boxes.size(); }
};

// Corner form (x1, y1, x2, y2).
Box to_corners(const Box& b);
Box from_corners(const Box& c);

// Generalized IoU of two boxes in corner form; denominators are floored at
// 1e-7 so degenerate boxes never divide by zero.
Real giou_corners(const Box& a, const Box& b);
Real giou(const Box& a, const Box& b);
Real iou(const Box& a, const Box& b);

// Row-wise GIoU of aligned [n x 4] (cx, cy, w, h) tensors -> [n].
Tensor giou_tensor(const Tensor& a, const Tensor& b);

struct MatchAssignment {
  std::vector<std::size_t> pred_of_gt;  // gt index -> prediction index
  Real total_cost = 0;
};

// Minimum-cost injective assignment of rows (ground truths) to columns
// (predictions) of a row-major n_gt x n_pred matrix.
MatchAssignment hungarian_match(const std::vector<Real>& cost, std::size_t n_gt, std::size_t n_pred);

struct LossWeights {
  Real cls = 1.0;
  Real l1 = 5.0;
  Real iou = 2.0;
  Real dis = 4.0;
};

// Class probability per prediction: softmax over classes + background for
// cross-entropy heads, per-class sigmoid for focal heads.
std::vector<Real> class_probabilities(const Tensor& logits, ClassMode mode);

// cost[i][j] = -w.cls * p_j[c_i] + w.l1 * |B_i - B_j|_1 + w.iou * (1 - GIoU(B_i, B_j))
std::vector<Real> matching_cost(const std::vector<Real>& probs, std::size_t classes, const Tensor& boxes,
                                const GroundTruth& gt, const LossWeights& w);

struct LossConfig {
  LossWeights weights;
  ClassMode mode = ClassMode::focal;
  std::size_t classes = 3;
  Real no_object_weight = 0.1;  // cross-entropy weight of the background class
  Real focal_alpha = 0.25;
  Real focal_gamma = 2.0;
  bool aux_loss = true;
};

struct LossTerms {
  Tensor total;
  Real cls = 0, l1 = 0, giou = 0;  // unweighted, summed over the layers used
};

// Loss of one layer's predictions. If `fixed` is given the matching is taken
// from it instead of being solved; `assignment`, if non-null, receives the
// matching used.
LossTerms layer_loss(const Tensor& boxes, const Tensor& logits, const GroundTruth& gt, const LossConfig& cfg,
                     const MatchAssignment* fixed = nullptr, MatchAssignment* assignment = nullptr);

// Sum over decoder layers with equal weight (last layer only if aux_loss is
// off).
LossTerms detection_loss(const std::vector<LayerPrediction>& layers, const GroundTruth& gt, const LossConfig& cfg);

// lambda * (mean_i |Ps_i - Pt_i| + mean_j |Ds_j - Dt_j|) with the teacher side
// detached; squared norms when `squared` is set.
Tensor distillation_loss(const Tensor& patch_student, const Tensor& det_student, const Tensor& patch_teacher,
                         const Tensor& det_teacher, Real lambda, bool squared = false);

}  // namespace vidt
