#include "vidt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vidt/error.hpp"

namespace vidt {

namespace {

constexpr Real kGiouEps = 1e-7;

void check_gt(const GroundTruth& gt, std::size_t classes) {
  if (gt.boxes.size() != gt.labels.size()) throw ContractError("ground truth has mismatched boxes and labels");
  for (auto l : gt.labels) {
    if (l >= classes) {
      throw ContractError("ground-truth label " + std::to_string(l) + " outside " + std::to_string(classes) +
                          " classes");
    }
  }
}

Tensor column(const Tensor& x, std::size_t c) { return ops::slice(x, 1, c, 1); }

}  // namespace

Box to_corners(const Box& b) {
  return {b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]};
}

Box from_corners(const Box& c) { return {0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3]), c[2] - c[0], c[3] - c[1]}; }

Real giou_corners(const Box& a, const Box& b) {
  const Real iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const Real ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const Real inter = iw * ih;
  const Real uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  const Real enclose = (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  return inter / std::max(uni, kGiouEps) - (enclose - uni) / std::max(enclose, kGiouEps);
}

Real giou(const Box& a, const Box& b) { return giou_corners(to_corners(a), to_corners(b)); }

Real iou(const Box& a, const Box& b) {
  const auto ca = to_corners(a), cb = to_corners(b);
  const Real iw = std::max(0.0, std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]));
  const Real ih = std::max(0.0, std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
  const Real inter = iw * ih;
  const Real uni = a[2] * a[3] + b[2] * b[3] - inter;
  return inter / std::max(uni, kGiouEps);
}

Tensor giou_tensor(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(1) != 4 || a.shape() != b.shape()) {
    throw DimensionError("giou: expected matching [n x 4] boxes, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  auto corners = [](const Tensor& x) {
    auto half_w = ops::scale(column(x, 2), 0.5), half_h = ops::scale(column(x, 3), 0.5);
    return std::array<Tensor, 4>{ops::sub(column(x, 0), half_w), ops::sub(column(x, 1), half_h),
                                 ops::add(column(x, 0), half_w), ops::add(column(x, 1), half_h)};
  };
  auto ca = corners(a), cb = corners(b);
  auto iw = ops::clamp_min(ops::sub(ops::minimum(ca[2], cb[2]), ops::maximum(ca[0], cb[0])), 0.0);
  auto ih = ops::clamp_min(ops::sub(ops::minimum(ca[3], cb[3]), ops::maximum(ca[1], cb[1])), 0.0);
  auto inter = ops::mul(iw, ih);
  auto area_a = ops::mul(ops::sub(ca[2], ca[0]), ops::sub(ca[3], ca[1]));
  auto area_b = ops::mul(ops::sub(cb[2], cb[0]), ops::sub(cb[3], cb[1]));
  auto uni = ops::sub(ops::add(area_a, area_b), inter);
  auto ew = ops::sub(ops::maximum(ca[2], cb[2]), ops::minimum(ca[0], cb[0]));
  auto eh = ops::sub(ops::maximum(ca[3], cb[3]), ops::minimum(ca[1], cb[1]));
  auto enclose = ops::mul(ew, eh);
  auto g = ops::sub(ops::div(inter, ops::clamp_min(uni, kGiouEps)),
                    ops::div(ops::sub(enclose, uni), ops::clamp_min(enclose, kGiouEps)));
  return ops::reshape(g, {a.dim(0)});
}

MatchAssignment hungarian_match(const std::vector<Real>& cost, std::size_t n_gt, std::size_t n_pred) {
  if (cost.size() != n_gt * n_pred) throw DimensionError("hungarian_match: cost size does not match its shape");
  if (n_gt > n_pred) {
    throw ContractError("hungarian_match: " + std::to_string(n_gt) + " ground truths but only " +
                        std::to_string(n_pred) + " predictions");
  }
  MatchAssignment result;
  if (n_gt == 0) return result;
  for (Real c : cost) {
    if (!std::isfinite(c)) throw NumericError("hungarian_match: non-finite cost");
  }
  // Shortest augmenting paths with row/column potentials, 1-based indices.
  const auto n = n_gt, m = n_pred;
  const Real inf = std::numeric_limits<Real>::infinity();
  std::vector<Real> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<Real> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const auto i0 = p[j0];
      Real delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const Real cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const auto j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  result.pred_of_gt.assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) result.pred_of_gt[p[j] - 1] = j - 1;
  }
  for (std::size_t i = 0; i < n; ++i) result.total_cost += cost[i * m + result.pred_of_gt[i]];
  return result;
}

std::vector<Real> class_probabilities(const Tensor& logits, ClassMode mode) {
  NoGradGuard no_grad;
  auto p = mode == ClassMode::focal ? ops::sigmoid(logits) : ops::softmax_lastdim(logits);
  return {p.data().begin(), p.data().end()};
}

std::vector<Real> matching_cost(const std::vector<Real>& probs, std::size_t classes, const Tensor& boxes,
                                const GroundTruth& gt, const LossWeights& w) {
  const auto n_pred = boxes.dim(0);
  if (classes == 0 || probs.size() % classes != 0 || probs.size() / classes != n_pred) {
    throw DimensionError("matching_cost: probabilities do not match " + std::to_string(n_pred) + " predictions");
  }
  if (gt.boxes.size() != gt.labels.size()) throw ContractError("ground truth has mismatched boxes and labels");
  std::vector<Real> cost(gt.size() * n_pred);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.labels[i] >= classes) {
      throw ContractError("matching_cost: unknown label " + std::to_string(gt.labels[i]));
    }
    for (std::size_t j = 0; j < n_pred; ++j) {
      const Box pb{boxes[j * 4], boxes[j * 4 + 1], boxes[j * 4 + 2], boxes[j * 4 + 3]};
      Real l1 = 0;
      for (std::size_t c = 0; c < 4; ++c) l1 += std::abs(gt.boxes[i][c] - pb[c]);
      cost[i * n_pred + j] =
          -w.cls * probs[j * classes + gt.labels[i]] + w.l1 * l1 + w.iou * (1.0 - giou(gt.boxes[i], pb));
    }
  }
  return cost;
}

LossTerms layer_loss(const Tensor& boxes, const Tensor& logits, const GroundTruth& gt, const LossConfig& cfg,
                     const MatchAssignment* fixed, MatchAssignment* assignment) {
  const auto n_pred = boxes.dim(0);
  const auto out_classes = cfg.mode == ClassMode::focal ? cfg.classes : cfg.classes + 1;
  if (logits.rank() != 2 || logits.dim(0) != n_pred || logits.dim(1) != out_classes) {
    throw DimensionError("detection loss: logits " + shape_str(logits.shape()) + " do not fit " +
                         std::to_string(n_pred) + " predictions of " + std::to_string(out_classes) + " outputs");
  }
  check_gt(gt, cfg.classes);

  MatchAssignment match;
  if (fixed != nullptr) {
    match = *fixed;
  } else if (gt.size() > 0) {
    auto probs = class_probabilities(logits, cfg.mode);
    std::vector<Real> cls_probs = probs;
    if (cfg.mode == ClassMode::cross_entropy) {
      // Drop the background column.
      cls_probs.clear();
      for (std::size_t j = 0; j < n_pred; ++j) {
        for (std::size_t c = 0; c < cfg.classes; ++c) cls_probs.push_back(probs[j * out_classes + c]);
      }
    }
    NoGradGuard no_grad;
    match = hungarian_match(matching_cost(cls_probs, cfg.classes, ops::detach(boxes), gt, cfg.weights), gt.size(),
                            n_pred);
  }
  if (assignment != nullptr) *assignment = match;

  // Target class per prediction; unmatched predictions are background.
  std::vector<std::size_t> target(n_pred, cfg.classes);
  for (std::size_t i = 0; i < gt.size(); ++i) target[match.pred_of_gt[i]] = gt.labels[i];
  const Real norm = static_cast<Real>(std::max<std::size_t>(gt.size(), 1));

  LossTerms terms;
  Tensor cls;
  if (cfg.mode == ClassMode::cross_entropy) {
    std::vector<Real> pick(n_pred * out_classes, 0.0);
    Real weight_sum = 0;
    for (std::size_t j = 0; j < n_pred; ++j) {
      const Real w = target[j] == cfg.classes ? cfg.no_object_weight : 1.0;
      pick[j * out_classes + target[j]] = w;
      weight_sum += w;
    }
    auto nll = ops::neg(ops::sum(ops::mul(ops::log_softmax_lastdim(logits), Tensor::from(logits.shape(), pick))));
    cls = ops::scale(nll, 1.0 / weight_sum);
  } else {
    std::vector<Real> t(n_pred * out_classes, 0.0);
    for (std::size_t j = 0; j < n_pred; ++j) {
      if (target[j] < cfg.classes) t[j * out_classes + target[j]] = 1.0;
    }
    std::vector<Real> sign(t.size()), alpha(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      sign[i] = 2 * t[i] - 1;
      alpha[i] = t[i] > 0 ? cfg.focal_alpha : 1 - cfg.focal_alpha;
    }
    const auto& shape = logits.shape();
    auto tt = Tensor::from(shape, t);
    auto p = ops::sigmoid(logits);
    auto ce = ops::sub(ops::softplus(logits), ops::mul(logits, tt));
    // 1 - p_t = t + p (1 - 2t)
    auto miss = ops::add(tt, ops::mul(p, ops::neg(Tensor::from(shape, sign))));
    auto modulated = ops::mul(ce, ops::pow_scalar(ops::clamp_min(miss, 0.0), cfg.focal_gamma));
    cls = ops::scale(ops::sum(ops::mul(modulated, Tensor::from(shape, alpha))), 1.0 / norm);
  }
  terms.cls = cls.item();
  auto total = ops::scale(cls, cfg.weights.cls);

  if (gt.size() > 0) {
    std::vector<std::int64_t> idx;
    std::vector<Real> target_boxes;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      idx.push_back(static_cast<std::int64_t>(match.pred_of_gt[i]));
      target_boxes.insert(target_boxes.end(), gt.boxes[i].begin(), gt.boxes[i].end());
    }
    auto matched = ops::gather_rows(boxes, idx);
    auto tgt = Tensor::from({gt.size(), 4}, std::move(target_boxes));
    auto l1 = ops::scale(ops::sum(ops::abs(ops::sub(matched, tgt))), 1.0 / norm);
    auto gl = ops::scale(ops::sum(ops::add_scalar(ops::neg(giou_tensor(matched, tgt)), 1.0)), 1.0 / norm);
    terms.l1 = l1.item();
    terms.giou = gl.item();
    total = ops::add(total, ops::add(ops::scale(l1, cfg.weights.l1), ops::scale(gl, cfg.weights.iou)));
  }
  terms.total = total;
  return terms;
}

LossTerms detection_loss(const std::vector<LayerPrediction>& layers, const GroundTruth& gt, const LossConfig& cfg) {
  if (layers.empty()) throw ContractError("detection loss needs at least one layer output");
  const std::size_t first = cfg.aux_loss ? 0 : layers.size() - 1;
  LossTerms sum;
  for (std::size_t i = first; i < layers.size(); ++i) {
    auto t = layer_loss(layers[i].boxes, layers[i].logits, gt, cfg);
    sum.total = sum.total.defined() ? ops::add(sum.total, t.total) : t.total;
    sum.cls += t.cls;
    sum.l1 += t.l1;
    sum.giou += t.giou;
  }
  return sum;
}

Tensor distillation_loss(const Tensor& patch_student, const Tensor& det_student, const Tensor& patch_teacher,
                         const Tensor& det_teacher, Real lambda, bool squared) {
  auto term = [squared](const Tensor& s, const Tensor& t, const char* what) {
    if (s.rank() != 2 || t.rank() != 2) throw DimensionError(std::string("distillation: ") + what + " must be 2-D");
    if (s.dim(0) != t.dim(0)) {
      throw ContractError(std::string("distillation: student has ") + std::to_string(s.dim(0)) + " " + what +
                          " tokens, teacher has " + std::to_string(t.dim(0)));
    }
    if (s.dim(1) != t.dim(1)) {
      throw DimensionError(std::string("distillation: ") + what + " width " + std::to_string(s.dim(1)) +
                           " vs teacher " + std::to_string(t.dim(1)));
    }
    auto diff = ops::sub(s, ops::detach(t));
    auto per_token = squared ? ops::sum_lastdim(ops::square(diff)) : ops::norm_lastdim(diff);
    return ops::mean(per_token);
  };
  return ops::scale(ops::add(term(patch_student, patch_teacher, "patch"), term(det_student, det_teacher, "det")),
                    lambda);
}

}  // namespace vidt
