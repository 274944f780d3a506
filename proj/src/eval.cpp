#include "vidt/eval.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "vidt/complexity.hpp"
#include "vidt/container.hpp"
#include "vidt/error.hpp"

namespace vidt {

std::vector<Detection> to_detections(const LayerPrediction& pred, ClassMode mode, std::size_t scene) {
  const std::size_t n = pred.boxes.dim(0), classes = pred.logits.dim(1);
  const auto probs = class_probabilities(pred.logits, mode);
  const std::size_t stride = mode == ClassMode::focal ? classes : classes + 1;
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    Box box;
    for (std::size_t k = 0; k < 4; ++k) box[k] = pred.boxes.data()[i * 4 + k];
    if (mode == ClassMode::focal) {
      for (std::size_t c = 0; c < classes; ++c) out.push_back({scene, c, probs[i * stride + c], box});
    } else {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (probs[i * stride + c] > probs[i * stride + best]) best = c;
      }
      out.push_back({scene, best, probs[i * stride + best], box});
    }
  }
  return out;
}

namespace {

// Per-class true-positive flags in confidence order plus the class's ground
// truth count.
struct ClassMatches {
  std::vector<bool> tp;
  std::size_t gt = 0;
};

std::vector<ClassMatches> greedy_match(const std::vector<Detection>& detections,
                                       const std::vector<GroundTruth>& truth, std::size_t classes,
                                       Real iou_threshold) {
  for (const auto& d : detections) {
    if (d.label >= classes) throw ContractError("detection label " + std::to_string(d.label) + " out of range");
    if (d.scene >= truth.size()) throw ContractError("detection refers to scene " + std::to_string(d.scene));
  }
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (detections[a].score != detections[b].score) return detections[a].score > detections[b].score;
    return detections[a].scene < detections[b].scene;
  });
  std::vector<ClassMatches> out(classes);
  std::vector<std::vector<bool>> claimed(truth.size());
  for (std::size_t s = 0; s < truth.size(); ++s) {
    claimed[s].assign(truth[s].size(), false);
    for (auto label : truth[s].labels) {
      if (label >= classes) throw ContractError("ground truth label " + std::to_string(label) + " out of range");
      ++out[label].gt;
    }
  }
  for (auto idx : order) {
    const auto& d = detections[idx];
    const auto& gt = truth[d.scene];
    Real best = -1;
    std::size_t best_j = gt.size();
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (gt.labels[j] != d.label || claimed[d.scene][j]) continue;
      const Real v = iou(d.box, gt.boxes[j]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    const bool hit = best_j < gt.size() && best >= iou_threshold;
    if (hit) claimed[d.scene][best_j] = true;
    out[d.label].tp.push_back(hit);
  }
  return out;
}

Real class_ap(const ClassMatches& m) {
  if (m.gt == 0) return 0;
  const std::size_t n = m.tp.size();
  std::vector<Real> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += m.tp[i];
    precision[i] = static_cast<Real>(tp) / static_cast<Real>(i + 1);
    recall[i] = static_cast<Real>(tp) / static_cast<Real>(m.gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  Real ap = 0, previous = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > previous) {
      ap += (recall[i] - previous) * precision[i];
      previous = recall[i];
    }
  }
  return ap;
}

}  // namespace

Real average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& truth,
                       std::size_t classes, Real iou_threshold) {
  const auto matches = greedy_match(detections, truth, classes, iou_threshold);
  Real sum = 0;
  std::size_t counted = 0;
  for (const auto& m : matches) {
    if (m.gt == 0) continue;
    sum += class_ap(m);
    ++counted;
  }
  return counted ? sum / static_cast<Real>(counted) : 0;
}

namespace {

struct SceneResult {
  std::vector<Detection> detections;
  Real giou_sum = 0;
  std::size_t matched = 0;
  Real loss = 0;
};

SceneResult evaluate_scene(const Detector& model, const SyntheticScene& scene, std::size_t index,
                           const LossConfig& loss) {
  NoGradGuard no_grad;
  const auto out = model.forward(scene.image);
  const auto& last = out.layers.back();
  SceneResult r;
  r.detections = to_detections(last, model.cfg.class_mode, index);
  r.loss = detection_loss(out.layers, scene.gt, loss).total.item();
  if (scene.gt.size() > 0) {
    const auto probs = class_probabilities(last.logits, model.cfg.class_mode);
    const auto cost = matching_cost(probs, model.cfg.classes, last.boxes, scene.gt, loss.weights);
    const auto match = hungarian_match(cost, scene.gt.size(), last.boxes.dim(0));
    for (std::size_t j = 0; j < scene.gt.size(); ++j) {
      Box b;
      for (std::size_t k = 0; k < 4; ++k) b[k] = last.boxes.data()[match.pred_of_gt[j] * 4 + k];
      r.giou_sum += giou(b, scene.gt.boxes[j]);
      ++r.matched;
    }
  }
  return r;
}

template <class F>
void parallel_scenes(std::size_t n, std::size_t threads, F&& f) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) f(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

EvalReport evaluate(const Detector& model, const std::vector<SyntheticScene>& scenes, const LossConfig& loss,
                    std::size_t threads) {
  if (scenes.empty()) throw ContractError("evaluate: empty dataset");
  const std::size_t classes = model.cfg.classes;
  for (const auto& s : scenes) validate_ground_truth(s.gt, classes);
  std::vector<SceneResult> results(scenes.size());
  parallel_scenes(scenes.size(), threads,
                  [&](std::size_t i) { results[i] = evaluate_scene(model, scenes[i], i, loss); });

  EvalReport report;
  std::vector<Detection> all;
  std::vector<GroundTruth> truth;
  Real giou_sum = 0, loss_sum = 0;
  std::size_t matched = 0;
  report.pred_per_class.assign(classes, 0);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    for (const auto& d : results[i].detections) {
      if (d.score >= 0.5) ++report.pred_per_class[d.label];
      all.push_back(d);
    }
    truth.push_back(scenes[i].gt);
    giou_sum += results[i].giou_sum;
    matched += results[i].matched;
    loss_sum += results[i].loss;
  }
  report.ap50 = average_precision(all, truth, classes, 0.5);
  report.ap75 = average_precision(all, truth, classes, 0.75);
  report.mean_giou = matched ? giou_sum / static_cast<Real>(matched) : 0;
  report.loss = loss_sum / static_cast<Real>(scenes.size());
  const auto m50 = greedy_match(all, truth, classes, 0.5);
  for (const auto& m : m50) {
    report.gt_per_class.push_back(m.gt);
    report.tp50_per_class.push_back(static_cast<std::size_t>(std::count(m.tp.begin(), m.tp.end(), true)));
  }
  return report;
}

Detector load_checkpoint_model(const std::string& checkpoint, const DetectorConfig& cfg) {
  const auto entries = load_tensors(checkpoint);
  const auto stored = static_cast<std::size_t>(find_tensor(entries, "meta.classes").item());
  if (stored != cfg.classes) {
    throw ConfigError("checkpoint " + checkpoint + " was trained with " + std::to_string(stored) +
                      " classes, the model config asks for " + std::to_string(cfg.classes));
  }
  std::mt19937_64 rng(0);
  auto model = Detector::init(cfg, rng);
  NamedTensors params;
  const std::string prefix = "model.";
  for (const auto& [name, t] : entries) {
    if (name.rfind(prefix, 0) == 0) params.emplace_back(name.substr(prefix.size()), t);
  }
  try {
    model.load(params);
  } catch (const Error& e) {
    throw ConfigError("checkpoint " + checkpoint + " does not fit the model config: " + e.what());
  }
  return model;
}

EvalReport evaluate_checkpoint(const std::string& checkpoint, const DetectorConfig& cfg,
                               const std::vector<SyntheticScene>& scenes, std::size_t threads) {
  const auto model = load_checkpoint_model(checkpoint, cfg);
  LossConfig loss;
  loss.mode = cfg.class_mode;
  loss.classes = cfg.classes;
  return evaluate(model, scenes, loss, threads);
}

std::string eval_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "class,name,gt,predicted,tp50\n";
  for (std::size_t c = 0; c < r.gt_per_class.size(); ++c) {
    const std::string name = c < kShapeKinds ? to_string(static_cast<ShapeKind>(c)) : "class" + std::to_string(c);
    out << c << ',' << name << ',' << r.gt_per_class[c] << ',' << r.pred_per_class[c] << ','
        << r.tp50_per_class[c] << '\n';
  }
  out << "metric,value\n";
  out << "ap50," << r.ap50 << "\nap75," << r.ap75 << "\nmean_giou," << r.mean_giou << "\nloss," << r.loss << '\n';
  return out.str();
}

std::string eval_json(const EvalReport& r) {
  nlohmann::json j;
  j["ap50"] = r.ap50;
  j["ap75"] = r.ap75;
  j["mean_giou"] = r.mean_giou;
  j["loss"] = r.loss;
  j["gt_per_class"] = r.gt_per_class;
  j["pred_per_class"] = r.pred_per_class;
  j["tp50_per_class"] = r.tp50_per_class;
  if (!r.loss_curve.empty()) j["loss_curve"] = r.loss_curve;
  return j.dump();
}

std::vector<LayerDropRow> layer_drop_sweep(const Detector& model, const std::vector<SyntheticScene>& scenes,
                                           std::size_t threads) {
  if (!model.cfg.use_neck) throw ConfigError("layer-drop sweep needs a model with a decoder neck");
  LossConfig loss;
  loss.mode = model.cfg.class_mode;
  loss.classes = model.cfg.classes;
  std::vector<LayerDropRow> rows;
  for (std::size_t drop = 0; drop < model.cfg.neck.layers; ++drop) {
    const auto cut = drop == 0 ? model : drop_decoder_layers(model, drop);
    const auto report = evaluate(cut, scenes, loss, threads);
    rows.push_back({drop, cut.cfg.neck.layers, report.ap50, report.ap75, measure_forward(cut, scenes[0].image).macs});
  }
  return rows;
}

std::string layer_drop_csv(const std::vector<LayerDropRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "drop,layers,ap50,ap75,macs\n";
  for (const auto& r : rows) out << r.drop << ',' << r.layers << ',' << r.ap50 << ',' << r.ap75 << ',' << r.macs << '\n';
  return out.str();
}

}  // namespace vidt
