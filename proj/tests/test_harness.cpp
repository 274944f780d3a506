#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "vidt/container.hpp"
#include "vidt/error.hpp"
#include "vidt/train.hpp"

using namespace vidt;

namespace {

std::string temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vidt_harness_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

DetectorConfig tiny_model() {
  return parse_detector_config(
      "image_size = 32\n"
      "embed_dim = 8\n"
      "depths = 1,1,1,1\n"
      "heads = 1,1,2,2\n"
      "det_tokens = 6\n"
      "neck_width = 16\n"
      "neck_heads = 2\n"
      "neck_points = 2\n"
      "neck_layers = 3\n"
      "neck_ffn = 32\n");
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 2;
  cfg.batch = 2;
  cfg.seed = 11;
  return cfg;
}

// Tight pixel bounds of everything brighter than the background inside a
// window around `box`. Shapes are drawn with channel mean >= 0.45 on a
// background with channel mean <= 0.3.
std::array<long, 4> bright_bounds(const Tensor& image, const Box& box, long pad) {
  const long size = static_cast<long>(image.dim(0));
  const auto c = to_corners(box);
  const long x0 = std::max(0L, static_cast<long>(std::floor(c[0] * size)) - pad);
  const long y0 = std::max(0L, static_cast<long>(std::floor(c[1] * size)) - pad);
  const long x1 = std::min(size - 1, static_cast<long>(std::ceil(c[2] * size)) - 1 + pad);
  const long y1 = std::min(size - 1, static_cast<long>(std::ceil(c[3] * size)) - 1 + pad);
  std::array<long, 4> b{size, size, -1, -1};
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      Real mean = 0;
      for (std::size_t ch = 0; ch < 3; ++ch) mean += image.data()[(y * size + x) * 3 + ch] / 3;
      if (mean <= 0.375) continue;
      b = {std::min(b[0], x), std::min(b[1], y), std::max(b[2], x + 1), std::max(b[3], y + 1)};
    }
  }
  return b;
}

// Reference AP: for every prefix of the confidence-ordered detections the
// matching is recomputed from scratch, giving one (recall, precision) point
// per prefix; the area sums, over each recall increment, the best precision
// reached at that recall or beyond.
Real brute_force_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& truth, std::size_t classes,
                    Real threshold) {
  Real sum = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<Detection> mine;
    std::vector<std::size_t> index;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].label == c) {
        mine.push_back(dets[i]);
        index.push_back(i);
      }
    }
    std::vector<std::size_t> order(mine.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (mine[a].score != mine[b].score) return mine[a].score > mine[b].score;
      if (mine[a].scene != mine[b].scene) return mine[a].scene < mine[b].scene;
      return index[a] < index[b];
    });
    std::size_t gt_count = 0;
    for (const auto& g : truth) gt_count += static_cast<std::size_t>(std::count(g.labels.begin(), g.labels.end(), c));
    if (gt_count == 0) continue;
    std::vector<std::pair<Real, Real>> points;  // (recall, precision)
    for (std::size_t k = 1; k <= order.size(); ++k) {
      std::vector<std::vector<bool>> used(truth.size());
      for (std::size_t s = 0; s < truth.size(); ++s) used[s].assign(truth[s].size(), false);
      std::size_t tp = 0;
      for (std::size_t r = 0; r < k; ++r) {
        const auto& d = mine[order[r]];
        std::size_t best = truth[d.scene].size();
        Real best_iou = -1;
        for (std::size_t j = 0; j < truth[d.scene].size(); ++j) {
          if (truth[d.scene].labels[j] != c || used[d.scene][j]) continue;
          const Real v = iou(d.box, truth[d.scene].boxes[j]);
          if (v > best_iou) {
            best_iou = v;
            best = j;
          }
        }
        if (best < truth[d.scene].size() && best_iou >= threshold) {
          used[d.scene][best] = true;
          ++tp;
        }
      }
      points.emplace_back(static_cast<Real>(tp) / gt_count, static_cast<Real>(tp) / k);
    }
    Real ap = 0, previous = 0;
    for (const auto& [recall, precision] : points) {
      if (recall <= previous) continue;
      Real best = 0;
      for (const auto& [r2, p2] : points) {
        if (r2 >= recall) best = std::max(best, p2);
      }
      ap += (recall - previous) * best;
      previous = recall;
    }
    sum += ap;
    ++counted;
  }
  return counted ? sum / counted : 0;
}

}  // namespace

TEST_CASE("generated datasets are deterministic, sized and valid") {
  const auto a = generate_dataset(100, 3);
  const auto b = generate_dataset(100, 3, 64, 3);
  REQUIRE(a.size() == 100);
  std::size_t empty = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::ranges::equal(a[i].image.data(), b[i].image.data()));
    CHECK(a[i].gt.boxes == b[i].gt.boxes);
    CHECK(a[i].gt.labels == b[i].gt.labels);
    CHECK(a[i].image.shape() == Shape{64, 64, 3});
    CHECK(a[i].gt.size() <= 4);
    CHECK_NOTHROW(validate_ground_truth(a[i].gt, kShapeKinds));
    if (a[i].gt.size() == 0) ++empty;
  }
  CHECK(empty >= 5);
  const auto other = generate_dataset(3, 4);
  CHECK(!std::ranges::equal(other[1].image.data(), a[1].image.data()));
  CHECK_THROWS_AS(generate_dataset(4, 1, 15), ConfigError);
  CHECK_THROWS_AS(generate_dataset(0, 1), ConfigError);
}

TEST_CASE("every ground-truth box tightly bounds its shape within one pixel") {
  const auto scenes = generate_dataset(60, 5);
  std::size_t boxes = 0;
  std::array<std::size_t, kShapeKinds> per_class{};
  for (const auto& s : scenes) {
    for (std::size_t i = 0; i < s.gt.size(); ++i) {
      const auto found = bright_bounds(s.image, s.gt.boxes[i], 2);
      const auto c = to_corners(s.gt.boxes[i]);
      for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(found[k] - c[k] * 64) <= 1.0 + 1e-9);
      ++per_class[s.gt.labels[i]];
      ++boxes;
    }
  }
  CHECK(boxes > 100);
  for (auto n : per_class) CHECK(n > 10);
}

TEST_CASE("dataset files round-trip exactly") {
  const auto dir = temp_dir("dataset");
  const auto scenes = generate_dataset(12, 6, 32);
  save_dataset(dir + "/d.vidt", scenes);
  const auto back = load_dataset(dir + "/d.vidt");
  REQUIRE(back.size() == scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    CHECK(std::ranges::equal(back[i].image.data(), scenes[i].image.data()));
    CHECK(back[i].gt.boxes == scenes[i].gt.boxes);
    CHECK(back[i].gt.labels == scenes[i].gt.labels);
  }
  CHECK_THROWS_AS(load_dataset(dir + "/missing.vidt"), IoError);
}

TEST_CASE("thread count comes from VIDT_THREADS") {
  ::unsetenv("VIDT_THREADS");
  CHECK(env_threads() == 1);
  ::setenv("VIDT_THREADS", "3", 1);
  CHECK(env_threads() == 3);
  ::setenv("VIDT_THREADS", "many", 1);
  CHECK_THROWS_AS(env_threads(), ConfigError);
  ::unsetenv("VIDT_THREADS");
}

TEST_CASE("average precision examples") {
  std::vector<GroundTruth> truth(2);
  truth[0].boxes = {{0.3, 0.3, 0.2, 0.2}, {0.7, 0.7, 0.2, 0.3}};
  truth[0].labels = {0, 1};
  truth[1].boxes = {{0.5, 0.5, 0.4, 0.4}};
  truth[1].labels = {0};
  std::vector<Detection> perfect;
  for (std::size_t s = 0; s < truth.size(); ++s) {
    for (std::size_t i = 0; i < truth[s].size(); ++i) perfect.push_back({s, truth[s].labels[i], 1.0, truth[s].boxes[i]});
  }
  CHECK(average_precision(perfect, truth, 3, 0.5) == 1.0);
  CHECK(average_precision(perfect, truth, 3, 0.75) == 1.0);
  CHECK(average_precision({}, truth, 3, 0.5) == 0.0);

  // Class 0: hit (0.9), miss (0.8), hit (0.7) -> precision 1, 1/2, 2/3 at
  // recall 1/2, 1/2, 1; class 1: one hit.
  std::vector<Detection> dets{{0, 0, 0.9, truth[0].boxes[0]},
                              {0, 0, 0.8, {0.8, 0.1, 0.1, 0.1}},
                              {1, 0, 0.7, truth[1].boxes[0]},
                              {0, 1, 0.6, truth[0].boxes[1]}};
  CHECK(std::abs(average_precision(dets, truth, 3, 0.5) - (0.5 * (1.0 + 2.0 / 3.0) + 1.0) / 2) < 1e-12);
  // A duplicate of a claimed box is a false positive.
  dets.push_back({0, 1, 0.95, truth[0].boxes[1]});
  CHECK(average_precision(dets, truth, 3, 0.5) < 1.0);
}

TEST_CASE("average precision equals brute-force precision/recall integration") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto scenes = generate_dataset(10, 100 + trial, 32);
    std::vector<GroundTruth> truth;
    std::vector<Detection> dets;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      truth.push_back(scenes[s].gt);
      for (std::size_t i = 0; i < scenes[s].gt.size(); ++i) {
        for (int copy = 0; copy < 2; ++copy) {
          Box b = scenes[s].gt.boxes[i];
          for (auto& v : b) v = std::clamp(v + 0.06 * (unit(rng) - 0.5), 0.02, 0.98);
          const std::size_t label = unit(rng) < 0.8 ? scenes[s].gt.labels[i] : rng() % 3;
          // Quantized scores produce ties.
          dets.push_back({s, label, std::round(unit(rng) * 20) / 20, b});
        }
      }
      for (int fp = 0; fp < 3; ++fp) {
        dets.push_back({s, rng() % 3, unit(rng), {0.2 + 0.6 * unit(rng), 0.2 + 0.6 * unit(rng), 0.1, 0.1}});
      }
    }
    for (Real t : {0.5, 0.75}) {
      const Real ap = average_precision(dets, truth, 3, t);
      CHECK(ap >= 0);
      CHECK(ap <= 1);
      CHECK(std::abs(ap - brute_force_ap(dets, truth, 3, t)) < 1e-12);
    }
  }
}

TEST_CASE("evaluation reports are deterministic and independent of the worker count") {
  std::mt19937_64 rng(1);
  const auto model = Detector::init(tiny_model(), rng);
  const auto scenes = generate_dataset(9, 2, 32);
  LossConfig loss;
  const auto a = evaluate(model, scenes, loss, 1);
  const auto b = evaluate(model, scenes, loss, 3);
  CHECK(a.ap50 == b.ap50);
  CHECK(a.ap75 == b.ap75);
  CHECK(a.mean_giou == b.mean_giou);
  CHECK(a.loss == b.loss);
  CHECK(a.gt_per_class == b.gt_per_class);
  CHECK(eval_csv(a) == eval_csv(b));
  CHECK(a.ap50 >= 0);
  CHECK(a.ap50 <= 1);
  CHECK(a.mean_giou >= -1);
  CHECK(a.mean_giou <= 1);
  CHECK(eval_csv(a).rfind("class,name,gt,predicted,tp50\n0,rectangle,", 0) == 0);
}

TEST_CASE("cosine schedule and AdamW step match closed forms") {
  CHECK(cosine_lr(0.1, 0, 100) == 0.1);
  CHECK(std::abs(cosine_lr(0.1, 50, 100) - 0.05) < 1e-15);
  CHECK(std::abs(cosine_lr(0.1, 100, 100)) < 1e-15);

  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  const Real lr = 0.1;
  auto p = Tensor::parameter({3}, {1.0, -2.0, 0.5});
  auto g = p.grad_buffer();
  g[0] = 0.3;
  g[1] = -4.0;
  g[2] = 0.0;
  std::vector<Tensor> params{p};
  AdamW opt(1);
  opt.step(params, lr, cfg);
  // First step: bias-corrected moments are g and g^2.
  const std::array<Real, 3> before{1.0, -2.0, 0.5}, grad{0.3, -4.0, 0.0};
  for (std::size_t i = 0; i < 3; ++i) {
    const Real expect = before[i] * (1 - lr * 0.01) - lr * grad[i] / (std::abs(grad[i]) + cfg.eps);
    CHECK(std::abs(p.data()[i] - expect) < 1e-12);
  }
}

TEST_CASE("gradient clipping bounds the joint norm") {
  auto a = Tensor::parameter({2}, {0, 0});
  auto b = Tensor::parameter({1}, {0});
  a.grad_buffer()[0] = 3;
  a.grad_buffer()[1] = 0;
  b.grad_buffer()[0] = 4;
  NamedTensors params{{"a", a}, {"b", b}};
  CHECK(clip_gradients(params, 0.1) == 5.0);
  const Real norm = std::hypot(a.grad()[0], a.grad()[1], b.grad()[0]);
  CHECK(std::abs(norm - 0.1) < 1e-6);
  CHECK(std::abs(a.grad()[0] / b.grad()[0] - 0.75) < 1e-12);
  CHECK(clip_gradients(params, 1.0) == doctest::Approx(norm));
  b.grad_buffer()[0] = std::nan("");
  CHECK_THROWS_AS(clip_gradients(params, 0.1), NumericError);
}

TEST_CASE("lr = 0 leaves parameters bit-identical after an epoch") {
  auto cfg = tiny_train();
  cfg.lr = 0;
  cfg.epochs = 1;
  const auto scenes = generate_dataset(4, 1, 32);
  const auto result = train(cfg, tiny_model(), scenes, {});
  std::mt19937_64 rng(cfg.seed);
  const auto fresh = Detector::init(tiny_model(), rng);
  NamedTensors a, b;
  result.model.collect(a);
  fresh.collect(b);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::ranges::equal(a[i].second.data(), b[i].second.data()));
  CHECK(result.steps == 2);
}

TEST_CASE("training overfits a single scene") {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 200;
  cfg.batch = 1;
  cfg.seed = 2;
  auto scenes = generate_dataset(2, 9);
  scenes.erase(scenes.begin());  // scene 0 is empty by construction
  REQUIRE(scenes[0].gt.size() > 0);
  DetectorConfig model;
  const auto result = train(cfg, model, scenes, {});
  CHECK(result.steps == 200);
  MESSAGE("single-scene loss " << result.initial_loss << " -> " << result.final_loss);
  CHECK(result.final_loss <= 0.1 * result.initial_loss);
}

TEST_CASE("training runs are deterministic and write logs and checkpoints") {
  const auto scenes = generate_dataset(6, 2, 32);
  const auto evals = generate_dataset(3, 3, 32);
  const auto d1 = temp_dir("det1"), d2 = temp_dir("det2");
  const auto r1 = train(tiny_train(), tiny_model(), scenes, evals, d1);
  const auto r2 = train(tiny_train(), tiny_model(), scenes, evals, d2);
  CHECK(r1.log_lines == r2.log_lines);
  REQUIRE(r1.log_lines.size() == 4);  // initial, two epochs, final
  CHECK(r1.log_lines[1].find("\"ap50\":") != std::string::npos);
  for (const char* f : {"/metrics.jsonl", "/final.vidt", "/best.vidt", "/model.cfg"}) {
    REQUIRE(std::filesystem::exists(d1 + f));
    CHECK(file_bytes(d1 + f) == file_bytes(d2 + f));
  }
  CHECK(r1.final_eval.has_value());
  CHECK(r1.final_eval->loss_curve.size() == 2);

  // save -> load -> save is byte-identical.
  const auto entries = load_tensors(d1 + "/final.vidt");
  save_tensors(d1 + "/again.vidt", entries, Precision::f64);
  CHECK(file_bytes(d1 + "/again.vidt") == file_bytes(d1 + "/final.vidt"));

  const auto model = load_checkpoint_model(d1 + "/final.vidt", tiny_model());
  const auto report = evaluate_checkpoint(d1 + "/final.vidt", tiny_model(), evals);
  CHECK(report.ap50 == r1.final_eval->ap50);
  auto wrong = tiny_model();
  wrong.classes = 4;
  CHECK_THROWS_AS(evaluate_checkpoint(d1 + "/final.vidt", wrong, evals), ConfigError);
  (void)model;
}

TEST_CASE("a resumed run reproduces the uninterrupted run bit-exactly") {
  const auto scenes = generate_dataset(5, 4, 32);
  auto cfg = tiny_train();
  cfg.epochs = 2;  // 3 steps per epoch, the last batch is partial
  const auto whole = temp_dir("whole"), first = temp_dir("first"), second = temp_dir("second");
  train(cfg, tiny_model(), scenes, {}, whole);
  auto partial = cfg;
  partial.max_steps = 4;
  const auto stopped = train(partial, tiny_model(), scenes, {}, first);
  CHECK(stopped.steps == 4);
  const auto resumed = train(cfg, tiny_model(), scenes, {}, second, nullptr, first + "/final.vidt");
  CHECK(resumed.steps == 6);
  CHECK(file_bytes(second + "/final.vidt") == file_bytes(whole + "/final.vidt"));
  const auto whole_log = file_bytes(whole + "/metrics.jsonl");
  auto joined = file_bytes(first + "/metrics.jsonl");
  const auto tail = file_bytes(second + "/metrics.jsonl");
  joined.insert(joined.end(), tail.begin(), tail.end());
  CHECK(joined == whole_log);

  auto other = cfg;
  other.seed = 99;
  CHECK_THROWS_AS(train(other, tiny_model(), scenes, {}, "", nullptr, first + "/final.vidt"), ConfigError);
}

TEST_CASE("non-finite values abort training and name the first non-finite op") {
  const auto scenes = generate_dataset(3, 4, 32);
  auto cfg = tiny_train();
  auto partial = cfg;
  partial.max_steps = 1;
  const auto dir = temp_dir("nan");
  train(partial, tiny_model(), scenes, {}, dir);
  auto entries = load_tensors(dir + "/final.vidt");
  for (auto& [name, t] : entries) {
    if (name == "model.backbone.det_tokens") t.mutable_data()[0] = std::nan("");
  }
  save_tensors(dir + "/poisoned.vidt", entries, Precision::f64);
  try {
    train(cfg, tiny_model(), scenes, {}, "", nullptr, dir + "/poisoned.vidt");
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    MESSAGE(what);
    CHECK(what.find("first non-finite op: ") != std::string::npos);
    CHECK(what.find("none recorded") == std::string::npos);
  }
}

TEST_CASE("distillation: zero weight reproduces plain training, mismatched teachers are rejected") {
  const auto scenes = generate_dataset(4, 7, 32);
  std::mt19937_64 rng(5);
  auto teacher_cfg = tiny_model();
  teacher_cfg.backbone.embed_dim = 16;
  const auto teacher = Detector::init(teacher_cfg, rng);

  auto cfg = tiny_train();
  const auto plain = train(cfg, tiny_model(), scenes, {});
  const auto zero = train(cfg, tiny_model(), scenes, {}, "", &teacher);
  CHECK(plain.log_lines == zero.log_lines);

  cfg.lambda_dis = 4;
  const auto distilled = train(cfg, tiny_model(), scenes, {}, "", &teacher);
  REQUIRE(!distilled.epochs.empty());
  CHECK(std::isfinite(distilled.epochs[0].distill));
  CHECK(distilled.epochs[0].distill > 0);
  CHECK(distilled.log_lines != plain.log_lines);

  auto odd_cfg = teacher_cfg;
  odd_cfg.backbone.det_tokens = 8;
  const auto odd = Detector::init(odd_cfg, rng);
  try {
    train(cfg, tiny_model(), scenes, {}, "", &odd);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("teacher config (") != std::string::npos);
    CHECK(what.find("student config (") != std::string::npos);
    CHECK(what.find("det_tokens 8") != std::string::npos);
    CHECK(what.find("det_tokens 6") != std::string::npos);
  }
}

TEST_CASE("layer-drop sweep lists every depth with falling work") {
  std::mt19937_64 rng(8);
  const auto model = Detector::init(tiny_model(), rng);
  const auto scenes = generate_dataset(4, 8, 32);
  const auto rows = layer_drop_sweep(model, scenes);
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].drop == i);
    CHECK(rows[i].layers == 3 - i);
    if (i > 0) CHECK(rows[i].macs < rows[i - 1].macs);
  }
  CHECK(layer_drop_csv(rows).rfind("drop,layers,ap50,ap75,macs\n0,3,", 0) == 0);
}
