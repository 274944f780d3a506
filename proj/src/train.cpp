#include "vidt/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "json.hpp"

#include "vidt/container.hpp"
#include "vidt/error.hpp"

namespace vidt {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (!(lr >= 0)) fail("lr must be >= 0");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (!(grad_clip >= 0)) fail("grad_clip must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(eps > 0)) fail("eps must be > 0");
  if (epochs == 0) fail("epochs must be >= 1");
  if (batch == 0) fail("batch must be >= 1");
  if (!(lambda_dis >= 0)) fail("lambda_dis must be >= 0");
  if (threads == 0) fail("threads must be >= 1");
}

Real cosine_lr(Real base, std::uint64_t step, std::uint64_t total) {
  if (total == 0) return base;
  const Real t = static_cast<Real>(std::min(step, total)) / static_cast<Real>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::size_t count) : m_(count), v_(count) {}

void AdamW::step(std::vector<Tensor>& params, Real lr, const TrainConfig& cfg) {
  if (params.size() != m_.size()) throw ContractError("AdamW: parameter count changed between steps");
  ++steps_;
  const Real c1 = 1.0 - std::pow(cfg.beta1, static_cast<Real>(steps_));
  const Real c2 = 1.0 - std::pow(cfg.beta2, static_cast<Real>(steps_));
  const Real decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto g = params[i].grad();
    if (m_[i].empty()) {
      m_[i].assign(p.size(), 0.0);
      v_[i].assign(p.size(), 0.0);
    }
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const Real gk = g.empty() ? 0.0 : g[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      p[k] *= decay;
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

void AdamW::save(NamedTensors& out, const NamedTensors& params) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& shape = params[i].second.shape();
    const auto n = params[i].second.numel();
    out.emplace_back("adam.m." + params[i].first, Tensor::from(shape, m_[i].empty() ? Buffer(n, 0.0) : m_[i]));
    out.emplace_back("adam.v." + params[i].first, Tensor::from(shape, v_[i].empty() ? Buffer(n, 0.0) : v_[i]));
  }
  out.emplace_back("adam.steps", Tensor::from({1}, Buffer{static_cast<Real>(steps_)}));
}

void AdamW::load(const NamedTensors& entries, const NamedTensors& params) {
  m_.assign(params.size(), {});
  v_.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = find_tensor(entries, "adam.m." + params[i].first);
    const auto& v = find_tensor(entries, "adam.v." + params[i].first);
    if (m.shape() != params[i].second.shape() || v.shape() != params[i].second.shape()) {
      throw DimensionError("AdamW: stored moments of " + params[i].first + " do not match the parameter");
    }
    m_[i].assign(m.data().begin(), m.data().end());
    v_[i].assign(v.data().begin(), v.data().end());
  }
  steps_ = static_cast<std::uint64_t>(find_tensor(entries, "adam.steps").item());
}

Real clip_gradients(const NamedTensors& params, Real max_norm) {
  Real sq = 0;
  for (const auto& [name, t] : params) {
    for (Real g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
      sq += g * g;
    }
  }
  const Real norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Real scale = max_norm / (norm + 1e-6);
    for (const auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (Real& g : t.grad_buffer()) g *= scale;
    }
  }
  return norm;
}

LossConfig loss_config_for(const TrainConfig& cfg, const DetectorConfig& model_cfg) {
  LossConfig loss;
  loss.weights = cfg.weights;
  loss.mode = model_cfg.class_mode;
  loss.classes = model_cfg.classes;
  loss.no_object_weight = cfg.no_object_weight;
  loss.aux_loss = cfg.aux_loss;
  return loss;
}

Real mean_detection_loss(const Detector& model, const std::vector<SyntheticScene>& scenes, const LossConfig& loss) {
  NoGradGuard no_grad;
  Real sum = 0;
  for (const auto& s : scenes) sum += detection_loss(model.forward(s.image).layers, s.gt, loss).total.item();
  return sum / static_cast<Real>(scenes.size());
}

void check_distill_compatible(const Detector& teacher, const Detector& student, const Tensor& probe) {
  auto describe = [](const Detector& d, const DistillTokens& t) {
    return "image_size " + std::to_string(d.cfg.backbone.image_size) + ", det_tokens " +
           std::to_string(d.cfg.backbone.det_tokens) + ", neck_layers " + std::to_string(d.cfg.neck.layers) +
           ", neck_width " + std::to_string(d.cfg.neck.width) + " -> " + std::to_string(t.patch.dim(0)) +
           " patch and " + std::to_string(t.det.dim(0)) + " det tokens";
  };
  if (!teacher.cfg.use_neck || !student.cfg.use_neck) {
    throw ConfigError("distillation needs a neck in both teacher (neck = " + std::string(teacher.cfg.use_neck ? "true" : "false") +
                      ") and student (neck = " + (student.cfg.use_neck ? "true" : "false") + ")");
  }
  NoGradGuard no_grad;
  const auto t = distill_tokens(teacher.forward(probe));
  const auto s = distill_tokens(student.forward(probe));
  if (t.patch.shape() != s.patch.shape() || t.det.shape() != s.det.shape()) {
    throw ConfigError("distillation token sets differ: teacher config (" + describe(teacher, t) +
                      ") vs student config (" + describe(student, s) + ")");
  }
}

void save_checkpoint(const std::string& path, const Detector& model, const AdamW& opt,
                     const std::vector<std::pair<std::string, Real>>& state) {
  NamedTensors params, entries;
  model.collect(params);
  for (const auto& [name, t] : params) entries.emplace_back("model." + name, t);
  opt.save(entries, params);
  for (const auto& [name, v] : state) entries.emplace_back("state." + name, Tensor::from({1}, Buffer{v}));
  entries.emplace_back("meta.classes", Tensor::from({1}, Buffer{static_cast<Real>(model.cfg.classes)}));
  save_tensors(path, entries, Precision::f64);
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), 0xd209u};
  return std::mt19937_64(seq);
}

// Running sums over the batches of the current epoch.
struct EpochSums {
  Real loss = 0, cls = 0, l1 = 0, giou = 0, distill = 0, batches = 0;
};

nlohmann::json epoch_json(const EpochLog& e, bool distill) {
  nlohmann::json j;
  j["epoch"] = e.epoch;
  j["step"] = e.step;
  j["lr"] = e.lr;
  j["loss"] = e.loss;
  j["cls"] = e.cls;
  j["l1"] = e.l1;
  j["giou"] = e.giou;
  if (distill) j["distill"] = e.distill;
  if (e.eval) {
    j["ap50"] = e.eval->ap50;
    j["ap75"] = e.eval->ap75;
    j["mean_giou"] = e.eval->mean_giou;
    j["eval_loss"] = e.eval->loss;
  }
  return j;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DetectorConfig& model_cfg, const std::vector<SyntheticScene>& train_set,
                  const std::vector<SyntheticScene>& eval_set, const std::string& out_dir, const Detector* teacher,
                  const std::string& resume) {
  cfg.validate();
  model_cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  for (const auto& s : train_set) validate_ground_truth(s.gt, model_cfg.classes);
  const auto loss_cfg = loss_config_for(cfg, model_cfg);

  std::mt19937_64 init_rng(cfg.seed);
  TrainResult result;
  result.model = Detector::init(model_cfg, init_rng);
  NamedTensors named;
  result.model.collect(named);
  std::vector<Tensor> params;
  for (const auto& [name, t] : named) params.push_back(t);
  AdamW opt(params.size());

  const std::size_t n = train_set.size();
  const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::uint64_t total = static_cast<std::uint64_t>(per_epoch) * cfg.epochs;
  const bool distill = teacher != nullptr && cfg.lambda_dis > 0;
  if (distill) check_distill_compatible(*teacher, result.model, train_set[0].image);
  const auto seed_lo = static_cast<Real>(cfg.seed & 0xffffffffu), seed_hi = static_cast<Real>(cfg.seed >> 32);

  std::uint64_t step = 0;
  EpochSums sums;
  Real best = -std::numeric_limits<Real>::infinity();
  if (!resume.empty()) {
    const auto entries = load_tensors(resume);
    auto state = [&](const std::string& name) { return find_tensor(entries, "state." + name).item(); };
    if (state("seed_lo") != seed_lo || state("seed_hi") != seed_hi ||
        state("total_steps") != static_cast<Real>(total)) {
      throw ConfigError("resume: checkpoint " + resume + " was written by a run with a different seed or schedule");
    }
    NamedTensors stored;
    for (const auto& [name, t] : entries) {
      if (name.rfind("model.", 0) == 0) stored.emplace_back(name.substr(6), t);
    }
    result.model.load(stored);
    opt.load(entries, named);
    step = static_cast<std::uint64_t>(state("step"));
    result.initial_loss = state("initial_loss");
    best = state("best");
    sums = {state("sum_loss"), state("sum_cls"), state("sum_l1"), state("sum_giou"), state("sum_distill"),
            state("batches")};
  } else {
    result.initial_loss = mean_detection_loss(result.model, train_set, loss_cfg);
  }

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir + "/model.cfg") << format_detector_config(model_cfg);
    log.open(out_dir + "/metrics.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write " + out_dir + "/metrics.jsonl");
  }
  auto emit = [&](const nlohmann::json& j) {
    result.log_lines.push_back(j.dump());
    if (log.is_open()) log << result.log_lines.back() << '\n' << std::flush;
  };
  auto checkpoint_state = [&] {
    return std::vector<std::pair<std::string, Real>>{
        {"step", static_cast<Real>(step)}, {"total_steps", static_cast<Real>(total)},
        {"seed_lo", seed_lo},              {"seed_hi", seed_hi},
        {"initial_loss", result.initial_loss}, {"best", best},
        {"sum_loss", sums.loss},           {"sum_cls", sums.cls},
        {"sum_l1", sums.l1},               {"sum_giou", sums.giou},
        {"sum_distill", sums.distill},     {"batches", sums.batches}};
  };
  if (resume.empty()) emit({{"epoch", 0}, {"step", 0}, {"initial_loss", result.initial_loss}});

  const Real inv_batch_full = 1.0 / static_cast<Real>(cfg.batch);
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  while (step < total && (cfg.max_steps == 0 || step < cfg.max_steps)) {
    const std::size_t epoch = static_cast<std::size_t>(step / per_epoch);
    const std::size_t pos = static_cast<std::size_t>(step % per_epoch);
    if (epoch != order_epoch) {
      order = epoch_order(n, cfg.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t begin = pos * cfg.batch, end = std::min(n, begin + cfg.batch);
    const Real inv_batch = end - begin == cfg.batch ? inv_batch_full : 1.0 / static_cast<Real>(end - begin);
    const Real lr = cosine_lr(cfg.lr, step, total);
    for (auto& p : params) p.zero_grad();
    auto rng = step_rng(cfg.seed, step);
    Real b_loss = 0, b_cls = 0, b_l1 = 0, b_giou = 0, b_dis = 0;
    for (std::size_t b = begin; b < end; ++b) {
      const auto& scene = train_set[order[b]];
      Tape::active().clear();
      const auto out = result.model.forward(scene.image, &rng);
      auto terms = detection_loss(out.layers, scene.gt, loss_cfg);
      Tensor loss = terms.total;
      if (distill) {
        DistillTokens target;
        {
          NoGradGuard no_grad;
          target = distill_tokens(teacher->forward(scene.image));
        }
        const auto mine = distill_tokens(out);
        const auto dis = distillation_loss(mine.patch, mine.det, target.patch, target.det, cfg.lambda_dis);
        b_dis += dis.item() * inv_batch;
        loss = ops::add(loss, dis);
      }
      loss = ops::scale(loss, inv_batch);
      if (!std::isfinite(loss.item())) {
        const auto culprit = Tape::active().first_non_finite();
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (scene " +
                           std::to_string(order[b]) + "); first non-finite op: " +
                           culprit.value_or("none recorded, the loss reduction overflowed"));
      }
      b_loss += loss.item();
      b_cls += terms.cls * inv_batch;
      b_l1 += terms.l1 * inv_batch;
      b_giou += terms.giou * inv_batch;
      backward(loss);
      Tape::active().clear();
    }
    clip_gradients(named, cfg.grad_clip);
    opt.step(params, lr, cfg);
    ++step;
    sums.loss += b_loss;
    sums.cls += b_cls;
    sums.l1 += b_l1;
    sums.giou += b_giou;
    sums.distill += b_dis;
    sums.batches += 1;

    if (step % per_epoch == 0) {
      EpochLog e;
      e.epoch = epoch + 1;
      e.step = step;
      e.lr = lr;
      e.loss = sums.loss / sums.batches;
      e.cls = sums.cls / sums.batches;
      e.l1 = sums.l1 / sums.batches;
      e.giou = sums.giou / sums.batches;
      e.distill = sums.distill / sums.batches;
      const bool last = step == total;
      const bool due = cfg.eval_every > 0 ? e.epoch % cfg.eval_every == 0 : false;
      if (!eval_set.empty() && (due || last)) e.eval = evaluate(result.model, eval_set, loss_cfg, cfg.threads);
      sums = {};
      const Real score = e.eval ? e.eval->ap50 : -e.loss;
      const bool improved = (!eval_set.empty() ? e.eval.has_value() : true) && score > best;
      if (improved) best = score;
      emit(epoch_json(e, distill));
      result.epochs.push_back(e);
      if (improved && !out_dir.empty()) save_checkpoint(out_dir + "/best.vidt", result.model, opt, checkpoint_state());
    }
  }
  result.steps = step;
  if (!out_dir.empty()) save_checkpoint(out_dir + "/final.vidt", result.model, opt, checkpoint_state());
  if (step == total) {
    result.final_loss = mean_detection_loss(result.model, train_set, loss_cfg);
    if (!result.epochs.empty()) result.final_eval = result.epochs.back().eval;
    if (result.final_eval) {
      for (const auto& e : result.epochs) result.final_eval->loss_curve.push_back(e.loss);
    }
    emit({{"epoch", cfg.epochs}, {"step", step}, {"final_loss", result.final_loss}});
  }
  return result;
}

}  // namespace vidt
