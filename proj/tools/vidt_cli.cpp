#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "vidt/complexity.hpp"
#include "vidt/error.hpp"
#include "vidt/train.hpp"

using namespace vidt;

namespace {

void fail_line(const std::string& kind, const std::string& message) {
  nlohmann::json j{{"kind", kind}, {"message", message}};
  std::cerr << "error: " << j.dump() << '\n';
}

DetectorConfig model_from(const std::string& path) {
  return path.empty() ? DetectorConfig{} : load_detector_config(path);
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

std::vector<SyntheticScene> load_eval_set(const std::string& path) {
  return path.empty() ? std::vector<SyntheticScene>{} : load_dataset(path);
}

struct TrainArgs {
  TrainConfig cfg;
  std::string data, eval_data, out_dir, resume;
};

void add_train_flags(CLI::App* app, TrainArgs& a) {
  auto& c = a.cfg;
  app->add_option("--data", a.data, "training dataset written by gen-data")->required();
  app->add_option("--eval-data", a.eval_data, "held-out dataset evaluated during training");
  app->add_option("--out-dir", a.out_dir, "directory for metrics.jsonl and checkpoints")->required();
  app->add_option("--model-config", c.model_config, "model description file (defaults when omitted)");
  app->add_option("--lr", c.lr, "peak learning rate")->capture_default_str();
  app->add_option("--weight-decay", c.weight_decay)->capture_default_str();
  app->add_option("--grad-clip", c.grad_clip, "global gradient L2 bound, 0 disables")->capture_default_str();
  app->add_option("--beta1", c.beta1)->capture_default_str();
  app->add_option("--beta2", c.beta2)->capture_default_str();
  app->add_option("--eps", c.eps)->capture_default_str();
  app->add_option("--epochs", c.epochs)->capture_default_str();
  app->add_option("--batch", c.batch)->capture_default_str();
  app->add_option("--seed", c.seed)->capture_default_str();
  app->add_option("--w-cls", c.weights.cls, "classification loss weight")->capture_default_str();
  app->add_option("--w-l1", c.weights.l1, "box L1 loss weight")->capture_default_str();
  app->add_option("--w-iou", c.weights.iou, "GIoU loss weight")->capture_default_str();
  app->add_option("--no-object-weight", c.no_object_weight)->capture_default_str();
  app->add_flag("!--no-aux-loss", c.aux_loss, "supervise only the last decoder layer");
  app->add_option("--eval-every", c.eval_every, "epochs between evaluations")->capture_default_str();
  app->add_option("--max-steps", c.max_steps, "stop after this many optimizer steps")->capture_default_str();
  app->add_option("--resume", a.resume, "checkpoint of an interrupted run with the same flags");
}

void run_training(TrainArgs& a, const Detector* teacher) {
  a.cfg.threads = env_threads();
  const auto model_cfg = model_from(a.cfg.model_config);
  const auto train_set = load_dataset(a.data);
  const auto eval_set = load_eval_set(a.eval_data);
  const auto result = train(a.cfg, model_cfg, train_set, eval_set, a.out_dir, teacher, a.resume);
  nlohmann::json summary{{"steps", result.steps}, {"initial_loss", result.initial_loss}};
  if (result.final_loss > 0) summary["final_loss"] = result.final_loss;
  if (result.final_eval) {
    summary["ap50"] = result.final_eval->ap50;
    summary["ap75"] = result.final_eval->ap75;
  }
  std::cout << summary.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ViDT toy detector: data, training, evaluation and cost benchmarks"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  std::size_t gen_n = 500, gen_size = 64;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--n", gen_n, "number of scenes")->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--size", gen_size, "image side in pixels")->capture_default_str();
  gen->add_option("--out", gen_out)->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a detector");
  add_train_flags(train_cmd, train_args);

  TrainArgs distill_args;
  distill_args.cfg.lambda_dis = 4;
  auto* distill_cmd = app.add_subcommand("distill", "train a student against a frozen teacher");
  add_train_flags(distill_cmd, distill_args);
  distill_cmd->add_option("--teacher", distill_args.cfg.teacher_checkpoint, "teacher checkpoint")->required();
  distill_cmd->add_option("--teacher-config", distill_args.cfg.teacher_config, "teacher model description");
  distill_cmd->add_option("--lambda-dis", distill_args.cfg.lambda_dis, "distillation weight")->capture_default_str();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_cfg, eval_data, eval_csv_path;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--model-config", eval_cfg);
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--csv", eval_csv_path, "also write the per-class table as CSV");

  auto* bench_cmd = app.add_subcommand("bench", "count attention work for growing patch maps");
  std::vector<std::string> variants{"ram", "global", "global_no_cross"};
  std::vector<std::size_t> sides{16, 32, 64, 128};
  FragmentSize base;
  std::uint64_t bench_seed = 0;
  std::string bench_out;
  bench_cmd->add_option("--variants", variants)->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--sides", sides, "patch-map sides, P = side^2")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--det", base.D, "DET tokens")->capture_default_str();
  bench_cmd->add_option("--width", base.d, "token width")->capture_default_str();
  bench_cmd->add_option("--window", base.k, "window side for ram")->capture_default_str();
  bench_cmd->add_option("--seed", bench_seed)->capture_default_str();
  bench_cmd->add_option("--out", bench_out, "CSV path (stdout when omitted)");

  auto* sweep_cmd = app.add_subcommand("layer-drop-sweep", "AP and work with trailing decoder layers removed");
  std::string sweep_ckpt, sweep_cfg, sweep_data, sweep_out;
  sweep_cmd->add_option("--checkpoint", sweep_ckpt)->required();
  sweep_cmd->add_option("--model-config", sweep_cfg);
  sweep_cmd->add_option("--data", sweep_data)->required();
  sweep_cmd->add_option("--out", sweep_out, "CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    return 2;
  }

  try {
    if (gen->parsed()) {
      const auto scenes = generate_dataset(gen_n, gen_seed, gen_size, env_threads());
      save_dataset(gen_out, scenes);
      std::size_t objects = 0, empty = 0;
      for (const auto& s : scenes) {
        objects += s.gt.size();
        empty += s.gt.size() == 0;
      }
      std::cout << nlohmann::json{{"scenes", scenes.size()}, {"objects", objects}, {"empty", empty}}.dump() << '\n';
    } else if (train_cmd->parsed()) {
      run_training(train_args, nullptr);
    } else if (distill_cmd->parsed()) {
      const auto teacher_cfg = model_from(distill_args.cfg.teacher_config);
      const auto teacher = load_checkpoint_model(distill_args.cfg.teacher_checkpoint, teacher_cfg);
      run_training(distill_args, &teacher);
    } else if (eval_cmd->parsed()) {
      const auto report = evaluate_checkpoint(eval_ckpt, model_from(eval_cfg), load_dataset(eval_data), env_threads());
      std::cout << eval_json(report) << '\n';
      if (!eval_csv_path.empty()) write_or_print(eval_csv_path, eval_csv(report));
    } else if (bench_cmd->parsed()) {
      std::vector<Measurement> rows;
      for (const auto& v : variants) {
        std::vector<FragmentSize> sizes;
        for (auto side : sides) sizes.push_back({side, base.D, base.d, base.k});
        const auto m = measure_empirical(parse_attention_variant(v), sizes, bench_seed);
        rows.insert(rows.end(), m.begin(), m.end());
      }
      write_or_print(bench_out, bench_csv(rows));
    } else if (sweep_cmd->parsed()) {
      const auto cfg = model_from(sweep_cfg);
      const auto model = load_checkpoint_model(sweep_ckpt, cfg);
      write_or_print(sweep_out, layer_drop_csv(layer_drop_sweep(model, load_dataset(sweep_data), env_threads())));
    }
  } catch (const Error& e) {
    fail_line(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    fail_line("internal", e.what());
    return 1;
  }
  return 0;
}
