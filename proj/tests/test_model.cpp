#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "vidt/complexity.hpp"
#include "vidt/error.hpp"
#include "vidt/model.hpp"

using namespace vidt;
using namespace vidt::testing;

namespace {

DetectorConfig small_config(bool neck) {
  auto cfg = parse_detector_config(
      "image_size = 32\n"
      "embed_dim = 8\n"
      "depths = 1,1,1,1\n"
      "heads = 1,1,2,2\n"
      "det_tokens = 4\n"
      "neck_width = 16\n"
      "neck_heads = 2\n"
      "neck_points = 2\n"
      "neck_layers = 3\n"
      "neck_ffn = 32\n");
  cfg.use_neck = neck;
  return cfg;
}

}  // namespace

TEST_CASE("config parser reads every key and round-trips through its formatter") {
  const std::string text =
      "# toy detector\n"
      "image_size = 48\n"
      "patch = 4\n"
      "embed_dim = 24   # stage-1 channels\n"
      "depths = 2, 2, 4, 2\n"
      "heads = 1,2,3,6\n"
      "window = 2\n"
      "det_tokens = 7\n"
      "cross = false,false,true,true\n"
      "self_det = 1,1,0,1\n"
      "encoding = learn_post\n"
      "mlp_ratio = 2\n"
      "dropout = 0.25\n"
      "neck = true\n"
      "neck_width = 48\n"
      "neck_heads = 6\n"
      "neck_points = 3\n"
      "neck_layers = 2\n"
      "neck_ffn = 96\n"
      "box_refinement = false\n"
      "head_sharing = independent\n"
      "classes = 5\n"
      "class_mode = cross_entropy\n";
  const auto cfg = parse_detector_config(text);
  CHECK(cfg.backbone.image_size == 48);
  CHECK(cfg.backbone.embed_dim == 24);
  CHECK(cfg.backbone.depths == std::array<std::size_t, 4>{2, 2, 4, 2});
  CHECK(cfg.backbone.heads[3] == 6);
  CHECK(cfg.backbone.window == 2);
  CHECK(cfg.backbone.det_tokens == 7);
  CHECK(cfg.backbone.cross == std::array<bool, 4>{false, false, true, true});
  CHECK(cfg.backbone.self_det == std::array<bool, 4>{true, true, false, true});
  CHECK(cfg.backbone.encoding.mode == SpatialEncoding::learn_post);
  CHECK(cfg.backbone.mlp_ratio == 2);
  CHECK(cfg.backbone.dropout == 0.25);
  CHECK(cfg.neck.dropout == 0.25);
  CHECK(cfg.neck.width == 48);
  CHECK(cfg.neck.heads == 6);
  CHECK(cfg.neck.points == 3);
  CHECK(cfg.neck.layers == 2);
  CHECK(cfg.neck.ffn_hidden == 96);
  CHECK(!cfg.neck.box_refinement);
  CHECK(cfg.neck.head_sharing == HeadSharing::independent);
  CHECK(cfg.classes == 5);
  CHECK(cfg.class_mode == ClassMode::cross_entropy);
  const auto again = parse_detector_config(format_detector_config(cfg));
  CHECK(format_detector_config(again) == format_detector_config(cfg));

  const auto defaults = parse_detector_config("");
  CHECK(defaults.backbone.embed_dim == 16);
  CHECK(defaults.backbone.det_tokens == 16);
  CHECK(defaults.use_neck);
}

TEST_CASE("config parser rejects bad input") {
  CHECK_THROWS_AS(parse_detector_config("colour = red\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("embed_dim 16\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("embed_dim = sixteen\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("embed_dim = -4\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("depths = 1,2,3\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("cross = yes,no,no,no\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("encoding = fourier\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("class_mode = hinge\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("window = 4\nwindow = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("classes = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_detector_config("heads = 1,2,4,7\n"), ConfigError);
  CHECK_THROWS_AS(load_detector_config("/nonexistent/model.cfg"), IoError);
}

TEST_CASE("detector forward with and without the neck") {
  std::mt19937_64 rng(1);
  auto image = random_tensor({32, 32, 3}, rng, 0, 1, false);
  for (bool neck : {true, false}) {
    auto cfg = small_config(neck);
    auto model = Detector::init(cfg, rng);
    auto out = model.forward(image);
    CHECK(out.layers.size() == (neck ? 3u : 1u));
    CHECK(out.memory.size() == (neck ? 4u : 0u));
    CHECK(out.det.shape() == Shape{4, 64});
    for (const auto& l : out.layers) {
      CHECK(l.boxes.shape() == Shape{4, 4});
      CHECK(l.logits.shape() == Shape{4, 3});
      for (Real v : l.boxes.data()) {
        CHECK(v > 0);
        CHECK(v < 1);
      }
    }
    NamedTensors params;
    model.collect(params);
    for (const auto& [name, t] : params) CHECK(name.rfind(neck ? "head." : "neck.", 0) != 0);
  }
}

TEST_CASE("detector load copies values and checks names and shapes") {
  std::mt19937_64 rng(2);
  auto cfg = small_config(true);
  auto a = Detector::init(cfg, rng);
  auto b = Detector::init(cfg, rng);
  NamedTensors pa, pb;
  a.collect(pa);
  b.collect(pb);
  REQUIRE(pa.size() == pb.size());
  b.load(pa);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(values(pa[i].second) == values(pb[i].second));
  auto image = random_tensor({32, 32, 3}, rng, 0, 1, false);
  CHECK(values(a.forward(image).layers.back().boxes) == values(b.forward(image).layers.back().boxes));

  NamedTensors missing(pa.begin(), pa.end() - 1);
  CHECK_THROWS_AS(b.load(missing), ContractError);
  NamedTensors wrong = pa;
  wrong[0].second = Tensor::zeros({1});
  CHECK_THROWS_AS(b.load(wrong), DimensionError);
}

TEST_CASE("distillation tokens stack memory and per-layer DET tokens") {
  std::mt19937_64 rng(3);
  auto model = Detector::init(small_config(true), rng);
  auto out = model.forward(random_tensor({32, 32, 3}, rng, 0, 1, false));
  auto t = distill_tokens(out);
  CHECK(t.patch.shape() == Shape{64 + 16 + 4 + 1, 16});
  CHECK(t.det.shape() == Shape{3 * 4, 16});
  auto direct = Detector::init(small_config(false), rng);
  CHECK_THROWS_AS(distill_tokens(direct.forward(random_tensor({32, 32, 3}, rng, 0, 1, false))), ConfigError);
}

TEST_CASE("dropping decoder layers keeps prefix predictions and lowers measured work") {
  std::mt19937_64 rng(4);
  auto model = Detector::init(small_config(true), rng);
  auto image = random_tensor({32, 32, 3}, rng, 0, 1, false);
  auto full = model.forward(image);
  std::uint64_t previous = measure_forward(model, image).macs;
  for (std::size_t drop = 1; drop < 3; ++drop) {
    auto cut = drop_decoder_layers(model, drop);
    CHECK(cut.cfg.neck.layers == 3 - drop);
    auto out = cut.forward(image);
    REQUIRE(out.layers.size() == 3 - drop);
    CHECK(values(out.layers.back().boxes) == values(full.layers[2 - drop].boxes));
    const auto macs = measure_forward(cut, image).macs;
    CHECK(macs < previous);
    previous = macs;
  }
  CHECK_THROWS_AS(drop_decoder_layers(model, 3), ConfigError);
}

TEST_CASE("full detector gradients match finite differences") {
  std::mt19937_64 rng(5);
  auto cfg = small_config(true);
  cfg.backbone.image_size = 16;
  // Refinement detaches reference points between layers on purpose, which
  // finite differences would see through.
  cfg.neck.box_refinement = false;
  auto model = Detector::init(cfg, rng);
  auto image = random_tensor({16, 16, 3}, rng, 0, 1, false);
  NamedTensors params;
  model.collect(params);
  const std::vector<std::string> probe{"backbone.det_tokens", "neck.query_pos", "neck.layer0.cross.offsets.weight", "neck.layer2.ffn.fc1.weight"};
  for (const auto& name : probe) {
    Tensor p = find_tensor(params, name);
    Tape::active().clear();
    const auto err = gradcheck(
        [&](const auto& in) {
          (void)in;
          auto out = model.forward(image);
          return weighted_sum(ops::concat({out.layers.back().boxes, out.layers.back().logits}, 1));
        },
        {p});
    CHECK_MESSAGE(err < 1e-4, name);
  }
}
