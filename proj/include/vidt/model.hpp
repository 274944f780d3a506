#pragma once

#include <random>
#include <string>
#include <vector>

#include "vidt/neck.hpp"

namespace vidt {

struct DetectorConfig {
  BackboneConfig backbone;
  NeckConfig neck;
  bool use_neck = true;  // off: a single head reads the backbone DET tokens
  std::size_t classes = 3;
  ClassMode class_mode = ClassMode::focal;

  void validate() const;
};

// Key/value model description, one `key = value` per line, `#` starts a
// comment. Lists are comma separated; booleans are true/false or 1/0.
//
//   image_size, patch, embed_dim, window, det_tokens, mlp_ratio   integers
//   depths, heads                                 four integers
//   cross, self_det                               four booleans, one per stage
//   encoding          none | sin_pre | learn_pre | sin_post | learn_post
//   dropout                                       real
//   neck                                          boolean
//   neck_width, neck_heads, neck_points, neck_layers, neck_ffn   integers
//   box_refinement                                boolean
//   head_sharing      automatic | shared | independent
//   classes                                       integer
//   class_mode        focal | cross_entropy
//
// Unknown keys, malformed values and duplicate keys raise ConfigError. Keys
// left out keep their defaults.
DetectorConfig parse_detector_config(const std::string& text);
DetectorConfig load_detector_config(const std::string& path);
std::string format_detector_config(const DetectorConfig& cfg);

struct DetectorOutput {
  std::vector<LayerPrediction> layers;  // one per decoder layer; one entry without the neck
  std::vector<PatchMap> memory;         // neck-width maps (empty without the neck)
  Tensor det;                           // backbone DET tokens after the last stage
};

struct Detector {
  DetectorConfig cfg;
  Backbone backbone;
  Neck neck;             // used when cfg.use_neck
  DetectionHead direct;  // used otherwise

  static Detector init(const DetectorConfig& cfg, std::mt19937_64& rng);
  DetectorOutput forward(const Tensor& image, std::mt19937_64* dropout_rng = nullptr) const;
  void collect(NamedTensors& out) const;
  // Copies values from `entries` into the parameters; names and shapes must
  // match one to one.
  void load(const NamedTensors& entries);
};

// Token sets compared by distillation: every neck memory token (PATCH side)
// and the DET tokens of every decoder layer (DET side), stacked row-wise.
struct DistillTokens {
  Tensor patch;
  Tensor det;
};
DistillTokens distill_tokens(const DetectorOutput& out);

Detector drop_decoder_layers(const Detector& model, std::size_t drop_n);

}  // namespace vidt
