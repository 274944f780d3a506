#pragma once

#include <random>
#include <string>
#include <vector>

#include "vidt/backbone.hpp"

namespace vidt {

enum class ClassMode { cross_entropy, focal };

ClassMode parse_class_mode(const std::string& name);
std::string to_string(ClassMode mode);

struct DeformAttnConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t levels = 4;
  std::size_t points = 4;

  std::size_t head_dim() const { return width / heads; }
  std::size_t slots() const { return heads * levels * points; }
  void validate() const;
};

// Multi-scale deformable attention. Each query predicts per (head, level,
// point) a sampling offset and a slot logit; slot weights are normalized by a
// softmax over the levels x points slots of each head. Offsets are measured in
// level pixels and added to the reference point after dividing by the level
// width/height.
struct MSDeformAttn {
  DeformAttnConfig cfg;
  Linear offsets;      // width -> heads*levels*points*2, (x, y) innermost
  Linear slot_logits;  // width -> heads*levels*points
  Linear value_proj;   // W'
  Linear output_proj;  // W

  static MSDeformAttn init(const DeformAttnConfig& cfg, std::mt19937_64& rng);

  struct Result {
    Tensor output;        // [D x width]
    Tensor slot_weights;  // [D x heads x levels*points]
    Tensor locations;     // [D x heads x levels x points x 2], normalized
  };
  // `maps` are value inputs at neck width, one per level; `refs` is [D x 2] in
  // [0, 1] as (x, y).
  Result operator()(const Tensor& query, const Tensor& refs, const std::vector<PatchMap>& maps) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct DetectionHead {
  Linear classifier;
  Linear box1, box2, box3;  // 3-layer box MLP, ReLU between layers

  static DetectionHead init(std::size_t width, std::size_t classes, ClassMode mode, std::mt19937_64& rng);

  struct Output {
    Tensor boxes;   // [D x 4] (cx, cy, w, h) in [0, 1]
    Tensor logits;  // [D x classes]
  };
  // With reference points the box centre is predicted relative to them in
  // inverse-sigmoid space.
  Output operator()(const Tensor& tokens, const Tensor& refs) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct DecoderLayer {
  AttentionWeights self_attn;
  LayerNorm norm_self;
  MSDeformAttn cross;
  LayerNorm norm_cross;
  FeedForward ffn;
  LayerNorm norm_ffn;
  std::size_t heads = 1;

  static DecoderLayer init(const DeformAttnConfig& cfg, std::size_t hidden, std::mt19937_64& rng);

  Tensor forward(const Tensor& tgt, const Tensor& query_pos, const Tensor& refs, const std::vector<PatchMap>& maps,
                 Real dropout, std::mt19937_64* rng) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

enum class HeadSharing { automatic, shared, independent };

HeadSharing parse_head_sharing(const std::string& name);
std::string to_string(HeadSharing mode);

struct NeckConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t points = 4;
  std::size_t layers = 6;
  std::size_t ffn_hidden = 128;
  Real dropout = 0.0;
  bool box_refinement = true;
  // automatic: independent heads with box refinement, one shared head without.
  HeadSharing head_sharing = HeadSharing::automatic;

  bool independent_heads() const {
    return head_sharing == HeadSharing::independent || (head_sharing == HeadSharing::automatic && box_refinement);
  }
  void validate() const;
};

struct LayerPrediction {
  Tensor tokens;  // DET tokens after the layer [D x width]
  Tensor boxes;   // [D x 4]
  Tensor logits;  // [D x classes]
  Tensor refs;    // reference points the layer sampled around [D x 2]
};

struct NeckOutput {
  std::vector<LayerPrediction> layers;
  std::vector<PatchMap> memory;  // multi-scale maps projected to neck width
};

struct Neck {
  NeckConfig cfg;
  std::vector<Linear> input_proj;      // per level, c_l -> width
  std::vector<LayerNorm> input_norm;
  Linear det_proj;                     // c4 -> width
  Tensor query_pos;                    // [D x width]
  Linear ref_point;                    // width -> 2
  std::vector<DecoderLayer> layers;
  std::vector<DetectionHead> heads;    // one per layer, or a single shared head

  static Neck init(const NeckConfig& cfg, const BackboneConfig& backbone, std::size_t classes, ClassMode mode,
                   std::mt19937_64& rng);

  const DetectionHead& head(std::size_t layer) const { return heads.size() == 1 ? heads[0] : heads[layer]; }
  NeckOutput forward(const BackboneOutput& body, std::mt19937_64* dropout_rng = nullptr) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

// sigmoid(inverse_sigmoid(refs) + delta), kept inside the open unit square.
Tensor refine_reference(const Tensor& refs, const Tensor& delta);

// Copy of `neck` keeping only the first layers().size() - drop_n decoder
// layers (and their heads).
Neck layer_drop(const Neck& neck, std::size_t drop_n);

}  // namespace vidt
