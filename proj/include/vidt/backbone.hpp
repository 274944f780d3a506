#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "vidt/attention.hpp"

namespace vidt {

inline constexpr std::size_t kStages = 4;

struct BackboneConfig {
  std::size_t image_size = 64;  // side of the square input; sizes learnable spatial encodings
  std::size_t patch = 4;
  std::size_t embed_dim = 16;   // stage-1 channels, doubled at every merge
  std::array<std::size_t, kStages> depths{2, 2, 2, 2};
  std::array<std::size_t, kStages> heads{1, 2, 4, 8};
  std::size_t window = 4;
  std::size_t det_tokens = 16;
  std::array<bool, kStages> cross{false, false, false, true};
  std::array<bool, kStages> self_det{true, true, true, true};
  SpatialEncodingConfig encoding;
  std::size_t mlp_ratio = 4;
  Real dropout = 0.0;

  std::size_t channel_dim(std::size_t stage) const { return embed_dim << stage; }
  // Side of the stage-`stage` patch grid for the configured image size.
  std::size_t grid_side(std::size_t stage) const;
  void validate() const;
};

struct PatchMap {
  std::size_t h = 0, w = 0;
  Tensor tokens;  // [h*w x c], row-major over the grid
  std::size_t stage = 0;

  std::size_t channels() const { return tokens.dim(1); }
};

struct DetTokenSet {
  Tensor tokens;  // [D x c]
  Tensor pos;     // learnable positional encoding [D x c]
};

// Image [H x W x 3] -> stage-1 grid of flattened patches [(H/p)(W/p) x p*p*3],
// zero-padding the right and bottom edges to multiples of p. Patch features
// are ordered (row, column, channel).
Tensor extract_patches(const Tensor& image, std::size_t patch, std::size_t& grid_h, std::size_t& grid_w);

PatchMap patch_embed(const Tensor& image, std::size_t patch, const Linear& projection);

struct PatchMerging {
  LayerNorm norm;       // over 4c
  Linear reduction;     // 4c -> 2c, no bias

  static PatchMerging init(std::size_t channels, std::mt19937_64& rng);
  PatchMap operator()(const PatchMap& pm) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

// Repeats every DET embedding `factor` times along channels. `target_dim`
// must equal factor times the current width.
Tensor det_dim_grow(const Tensor& det, std::size_t factor, std::size_t target_dim);

struct RamFlags {
  bool cross = false;
  bool self_det = true;
  SpatialEncoding encoding = SpatialEncoding::sin_pre;
};

// Bound DET attention: DET queries attend over [DET_K ; PATCH_K] with a single
// softmax. Either key group may be left out through the flags. `det_in` already
// carries the DET positional encoding; `det_values` does not. `patch_k_in` and
// `patch_v_in` are the patch inputs of the key and value projections and
// `patch_post` (may be undefined) is added after projecting. Weights are
// [heads x D x (D + P)] with the DET block first.
AttentionResult bound_det_attention(const Tensor& det_in, const Tensor& det_values, const Tensor& patch_k_in,
                                    const Tensor& patch_v_in, const Tensor& patch_post, const AttentionWeights& w,
                                    std::size_t heads, bool self_det, bool cross);

struct RamLayer {
  AttentionWeights attention;  // shared by the PATCH and DET paths
  Tensor relative_bias;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;
  std::size_t heads = 1;
  WindowConfig window;

  static RamLayer init(std::size_t dim, std::size_t heads, std::size_t hidden, WindowConfig window,
                       std::mt19937_64& rng);

  struct Output {
    PatchMap patches;
    Tensor det;
  };
  // `spatial` is the [h*w x c] spatial encoding for the cross path, ignored
  // unless flags.cross.
  Output forward(const PatchMap& pm, const DetTokenSet& det, const Tensor& spatial, const RamFlags& flags,
                 Real dropout, std::mt19937_64* rng) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct BackboneOutput {
  std::vector<PatchMap> maps;     // one per stage, before the next merge
  std::vector<Tensor> stage_det;  // DET tokens after each stage
  DetTokenSet det;                // DET tokens after the last stage
};

struct Backbone {
  BackboneConfig cfg;
  Linear patch_projection;
  Tensor det_init;                          // [D x c1]
  std::array<Tensor, kStages> det_pos;      // [D x c_s]
  std::array<Tensor, kStages> spatial_pos;  // learnable encodings [h_s*w_s x c_s] where used
  std::array<std::vector<RamLayer>, kStages> layers;
  std::array<PatchMerging, kStages - 1> merges;

  static Backbone init(const BackboneConfig& cfg, std::mt19937_64& rng);
  BackboneOutput forward(const Tensor& image, std::mt19937_64* dropout_rng = nullptr) const;
  void collect(NamedTensors& out, const std::string& prefix) const;

  // Spatial encoding [h*w x c] used by the cross path at `stage`.
  Tensor spatial_encoding(std::size_t stage, std::size_t h, std::size_t w) const;
};

}  // namespace vidt
