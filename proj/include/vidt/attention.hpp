#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vidt/layers.hpp"

namespace vidt {

struct MultiHeadConfig {
  std::size_t embed_dim = 0;
  std::size_t heads = 1;
  Real dropout_p = 0.0;

  std::size_t head_dim() const { return embed_dim / heads; }
  void validate() const;  // ConfigError unless heads divides embed_dim
};

// Query/key/value/output projections of one attention module. The backbone
// shares a single instance between the [PATCH] and [DET] paths.
struct AttentionWeights {
  Linear query;
  Linear key;
  Linear value;
  Linear out;

  static AttentionWeights xavier(std::size_t dim, std::mt19937_64& rng);
  static AttentionWeights normal(std::size_t dim, Real stddev, std::mt19937_64& rng);
  static AttentionWeights zeros(std::size_t dim);
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct AttentionResult {
  Tensor output;   // tokens x embed_dim
  Tensor weights;  // softmax weights, layout documented per function
};

// [n x d] -> [heads x n x d/heads] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

// Softmax(q k^T / sqrt(head_dim) + bias) v on already projected, head-split
// inputs [B x Nq x hd], [B x Nk x hd]. `bias` broadcasts against the
// [B x Nq x Nk] logits and may be undefined.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias);

// Global multi-head attention. Weights are [heads x Nq x Nk]. Counts Nq * Nk
// attention pairs.
AttentionResult multi_head_attention(const Tensor& q_tokens, const Tensor& k_tokens, const Tensor& v_tokens,
                                     const AttentionWeights& w, const MultiHeadConfig& cfg);

// Forward-only attention that streams query blocks and never materializes the
// full logits matrix; used by the complexity meter for very long sequences.
Tensor streaming_attention(const Tensor& q_tokens, const Tensor& kv_tokens, const AttentionWeights& w,
                           const MultiHeadConfig& cfg, std::size_t block = 256);

struct WindowConfig {
  std::size_t window = 4;
  std::size_t shift = 0;  // 0 or window / 2

  void validate() const;
};

// Static description of one cyclic-shift window partition of an h x w map
// padded to multiples of the window side.
struct WindowPlan {
  std::size_t h = 0, w = 0;
  std::size_t padded_h = 0, padded_w = 0;
  std::size_t window = 0, shift = 0;
  std::size_t num_windows = 0;
  std::size_t tokens_per_window = 0;
  // Window-major row order -> source token (or -1 for padding).
  std::vector<std::int64_t> gather;
  // Source token -> row in the window-major order.
  std::vector<std::int64_t> scatter;
  // Pairwise relative-position bias row for (query, key) in one window.
  std::vector<std::int64_t> relative_index;
  // Additive mask [num_windows x 1 x N x N]: 0 or -inf. -inf for pairs that
  // straddle the cyclic-shift seam and for padded keys.
  Tensor mask;
  // Attention pairs between non-padded tokens, summed over windows.
  std::uint64_t valid_pairs = 0;
  // Shift-region label of each window-major row (-1 for padding).
  std::vector<int> region;
};

// Plans are cached per thread. Maps no larger than one window are attended as
// a single unshifted window.
const WindowPlan& window_plan(std::size_t h, std::size_t w, const WindowConfig& cfg);

// Relative position bias table [(2k - 1)^2 x heads].
Tensor relative_bias_table(std::size_t window, std::size_t heads, std::mt19937_64& rng);

// Local multi-head self-attention inside (shifted) windows of an h x w token
// map [h*w x d]. Weights are [num_windows x heads x N x N] in window-major
// order. Counts attention pairs between non-padded tokens only.
AttentionResult windowed_self_attention(const Tensor& tokens, std::size_t h, std::size_t w, const WindowConfig& cfg,
                                        const AttentionWeights& weights, const Tensor& bias_table,
                                        const MultiHeadConfig& mh);

enum class SpatialEncoding { none, sin_pre, learn_pre, sin_post, learn_post };

SpatialEncoding parse_spatial_encoding(const std::string& name);
std::string to_string(SpatialEncoding mode);

struct SpatialEncodingConfig {
  SpatialEncoding mode = SpatialEncoding::sin_pre;
  Real temperature = 10000.0;
};

// DETR-style 2-D sine encoding [h x w x d]: the first d/2 channels encode the
// row, the rest the column; within each half channel 2i holds
// sin(pos / T^(2i/(d/2))) and channel 2i+1 the matching cosine.
Tensor sinusoidal_2d_encoding(std::size_t h, std::size_t w, std::size_t d, Real temperature = 10000.0);

// Post-norm transformer block: H'' = LN(Dropout(MHA(Z)) + Z),
// H = LN(Dropout(FFN(H'')) + H'').
struct TransformerBlock {
  AttentionWeights attention;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;
  MultiHeadConfig cfg;

  static TransformerBlock xavier(std::size_t dim, std::size_t heads, std::size_t hidden, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, std::mt19937_64* dropout_rng = nullptr) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

// LN(Dropout(delta) + x)
Tensor residual_norm(const Tensor& x, const Tensor& delta, const LayerNorm& norm, Real dropout_p,
                     std::mt19937_64* rng);

}  // namespace vidt
