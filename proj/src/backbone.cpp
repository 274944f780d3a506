#include "vidt/backbone.hpp"

#include <map>
#include <tuple>

#include "vidt/error.hpp"

namespace vidt {

namespace {

constexpr Real kInitStd = 0.02;

bool uses_sin(SpatialEncoding m) { return m == SpatialEncoding::sin_pre || m == SpatialEncoding::sin_post; }
bool uses_learn(SpatialEncoding m) { return m == SpatialEncoding::learn_pre || m == SpatialEncoding::learn_post; }
bool is_pre(SpatialEncoding m) { return m == SpatialEncoding::sin_pre || m == SpatialEncoding::learn_pre; }

std::string stage_name(std::size_t s) { return "stage" + std::to_string(s + 1); }

}  // namespace

std::size_t BackboneConfig::grid_side(std::size_t stage) const {
  std::size_t side = (image_size + patch - 1) / patch;
  for (std::size_t s = 0; s < stage; ++s) side = (side + 1) / 2;
  return side;
}

void BackboneConfig::validate() const {
  if (patch == 0 || embed_dim == 0 || det_tokens == 0 || window == 0) {
    throw ConfigError("backbone: patch, embed_dim, det_tokens and window must be positive");
  }
  if (image_size < patch) throw ConfigError("backbone: image_size smaller than the patch size");
  if (dropout < 0 || dropout >= 1) throw ConfigError("backbone: dropout must be in [0, 1)");
  if (mlp_ratio == 0) throw ConfigError("backbone: mlp_ratio must be positive");
  for (std::size_t s = 0; s < kStages; ++s) {
    if (depths[s] == 0) throw ConfigError("backbone: " + stage_name(s) + " has no layers");
    MultiHeadConfig{channel_dim(s), heads[s], 0.0}.validate();
    if (cross[s] && uses_sin(encoding.mode) && channel_dim(s) % 4 != 0) {
      throw ConfigError("backbone: sinusoidal encoding needs channels divisible by 4 at " + stage_name(s));
    }
  }
  if (window % 2 != 0 && window > 1) {
    throw ConfigError("backbone: shifted windows need an even window size, got " + std::to_string(window));
  }
}

Tensor extract_patches(const Tensor& image, std::size_t patch, std::size_t& grid_h, std::size_t& grid_w) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimensionError("patch_embed: expected an H x W x 3 image, got " + shape_str(image.shape()));
  }
  const auto H = image.dim(0), W = image.dim(1);
  if (H == 0 || W == 0) throw DimensionError("patch_embed: empty image");
  if (patch == 0) throw ConfigError("patch_embed: patch size must be positive");
  grid_h = (H + patch - 1) / patch;
  grid_w = (W + patch - 1) / patch;
  const auto feat = patch * patch * 3;
  std::vector<Real> out(grid_h * grid_w * feat, 0.0);
  const auto& src = image.data();
  for (std::size_t gy = 0; gy < grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      Real* dst = out.data() + (gy * grid_w + gx) * feat;
      for (std::size_t dy = 0; dy < patch; ++dy) {
        const auto y = gy * patch + dy;
        if (y >= H) break;
        for (std::size_t dx = 0; dx < patch; ++dx) {
          const auto x = gx * patch + dx;
          if (x >= W) break;
          for (std::size_t c = 0; c < 3; ++c) dst[(dy * patch + dx) * 3 + c] = src[(y * W + x) * 3 + c];
        }
      }
    }
  }
  return Tensor::from({grid_h * grid_w, feat}, std::move(out));
}

PatchMap patch_embed(const Tensor& image, std::size_t patch, const Linear& projection) {
  PatchMap pm;
  auto patches = extract_patches(image, patch, pm.h, pm.w);
  if (projection.in_features() != patches.dim(1)) {
    throw DimensionError("patch_embed: projection expects " + std::to_string(projection.in_features()) +
                         " features, patches have " + std::to_string(patches.dim(1)));
  }
  pm.tokens = projection(patches);
  return pm;
}

PatchMerging PatchMerging::init(std::size_t channels, std::mt19937_64& rng) {
  return {LayerNorm::identity(4 * channels), Linear::normal(4 * channels, 2 * channels, kInitStd, rng, false)};
}

PatchMap PatchMerging::operator()(const PatchMap& pm) const {
  const auto c = pm.channels();
  if (norm.gamma.dim(0) != 4 * c) {
    throw DimensionError("patch_merge: layer built for " + std::to_string(norm.gamma.dim(0) / 4) +
                         " channels, map has " + std::to_string(c));
  }
  const auto h2 = (pm.h + 1) / 2, w2 = (pm.w + 1) / 2;
  std::vector<std::int64_t> index;
  index.reserve(h2 * w2 * 4);
  auto at = [&](std::size_t r, std::size_t col) -> std::int64_t {
    return r < pm.h && col < pm.w ? static_cast<std::int64_t>(r * pm.w + col) : -1;
  };
  for (std::size_t i = 0; i < h2; ++i) {
    for (std::size_t j = 0; j < w2; ++j) {
      index.push_back(at(2 * i, 2 * j));
      index.push_back(at(2 * i + 1, 2 * j));
      index.push_back(at(2 * i, 2 * j + 1));
      index.push_back(at(2 * i + 1, 2 * j + 1));
    }
  }
  auto grouped = ops::reshape(ops::gather_rows(pm.tokens, index), {h2 * w2, 4 * c});
  PatchMap out;
  out.h = h2;
  out.w = w2;
  out.stage = pm.stage + 1;
  out.tokens = reduction(norm(grouped));
  return out;
}

void PatchMerging::collect(NamedTensors& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  reduction.collect(out, prefix + ".reduction");
}

Tensor det_dim_grow(const Tensor& det, std::size_t factor, std::size_t target_dim) {
  if (det.rank() != 2) throw DimensionError("det_dim_grow: expected [D x c] tokens, got " + shape_str(det.shape()));
  if (factor == 0 || det.dim(1) * factor != target_dim) {
    throw ConfigError("det_dim_grow: factor " + std::to_string(factor) + " does not take width " +
                      std::to_string(det.dim(1)) + " to " + std::to_string(target_dim));
  }
  if (factor == 1) return det;
  return ops::concat(std::vector<Tensor>(factor, det), 1);
}

AttentionResult bound_det_attention(const Tensor& det_in, const Tensor& det_values, const Tensor& patch_k_in,
                                    const Tensor& patch_v_in, const Tensor& patch_post, const AttentionWeights& w,
                                    std::size_t heads, bool self_det, bool cross) {
  const auto D = det_in.dim(0), c = det_in.dim(1);
  if (!self_det && !cross) return {Tensor::zeros({D, c}), Tensor()};
  std::vector<Tensor> keys, vals;
  std::uint64_t n_keys = 0;
  if (self_det) {
    keys.push_back(w.key(det_in));
    vals.push_back(w.value(det_values));
    n_keys += D;
  }
  if (cross) {
    if (patch_k_in.dim(1) != c) {
      throw DimensionError("bound attention: patch width " + std::to_string(patch_k_in.dim(1)) +
                           " differs from DET width " + std::to_string(c));
    }
    auto pk = w.key(patch_k_in);
    auto pv = w.value(patch_v_in);
    if (patch_post.defined()) {
      pk = ops::add(pk, patch_post);
      pv = ops::add(pv, patch_post);
    }
    keys.push_back(pk);
    vals.push_back(pv);
    n_keys += patch_k_in.dim(0);
  }
  tally_pairs(static_cast<std::uint64_t>(D) * n_keys);
  auto k = keys.size() == 1 ? keys[0] : ops::concat(keys, 0);
  auto v = vals.size() == 1 ? vals[0] : ops::concat(vals, 0);
  auto r = scaled_dot_attention(split_heads(w.query(det_in), heads), split_heads(k, heads), split_heads(v, heads),
                                Tensor());
  return {w.out(merge_heads(r.output)), r.weights};
}

RamLayer RamLayer::init(std::size_t dim, std::size_t heads, std::size_t hidden, WindowConfig window,
                        std::mt19937_64& rng) {
  RamLayer l;
  l.heads = heads;
  l.window = window;
  l.attention = AttentionWeights::normal(dim, kInitStd, rng);
  l.relative_bias = relative_bias_table(window.window, heads, rng);
  l.norm1 = LayerNorm::identity(dim);
  l.ffn = {Linear::normal(dim, hidden, kInitStd, rng), Linear::normal(hidden, dim, kInitStd, rng), Activation::gelu};
  l.norm2 = LayerNorm::identity(dim);
  return l;
}

RamLayer::Output RamLayer::forward(const PatchMap& pm, const DetTokenSet& det, const Tensor& spatial,
                                   const RamFlags& flags, Real dropout, std::mt19937_64* rng) const {
  const auto c = pm.channels();
  if (det.tokens.dim(1) != c) {
    throw DimensionError("ram_layer: DET width " + std::to_string(det.tokens.dim(1)) + " differs from PATCH width " +
                         std::to_string(c));
  }
  const MultiHeadConfig mh{c, heads, 0.0};
  auto patch_delta = windowed_self_attention(pm.tokens, pm.h, pm.w, window, attention, relative_bias, mh).output;

  auto det_in = ops::add(det.tokens, det.pos);
  Tensor k_in = pm.tokens, v_in = pm.tokens, post;
  if (flags.cross && flags.encoding != SpatialEncoding::none) {
    if (!spatial.defined() || spatial.dim(0) != pm.h * pm.w || spatial.dim(1) != c) {
      throw ConfigError("ram_layer: cross-attention needs a " + std::to_string(pm.h * pm.w) + " x " +
                        std::to_string(c) + " spatial encoding");
    }
    if (is_pre(flags.encoding)) {
      k_in = v_in = ops::add(pm.tokens, spatial);
    } else {
      post = spatial;
    }
  }
  auto det_delta =
      bound_det_attention(det_in, det.tokens, k_in, v_in, post, attention, heads, flags.self_det, flags.cross).output;

  Output out;
  out.patches = pm;
  auto h = residual_norm(pm.tokens, patch_delta, norm1, dropout, rng);
  out.patches.tokens = residual_norm(h, ffn(h), norm2, dropout, rng);
  auto g = residual_norm(det.tokens, det_delta, norm1, dropout, rng);
  out.det = residual_norm(g, ffn(g), norm2, dropout, rng);
  return out;
}

void RamLayer::collect(NamedTensors& out, const std::string& prefix) const {
  attention.collect(out, prefix + ".attn");
  out.emplace_back(prefix + ".attn.relative_bias", relative_bias);
  norm1.collect(out, prefix + ".norm1");
  ffn.collect(out, prefix + ".ffn");
  norm2.collect(out, prefix + ".norm2");
}

Backbone Backbone::init(const BackboneConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Backbone b;
  b.cfg = cfg;
  b.patch_projection = Linear::normal(cfg.patch * cfg.patch * 3, cfg.embed_dim, kInitStd, rng);
  b.det_init = trunc_normal_parameter({cfg.det_tokens, cfg.embed_dim}, kInitStd, rng);
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto c = cfg.channel_dim(s);
    b.det_pos[s] = trunc_normal_parameter({cfg.det_tokens, c}, kInitStd, rng);
    if (cfg.cross[s] && uses_learn(cfg.encoding.mode)) {
      const auto side = cfg.grid_side(s);
      b.spatial_pos[s] = trunc_normal_parameter({side * side, c}, kInitStd, rng);
    }
    for (std::size_t l = 0; l < cfg.depths[s]; ++l) {
      WindowConfig wc{cfg.window, l % 2 == 1 ? cfg.window / 2 : 0};
      b.layers[s].push_back(RamLayer::init(c, cfg.heads[s], cfg.mlp_ratio * c, wc, rng));
    }
    if (s + 1 < kStages) b.merges[s] = PatchMerging::init(c, rng);
  }
  return b;
}

Tensor Backbone::spatial_encoding(std::size_t stage, std::size_t h, std::size_t w) const {
  const auto c = cfg.channel_dim(stage);
  const auto mode = cfg.encoding.mode;
  if (mode == SpatialEncoding::none) return Tensor();
  if (uses_learn(mode)) {
    const auto& p = spatial_pos[stage];
    if (!p.defined()) throw ConfigError("backbone: no learnable spatial encoding at " + stage_name(stage));
    if (p.dim(0) != h * w) {
      throw DimensionError("backbone: learnable spatial encoding at " + stage_name(stage) + " covers " +
                           std::to_string(p.dim(0)) + " tokens, map has " + std::to_string(h * w));
    }
    return p;
  }
  thread_local std::map<std::tuple<std::size_t, std::size_t, std::size_t, Real>, Tensor> cache;
  auto key = std::make_tuple(h, w, c, cfg.encoding.temperature);
  auto it = cache.find(key);
  if (it == cache.end()) {
    auto enc = ops::reshape(sinusoidal_2d_encoding(h, w, c, cfg.encoding.temperature), {h * w, c});
    it = cache.emplace(key, enc).first;
  }
  return it->second;
}

BackboneOutput Backbone::forward(const Tensor& image, std::mt19937_64* dropout_rng) const {
  auto pm = patch_embed(image, cfg.patch, patch_projection);
  DetTokenSet det{det_init, det_pos[0]};
  BackboneOutput out;
  for (std::size_t s = 0; s < kStages; ++s) {
    if (s > 0) {
      pm = merges[s - 1](pm);
      det.tokens = det_dim_grow(det.tokens, 2, cfg.channel_dim(s));
      det.pos = det_pos[s];
    }
    const RamFlags flags{cfg.cross[s], cfg.self_det[s], cfg.encoding.mode};
    Tensor spatial = flags.cross ? spatial_encoding(s, pm.h, pm.w) : Tensor();
    for (const auto& layer : layers[s]) {
      auto r = layer.forward(pm, det, spatial, flags, cfg.dropout, dropout_rng);
      pm = std::move(r.patches);
      det.tokens = std::move(r.det);
    }
    out.maps.push_back(pm);
    out.stage_det.push_back(det.tokens);
  }
  out.det = det;
  return out;
}

void Backbone::collect(NamedTensors& out, const std::string& prefix) const {
  patch_projection.collect(out, prefix + ".patch_embed");
  out.emplace_back(prefix + ".det_tokens", det_init);
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto p = prefix + "." + stage_name(s);
    out.emplace_back(p + ".det_pos", det_pos[s]);
    if (spatial_pos[s].defined()) out.emplace_back(p + ".spatial_pos", spatial_pos[s]);
    for (std::size_t l = 0; l < layers[s].size(); ++l) layers[s][l].collect(out, p + ".layer" + std::to_string(l));
    if (s + 1 < kStages) merges[s].collect(out, p + ".merge");
  }
}

}  // namespace vidt
