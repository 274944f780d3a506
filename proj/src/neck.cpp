#include "vidt/neck.hpp"

#include <cmath>

#include "vidt/error.hpp"

namespace vidt {

namespace {

constexpr Real kRefEps = 1e-5;

void check_refs(const Tensor& refs, std::size_t n) {
  if (refs.rank() != 2 || refs.dim(0) != n || refs.dim(1) != 2) {
    throw DimensionError("reference points " + shape_str(refs.shape()) + " do not match " + std::to_string(n) +
                         " queries");
  }
  for (Real v : refs.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite reference point; first non-finite op: " +
                         Tape::active().first_non_finite().value_or("unknown, nothing recorded"));
    }
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("reference point " + std::to_string(v) + " outside [0, 1]");
  }
}

}  // namespace

ClassMode parse_class_mode(const std::string& name) {
  if (name == "cross_entropy" || name == "ce") return ClassMode::cross_entropy;
  if (name == "focal") return ClassMode::focal;
  throw ConfigError("unknown classification mode '" + name + "'");
}

std::string to_string(ClassMode mode) { return mode == ClassMode::focal ? "focal" : "cross_entropy"; }

HeadSharing parse_head_sharing(const std::string& name) {
  if (name == "auto") return HeadSharing::automatic;
  if (name == "shared") return HeadSharing::shared;
  if (name == "independent") return HeadSharing::independent;
  throw ConfigError("unknown head sharing mode '" + name + "'");
}

std::string to_string(HeadSharing mode) {
  switch (mode) {
    case HeadSharing::automatic: return "auto";
    case HeadSharing::shared: return "shared";
    case HeadSharing::independent: return "independent";
  }
  return "auto";
}

void DeformAttnConfig::validate() const {
  if (levels == 0 || points == 0) throw ConfigError("deformable attention needs at least one level and point");
  MultiHeadConfig{width, heads, 0.0}.validate();
}

MSDeformAttn MSDeformAttn::init(const DeformAttnConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  MSDeformAttn a;
  a.cfg = cfg;
  a.offsets = Linear::zeros(cfg.width, cfg.slots() * 2);
  a.slot_logits = Linear::xavier(cfg.width, cfg.slots(), rng);
  a.value_proj = Linear::xavier(cfg.width, cfg.width, rng);
  a.output_proj = Linear::xavier(cfg.width, cfg.width, rng);
  return a;
}

MSDeformAttn::Result MSDeformAttn::operator()(const Tensor& query, const Tensor& refs,
                                              const std::vector<PatchMap>& maps) const {
  const auto M = cfg.heads, L = cfg.levels, K = cfg.points, hd = cfg.head_dim();
  if (maps.size() != L) {
    throw ConfigError("deformable attention built for " + std::to_string(L) + " levels, got " +
                      std::to_string(maps.size()) + " maps");
  }
  if (query.rank() != 2 || query.dim(1) != cfg.width) {
    throw DimensionError("deformable attention: query " + shape_str(query.shape()) + " is not at width " +
                         std::to_string(cfg.width));
  }
  const auto D = query.dim(0);
  check_refs(refs, D);

  auto offs = ops::reshape(offsets(query), {D, M, L, K, 2});
  auto weights = ops::softmax_lastdim(ops::reshape(slot_logits(query), {D, M, L * K}));
  auto ref_b = ops::reshape(refs, {D, 1, 1, 1, 2});

  // Per-level normalizer (w_l, h_l) turns pixel offsets into map fractions.
  std::vector<Real> inv(L * 2);
  std::vector<Tensor> values;
  for (std::size_t l = 0; l < L; ++l) {
    const auto& pm = maps[l];
    if (pm.channels() != cfg.width) {
      throw DimensionError("deformable attention: level " + std::to_string(l) + " has width " +
                           std::to_string(pm.channels()) + ", expected " + std::to_string(cfg.width));
    }
    inv[2 * l] = 1.0 / static_cast<Real>(pm.w);
    inv[2 * l + 1] = 1.0 / static_cast<Real>(pm.h);
    // [M x h x w x hd] so that each head's map is a contiguous slice.
    values.push_back(ops::permute(ops::reshape(value_proj(pm.tokens), {pm.h, pm.w, M, hd}), {2, 0, 1, 3}));
  }
  auto locations = ops::add(ref_b, ops::mul(offs, Tensor::from({1, 1, L, 1, 2}, inv)));

  std::vector<Tensor> head_out;
  head_out.reserve(M);
  for (std::size_t m = 0; m < M; ++m) {
    auto loc_m = ops::slice(locations, 1, m, 1);  // [D x 1 x L x K x 2]
    std::vector<Tensor> sampled;
    sampled.reserve(L);
    for (std::size_t l = 0; l < L; ++l) {
      const auto& pm = maps[l];
      auto map = ops::reshape(ops::slice(values[l], 0, m, 1), {pm.h, pm.w, hd});
      auto pts = ops::reshape(ops::slice(loc_m, 2, l, 1), {D * K, 2});
      sampled.push_back(ops::reshape(ops::bilinear_sample(map, pts), {D, K, hd}));
    }
    auto s = L == 1 ? sampled[0] : ops::concat(sampled, 1);  // [D x L*K x hd]
    auto a = ops::slice(weights, 1, m, 1);                    // [D x 1 x L*K]
    head_out.push_back(ops::reshape(ops::bmm(a, s), {D, hd}));
  }
  auto merged = M == 1 ? head_out[0] : ops::concat(head_out, 1);
  return {output_proj(merged), weights, locations};
}

void MSDeformAttn::collect(NamedTensors& out, const std::string& prefix) const {
  offsets.collect(out, prefix + ".offsets");
  slot_logits.collect(out, prefix + ".slot_logits");
  value_proj.collect(out, prefix + ".value_proj");
  output_proj.collect(out, prefix + ".output_proj");
}

DetectionHead DetectionHead::init(std::size_t width, std::size_t classes, ClassMode mode, std::mt19937_64& rng) {
  DetectionHead h;
  const auto outputs = mode == ClassMode::focal ? classes : classes + 1;
  h.classifier = Linear::xavier(width, outputs, rng);
  h.box1 = Linear::xavier(width, width, rng);
  h.box2 = Linear::xavier(width, width, rng);
  if (mode == ClassMode::focal) {
    // Prior probability 0.01 per class and boxes starting at the reference.
    const Real prior = -std::log((1.0 - 0.01) / 0.01);
    for (auto& b : h.classifier.b.mutable_data()) b = prior;
    h.box3 = Linear::zeros(width, 4);
  } else {
    h.box3 = Linear::xavier(width, 4, rng);
  }
  return h;
}

DetectionHead::Output DetectionHead::operator()(const Tensor& tokens, const Tensor& refs) const {
  auto raw = box3(ops::relu(box2(ops::relu(box1(tokens)))));
  if (refs.defined()) {
    auto anchor = ops::concat({ops::inverse_sigmoid(refs), Tensor::zeros({refs.dim(0), 2})}, 1);
    raw = ops::add(raw, anchor);
  }
  return {ops::sigmoid(raw), classifier(tokens)};
}

void DetectionHead::collect(NamedTensors& out, const std::string& prefix) const {
  classifier.collect(out, prefix + ".class");
  box1.collect(out, prefix + ".box1");
  box2.collect(out, prefix + ".box2");
  box3.collect(out, prefix + ".box3");
}

DecoderLayer DecoderLayer::init(const DeformAttnConfig& cfg, std::size_t hidden, std::mt19937_64& rng) {
  DecoderLayer l;
  l.heads = cfg.heads;
  l.self_attn = AttentionWeights::xavier(cfg.width, rng);
  l.norm_self = LayerNorm::identity(cfg.width);
  l.cross = MSDeformAttn::init(cfg, rng);
  l.norm_cross = LayerNorm::identity(cfg.width);
  l.ffn = FeedForward::xavier(cfg.width, hidden, Activation::relu, rng);
  l.norm_ffn = LayerNorm::identity(cfg.width);
  return l;
}

Tensor DecoderLayer::forward(const Tensor& tgt, const Tensor& query_pos, const Tensor& refs,
                             const std::vector<PatchMap>& maps, Real dropout, std::mt19937_64* rng) const {
  const MultiHeadConfig mh{tgt.dim(1), heads, 0.0};
  auto q = ops::add(tgt, query_pos);
  auto x = residual_norm(tgt, multi_head_attention(q, q, tgt, self_attn, mh).output, norm_self, dropout, rng);
  x = residual_norm(x, cross(ops::add(x, query_pos), refs, maps).output, norm_cross, dropout, rng);
  return residual_norm(x, ffn(x), norm_ffn, dropout, rng);
}

void DecoderLayer::collect(NamedTensors& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self_attn");
  norm_self.collect(out, prefix + ".norm_self");
  cross.collect(out, prefix + ".cross");
  norm_cross.collect(out, prefix + ".norm_cross");
  ffn.collect(out, prefix + ".ffn");
  norm_ffn.collect(out, prefix + ".norm_ffn");
}

void NeckConfig::validate() const {
  if (layers == 0) throw ConfigError("neck needs at least one decoder layer");
  if (ffn_hidden == 0) throw ConfigError("neck ffn_hidden must be positive");
  if (dropout < 0 || dropout >= 1) throw ConfigError("neck dropout must be in [0, 1)");
  DeformAttnConfig{width, heads, kStages, points}.validate();
}

Neck Neck::init(const NeckConfig& cfg, const BackboneConfig& backbone, std::size_t classes, ClassMode mode,
                std::mt19937_64& rng) {
  cfg.validate();
  if (classes == 0) throw ConfigError("detector needs at least one class");
  Neck n;
  n.cfg = cfg;
  for (std::size_t s = 0; s < kStages; ++s) {
    n.input_proj.push_back(Linear::xavier(backbone.channel_dim(s), cfg.width, rng));
    n.input_norm.push_back(LayerNorm::identity(cfg.width));
  }
  n.det_proj = Linear::xavier(backbone.channel_dim(kStages - 1), cfg.width, rng);
  n.query_pos = trunc_normal_parameter({backbone.det_tokens, cfg.width}, 1.0, rng);
  n.ref_point = Linear::xavier(cfg.width, 2, rng);
  const DeformAttnConfig dcfg{cfg.width, cfg.heads, kStages, cfg.points};
  for (std::size_t l = 0; l < cfg.layers; ++l) n.layers.push_back(DecoderLayer::init(dcfg, cfg.ffn_hidden, rng));
  const auto n_heads = cfg.independent_heads() ? cfg.layers : 1;
  for (std::size_t h = 0; h < n_heads; ++h) n.heads.push_back(DetectionHead::init(cfg.width, classes, mode, rng));
  return n;
}

Tensor refine_reference(const Tensor& refs, const Tensor& delta) {
  return ops::clamp(ops::sigmoid(ops::add(ops::inverse_sigmoid(refs), delta)), kRefEps, 1.0 - kRefEps);
}

NeckOutput Neck::forward(const BackboneOutput& body, std::mt19937_64* dropout_rng) const {
  if (body.maps.size() != input_proj.size()) {
    throw ConfigError("neck expects " + std::to_string(input_proj.size()) + " levels, backbone produced " +
                      std::to_string(body.maps.size()));
  }
  NeckOutput out;
  for (std::size_t l = 0; l < body.maps.size(); ++l) {
    auto pm = body.maps[l];
    pm.tokens = input_norm[l](input_proj[l](pm.tokens));
    out.memory.push_back(std::move(pm));
  }
  auto tgt = det_proj(body.det.tokens);
  auto refs = ops::sigmoid(ref_point(tgt));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    tgt = layers[i].forward(tgt, query_pos, refs, out.memory, cfg.dropout, dropout_rng);
    auto pred = head(i)(tgt, refs);
    out.layers.push_back({tgt, pred.boxes, pred.logits, refs});
    if (cfg.box_refinement) refs = ops::clamp(ops::detach(ops::slice(pred.boxes, 1, 0, 2)), kRefEps, 1.0 - kRefEps);
  }
  return out;
}

void Neck::collect(NamedTensors& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < input_proj.size(); ++l) {
    input_proj[l].collect(out, prefix + ".input_proj" + std::to_string(l));
    input_norm[l].collect(out, prefix + ".input_norm" + std::to_string(l));
  }
  det_proj.collect(out, prefix + ".det_proj");
  out.emplace_back(prefix + ".query_pos", query_pos);
  ref_point.collect(out, prefix + ".ref_point");
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(out, prefix + ".layer" + std::to_string(l));
  for (std::size_t h = 0; h < heads.size(); ++h) heads[h].collect(out, prefix + ".head" + std::to_string(h));
}

Neck layer_drop(const Neck& neck, std::size_t drop_n) {
  if (drop_n >= neck.layers.size()) {
    throw ConfigError("layer drop of " + std::to_string(drop_n) + " on a " + std::to_string(neck.layers.size()) +
                      "-layer neck");
  }
  Neck out = neck;
  const auto keep = neck.layers.size() - drop_n;
  out.cfg.layers = keep;
  out.layers.resize(keep);
  if (out.heads.size() > 1) out.heads.resize(keep);
  return out;
}

}  // namespace vidt
