#include "vidt/attention.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <tuple>

#include "vidt/error.hpp"

namespace vidt {

namespace {
constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();
}

void MultiHeadConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("attention: embed dim " + std::to_string(embed_dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (dropout_p < 0 || dropout_p >= 1) throw ConfigError("attention: dropout must be in [0, 1)");
}

AttentionWeights AttentionWeights::xavier(std::size_t dim, std::mt19937_64& rng) {
  AttentionWeights a;
  a.query = Linear::xavier(dim, dim, rng);
  a.key = Linear::xavier(dim, dim, rng);
  a.value = Linear::xavier(dim, dim, rng);
  a.out = Linear::xavier(dim, dim, rng);
  return a;
}

AttentionWeights AttentionWeights::normal(std::size_t dim, Real stddev, std::mt19937_64& rng) {
  AttentionWeights a;
  a.query = Linear::normal(dim, dim, stddev, rng);
  a.key = Linear::normal(dim, dim, stddev, rng);
  a.value = Linear::normal(dim, dim, stddev, rng);
  a.out = Linear::normal(dim, dim, stddev, rng);
  return a;
}

AttentionWeights AttentionWeights::zeros(std::size_t dim) {
  return {Linear::zeros(dim, dim), Linear::zeros(dim, dim), Linear::zeros(dim, dim), Linear::zeros(dim, dim)};
}

void AttentionWeights::collect(NamedTensors& out, const std::string& prefix) const {
  query.collect(out, prefix + ".q");
  key.collect(out, prefix + ".k");
  value.collect(out, prefix + ".v");
  this->out.collect(out, prefix + ".proj");
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const auto n = x.dim(0), d = x.dim(1);
  return ops::permute(ops::reshape(x, {n, heads, d / heads}), {1, 0, 2});
}

Tensor merge_heads(const Tensor& x) {
  const auto heads = x.dim(0), n = x.dim(1), hd = x.dim(2);
  return ops::reshape(ops::permute(x, {1, 0, 2}), {n, heads * hd});
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias) {
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(q.dim(2)));
  auto logits = ops::scale(ops::bmm(q, k, true), scale);
  if (bias.defined()) logits = ops::add(logits, bias);
  auto weights = ops::softmax_lastdim(logits);
  return {ops::bmm(weights, v), weights};
}

AttentionResult multi_head_attention(const Tensor& q_tokens, const Tensor& k_tokens, const Tensor& v_tokens,
                                     const AttentionWeights& w, const MultiHeadConfig& cfg) {
  cfg.validate();
  for (const auto* t : {&q_tokens, &k_tokens, &v_tokens}) {
    if (t->rank() != 2 || t->dim(1) != cfg.embed_dim) {
      throw DimensionError("multi_head_attention: tokens " + shape_str(t->shape()) + " do not have embed dim " +
                           std::to_string(cfg.embed_dim));
    }
  }
  if (k_tokens.dim(0) != v_tokens.dim(0)) throw DimensionError("multi_head_attention: key/value count mismatch");
  tally_pairs(static_cast<std::uint64_t>(q_tokens.dim(0)) * k_tokens.dim(0));
  auto q = split_heads(w.query(q_tokens), cfg.heads);
  auto k = split_heads(w.key(k_tokens), cfg.heads);
  auto v = split_heads(w.value(v_tokens), cfg.heads);
  auto r = scaled_dot_attention(q, k, v, Tensor());
  return {w.out(merge_heads(r.output)), r.weights};
}

Tensor streaming_attention(const Tensor& q_tokens, const Tensor& kv_tokens, const AttentionWeights& w,
                           const MultiHeadConfig& cfg, std::size_t block) {
  cfg.validate();
  NoGradGuard no_grad;
  using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;
  const auto nq = q_tokens.dim(0), nk = kv_tokens.dim(0), d = cfg.embed_dim, hd = cfg.head_dim();
  tally_pairs(static_cast<std::uint64_t>(nq) * nk);
  auto q = w.query(q_tokens);
  auto k = w.key(kv_tokens);
  auto v = w.value(kv_tokens);
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(hd));
  std::vector<Real> merged(nq * d, 0.0);
  MatR logits;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    // Aligned copies keep the summation order independent of buffer addresses.
    const MatR K = MapC(k.data().data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
    const MatR V = MapC(v.data().data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
    for (std::size_t start = 0; start < nq; start += block) {
      const auto rows = std::min(block, nq - start);
      const MatR Q = MapC(q.data().data() + start * d + h * hd, rows, hd, Eigen::OuterStride<>(d));
      tally_macs(2 * static_cast<std::uint64_t>(rows) * nk * hd);
      logits.noalias() = (Q * K.transpose()) * scale;
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        row = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      MatR out = logits * V;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < hd; ++c) merged[(start + r) * d + h * hd + c] = out(r, c);
      }
    }
  }
  return w.out(Tensor::from({nq, d}, std::move(merged)));
}

void WindowConfig::validate() const {
  if (window == 0) throw ConfigError("window size must be positive");
  if (shift != 0 && (window % 2 != 0 || shift != window / 2)) {
    throw ConfigError("window shift must be 0 or window/2, got " + std::to_string(shift) + " for window " +
                      std::to_string(window));
  }
}

namespace {

WindowPlan build_plan(std::size_t h, std::size_t w, std::size_t k, std::size_t s) {
  WindowPlan p;
  p.h = h;
  p.w = w;
  p.window = k;
  p.padded_h = (h + k - 1) / k * k;
  p.padded_w = (w + k - 1) / k * k;
  if (p.padded_h == k && p.padded_w == k) s = 0;
  p.shift = s;
  const auto ph = p.padded_h, pw = p.padded_w;
  const auto wr = ph / k, wc = pw / k;
  const auto n = k * k;
  p.num_windows = wr * wc;
  p.tokens_per_window = n;
  p.gather.assign(p.num_windows * n, -1);
  p.scatter.assign(h * w, -1);
  p.region.assign(p.num_windows * n, -1);

  auto band = [k, s](std::size_t pos, std::size_t extent) {
    if (s == 0) return 0;
    if (pos < extent - k) return 0;
    if (pos < extent - s) return 1;
    return 2;
  };
  for (std::size_t r = 0; r < ph; ++r) {
    for (std::size_t c = 0; c < pw; ++c) {
      const auto win = (r / k) * wc + (c / k);
      const auto row = win * n + (r % k) * k + (c % k);
      const auto sr = (r + s) % ph, sc = (c + s) % pw;
      if (sr < h && sc < w) {
        p.gather[row] = static_cast<std::int64_t>(sr * w + sc);
        p.scatter[sr * w + sc] = static_cast<std::int64_t>(row);
        p.region[row] = band(r, ph) * 3 + band(c, pw);
      }
    }
  }

  p.relative_index.resize(n * n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const auto dy = static_cast<std::int64_t>(a / k) - static_cast<std::int64_t>(b / k) + static_cast<std::int64_t>(k) - 1;
      const auto dx = static_cast<std::int64_t>(a % k) - static_cast<std::int64_t>(b % k) + static_cast<std::int64_t>(k) - 1;
      p.relative_index[a * n + b] = dy * static_cast<std::int64_t>(2 * k - 1) + dx;
    }
  }

  std::vector<Real> mask(p.num_windows * n * n, 0.0);
  for (std::size_t win = 0; win < p.num_windows; ++win) {
    std::uint64_t valid = 0;
    for (std::size_t a = 0; a < n; ++a) valid += p.gather[win * n + a] >= 0;
    p.valid_pairs += valid * valid;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        const auto qa = win * n + a, kb = win * n + b;
        const bool blocked = p.gather[kb] < 0 || (p.gather[qa] >= 0 && p.region[qa] != p.region[kb]);
        if (blocked) mask[(win * n + a) * n + b] = kNegInf;
      }
    }
  }
  p.mask = Tensor::from({p.num_windows, 1, n, n}, std::move(mask));
  return p;
}

}  // namespace

const WindowPlan& window_plan(std::size_t h, std::size_t w, const WindowConfig& cfg) {
  cfg.validate();
  if (h == 0 || w == 0) throw DimensionError("window partition of an empty map");
  thread_local std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>, std::unique_ptr<WindowPlan>>
      cache;
  auto key = std::make_tuple(h, w, cfg.window, cfg.shift);
  auto it = cache.find(key);
  if (it == cache.end()) {
    it = cache.emplace(key, std::make_unique<WindowPlan>(build_plan(h, w, cfg.window, cfg.shift))).first;
  }
  return *it->second;
}

Tensor relative_bias_table(std::size_t window, std::size_t heads, std::mt19937_64& rng) {
  return trunc_normal_parameter({(2 * window - 1) * (2 * window - 1), heads}, 0.02, rng);
}

AttentionResult windowed_self_attention(const Tensor& tokens, std::size_t h, std::size_t w, const WindowConfig& cfg,
                                        const AttentionWeights& weights, const Tensor& bias_table,
                                        const MultiHeadConfig& mh) {
  mh.validate();
  if (tokens.rank() != 2 || tokens.dim(0) != h * w || tokens.dim(1) != mh.embed_dim) {
    throw DimensionError("windowed attention: tokens " + shape_str(tokens.shape()) + " do not form a " +
                         std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(mh.embed_dim) + " map");
  }
  const auto& plan = window_plan(h, w, cfg);
  const auto k = plan.window;
  if (bias_table.rank() != 2 || bias_table.dim(0) != (2 * k - 1) * (2 * k - 1) || bias_table.dim(1) != mh.heads) {
    throw DimensionError("windowed attention: bias table " + shape_str(bias_table.shape()) + " does not fit window " +
                         std::to_string(k) + " with " + std::to_string(mh.heads) + " heads");
  }
  tally_pairs(plan.valid_pairs);
  const auto nw = plan.num_windows, n = plan.tokens_per_window, heads = mh.heads, hd = mh.head_dim();
  auto windows = [&](const Tensor& projected) {
    auto g = ops::reshape(ops::gather_rows(projected, plan.gather), {nw, n, heads, hd});
    return ops::reshape(ops::permute(g, {0, 2, 1, 3}), {nw * heads, n, hd});
  };
  auto q = windows(weights.query(tokens));
  auto kk = windows(weights.key(tokens));
  auto v = windows(weights.value(tokens));

  auto rel = ops::reshape(ops::transpose(ops::gather_rows(bias_table, plan.relative_index)), {heads, n, n});
  auto bias = ops::reshape(ops::add(rel, plan.mask), {nw * heads, n, n});
  auto r = scaled_dot_attention(q, kk, v, bias);

  auto merged = ops::permute(ops::reshape(r.output, {nw, heads, n, hd}), {0, 2, 1, 3});
  auto back = ops::gather_rows(ops::reshape(merged, {nw * n, heads * hd}), plan.scatter);
  return {weights.out(back), ops::reshape(r.weights, {nw, heads, n, n})};
}

SpatialEncoding parse_spatial_encoding(const std::string& name) {
  if (name == "none") return SpatialEncoding::none;
  if (name == "sin_pre") return SpatialEncoding::sin_pre;
  if (name == "learn_pre") return SpatialEncoding::learn_pre;
  if (name == "sin_post") return SpatialEncoding::sin_post;
  if (name == "learn_post") return SpatialEncoding::learn_post;
  throw ConfigError("unknown spatial encoding '" + name + "'");
}

std::string to_string(SpatialEncoding mode) {
  switch (mode) {
    case SpatialEncoding::none: return "none";
    case SpatialEncoding::sin_pre: return "sin_pre";
    case SpatialEncoding::learn_pre: return "learn_pre";
    case SpatialEncoding::sin_post: return "sin_post";
    case SpatialEncoding::learn_post: return "learn_post";
  }
  return "none";
}

Tensor sinusoidal_2d_encoding(std::size_t h, std::size_t w, std::size_t d, Real temperature) {
  if (d == 0 || d % 4 != 0) throw ConfigError("sinusoidal encoding needs d divisible by 4, got " + std::to_string(d));
  const auto half = d / 2;
  std::vector<Real> freq(half / 2);
  for (std::size_t i = 0; i < freq.size(); ++i) {
    freq[i] = 1.0 / std::pow(temperature, static_cast<Real>(2 * i) / static_cast<Real>(half));
  }
  std::vector<Real> out(h * w * d);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      Real* o = out.data() + (r * w + c) * d;
      for (std::size_t i = 0; i < freq.size(); ++i) {
        o[2 * i] = std::sin(static_cast<Real>(r) * freq[i]);
        o[2 * i + 1] = std::cos(static_cast<Real>(r) * freq[i]);
        o[half + 2 * i] = std::sin(static_cast<Real>(c) * freq[i]);
        o[half + 2 * i + 1] = std::cos(static_cast<Real>(c) * freq[i]);
      }
    }
  }
  return Tensor::from({h, w, d}, std::move(out));
}

Tensor residual_norm(const Tensor& x, const Tensor& delta, const LayerNorm& norm, Real dropout_p,
                     std::mt19937_64* rng) {
  auto d = delta;
  if (dropout_p > 0 && rng != nullptr) d = ops::dropout(d, dropout_p, *rng);
  return norm(ops::add(x, d));
}

TransformerBlock TransformerBlock::xavier(std::size_t dim, std::size_t heads, std::size_t hidden,
                                          std::mt19937_64& rng) {
  TransformerBlock b;
  b.cfg = {dim, heads, 0.0};
  b.cfg.validate();
  b.attention = AttentionWeights::xavier(dim, rng);
  b.norm1 = LayerNorm::identity(dim);
  b.ffn = FeedForward::xavier(dim, hidden, Activation::relu, rng);
  b.norm2 = LayerNorm::identity(dim);
  return b;
}

Tensor TransformerBlock::forward(const Tensor& x, std::mt19937_64* dropout_rng) const {
  auto a = multi_head_attention(x, x, x, attention, cfg).output;
  auto h = residual_norm(x, a, norm1, cfg.dropout_p, dropout_rng);
  return residual_norm(h, ffn(h), norm2, cfg.dropout_p, dropout_rng);
}

void TransformerBlock::collect(NamedTensors& out, const std::string& prefix) const {
  attention.collect(out, prefix + ".attn");
  norm1.collect(out, prefix + ".norm1");
  ffn.collect(out, prefix + ".ffn");
  norm2.collect(out, prefix + ".norm2");
}

}  // namespace vidt
