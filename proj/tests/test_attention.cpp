#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "vidt/attention.hpp"
#include "vidt/error.hpp"

using namespace vidt;
using vidt::testing::gradcheck;
using vidt::testing::random_tensor;
using vidt::testing::weighted_sum;
using namespace vidt::testing;

namespace {

AttentionWeights identity_weights(std::size_t d) {
  auto w = AttentionWeights::zeros(d);
  for (auto* l : {&w.query, &w.key, &w.value, &w.out}) {
    auto data = l->w.mutable_data();
    for (std::size_t i = 0; i < d; ++i) data[i * d + i] = 1.0;
  }
  return w;
}

// Swin-style oracle working in original token coordinates.
std::vector<Real> naive_windowed(const Tensor& tokens, std::size_t h, std::size_t w, std::size_t k, std::size_t s,
                                 const AttentionWeights& wts, const Tensor& table, std::size_t d, std::size_t heads) {
  const auto ph = (h + k - 1) / k * k, pw = (w + k - 1) / k * k;
  if (ph == k && pw == k) s = 0;
  auto band = [&](std::size_t pos, std::size_t extent) {
    if (s == 0) return 0;
    return pos < extent - k ? 0 : (pos < extent - s ? 1 : 2);
  };
  auto shifted = [&](std::size_t t) {
    const auto r = (t / w + ph - s) % ph, c = (t % w + pw - s) % pw;
    return std::make_pair(r, c);
  };
  auto allowed = [&](std::size_t i, std::size_t j) {
    auto [ri, ci] = shifted(i);
    auto [rj, cj] = shifted(j);
    return ri / k == rj / k && ci / k == cj / k && band(ri, ph) == band(rj, ph) && band(ci, pw) == band(cj, pw);
  };
  auto bias = [&](std::size_t i, std::size_t j, std::size_t head) {
    auto [ri, ci] = shifted(i);
    auto [rj, cj] = shifted(j);
    const auto dy = static_cast<long>(ri % k) - static_cast<long>(rj % k) + static_cast<long>(k) - 1;
    const auto dx = static_cast<long>(ci % k) - static_cast<long>(cj % k) + static_cast<long>(k) - 1;
    return table[(dy * static_cast<long>(2 * k - 1) + dx) * heads + head];
  };
  auto x = values(tokens);
  return naive_attention(x, h * w, x, h * w, wts, d, heads, allowed, bias);
}

}  // namespace

TEST_CASE("multi-head config requires heads to divide the embed dim") {
  CHECK_THROWS_AS((MultiHeadConfig{6, 4, 0.0}.validate()), ConfigError);
  CHECK_NOTHROW((MultiHeadConfig{8, 4, 0.0}.validate()));
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 6}, rng);
  CHECK_THROWS_AS(multi_head_attention(x, x, x, AttentionWeights::xavier(6, rng), {6, 4, 0.0}), ConfigError);
}

TEST_CASE("single key attention returns the value") {
  auto w = identity_weights(4);
  auto q = Tensor::from({1, 4}, {0.3, -1, 2, 0.5});
  auto kv = Tensor::from({1, 4}, {5, 6, 7, 8});
  auto r = multi_head_attention(q, kv, kv, w, {4, 1, 0.0});
  CHECK(values(r.output) == std::vector<Real>{5, 6, 7, 8});
  CHECK(r.weights.item() == 1.0);
}

TEST_CASE("identical keys share attention evenly") {
  std::mt19937_64 rng(2);
  auto w = AttentionWeights::xavier(4, rng);
  auto q = random_tensor({1, 4}, rng);
  auto key = Tensor::from({2, 4}, {1, 2, 3, 4, 1, 2, 3, 4});
  auto r = multi_head_attention(q, key, key, w, {4, 2, 0.0});
  for (Real v : r.weights.data()) CHECK(std::abs(v - 0.5) < 1e-15);
}

TEST_CASE("global attention matches the naive loop oracle") {
  std::mt19937_64 rng(3);
  for (std::size_t heads : {1, 2, 4}) {
    auto w = AttentionWeights::xavier(8, rng);
    auto q = random_tensor({4, 8}, rng, -2, 2);
    auto kv = random_tensor({5, 8}, rng, -2, 2);
    auto r = multi_head_attention(q, kv, kv, w, {8, heads, 0.0});
    auto expect = naive_attention(
        values(q), 4, values(kv), 5, w, 8, heads, [](auto, auto) { return true; },
        [](auto, auto, auto) { return 0.0; });
    CHECK(max_abs_diff(values(r.output), expect) < 1e-6);
  }
}

TEST_CASE("attention rows sum to one and global attention is permutation equivariant") {
  std::mt19937_64 rng(4);
  auto w = AttentionWeights::xavier(8, rng);
  auto q = random_tensor({3, 8}, rng, -2, 2);
  auto kv = random_tensor({6, 8}, rng, -2, 2);
  auto r = multi_head_attention(q, kv, kv, w, {8, 2, 0.0});
  for (std::size_t row = 0; row < 2 * 3; ++row) {
    Real total = 0;
    for (std::size_t j = 0; j < 6; ++j) total += r.weights[row * 6 + j];
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  // Shuffling keys and values together leaves every query output unchanged.
  std::vector<std::int64_t> perm = {4, 2, 5, 0, 3, 1};
  auto shuffled = ops::gather_rows(kv, perm);
  auto r2 = multi_head_attention(q, shuffled, shuffled, w, {8, 2, 0.0});
  CHECK(max_abs_diff(values(r.output), values(r2.output)) < 1e-12);
  // Shuffling queries permutes the outputs the same way.
  std::vector<std::int64_t> qperm = {2, 0, 1};
  auto r3 = multi_head_attention(ops::gather_rows(q, qperm), kv, kv, w, {8, 2, 0.0});
  CHECK(max_abs_diff(values(ops::gather_rows(r.output, qperm)), values(r3.output)) < 1e-12);
}

TEST_CASE("streaming attention matches the taped kernel") {
  std::mt19937_64 rng(5);
  auto w = AttentionWeights::xavier(8, rng);
  auto q = random_tensor({37, 8}, rng);
  auto kv = random_tensor({41, 8}, rng);
  auto ref = multi_head_attention(q, kv, kv, w, {8, 2, 0.0}).output;
  auto streamed = streaming_attention(q, kv, w, {8, 2, 0.0}, 8);
  CHECK(max_abs_diff(values(ref), values(streamed)) < 1e-12);
}

TEST_CASE("window plan partitions an 8x8 map into four windows") {
  const auto& plan = window_plan(8, 8, {4, 0});
  CHECK(plan.num_windows == 4);
  CHECK(plan.tokens_per_window == 16);
  CHECK(plan.valid_pairs == 64 * 16);
  for (std::size_t t = 0; t < 64; ++t) {
    const auto row = static_cast<std::size_t>(plan.scatter[t]);
    CHECK(plan.gather[row] == static_cast<std::int64_t>(t));
    // Window membership follows the 4x4 block of the token.
    CHECK(row / 16 == (t / 8 / 4) * 2 + (t % 8) / 4);
  }
  const auto& padded = window_plan(6, 6, {4, 0});
  CHECK(padded.padded_h == 8);
  CHECK(padded.valid_pairs == 16 * 16 + 8 * 8 + 8 * 8 + 4 * 4);
  CHECK_THROWS_AS(window_plan(8, 8, {4, 1}), ConfigError);
  CHECK_THROWS_AS(window_plan(8, 8, {0, 0}), ConfigError);
}

TEST_CASE("unshifted windows never mix tokens across windows") {
  std::mt19937_64 rng(6);
  const std::size_t d = 8, heads = 2;
  auto w = AttentionWeights::xavier(d, rng);
  auto table = relative_bias_table(4, heads, rng);
  auto x = random_tensor({64, d}, rng);
  auto r = windowed_self_attention(x, 8, 8, {4, 0}, w, table, {d, heads, 0.0});
  // Perturb every token of window 0; tokens in other windows must not move.
  std::vector<Real> bumped = values(x);
  for (std::size_t t = 0; t < 64; ++t) {
    if ((t / 8) < 4 && (t % 8) < 4) {
      for (std::size_t c = 0; c < d; ++c) bumped[t * d + c] += 0.7;
    }
  }
  auto r2 = windowed_self_attention(Tensor::from({64, d}, bumped), 8, 8, {4, 0}, w, table, {d, heads, 0.0});
  for (std::size_t t = 0; t < 64; ++t) {
    if ((t / 8) < 4 && (t % 8) < 4) continue;
    for (std::size_t c = 0; c < d; ++c) CHECK(r.output[t * d + c] == r2.output[t * d + c]);
  }
}

TEST_CASE("windowed attention matches the naive masked oracle") {
  std::mt19937_64 rng(7);
  const std::size_t d = 8, heads = 2;
  struct Case {
    std::size_t h, w, k, s;
  };
  for (auto c : {Case{8, 8, 4, 0}, Case{8, 8, 4, 2}, Case{6, 6, 4, 0}, Case{6, 10, 4, 2}, Case{2, 2, 4, 2},
                 Case{5, 7, 2, 1}}) {
    auto w = AttentionWeights::xavier(d, rng);
    auto table = relative_bias_table(c.k, heads, rng);
    // A large bias scale makes mistakes in the bias lookup visible.
    auto tdata = table.mutable_data();
    for (auto& v : tdata) v *= 40.0;
    auto x = random_tensor({c.h * c.w, d}, rng, -1.5, 1.5);
    auto r = windowed_self_attention(x, c.h, c.w, {c.k, c.s}, w, table, {d, heads, 0.0});
    auto expect = naive_windowed(x, c.h, c.w, c.k, c.s, w, table, d, heads);
    INFO("h=" << c.h << " w=" << c.w << " k=" << c.k << " s=" << c.s);
    CHECK(max_abs_diff(values(r.output), expect) < 1e-6);
  }
  // A uniform map too.
  auto w = AttentionWeights::xavier(d, rng);
  auto table = relative_bias_table(4, heads, rng);
  auto uniform = Tensor::full({64, d}, 0.3);
  auto r = windowed_self_attention(uniform, 8, 8, {4, 0}, w, table, {d, heads, 0.0});
  CHECK(max_abs_diff(values(r.output), naive_windowed(uniform, 8, 8, 4, 0, w, table, d, heads)) < 1e-6);
}

TEST_CASE("shifted windows put zero weight across the cyclic seam") {
  std::mt19937_64 rng(8);
  const std::size_t d = 8, heads = 2;
  auto w = AttentionWeights::xavier(d, rng);
  auto table = relative_bias_table(4, heads, rng);
  auto x = random_tensor({64, d}, rng);
  auto r = windowed_self_attention(x, 8, 8, {4, 2}, w, table, {d, heads, 0.0});
  const auto& plan = window_plan(8, 8, {4, 2});
  const auto n = plan.tokens_per_window;
  std::size_t seam_pairs = 0;
  for (std::size_t win = 0; win < plan.num_windows; ++win) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t a = 0; a < n; ++a) {
        Real total = 0;
        for (std::size_t b = 0; b < n; ++b) {
          const Real wt = r.weights[((win * heads + h) * n + a) * n + b];
          total += wt;
          if (plan.region[win * n + a] != plan.region[win * n + b]) {
            ++seam_pairs;
            CHECK(wt == 0.0);
          }
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
      }
    }
  }
  CHECK(seam_pairs > 0);
}

TEST_CASE("relative position bias depends only on the offset") {
  const auto& plan = window_plan(8, 8, {4, 0});
  const std::size_t k = 4, n = 16;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      // Translating both positions by one column keeps the index.
      if (a % k + 1 < k && b % k + 1 < k) {
        CHECK(plan.relative_index[a * n + b] == plan.relative_index[(a + 1) * n + (b + 1)]);
      }
      const auto idx = plan.relative_index[a * n + b];
      CHECK(idx >= 0);
      CHECK(idx < static_cast<std::int64_t>((2 * k - 1) * (2 * k - 1)));
    }
  }
  // Every window sees the same bias for the same in-window positions: a map
  // whose windows hold identical content gives identical window outputs.
  std::mt19937_64 rng(9);
  const std::size_t d = 8;
  auto w = AttentionWeights::xavier(d, rng);
  auto table = relative_bias_table(4, 2, rng);
  auto tile = random_tensor({16, d}, rng);
  std::vector<Real> tiled(64 * d);
  for (std::size_t t = 0; t < 64; ++t) {
    const auto local = (t / 8 % 4) * 4 + t % 4;
    for (std::size_t c = 0; c < d; ++c) tiled[t * d + c] = tile[local * d + c];
  }
  auto r = windowed_self_attention(Tensor::from({64, d}, tiled), 8, 8, {4, 0}, w, table, {d, 2, 0.0});
  for (std::size_t t = 0; t < 64; ++t) {
    const auto twin = (t / 8 % 4) * 8 + t % 4;
    for (std::size_t c = 0; c < d; ++c) CHECK(std::abs(r.output[t * d + c] - r.output[twin * d + c]) < 1e-12);
  }
}

TEST_CASE("windowed attention gradient matches finite differences") {
  std::mt19937_64 rng(10);
  const std::size_t d = 4, heads = 2;
  auto w = AttentionWeights::xavier(d, rng);
  auto table = relative_bias_table(2, heads, rng);
  auto x = random_tensor({3 * 5, d}, rng);
  auto err = gradcheck(
      [&](const auto& in) {
        AttentionWeights ww = w;
        ww.query.w = in[1];
        ww.value.w = in[2];
        return weighted_sum(windowed_self_attention(in[0], 3, 5, {2, 1}, ww, in[3], {d, heads, 0.0}).output);
      },
      {x, w.query.w, w.value.w, table});
  CHECK(err < 1e-4);
}

TEST_CASE("sinusoidal encoding") {
  auto e = sinusoidal_2d_encoding(16, 16, 32);
  CHECK(e.shape() == Shape{16, 16, 32});
  for (std::size_t c = 0; c < 32; ++c) CHECK(e[c] == (c % 2 == 0 ? 0.0 : 1.0));
  for (std::size_t p = 0; p < 256; ++p) {
    Real norm2 = 0;
    for (std::size_t c = 0; c < 32; ++c) norm2 += e[p * 32 + c] * e[p * 32 + c];
    CHECK(std::abs(norm2 - 16.0) < 1e-12);
  }
  Real closest = 1e9;
  for (std::size_t a = 0; a < 256; ++a) {
    for (std::size_t b = a + 1; b < 256; ++b) {
      Real dist = 0;
      for (std::size_t c = 0; c < 32; ++c) dist = std::max(dist, std::abs(e[a * 32 + c] - e[b * 32 + c]));
      closest = std::min(closest, dist);
    }
  }
  CHECK(closest > 1e-6);
  // Rows vary in the first half only.
  CHECK(e.at({1, 0, 0}) == doctest::Approx(std::sin(1.0)));
  CHECK(e.at({0, 1, 16}) == doctest::Approx(std::sin(1.0)));
  CHECK(e.at({0, 1, 0}) == 0.0);
  CHECK_THROWS_AS(sinusoidal_2d_encoding(4, 4, 6), ConfigError);
  CHECK(values(sinusoidal_2d_encoding(5, 3, 8)) == values(sinusoidal_2d_encoding(5, 3, 8)));
}

TEST_CASE("transformer block with zero weights reduces to the normalized input") {
  std::mt19937_64 rng(11);
  auto block = TransformerBlock::xavier(8, 2, 16, rng);
  block.attention = AttentionWeights::zeros(8);
  block.ffn.fc1 = Linear::zeros(8, 16);
  block.ffn.fc2 = Linear::zeros(16, 8);
  auto x = random_tensor({5, 8}, rng, -3, 3);
  auto y = block.forward(x);
  CHECK(y.shape() == x.shape());
  auto ln = LayerNorm::identity(8)(x);
  CHECK(max_abs_diff(values(y), values(ln)) < 1e-4);
}

TEST_CASE("transformer block gradient matches finite differences") {
  std::mt19937_64 rng(12);
  auto block = TransformerBlock::xavier(4, 2, 6, rng);
  auto x = random_tensor({3, 4}, rng);
  auto err = gradcheck(
      [&](const auto& in) {
        auto b = block;
        b.attention.key.w = in[1];
        b.ffn.fc1.w = in[2];
        b.norm1.gamma = in[3];
        return weighted_sum(b.forward(in[0]));
      },
      {x, block.attention.key.w, block.ffn.fc1.w, block.norm1.gamma});
  CHECK(err < 1e-4);
  CHECK(block.forward(x).shape() == Shape{3, 4});
}
