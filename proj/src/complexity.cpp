#include "vidt/complexity.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "vidt/error.hpp"

namespace vidt {

std::uint64_t CostModel::total() const {
  std::uint64_t t = 0;
  for (const auto& [name, v] : terms) t += v;
  return t;
}

std::uint64_t CostModel::pairs() const {
  std::uint64_t t = 0;
  for (const auto& [name, v] : pair_terms) t += v;
  return t;
}

std::uint64_t CostModel::term(const std::string& name) const {
  for (const auto& [n, v] : terms) {
    if (n == name) return v;
  }
  return 0;
}

CostModel yolos_cost(std::uint64_t P, std::uint64_t D, std::uint64_t d, bool cross) {
  CostModel m{P, D, d, 0, {}, {}};
  m.pair_terms = {{"patch_patch", P * P}, {"det_det", D * D}};
  if (cross) {
    m.pair_terms.emplace_back("patch_det", P * D);
    m.pair_terms.emplace_back("det_patch", D * P);
  }
  m.terms.emplace_back("projection", d * d * (P + D));
  for (const auto& [name, pairs] : m.pair_terms) m.terms.emplace_back(name, d * pairs);
  return m;
}

CostModel ram_cost(std::uint64_t P, std::uint64_t D, std::uint64_t d, std::uint64_t k) {
  if (k == 0 || k * k > P) {
    throw ConfigError("ram_cost: window side " + std::to_string(k) + " needs 0 < k^2 <= P = " + std::to_string(P));
  }
  CostModel m{P, D, d, k, {}, {}};
  m.pair_terms = {{"local_patch", k * k * P}, {"det_det", D * D}, {"det_patch", D * P}};
  m.terms.emplace_back("projection", d * d * (D + P));
  for (const auto& [name, pairs] : m.pair_terms) m.terms.emplace_back(name, d * pairs);
  return m;
}

void OpCounter::start() {
  if (scope_) throw ContractError("op counter: measurement already running");
  if (dirty_) throw ContractError("op counter: previous measurement was not reset");
  scope_.emplace(tally_);
}

CostTally OpCounter::stop() {
  if (!scope_) throw ContractError("op counter: stop() without start()");
  scope_.reset();
  dirty_ = true;
  return tally_;
}

void OpCounter::reset() {
  if (scope_) throw ContractError("op counter: reset() while a measurement is running");
  tally_ = {};
  dirty_ = false;
}

AttentionVariant parse_attention_variant(const std::string& name) {
  if (name == "ram") return AttentionVariant::ram;
  if (name == "global") return AttentionVariant::global;
  if (name == "global_no_cross") return AttentionVariant::global_no_cross;
  throw ConfigError("unknown attention variant '" + name + "' (ram, global, global_no_cross)");
}

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::ram: return "ram";
    case AttentionVariant::global: return "global";
    case AttentionVariant::global_no_cross: return "global_no_cross";
  }
  return "?";
}

namespace {

Tensor random_tokens(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<Real> dist(0.0, 1.0);
  Buffer data(n * d);
  for (auto& v : data) v = dist(rng);
  return Tensor::from({n, d}, std::move(data));
}

void self_attention(const Tensor& tokens, const AttentionWeights& w, const MultiHeadConfig& mh,
                    std::size_t stream_above) {
  if (tokens.dim(0) > stream_above) {
    streaming_attention(tokens, tokens, w, mh);
  } else {
    multi_head_attention(tokens, tokens, tokens, w, mh);
  }
}

}  // namespace

Measurement measure_fragment(AttentionVariant variant, const FragmentSize& size, OpCounter& counter,
                             std::uint64_t seed, std::size_t stream_above) {
  const std::size_t P = size.side * size.side;
  if (P == 0 || size.d == 0) throw ConfigError("measure_fragment: empty patch map or zero width");
  Measurement m;
  m.variant = variant;
  m.P = P;
  m.D = size.D;
  m.d = size.d;
  m.k = variant == AttentionVariant::ram ? size.k : 0;

  std::mt19937_64 rng(seed);
  const MultiHeadConfig mh{size.d, 1, 0.0};
  auto weights = AttentionWeights::xavier(size.d, rng);
  auto patches = random_tokens(P, size.d, rng);
  auto det = random_tokens(size.D, size.d, rng);
  Tensor bias;
  if (variant == AttentionVariant::ram) {
    if (size.k == 0 || size.side % size.k != 0) {
      throw ConfigError("measure_fragment: the analytic model assumes whole windows, side " +
                        std::to_string(size.side) + " is not a multiple of k = " + std::to_string(size.k));
    }
    bias = relative_bias_table(size.k, 1, rng);
  }

  NoGradGuard no_grad;
  counter.reset();
  counter.start();
  switch (variant) {
    case AttentionVariant::ram:
      windowed_self_attention(patches, size.side, size.side, WindowConfig{size.k, 0}, weights, bias, mh);
      if (size.D > 0) bound_det_attention(det, det, patches, patches, Tensor(), weights, 1, true, true);
      m.analytic_pairs = ram_cost(P, size.D, size.d, size.k).pairs();
      break;
    case AttentionVariant::global:
      self_attention(size.D > 0 ? ops::concat({patches, det}, 0) : patches, weights, mh, stream_above);
      m.analytic_pairs = yolos_cost(P, size.D, size.d).pairs();
      break;
    case AttentionVariant::global_no_cross:
      self_attention(patches, weights, mh, stream_above);
      if (size.D > 0) self_attention(det, weights, mh, stream_above);
      m.analytic_pairs = yolos_cost(P, size.D, size.d, false).pairs();
      break;
  }
  const auto tally = counter.stop();
  m.pairs = tally.pairs;
  m.macs = tally.macs;
  return m;
}

std::vector<Measurement> measure_empirical(AttentionVariant variant, const std::vector<FragmentSize>& sizes,
                                           std::uint64_t seed) {
  OpCounter counter;
  std::vector<Measurement> out;
  for (const auto& s : sizes) {
    out.push_back(measure_fragment(variant, s, counter, seed));
    counter.reset();
  }
  return out;
}

Real loglog_slope(const std::vector<Real>& x, const std::vector<Real>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need two or more paired points");
  Real mx = 0, my = 0;
  const auto n = static_cast<Real>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0 || y[i] <= 0) throw ContractError("loglog_slope: values must be positive");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  Real sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ContractError("loglog_slope: x values are all equal");
  return sxy / sxx;
}

CostTally measure_forward(const Detector& model, const Tensor& image) {
  NoGradGuard no_grad;
  OpCounter counter;
  counter.start();
  model.forward(image);
  return counter.stop();
}

std::string bench_csv(const std::vector<Measurement>& rows) {
  std::ostringstream out;
  out << "P,D,d,k,variant,pairs,macs,analytic_pairs\n";
  std::map<std::string, std::pair<std::vector<Real>, std::vector<Real>>> series;
  for (const auto& m : rows) {
    out << m.P << ',' << m.D << ',' << m.d << ',' << m.k << ',' << to_string(m.variant) << ',' << m.pairs << ','
        << m.macs << ',' << m.analytic_pairs << '\n';
    auto& s = series[to_string(m.variant)];
    s.first.push_back(static_cast<Real>(m.P));
    s.second.push_back(static_cast<Real>(m.pairs));
  }
  for (const auto& [name, s] : series) {
    if (s.first.size() < 2) continue;
    out << "slope," << name << ',' << loglog_slope(s.first, s.second) << '\n';
  }
  return out.str();
}

}  // namespace vidt
