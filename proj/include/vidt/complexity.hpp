#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vidt/model.hpp"

namespace vidt {

// Symbolic attention cost for P patch tokens, D DET tokens, width d and
// window side k (k = 0 for global attention). `terms` hold d-weighted costs
// and sum to total(); `pair_terms` hold the (query, key) interaction counts
// behind the attention terms.
struct CostModel {
  std::uint64_t P = 0, D = 0, d = 0, k = 0;
  std::vector<std::pair<std::string, std::uint64_t>> terms;
  std::vector<std::pair<std::string, std::uint64_t>> pair_terms;

  std::uint64_t total() const;
  std::uint64_t pairs() const;
  std::uint64_t term(const std::string& name) const;  // 0 when absent
};

// Global attention over [PATCH; DET]: projections d^2 (P + D), attention
// d (P + D)^2 split into PATCH x PATCH, DET x DET and the two cross blocks.
// Without `cross` the PATCH/DET cross blocks are left out.
CostModel yolos_cost(std::uint64_t P, std::uint64_t D, std::uint64_t d, bool cross = true);

// Reconfigured attention: projections d^2 (D + P), local PATCH x PATCH
// d k^2 P, DET x DET d D^2, DET -> PATCH cross d D P. Requires k^2 <= P.
CostModel ram_cost(std::uint64_t P, std::uint64_t D, std::uint64_t d, std::uint64_t k);

// Scoped measurement of the work kernels report on the calling thread. A
// measurement may only start on a freshly reset counter.
class OpCounter {
 public:
  OpCounter() = default;
  OpCounter(const OpCounter&) = delete;
  OpCounter& operator=(const OpCounter&) = delete;

  void start();  // ContractError when running or not reset
  CostTally stop();
  void reset();
  bool running() const { return scope_.has_value(); }
  const CostTally& tally() const { return tally_; }

 private:
  CostTally tally_;
  std::optional<ScopedTally> scope_;
  bool dirty_ = false;
};

enum class AttentionVariant { ram, global, global_no_cross };

AttentionVariant parse_attention_variant(const std::string& name);
std::string to_string(AttentionVariant v);

struct FragmentSize {
  std::size_t side = 16;  // the PATCH map is side x side, P = side^2
  std::size_t D = 16;
  std::size_t d = 8;
  std::size_t k = 4;      // ignored by the global variants
};

struct Measurement {
  AttentionVariant variant = AttentionVariant::ram;
  std::uint64_t P = 0, D = 0, d = 0, k = 0;
  std::uint64_t pairs = 0;
  std::uint64_t macs = 0;
  std::uint64_t analytic_pairs = 0;
};

// Runs one attention block of the given variant on random tokens (seeded)
// under an OpCounter. The ram variant executes windowed PATCH attention plus
// bound DET attention; global runs joint attention over [PATCH; DET];
// global_no_cross runs PATCH and DET self-attention separately. Sequences
// longer than `stream_above` tokens use the streaming kernel.
Measurement measure_fragment(AttentionVariant variant, const FragmentSize& size, OpCounter& counter,
                             std::uint64_t seed = 0, std::size_t stream_above = 2048);

std::vector<Measurement> measure_empirical(AttentionVariant variant, const std::vector<FragmentSize>& sizes,
                                           std::uint64_t seed = 0);

// Least-squares slope of log(y) against log(x).
Real loglog_slope(const std::vector<Real>& x, const std::vector<Real>& y);

// Work of one no-grad forward pass of `model` on `image`.
CostTally measure_forward(const Detector& model, const Tensor& image);

// CSV: P,D,d,k,variant,pairs,macs,analytic_pairs per row, then one
// "slope,<variant>,<value>" summary row per variant present.
std::string bench_csv(const std::vector<Measurement>& rows);

}  // namespace vidt
