#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vidt {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Storage is 64-byte aligned so that vectorized kernels see the same
// alignment, and therefore the same summation order, on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<Real, AlignedAllocator<Real>>;

namespace detail {
struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major array. Copies are shallow: two Tensor handles may refer to
// the same node, and node identity is what the tape tracks. Values produced by
// ops are never modified afterwards; only leaves (parameters) are updated in
// place by the optimizer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Real value);
  static Tensor from(Shape shape, Buffer data);
  static Tensor from(Shape shape, const std::vector<Real>& data);
  static Tensor from(Shape shape, std::initializer_list<Real> data);
  static Tensor scalar(Real value);
  // Leaf that participates in gradient computation.
  static Tensor parameter(Shape shape, Buffer data);
  static Tensor parameter(Shape shape, const std::vector<Real>& data);
  static Tensor parameter(Shape shape, std::initializer_list<Real> data);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const Real> data() const { return node_->data; }
  std::span<Real> mutable_data() { return node_->data; }
  Real item() const;
  Real operator[](std::size_t flat) const { return node_->data[flat]; }
  Real at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> grad_buffer() const;  // allocates zeros on first use
  void zero_grad();

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }
  const detail::Node* node() const noexcept { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(const char*, Shape, Buffer, std::vector<Tensor>,
                            std::function<void(const Tensor&)>);
};

// Ordered record of primitive applications on one thread. Records are appended
// in execution order, so inputs of record i always come from records < i or
// from leaves; backward walks the records once in reverse.
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(const Tensor&)> backward;
  };

  static Tape& active();

  void push(Record record) { records_.push_back(std::move(record)); }
  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<Record>& records() const noexcept { return records_; }
  void clear() { records_.clear(); }

  // Gradients accumulate; callers reset leaves with zero_grad between steps.
  void backward(const Tensor& loss);

  // Name and index of the first record whose output holds a NaN or infinity.
  std::optional<std::string> first_non_finite() const;

 private:
  std::vector<Record> records_;
};

void backward(const Tensor& loss);
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op output and, when recording and any input needs gradients,
// appends the backward closure to the active tape.
Tensor make_result(const char* op, Shape shape, Buffer data, std::vector<Tensor> inputs,
                   std::function<void(const Tensor&)> backward);

// Work tallies reported by kernels while a CostTally is installed on the
// current thread. Pairs count (query, key) interactions, MACs count
// multiply-accumulates.
struct CostTally {
  std::uint64_t macs = 0;
  std::uint64_t pairs = 0;
};

CostTally* active_tally() noexcept;

class ScopedTally {
 public:
  explicit ScopedTally(CostTally& tally);
  ~ScopedTally();
  ScopedTally(const ScopedTally&) = delete;
  ScopedTally& operator=(const ScopedTally&) = delete;

 private:
  CostTally* previous_;
};

inline void tally_macs(std::uint64_t n) {
  if (auto* t = active_tally()) t->macs += n;
}
inline void tally_pairs(std::uint64_t n) {
  if (auto* t = active_tally()) t->pairs += n;
}

}  // namespace vidt
