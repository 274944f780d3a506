#include "vidt/tensor.hpp"

#include <cmath>
#include <sstream>

#include "vidt/error.hpp"

namespace vidt {

namespace {
thread_local bool g_grad_enabled = true;
thread_local CostTally* g_tally = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, Real value) {
  auto n = shape_numel(shape);
  return from(std::move(shape), Buffer(n, value));
}

Tensor Tensor::from(Shape shape, const std::vector<Real>& data) {
  return from(std::move(shape), Buffer(data.begin(), data.end()));
}

Tensor Tensor::from(Shape shape, std::initializer_list<Real> data) { return from(std::move(shape), Buffer(data)); }

Tensor Tensor::from(Shape shape, Buffer data) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value) { return from({1}, Buffer{value}); }

Tensor Tensor::parameter(Shape shape, const std::vector<Real>& data) {
  return parameter(std::move(shape), Buffer(data.begin(), data.end()));
}

Tensor Tensor::parameter(Shape shape, std::initializer_list<Real> data) {
  return parameter(std::move(shape), Buffer(data));
}

Tensor Tensor::parameter(Shape shape, Buffer data) {
  auto t = from(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw DimensionError("axis " + std::to_string(i) + " out of range for " + shape_str(s));
  return s[i];
}

Real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

Real Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

std::span<Real> Tensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not depend on any parameter");
  }
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward(it->output);
  }
}

std::optional<std::string> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    for (Real v : records_[i].output.data()) {
      if (!std::isfinite(v)) {
        return std::string(records_[i].op) + " (record " + std::to_string(i) + ", output " +
               shape_str(records_[i].output.shape()) + ")";
      }
    }
  }
  return std::nullopt;
}

void backward(const Tensor& loss) { Tape::active().backward(loss); }

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(const char* op, Shape shape, Buffer data, std::vector<Tensor> inputs,
                   std::function<void(const Tensor&)> backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  Tape::active().push({op, std::move(inputs), out, std::move(backward)});
  return out;
}

CostTally* active_tally() noexcept { return g_tally; }

ScopedTally::ScopedTally(CostTally& tally) : previous_(g_tally) { g_tally = &tally; }
ScopedTally::~ScopedTally() { g_tally = previous_; }

}  // namespace vidt
