#include "vidt/layers.hpp"

#include <cmath>

namespace vidt {

Tensor trunc_normal_parameter(Shape shape, Real stddev, std::mt19937_64& rng) {
  std::normal_distribution<Real> dist(0.0, stddev);
  std::vector<Real> data(shape_numel(shape));
  for (auto& v : data) {
    do {
      v = dist(rng);
    } while (std::abs(v) > 2.0 * stddev);
  }
  return Tensor::parameter(std::move(shape), std::move(data));
}

Tensor uniform_parameter(Shape shape, Real bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<Real> dist(-bound, bound);
  std::vector<Real> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(data));
}

Linear Linear::xavier(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias) {
  const Real bound = std::sqrt(6.0 / static_cast<Real>(in + out));
  Linear l;
  l.w = uniform_parameter({in, out}, bound, rng);
  if (bias) l.b = Tensor::parameter({out}, std::vector<Real>(out, 0.0));
  return l;
}

Linear Linear::normal(std::size_t in, std::size_t out, Real stddev, std::mt19937_64& rng, bool bias) {
  Linear l;
  l.w = trunc_normal_parameter({in, out}, stddev, rng);
  if (bias) l.b = Tensor::parameter({out}, std::vector<Real>(out, 0.0));
  return l;
}

Linear Linear::zeros(std::size_t in, std::size_t out, bool bias) {
  Linear l;
  l.w = Tensor::parameter({in, out}, std::vector<Real>(in * out, 0.0));
  if (bias) l.b = Tensor::parameter({out}, std::vector<Real>(out, 0.0));
  return l;
}

void Linear::collect(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", w);
  if (b.defined()) out.emplace_back(prefix + ".bias", b);
}

LayerNorm LayerNorm::identity(std::size_t dim) {
  return {Tensor::parameter({dim}, std::vector<Real>(dim, 1.0)),
          Tensor::parameter({dim}, std::vector<Real>(dim, 0.0))};
}

void LayerNorm::collect(NamedTensors& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

FeedForward FeedForward::xavier(std::size_t dim, std::size_t hidden, Activation act, std::mt19937_64& rng) {
  return {Linear::xavier(dim, hidden, rng), Linear::xavier(hidden, dim, rng), act};
}

Tensor FeedForward::operator()(const Tensor& x) const {
  auto h = fc1(x);
  h = activation == Activation::gelu ? ops::gelu(h) : ops::relu(h);
  return fc2(h);
}

void FeedForward::collect(NamedTensors& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

std::size_t parameter_count(const NamedTensors& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

void zero_grads(const NamedTensors& params) {
  for (const auto& [name, t] : params) {
    Tensor copy = t;
    copy.zero_grad();
  }
}

}  // namespace vidt
