#pragma once

#include <random>
#include <string>

#include "vidt/container.hpp"
#include "vidt/ops.hpp"

namespace vidt {

// Affine map x . w + b with w stored [in x out].
struct Linear {
  Tensor w;
  Tensor b;  // undefined for bias-free layers

  static Linear xavier(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true);
  static Linear normal(std::size_t in, std::size_t out, Real stddev, std::mt19937_64& rng, bool bias = true);
  static Linear zeros(std::size_t in, std::size_t out, bool bias = true);

  std::size_t in_features() const { return w.dim(0); }
  std::size_t out_features() const { return w.dim(1); }
  Tensor operator()(const Tensor& x) const { return ops::linear(x, w, b); }
  void collect(NamedTensors& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  Real eps = 1e-5;

  static LayerNorm identity(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }
  void collect(NamedTensors& out, const std::string& prefix) const;
};

enum class Activation { relu, gelu };

// Point-wise two-layer feed-forward network.
struct FeedForward {
  Linear fc1;
  Linear fc2;
  Activation activation = Activation::gelu;

  static FeedForward xavier(std::size_t dim, std::size_t hidden, Activation act, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(NamedTensors& out, const std::string& prefix) const;
};

// Parameter tensor filled from N(0, stddev^2) truncated at two deviations.
Tensor trunc_normal_parameter(Shape shape, Real stddev, std::mt19937_64& rng);
Tensor uniform_parameter(Shape shape, Real bound, std::mt19937_64& rng);

std::size_t parameter_count(const NamedTensors& params);
void zero_grads(const NamedTensors& params);

}  // namespace vidt
