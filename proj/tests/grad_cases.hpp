#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace vidt::testing {

// One finite-difference case: fresh random inputs of the given shapes drawn
// uniformly from [lo, hi], reduced by a seeded weighted sum.
struct GradCase {
  const char* name;
  std::vector<Shape> shapes;
  Real lo, hi;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
};

inline std::vector<GradCase> primitive_grad_cases() {
  return {
      {"matmul", {{2, 3}, {3, 2}}, -1, 1, [](auto& in) { return ops::matmul(in[0], in[1]); }},
      {"bmm", {{2, 2, 3}, {2, 3, 2}}, -1, 1, [](auto& in) { return ops::bmm(in[0], in[1]); }},
      {"bmm_t", {{2, 2, 3}, {2, 4, 3}}, -1, 1, [](auto& in) { return ops::bmm(in[0], in[1], true); }},
      {"linear", {{2, 3, 4}, {4, 2}, {2}}, -1, 1, [](auto& in) { return ops::linear(in[0], in[1], in[2]); }},
      {"add", {{2, 3}, {3}}, -1, 1, [](auto& in) { return ops::add(in[0], in[1]); }},
      {"add_bcast", {{2, 1, 3}, {4, 1}}, -1, 1, [](auto& in) { return ops::add(in[0], in[1]); }},
      {"sub", {{2, 3}, {2, 3}}, -1, 1, [](auto& in) { return ops::sub(in[0], in[1]); }},
      {"mul", {{3, 2}, {1, 2}}, -1, 1, [](auto& in) { return ops::mul(in[0], in[1]); }},
      {"div", {{3, 2}, {3, 2}}, 0.5, 2, [](auto& in) { return ops::div(in[0], in[1]); }},
      {"minimum", {{4}, {4}}, -1, 1, [](auto& in) { return ops::minimum(in[0], in[1]); }},
      {"maximum", {{4}, {4}}, -1, 1, [](auto& in) { return ops::maximum(in[0], in[1]); }},
      {"scale", {{3}}, -1, 1, [](auto& in) { return ops::scale(in[0], -2.5); }},
      {"abs", {{4}}, -1, 1, [](auto& in) { return ops::abs(in[0]); }},
      {"exp", {{4}}, -1, 1, [](auto& in) { return ops::exp(in[0]); }},
      {"log", {{4}}, 0.2, 3, [](auto& in) { return ops::log(in[0]); }},
      {"sqrt", {{4}}, 0.2, 3, [](auto& in) { return ops::sqrt(in[0]); }},
      {"pow", {{4}}, 0.2, 1, [](auto& in) { return ops::pow_scalar(in[0], 2.0); }},
      {"sigmoid", {{4}}, -4, 4, [](auto& in) { return ops::sigmoid(in[0]); }},
      {"inverse_sigmoid", {{4}}, 0.05, 0.95, [](auto& in) { return ops::inverse_sigmoid(in[0]); }},
      {"softplus", {{4}}, -4, 4, [](auto& in) { return ops::softplus(in[0]); }},
      {"relu", {{4}}, -1, 1, [](auto& in) { return ops::relu(in[0]); }},
      {"gelu", {{4}}, -3, 3, [](auto& in) { return ops::gelu(in[0]); }},
      {"clamp", {{4}}, -2, 2, [](auto& in) { return ops::clamp(in[0], -1, 1); }},
      {"softmax", {{2, 5}}, -3, 3, [](auto& in) { return ops::softmax_lastdim(in[0]); }},
      {"log_softmax", {{2, 5}}, -3, 3, [](auto& in) { return ops::log_softmax_lastdim(in[0]); }},
      {"layer_norm", {{2, 5}, {5}, {5}}, -2, 2, [](auto& in) { return ops::layer_norm(in[0], in[1], in[2]); }},
      {"norm", {{3, 4}}, -1, 1, [](auto& in) { return ops::norm_lastdim(in[0]); }},
      {"sum_lastdim", {{3, 4}}, -1, 1, [](auto& in) { return ops::sum_lastdim(in[0]); }},
      {"mean", {{3, 4}}, -1, 1, [](auto& in) { return ops::mean(in[0]); }},
      {"reshape", {{3, 4}}, -1, 1, [](auto& in) { return ops::reshape(in[0], {2, 6}); }},
      {"permute", {{2, 3, 4}}, -1, 1, [](auto& in) { return ops::permute(in[0], {2, 0, 1}); }},
      {"concat", {{2, 3}, {2, 2}}, -1, 1, [](auto& in) { return ops::concat({in[0], in[1]}, 1); }},
      {"slice", {{3, 5}}, -1, 1, [](auto& in) { return ops::slice(in[0], 1, 1, 3); }},
      {"gather_rows", {{4, 3}}, -1, 1, [](auto& in) { return ops::gather_rows(in[0], {3, -1, 0, 3}); }},
      {"bilinear", {{3, 3, 2}, {4, 2}}, 0.02, 0.98, [](auto& in) { return ops::bilinear_sample(in[0], in[1]); }},
  };
}

inline Real run_grad_case(const GradCase& c, std::mt19937_64& rng, int trial) {
  std::vector<Tensor> inputs;
  for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
  const auto seed = static_cast<std::uint64_t>(trial);
  return gradcheck([&](const auto& in) { return weighted_sum(c.fn(in), seed); }, inputs);
}

}  // namespace vidt::testing
