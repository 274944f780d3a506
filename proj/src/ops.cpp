#include "vidt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vidt/error.hpp"

namespace vidt::ops {

namespace {

using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const MatR>;
using MapM = Eigen::Map<MatR>;

constexpr Real kInf = std::numeric_limits<Real>::infinity();

void accumulate(const Tensor& t, const std::vector<Real>& g) {
  if (!t.requires_grad()) return;
  auto buf = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError(std::string(op) + ": empty last dimension in " + shape_str(x.shape()));
  }
  return x.shape().back();
}

// Broadcast index maps: out index -> flat index in each operand.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia, ib;  // empty when identical to the out index
  bool b_suffix = false;
  std::size_t nb = 0;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  // b covering a trailing block of a is by far the common case (bias rows).
  if (pa == bc.out) {
    std::size_t lead = 0;
    while (lead < rank && pb[lead] == 1) ++lead;
    bool suffix = true;
    for (std::size_t i = lead; i < rank; ++i) suffix = suffix && pb[i] == bc.out[i];
    if (suffix) {
      bc.b_suffix = true;
      bc.nb = shape_numel(b);
      return bc;
    }
  }
  const std::size_t n = shape_numel(bc.out);
  auto strides = [&](const Shape& p) {
    std::vector<std::size_t> s(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      s[i] = p[i] == 1 ? 0 : acc;
      acc *= p[i];
    }
    return s;
  };
  auto sa = strides(pa), sb = strides(pb);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t fa = 0, fb = 0;
  for (std::size_t o = 0; o < n; ++o) {
    bc.ia[o] = fa;
    bc.ib[o] = fb;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      fa += sa[d];
      fb += sb[d];
      if (idx[d] < bc.out[d]) break;
      fa -= sa[d] * idx[d];
      fb -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

// Calls visit(o, ia, ib) for every output index with the operand indices,
// using plain loops for the two common layouts.
template <class V>
void for_each_broadcast(const Broadcast& bc, std::size_t n, V visit) {
  if (bc.b_suffix) {
    for (std::size_t base = 0; base < n; base += bc.nb) {
      for (std::size_t j = 0; j < bc.nb; ++j) visit(base + j, base + j, j);
    }
  } else if (bc.ia.empty() && bc.ib.empty()) {
    for (std::size_t o = 0; o < n; ++o) visit(o, o, o);
  } else {
    for (std::size_t o = 0; o < n; ++o) {
      visit(o, bc.ia.empty() ? o : bc.ia[o], bc.ib.empty() ? o : bc.ib[o]);
    }
  }
}

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
  const std::size_t n = shape_numel(bc->out);
  const Real* A = a.data().data();
  const Real* B = b.data().data();
  Buffer out(n);
  for_each_broadcast(*bc, n, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = f(A[i], B[j]); });
  return make_result(op, bc->out, std::move(out), {a, b}, [a, b, bc, da, db](const Tensor& y) {
    const Real* g = y.grad().data();
    const Real* A = a.data().data();
    const Real* B = b.data().data();
    const std::size_t n = y.numel();
    if (a.requires_grad()) {
      Real* ga = a.grad_buffer().data();
      for_each_broadcast(*bc, n, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * da(A[i], B[j]); });
    }
    if (b.requires_grad()) {
      Real* gb = b.grad_buffer().data();
      for_each_broadcast(*bc, n, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * db(A[i], B[j]); });
    }
  });
}

// df receives (x, y) where y = f(x).
template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  auto X = x.data();
  Buffer out(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = f(X[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [x, df](const Tensor& y) {
    auto g = y.grad();
    auto X = x.data();
    auto Y = y.data();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(X[i], Y[i]);
  });
}

}  // namespace

namespace {

// C (+)= op(A) * op(B).
void gemm(const Real* a, std::size_t ar, std::size_t ac, bool ta, const Real* b, std::size_t br, std::size_t bc,
          bool tb, Real* c, bool accumulate) {
  MapC A(a, ar, ac);
  MapC B(b, br, bc);
  MapM C(c, ta ? ac : ar, tb ? br : bc);
  if (!accumulate) C.setZero();
  if (ta && tb) {
    C.noalias() += A.transpose() * B.transpose();
  } else if (ta) {
    C.noalias() += A.transpose() * B;
  } else if (tb) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A * B;
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  tally_macs(static_cast<std::uint64_t>(m) * k * n);
  Buffer out(m * n);
  gemm(a.data().data(), m, k, false, b.data().data(), k, n, false, out.data(), false);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const Tensor& y) {
    const Real* g = y.grad().data();
    if (a.requires_grad()) gemm(g, m, n, false, b.data().data(), k, n, true, a.grad_buffer().data(), true);
    if (b.requires_grad()) gemm(a.data().data(), m, k, true, g, m, n, false, b.grad_buffer().data(), true);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         (transpose_b ? " (b transposed)" : ""));
  }
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  const auto br = transpose_b ? n : k, bc = transpose_b ? k : n;
  tally_macs(static_cast<std::uint64_t>(batch) * m * k * n);
  Buffer out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(a.data().data() + i * m * k, m, k, false, b.data().data() + i * k * n, br, bc, transpose_b,
         out.data() + i * m * n, false);
  }
  return make_result("bmm", {batch, m, n}, std::move(out), {a, b},
                     [a, b, batch, m, k, n, br, bc, transpose_b](const Tensor& y) {
                       for (std::size_t i = 0; i < batch; ++i) {
                         const Real* g = y.grad().data() + i * m * n;
                         const Real* bi = b.data().data() + i * k * n;
                         if (a.requires_grad()) {
                           gemm(g, m, n, false, bi, br, bc, !transpose_b, a.grad_buffer().data() + i * m * k, true);
                         }
                         if (b.requires_grad()) {
                           const Real* ai = a.data().data() + i * m * k;
                           Real* gb = b.grad_buffer().data() + i * k * n;
                           if (transpose_b) {
                             gemm(g, m, n, true, ai, m, k, false, gb, true);
                           } else {
                             gemm(ai, m, k, true, g, m, n, false, gb, true);
                           }
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() == 0 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weight " + shape_str(w.shape()));
  }
  const auto in = w.dim(0), out = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not fit weight " + shape_str(w.shape()));
  }
  const auto rows = x.numel() / in;
  tally_macs(static_cast<std::uint64_t>(rows) * in * out);
  Buffer y(rows * out);
  gemm(x.data().data(), rows, in, false, w.data().data(), in, out, false, y.data(), false);
  if (b.defined()) {
    const Real* bias = b.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < out; ++c) y[r * out + c] += bias[c];
    }
  }
  Shape shape = x.shape();
  shape.back() = out;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result("linear", std::move(shape), std::move(y), std::move(inputs),
                     [x, w, b, rows, in, out](const Tensor& y) {
                       const Real* g = y.grad().data();
                       if (x.requires_grad()) {
                         gemm(g, rows, out, false, w.data().data(), in, out, true, x.grad_buffer().data(), true);
                       }
                       if (w.requires_grad()) {
                         gemm(x.data().data(), rows, in, true, g, rows, out, false, w.grad_buffer().data(), true);
                       }
                       if (b.defined() && b.requires_grad()) {
                         Real* gb = b.grad_buffer().data();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < out; ++c) gb[c] += g[r * out + c];
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return 1.0; },
      [](Real, Real) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return 1.0; },
      [](Real, Real) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y) { return 1.0 / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

// Ties route the gradient to the first operand.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      "minimum", a, b, [](Real x, Real y) { return x <= y ? x : y; },
      [](Real x, Real y) { return x <= y ? 1.0 : 0.0; }, [](Real x, Real y) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      "maximum", a, b, [](Real x, Real y) { return x >= y ? x : y; },
      [](Real x, Real y) { return x >= y ? 1.0 : 0.0; }, [](Real x, Real y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& x, Real factor) {
  return unary(
      "scale", x, [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& x, Real value) {
  return unary(
      "add_scalar", x, [value](Real v) { return v + value; }, [](Real, Real) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](Real v) { return std::abs(v); },
      [](Real v, Real) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      "sqrt", x, [](Real v) { return std::sqrt(v); }, [](Real, Real y) { return y > 0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](Real v) { return v * v; }, [](Real v, Real) { return 2.0 * v; });
}

Tensor pow_scalar(const Tensor& x, Real exponent) {
  return unary(
      "pow", x, [exponent](Real v) { return std::pow(v, exponent); },
      [exponent](Real v, Real) { return v == 0.0 && exponent < 1.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](Real v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const Real e = std::exp(v);
        return e / (1.0 + e);
      },
      [](Real, Real y) { return y * (1.0 - y); });
}

Tensor inverse_sigmoid(const Tensor& x, Real eps) {
  return unary(
      "inverse_sigmoid", x,
      [eps](Real v) {
        const Real c = std::clamp(v, eps, 1.0 - eps);
        return std::log(c / (1.0 - c));
      },
      [eps](Real v, Real) { return (v < eps || v > 1.0 - eps) ? 0.0 : 1.0 / (v * (1.0 - v)); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x, [](Real v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](Real v, Real) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](Real v) { return v > 0 ? v : 0.0; }, [](Real v, Real) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x, [](Real v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
      [](Real v, Real) {
        const Real cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const Real pdf = std::exp(-0.5 * v * v) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
        return cdf + v * pdf;
      });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  return unary(
      "clamp", x, [lo, hi](Real v) { return std::clamp(v, lo, hi); },
      [lo, hi](Real v, Real) { return (v < lo || v > hi) ? 0.0 : 1.0; });
}

Tensor clamp_min(const Tensor& x, Real lo) {
  return unary(
      "clamp_min", x, [lo](Real v) { return v < lo ? lo : v; }, [lo](Real v, Real) { return v < lo ? 0.0 : 1.0; });
}

Tensor softmax_lastdim(const Tensor& x) {
  const auto n = last_dim(x, "softmax");
  const auto rows = x.numel() / n;
  auto X = x.data();
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = X.data() + r * n;
    Real* o = out.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    if (mx == -kInf) {
      std::fill(o, o + n, 0.0);
      continue;
    }
    Real total = 0;
    for (std::size_t i = 0; i < n; ++i) total += (o[i] = std::exp(in[i] - mx));
    const Real inv = 1.0 / total;
    for (std::size_t i = 0; i < n; ++i) o[i] *= inv;
  }
  return make_result("softmax", x.shape(), std::move(out), {x}, [x, n, rows](const Tensor& y) {
    auto g = y.grad();
    auto Y = y.data();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = Y.data() + r * n;
      const Real* gr = g.data() + r * n;
      Real dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += yr[i] * (gr[i] - dot);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  const auto n = last_dim(x, "log_softmax");
  const auto rows = x.numel() / n;
  auto X = x.data();
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = X.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real total = 0;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(in[i] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = in[i] - lse;
  }
  return make_result("log_softmax", x.shape(), std::move(out), {x}, [x, n, rows](const Tensor& y) {
    auto g = y.grad();
    auto Y = y.data();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      Real gsum = 0;
      for (std::size_t i = 0; i < n; ++i) gsum += g[r * n + i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += g[r * n + i] - std::exp(Y[r * n + i]) * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive, got " + std::to_string(eps));
  const auto n = last_dim(x, "layer_norm");
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match last dim of " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / n;
  auto X = x.data();
  auto G = gamma.data();
  auto B = beta.data();
  Buffer out(x.numel());
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = X.data() + r * n;
    Real mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += in[i];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<Real>(n);
    const Real is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const Real h = (in[i] - mu) * is;
      (*xhat)[r * n + i] = h;
      out[r * n + i] = h * G[i] + B[i];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, beta, n, rows, xhat, inv_std](const Tensor& y) {
                       auto g = y.grad();
                       auto G = gamma.data();
                       const auto& H = *xhat;
                       if (gamma.requires_grad() || beta.requires_grad()) {
                         std::vector<Real> gg(n, 0.0), gb(n, 0.0);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t i = 0; i < n; ++i) {
                             gg[i] += g[r * n + i] * H[r * n + i];
                             gb[i] += g[r * n + i];
                           }
                         }
                         accumulate(gamma, gg);
                         accumulate(beta, gb);
                       }
                       if (!x.requires_grad()) return;
                       auto gx = x.grad_buffer();
                       const Real inv_n = 1.0 / static_cast<Real>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         Real s1 = 0, s2 = 0;
                         for (std::size_t i = 0; i < n; ++i) {
                           const Real dh = g[r * n + i] * G[i];
                           s1 += dh;
                           s2 += dh * H[r * n + i];
                         }
                         const Real is = (*inv_std)[r];
                         for (std::size_t i = 0; i < n; ++i) {
                           const Real dh = g[r * n + i] * G[i];
                           gx[r * n + i] += is * (dh - inv_n * s1 - H[r * n + i] * inv_n * s2);
                         }
                       }
                     });
}

Tensor norm_lastdim(const Tensor& x) {
  const auto n = last_dim(x, "norm");
  const auto rows = x.numel() / n;
  auto X = x.data();
  Buffer out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t i = 0; i < n; ++i) s += X[r * n + i] * X[r * n + i];
    out[r] = std::sqrt(s);
  }
  Shape s(x.shape().begin(), x.shape().end() - 1);
  if (s.empty()) s = {1};
  return make_result("norm", s, std::move(out), {x}, [x, n, rows](const Tensor& y) {
    auto g = y.grad();
    auto Y = y.data();
    auto X = x.data();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      if (Y[r] == 0.0) continue;
      const Real f = g[r] / Y[r];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += f * X[r * n + i];
    }
  });
}

Tensor sum_lastdim(const Tensor& x) {
  const auto n = last_dim(x, "sum_lastdim");
  const auto rows = x.numel() / n;
  auto X = x.data();
  Buffer out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < n; ++i) out[r] += X[r * n + i];
  }
  Shape s(x.shape().begin(), x.shape().end() - 1);
  if (s.empty()) s = {1};
  return make_result("sum_lastdim", s, std::move(out), {x}, [x, n, rows](const Tensor& y) {
    auto g = y.grad();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += g[r];
    }
  });
}

Tensor sum(const Tensor& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  return make_result("sum", {1}, {total}, {x}, [x](const Tensor& y) {
    const Real g = y.grad()[0];
    auto gx = x.grad_buffer();
    for (auto& v : gx) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<Real>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [x](const Tensor& y) {
    auto g = y.grad();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const auto& in = x.shape();
  const auto rank = in.size();
  if (perm.size() != rank) throw DimensionError("permute: rank mismatch for " + shape_str(in));
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw DimensionError("permute: invalid axis order for " + shape_str(in));
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  const auto n = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    (*map)[o] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  auto X = x.data();
  Buffer out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = X[(*map)[o]];
  return make_result("permute", std::move(out_shape), std::move(out), {x}, [x, map](const Tensor& y) {
    auto g = y.grad();
    auto gx = x.grad_buffer();
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*map)[o]] += g[o];
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const auto& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;
  Buffer out(outer * out_row);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[axis] * inner;
    auto P = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(P.data() + o * row, row, out.data() + o * out_row + offset);
    }
    offset += row;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [parts, axis, outer, inner, out_row](const Tensor& y) {
                       auto g = y.grad();
                       std::size_t offset = 0;
                       for (const auto& p : parts) {
                         const std::size_t row = p.shape()[axis] * inner;
                         if (p.requires_grad()) {
                           auto gp = p.grad_buffer();
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < row; ++i) gp[o * row + i] += g[o * out_row + offset + i];
                           }
                         }
                         offset += row;
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& s = x.shape();
  if (axis >= s.size() || start + length > s[axis] || length == 0) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t in_row = s[axis] * inner, out_row = length * inner, off = start * inner;
  Shape out_shape = s;
  out_shape[axis] = length;
  auto X = x.data();
  Buffer out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(X.data() + o * in_row + off, out_row, out.data() + o * out_row);
  return make_result("slice", std::move(out_shape), std::move(out), {x},
                     [x, outer, in_row, out_row, off](const Tensor& y) {
                       auto g = y.grad();
                       auto gx = x.grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < out_row; ++i) gx[o * in_row + off + i] += g[o * out_row + i];
                       }
                     });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& index) {
  if (x.rank() == 0) throw DimensionError("gather_rows on a rank-0 tensor");
  const auto rows = static_cast<std::int64_t>(x.dim(0));
  const std::size_t width = x.numel() / x.dim(0);
  for (auto i : index) {
    if (i < -1 || i >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
    }
  }
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  Shape out_shape = x.shape();
  out_shape[0] = index.size();
  auto X = x.data();
  Buffer out(index.size() * width, 0.0);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= 0) std::copy_n(X.data() + index[r] * width, width, out.data() + r * width);
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(index);
  return make_result("gather_rows", std::move(out_shape), std::move(out), {x}, [x, idx, width](const Tensor& y) {
    auto g = y.grad();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < idx->size(); ++r) {
      const auto src = (*idx)[r];
      if (src < 0) continue;
      for (std::size_t i = 0; i < width; ++i) gx[src * width + i] += g[r * width + i];
    }
  });
}

Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample: map must be [h x w x c], got " + shape_str(map.shape()));
  const auto h = map.dim(0), w = map.dim(1), c = map.dim(2);
  if (h * w == 0 || c == 0) throw DimensionError("bilinear_sample: empty map " + shape_str(map.shape()));
  if (points.rank() != 2 || points.dim(1) != 2) {
    throw DimensionError("bilinear_sample: points must be [n x 2], got " + shape_str(points.shape()));
  }
  const auto n = points.dim(0);
  tally_macs(static_cast<std::uint64_t>(n) * 4 * c);
  auto M = map.data();
  auto P = points.data();
  Buffer out(n * c, 0.0);
  const auto H = static_cast<std::int64_t>(h), W = static_cast<std::int64_t>(w);
  auto corner_ok = [H, W](std::int64_t i, std::int64_t j) { return i >= 0 && i < H && j >= 0 && j < W; };
  for (std::size_t p = 0; p < n; ++p) {
    const Real px = P[2 * p] * static_cast<Real>(w) - 0.5;
    const Real py = P[2 * p + 1] * static_cast<Real>(h) - 0.5;
    const Real fx = std::floor(px), fy = std::floor(py);
    const auto j0 = static_cast<std::int64_t>(fx), i0 = static_cast<std::int64_t>(fy);
    const Real ax = px - fx, ay = py - fy;
    const Real wts[4] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
    const std::int64_t ii[4] = {i0, i0, i0 + 1, i0 + 1};
    const std::int64_t jj[4] = {j0, j0 + 1, j0, j0 + 1};
    Real* o = out.data() + p * c;
    for (int q = 0; q < 4; ++q) {
      if (!corner_ok(ii[q], jj[q])) continue;
      const Real* src = M.data() + (ii[q] * W + jj[q]) * c;
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += wts[q] * src[ch];
    }
  }
  return make_result("bilinear_sample", {n, c}, std::move(out), {map, points},
                     [map, points, h, w, c, n, corner_ok, W](const Tensor& y) {
                       auto g = y.grad();
                       auto M = map.data();
                       auto P = points.data();
                       std::span<Real> gm, gp;
                       if (map.requires_grad()) gm = map.grad_buffer();
                       if (points.requires_grad()) gp = points.grad_buffer();
                       for (std::size_t p = 0; p < n; ++p) {
                         const Real px = P[2 * p] * static_cast<Real>(w) - 0.5;
                         const Real py = P[2 * p + 1] * static_cast<Real>(h) - 0.5;
                         const Real fx = std::floor(px), fy = std::floor(py);
                         const auto j0 = static_cast<std::int64_t>(fx), i0 = static_cast<std::int64_t>(fy);
                         const Real ax = px - fx, ay = py - fy;
                         const Real wts[4] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
                         // d weight / d ax and d weight / d ay
                         const Real dwx[4] = {-(1 - ay), (1 - ay), -ay, ay};
                         const Real dwy[4] = {-(1 - ax), -ax, (1 - ax), ax};
                         const std::int64_t ii[4] = {i0, i0, i0 + 1, i0 + 1};
                         const std::int64_t jj[4] = {j0, j0 + 1, j0, j0 + 1};
                         const Real* gr = g.data() + p * c;
                         Real dax = 0, day = 0;
                         for (int q = 0; q < 4; ++q) {
                           if (!corner_ok(ii[q], jj[q])) continue;
                           const std::size_t base = (ii[q] * W + jj[q]) * c;
                           Real dot = 0;
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             dot += gr[ch] * M[base + ch];
                             if (!gm.empty()) gm[base + ch] += wts[q] * gr[ch];
                           }
                           dax += dwx[q] * dot;
                           day += dwy[q] * dot;
                         }
                         if (!gp.empty()) {
                           gp[2 * p] += dax * static_cast<Real>(w);
                           gp[2 * p + 1] += day * static_cast<Real>(h);
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, Real p, std::mt19937_64& rng) {
  if (p < 0 || p >= 1) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (p == 0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Buffer mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor detach(const Tensor& x) {
  return Tensor::from(x.shape(), Buffer(x.data().begin(), x.data().end()));
}

}  // namespace vidt::ops
