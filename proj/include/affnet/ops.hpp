#pragma once

// Differentiable primitive operations on Tensors, plus the finite-difference
// gradient checker. Every op follows the same pattern: validate shapes,
// compute the forward value, and hand make_op a closure that maps the output
// gradient onto the parents. Backward closures work on raw buffers (they never
// build graph nodes), so sweeps cannot recurse into recording.

#include <algorithm>
#include <array>

#include "affnet/tensor.hpp"

namespace affnet {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  auto pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(v), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  auto pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(v), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] -= self.grad[i];
      pb->seeded = true;
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  auto pa = a.node(), pb = b.node();
  return make_op(a.shape(), std::move(v), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * pb->value[i];
      pa->seeded = true;
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += self.grad[i] * pa->value[i];
      pb->seeded = true;
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.values());
  for (double& x : v) x *= s;
  auto pa = a.node();
  return make_op(a.shape(), std::move(v), {pa}, [pa, s](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * s;
    pa->seeded = true;
  });
}

// ---------------------------------------------------------------------------
// Unary nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

// fwd(x) → y and dydx(x, y); the closure re-reads the parent's input value
// and the op's own output value, so nothing is copied.
template <typename F, typename D>
inline Tensor unary_op(const Tensor& a, F fwd, D dydx) {
  std::vector<double> v(a.values());
  for (double& x : v) x = fwd(x);
  auto pa = a.node();
  return make_op(a.shape(), std::move(v), {pa}, [pa, dydx](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * dydx(pa->value[i], self.value[i]);
    pa->seeded = true;
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

// tanh-approximation GELU.
inline double gelu_value(double x) {
  const double a = 0.7978845608028654;  // sqrt(2/pi)
  const double u = a * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_derivative(double x) {
  const double a = 0.7978845608028654;
  const double u = a * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = a * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Tensor gelu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return gelu_value(x); },
      [](double x, double) { return gelu_derivative(x); });
}

inline Tensor log_elem(const Tensor& a) {
  for (double x : a.values())
    if (x <= 0.0)
      throw NumericError("log: nonpositive input " + std::to_string(x));
  return detail::unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor exp_elem(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ShapeError("matmul: operands must be rank-2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> v(static_cast<size_t>(m) * n, 0.0);
  {
    const double* A = a.values().data();
    const double* B = b.values().data();
    double* C = v.data();
    for (int i = 0; i < m; ++i)
      for (int l = 0; l < k; ++l) {
        const double ail = A[i * k + l];
        if (ail == 0.0) continue;
        const double* Bl = B + static_cast<size_t>(l) * n;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) Ci[j] += ail * Bl[j];
      }
  }
  auto pa = a.node(), pb = b.node();
  return make_op({m, n}, std::move(v), {pa, pb},
                 [pa, pb, m, k, n](Node& self) {
                   const double* G = self.grad.data();
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     const double* B = pb->value.data();
                     for (int i = 0; i < m; ++i)
                       for (int l = 0; l < k; ++l) {
                         double acc = 0.0;
                         for (int j = 0; j < n; ++j)
                           acc += G[i * n + j] * B[l * n + j];
                         pa->grad[i * k + l] += acc;
                       }
                     pa->seeded = true;
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     const double* A = pa->value.data();
                     for (int i = 0; i < m; ++i)
                       for (int l = 0; l < k; ++l) {
                         const double ail = A[i * k + l];
                         if (ail == 0.0) continue;
                         for (int j = 0; j < n; ++j)
                           pb->grad[l * n + j] += ail * G[i * n + j];
                       }
                     pb->seeded = true;
                   }
                 });
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.shape().size() != 2)
    throw ShapeError("transpose2d: rank-2 required, got " +
                     shape_str(a.shape()));
  const int m = a.shape()[0], n = a.shape()[1];
  std::vector<double> v(a.values().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) v[j * m + i] = a.values()[i * n + j];
  auto pa = a.node();
  return make_op({n, m}, std::move(v), {pa}, [pa, m, n](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        pa->grad[i * n + j] += self.grad[j * m + i];
    pa->seeded = true;
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != numel(a.shape()))
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  std::vector<double> v(a.values());
  auto pa = a.node();
  return make_op(std::move(shape), std::move(v), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->accumulate(self.grad);
  });
}

// Value copy that never requires gradients (stop-gradient).
inline Tensor detach(const Tensor& a) {
  return Tensor::from(a.shape(), a.values(), false);
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int nd = static_cast<int>(s0.size());
  if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
  long long outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < nd; ++d) inner *= s0[d];
  int total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != nd)
      throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && s[d] != s0[d])
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " +
                         shape_str(s0));
    total_axis += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total_axis;
  std::vector<double> v(static_cast<size_t>(outer) * total_axis * inner);
  std::vector<int> axis_sizes;
  std::vector<std::shared_ptr<Node>> parents;
  {
    long long off = 0;
    for (const auto& p : parts) {
      const int an = p.shape()[axis];
      axis_sizes.push_back(an);
      parents.push_back(p.node());
      const double* src = p.values().data();
      for (long long o = 0; o < outer; ++o)
        std::copy(src + o * an * inner, src + (o + 1) * an * inner,
                  v.begin() + (o * total_axis + off) * inner);
      off += an;
    }
  }
  return make_op(std::move(out_shape), std::move(v), parents,
                 [parents, axis_sizes, outer, inner,
                  total_axis](Node& self) {
                   long long off = 0;
                   for (size_t pi = 0; pi < parents.size(); ++pi) {
                     const int an = axis_sizes[pi];
                     auto& p = parents[pi];
                     if (p->requires_grad) {
                       p->ensure_grad();
                       for (long long o = 0; o < outer; ++o) {
                         const double* g =
                             self.grad.data() + (o * total_axis + off) * inner;
                         double* dst = p->grad.data() + o * an * inner;
                         for (long long i = 0; i < an * inner; ++i)
                           dst[i] += g[i];
                       }
                       p->seeded = true;
                     }
                     off += an;
                   }
                 });
}

inline std::vector<Tensor> split(const Tensor& a, int axis,
                                 const std::vector<int>& sizes) {
  const Shape& s = a.shape();
  const int nd = static_cast<int>(s.size());
  if (axis < 0 || axis >= nd) throw ShapeError("split: axis out of range");
  int total = 0;
  for (int sz : sizes) {
    if (sz <= 0) throw ShapeError("split: sizes must be positive");
    total += sz;
  }
  if (total != s[axis])
    throw ShapeError("split: sizes sum to " + std::to_string(total) +
                     " but axis extent is " + std::to_string(s[axis]));
  long long outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < nd; ++d) inner *= s[d];
  std::vector<Tensor> out;
  auto pa = a.node();
  const int axis_total = s[axis];
  long long off = 0;
  for (int sz : sizes) {
    Shape piece_shape = s;
    piece_shape[axis] = sz;
    std::vector<double> v(static_cast<size_t>(outer) * sz * inner);
    for (long long o = 0; o < outer; ++o)
      std::copy(a.values().begin() + (o * axis_total + off) * inner,
                a.values().begin() + (o * axis_total + off + sz) * inner,
                v.begin() + o * sz * inner);
    const long long piece_off = off;
    out.push_back(make_op(
        std::move(piece_shape), std::move(v), {pa},
        [pa, outer, inner, sz, axis_total, piece_off](Node& self) {
          if (!pa->requires_grad) return;
          pa->ensure_grad();
          for (long long o = 0; o < outer; ++o) {
            const double* g = self.grad.data() + o * sz * inner;
            double* dst =
                pa->grad.data() + (o * axis_total + piece_off) * inner;
            for (long long i = 0; i < static_cast<long long>(sz) * inner; ++i)
              dst[i] += g[i];
          }
          pa->seeded = true;
        }));
    off += sz;
  }
  return out;
}

// vector[c] replicated to [rows, c].
inline Tensor broadcast_rows(const Tensor& v, int rows) {
  if (v.shape().size() != 1)
    throw ShapeError("broadcast_rows: rank-1 required, got " +
                     shape_str(v.shape()));
  const int c = v.shape()[0];
  std::vector<double> out(static_cast<size_t>(rows) * c);
  for (int r = 0; r < rows; ++r)
    std::copy(v.values().begin(), v.values().end(), out.begin() + r * c);
  auto pv = v.node();
  return make_op({rows, c}, std::move(out), {pv}, [pv, rows, c](Node& self) {
    if (!pv->requires_grad) return;
    pv->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < c; ++j) pv->grad[j] += self.grad[r * c + j];
    pv->seeded = true;
  });
}

// vector[c] replicated to a [c, h, w] map.
inline Tensor broadcast_spatial(const Tensor& v, int h, int w) {
  if (v.shape().size() != 1)
    throw ShapeError("broadcast_spatial: rank-1 required, got " +
                     shape_str(v.shape()));
  const int c = v.shape()[0];
  std::vector<double> out(static_cast<size_t>(c) * h * w);
  for (int ch = 0; ch < c; ++ch)
    std::fill(out.begin() + static_cast<size_t>(ch) * h * w,
              out.begin() + static_cast<size_t>(ch + 1) * h * w,
              v.values()[ch]);
  auto pv = v.node();
  return make_op({c, h, w}, std::move(out), {pv}, [pv, c, h, w](Node& self) {
    if (!pv->requires_grad) return;
    pv->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      const double* g = self.grad.data() + static_cast<size_t>(ch) * h * w;
      for (int i = 0; i < h * w; ++i) acc += g[i];
      pv->grad[ch] += acc;
    }
    pv->seeded = true;
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  auto pa = a.node();
  return make_op({1}, {acc}, {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (double& g : pa->grad) g += self.grad[0];
    pa->seeded = true;
  });
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// [c, ...] → [c], mean over every non-leading axis.
inline Tensor global_mean_pool(const Tensor& a) {
  if (a.shape().size() < 2)
    throw ShapeError("global_mean_pool: rank >= 2 required, got " +
                     shape_str(a.shape()));
  const int c = a.shape()[0];
  const long long spatial = a.size() / c;
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    const double* src = a.values().data() + ch * spatial;
    for (long long i = 0; i < spatial; ++i) acc += src[i];
    out[static_cast<size_t>(ch)] = acc / static_cast<double>(spatial);
  }
  auto pa = a.node();
  return make_op({c}, std::move(out), {pa}, [pa, c, spatial](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const double inv = 1.0 / static_cast<double>(spatial);
    for (int ch = 0; ch < c; ++ch) {
      const double g = self.grad[ch] * inv;
      double* dst = pa->grad.data() + ch * spatial;
      for (long long i = 0; i < spatial; ++i) dst[i] += g;
    }
    pa->seeded = true;
  });
}

// ---------------------------------------------------------------------------
// Softmax / layer normalization
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis) {
  const Shape& s = a.shape();
  const int nd = static_cast<int>(s.size());
  if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range");
  long long outer = 1, inner = 1;
  const int n = s[axis];
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < nd; ++d) inner *= s[d];
  std::vector<double> v(a.values().size());
  const double* x = a.values().data();
  for (long long o = 0; o < outer; ++o)
    for (long long i = 0; i < inner; ++i) {
      const long long base = o * n * inner + i;
      double mx = -1e308;
      for (int j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        v[base + j * inner] = e;
        z += e;
      }
      for (int j = 0; j < n; ++j) v[base + j * inner] /= z;
    }
  auto pa = a.node();
  return make_op(s, std::move(v), {pa},
                 [pa, outer, inner, n](Node& self) {
                   if (!pa->requires_grad) return;
                   pa->ensure_grad();
                   const double* y = self.value.data();
                   const double* g = self.grad.data();
                   for (long long o = 0; o < outer; ++o)
                     for (long long i = 0; i < inner; ++i) {
                       const long long base = o * n * inner + i;
                       double dot = 0.0;
                       for (int j = 0; j < n; ++j)
                         dot += g[base + j * inner] * y[base + j * inner];
                       for (int j = 0; j < n; ++j)
                         pa->grad[base + j * inner] +=
                             y[base + j * inner] * (g[base + j * inner] - dot);
                     }
                   pa->seeded = true;
                 });
}

constexpr double kLayerNormEps = 1e-5;

// Normalizes the last axis; gain and bias are rank-1 of that axis extent.
inline Tensor layernorm(const Tensor& a, const Tensor& gain,
                        const Tensor& bias) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("layernorm: rank >= 1 required");
  const int c = s.back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw ShapeError("layernorm: gain/bias must be [" + std::to_string(c) +
                     "], got " + shape_str(gain.shape()) + " and " +
                     shape_str(bias.shape()));
  const long long rows = a.size() / c;
  std::vector<double> v(a.values().size());
  const double* x = a.values().data();
  const double* gn = gain.values().data();
  const double* bs = bias.values().data();
  for (long long r = 0; r < rows; ++r) {
    const double* xr = x + r * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < c; ++j)
      v[r * c + j] = (xr[j] - mu) * inv * gn[j] + bs[j];
  }
  auto pa = a.node(), pg = gain.node(), pb = bias.node();
  return make_op(
      s, std::move(v), {pa, pg, pb}, [pa, pg, pb, rows, c](Node& self) {
        const double* x = pa->value.data();
        const double* gn = pg->value.data();
        const double* g = self.grad.data();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (pa->requires_grad) pa->ensure_grad();
        for (long long r = 0; r < rows; ++r) {
          const double* xr = x + r * c;
          const double* gr = g + r * c;
          double mu = 0.0;
          for (int j = 0; j < c; ++j) mu += xr[j];
          mu /= c;
          double var = 0.0;
          for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
          var /= c;
          const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
          if (pg->requires_grad || pb->requires_grad) {
            for (int j = 0; j < c; ++j) {
              if (pg->requires_grad)
                pg->grad[j] += gr[j] * (xr[j] - mu) * inv;
              if (pb->requires_grad) pb->grad[j] += gr[j];
            }
          }
          if (pa->requires_grad) {
            // d/dx of ((x - mu) * inv * gain): standard three-term form.
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int j = 0; j < c; ++j) {
              const double xhat = (xr[j] - mu) * inv;
              const double dxhat = gr[j] * gn[j];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            for (int j = 0; j < c; ++j) {
              const double xhat = (xr[j] - mu) * inv;
              const double dxhat = gr[j] * gn[j];
              pa->grad[r * c + j] +=
                  inv * (dxhat - sum_dxhat / c - xhat * sum_dxhat_xhat / c);
            }
          }
        }
        if (pa->requires_grad) pa->seeded = true;
        if (pg->requires_grad) pg->seeded = true;
        if (pb->requires_grad) pb->seeded = true;
      });
}

// ---------------------------------------------------------------------------
// Spatial ops: convolution, pooling, bilinear upsampling
// ---------------------------------------------------------------------------

namespace detail {

inline void check_conv_args(const Shape& xs, const Shape& ws,
                            const char* op) {
  if (xs.size() != 3)
    throw ShapeError(std::string(op) + ": input must be [c,h,w], got " +
                     shape_str(xs));
  if (ws.size() != 4)
    throw ShapeError(std::string(op) +
                     ": kernel must be [co,ci,k,k], got " + shape_str(ws));
  if (ws[2] != ws[3] || (ws[2] != 1 && ws[2] != 3))
    throw ConfigError(std::string(op) + ": kernel size must be 1 or 3, got " +
                      shape_str(ws));
  if (ws[1] != xs[0])
    throw ShapeError(std::string(op) + ": kernel expects " +
                     std::to_string(ws[1]) + " input channels, input has " +
                     std::to_string(xs[0]) + " (" + shape_str(xs) + " vs " +
                     shape_str(ws) + ")");
}

}  // namespace detail

// Border handling for convolutions: zero padding treats out-of-image taps as
// zeros; reflect padding mirrors the image about its edge (index -1 reads row
// 1), which keeps border statistics consistent with the interior and avoids
// hot rims in dense heads.
enum class PadMode { kZero, kReflect };

namespace detail {

// Maps a possibly out-of-range tap index into [0, n); returns -1 for a
// zero-padded tap that should be skipped.
inline int pad_index(int t, int n, PadMode mode) {
  if (t >= 0 && t < n) return t;
  if (mode == PadMode::kZero) return -1;
  return t < 0 ? -t : 2 * n - 2 - t;
}

}  // namespace detail

// Stride-s 2-D convolution; stride 1 preserves spatial size.
inline Tensor conv2d_strided(const Tensor& x, const Tensor& w, int stride,
                             PadMode pad_mode = PadMode::kZero) {
  detail::check_conv_args(x.shape(), w.shape(), "conv2d");
  if (stride != 1 && stride != 2 && stride != 4)
    throw ConfigError("conv2d: stride must be 1, 2 or 4");
  const int ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int co = w.shape()[0], k = w.shape()[2];
  if (h % stride != 0 || wd % stride != 0)
    throw ShapeError("conv2d: spatial size " + shape_str(x.shape()) +
                     " not divisible by stride " + std::to_string(stride));
  const int pad = (k - 1) / 2;
  if (pad_mode == PadMode::kReflect && pad > 0 && (h < 2 || wd < 2))
    throw ShapeError("conv2d: reflect padding needs spatial size >= 2, got " +
                     shape_str(x.shape()));
  const int oh = h / stride, ow = wd / stride;
  std::vector<double> v(static_cast<size_t>(co) * oh * ow, 0.0);
  const double* X = x.values().data();
  const double* W = w.values().data();
  for (int oc = 0; oc < co; ++oc)
    for (int icc = 0; icc < ci; ++icc) {
      const double* Wk = W + ((oc * ci) + icc) * k * k;
      const double* Xc = X + static_cast<size_t>(icc) * h * wd;
      double* Y = v.data() + static_cast<size_t>(oc) * oh * ow;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int u = 0; u < k; ++u) {
            const int pi = detail::pad_index(i * stride + u - pad, h, pad_mode);
            if (pi < 0) continue;
            for (int vv = 0; vv < k; ++vv) {
              const int pj =
                  detail::pad_index(j * stride + vv - pad, wd, pad_mode);
              if (pj < 0) continue;
              acc += Xc[pi * wd + pj] * Wk[u * k + vv];
            }
          }
          Y[i * ow + j] += acc;
        }
    }
  auto px = x.node(), pw = w.node();
  return make_op(
      {co, oh, ow}, std::move(v), {px, pw},
      [px, pw, ci, h, wd, co, k, pad, stride, oh, ow, pad_mode](Node& self) {
        const double* G = self.grad.data();
        if (px->requires_grad) {
          px->ensure_grad();
          const double* W = pw->value.data();
          for (int oc = 0; oc < co; ++oc)
            for (int icc = 0; icc < ci; ++icc) {
              const double* Wk = W + ((oc * ci) + icc) * k * k;
              const double* Gc = G + static_cast<size_t>(oc) * oh * ow;
              double* DX = px->grad.data() + static_cast<size_t>(icc) * h * wd;
              for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                  const double g = Gc[i * ow + j];
                  if (g == 0.0) continue;
                  for (int u = 0; u < k; ++u) {
                    const int pi =
                        detail::pad_index(i * stride + u - pad, h, pad_mode);
                    if (pi < 0) continue;
                    for (int vv = 0; vv < k; ++vv) {
                      const int pj = detail::pad_index(j * stride + vv - pad,
                                                       wd, pad_mode);
                      if (pj < 0) continue;
                      DX[pi * wd + pj] += g * Wk[u * k + vv];
                    }
                  }
                }
            }
          px->seeded = true;
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
          const double* X = px->value.data();
          for (int oc = 0; oc < co; ++oc)
            for (int icc = 0; icc < ci; ++icc) {
              double* DW = pw->grad.data() + ((oc * ci) + icc) * k * k;
              const double* Xc = X + static_cast<size_t>(icc) * h * wd;
              const double* Gc = G + static_cast<size_t>(oc) * oh * ow;
              for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                  const double g = Gc[i * ow + j];
                  if (g == 0.0) continue;
                  for (int u = 0; u < k; ++u) {
                    const int pi =
                        detail::pad_index(i * stride + u - pad, h, pad_mode);
                    if (pi < 0) continue;
                    for (int vv = 0; vv < k; ++vv) {
                      const int pj = detail::pad_index(j * stride + vv - pad,
                                                       wd, pad_mode);
                      if (pj < 0) continue;
                      DW[u * k + vv] += g * Xc[pi * wd + pj];
                    }
                  }
                }
            }
          pw->seeded = true;
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w) {
  return conv2d_strided(x, w, 1);
}

inline Tensor avg_pool2d(const Tensor& x, int stride) {
  if (x.shape().size() != 3)
    throw ShapeError("avg_pool2d: input must be [c,h,w], got " +
                     shape_str(x.shape()));
  if (stride != 2 && stride != 4)
    throw ConfigError("avg_pool2d: stride must be 2 or 4");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h % stride != 0 || w % stride != 0)
    throw ShapeError("avg_pool2d: spatial size " + shape_str(x.shape()) +
                     " not divisible by stride " + std::to_string(stride));
  const int oh = h / stride, ow = w / stride;
  const double inv = 1.0 / (stride * stride);
  std::vector<double> v(static_cast<size_t>(c) * oh * ow, 0.0);
  const double* X = x.values().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int u = 0; u < stride; ++u)
          for (int vv = 0; vv < stride; ++vv)
            acc += X[(static_cast<size_t>(ch) * h + i * stride + u) * w +
                     j * stride + vv];
        v[(static_cast<size_t>(ch) * oh + i) * ow + j] = acc * inv;
      }
  auto px = x.node();
  return make_op({c, oh, ow}, std::move(v), {px},
                 [px, c, h, w, oh, ow, stride, inv](Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (int ch = 0; ch < c; ++ch)
                     for (int i = 0; i < oh; ++i)
                       for (int j = 0; j < ow; ++j) {
                         const double g =
                             self.grad[(static_cast<size_t>(ch) * oh + i) *
                                           ow +
                                       j] *
                             inv;
                         for (int u = 0; u < stride; ++u)
                           for (int vv = 0; vv < stride; ++vv)
                             px->grad[(static_cast<size_t>(ch) * h +
                                       i * stride + u) *
                                          w +
                                      j * stride + vv] += g;
                       }
                   px->seeded = true;
                 });
}

// Align-corners-false bilinear interpolation to (th, tw); targets must be at
// least the current extents. Constant maps stay constant exactly.
inline Tensor bilinear_upsample(const Tensor& x, int th, int tw) {
  if (x.shape().size() != 3)
    throw ShapeError("bilinear_upsample: input must be [c,h,w], got " +
                     shape_str(x.shape()));
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (th < h || tw < w)
    throw ShapeError("bilinear_upsample: target " + std::to_string(th) + "x" +
                     std::to_string(tw) + " smaller than source " +
                     shape_str(x.shape()));
  // Precompute per-axis neighbor indices and weights.
  std::vector<int> ix0(tw), ix1(tw);
  std::vector<double> fx(tw);
  for (int j = 0; j < tw; ++j) {
    double sx = (j + 0.5) * static_cast<double>(w) / tw - 0.5;
    sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
    ix0[j] = static_cast<int>(std::floor(sx));
    ix1[j] = std::min(ix0[j] + 1, w - 1);
    fx[j] = sx - ix0[j];
  }
  std::vector<int> iy0(th), iy1(th);
  std::vector<double> fy(th);
  for (int i = 0; i < th; ++i) {
    double sy = (i + 0.5) * static_cast<double>(h) / th - 0.5;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
    iy0[i] = static_cast<int>(std::floor(sy));
    iy1[i] = std::min(iy0[i] + 1, h - 1);
    fy[i] = sy - iy0[i];
  }
  std::vector<double> v(static_cast<size_t>(c) * th * tw);
  const double* X = x.values().data();
  for (int ch = 0; ch < c; ++ch) {
    const double* Xc = X + static_cast<size_t>(ch) * h * w;
    double* Y = v.data() + static_cast<size_t>(ch) * th * tw;
    for (int i = 0; i < th; ++i)
      for (int j = 0; j < tw; ++j) {
        const double a = Xc[iy0[i] * w + ix0[j]];
        const double b = Xc[iy0[i] * w + ix1[j]];
        const double cc = Xc[iy1[i] * w + ix0[j]];
        const double d = Xc[iy1[i] * w + ix1[j]];
        const double top = a + (b - a) * fx[j];
        const double bot = cc + (d - cc) * fx[j];
        Y[i * tw + j] = top + (bot - top) * fy[i];
      }
  }
  auto px = x.node();
  return make_op(
      {c, th, tw}, std::move(v), {px},
      [px, c, h, w, th, tw, ix0, ix1, fx, iy0, iy1, fy](Node& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
          double* DX = px->grad.data() + static_cast<size_t>(ch) * h * w;
          const double* G = self.grad.data() + static_cast<size_t>(ch) * th * tw;
          for (int i = 0; i < th; ++i)
            for (int j = 0; j < tw; ++j) {
              const double g = G[i * tw + j];
              if (g == 0.0) continue;
              const double wx1 = fx[j], wx0 = 1.0 - fx[j];
              const double wy1 = fy[i], wy0 = 1.0 - fy[i];
              DX[iy0[i] * w + ix0[j]] += g * wy0 * wx0;
              DX[iy0[i] * w + ix1[j]] += g * wy0 * wx1;
              DX[iy1[i] * w + ix0[j]] += g * wy1 * wx0;
              DX[iy1[i] * w + ix1[j]] += g * wy1 * wx1;
            }
        }
        px->seeded = true;
      });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

constexpr double kBceEps = 1e-12;

// Mean binary cross-entropy with clamped probabilities. Targets may be soft.
inline Tensor bce_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred.shape(), target.shape(), "bce_loss");
  for (double t : target.values())
    if (t < 0.0 || t > 1.0)
      throw DataError("bce_loss: target value " + std::to_string(t) +
                      " outside [0,1]");
  const size_t n = pred.values().size();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double p =
        std::min(std::max(pred.values()[i], kBceEps), 1.0 - kBceEps);
    const double t = target.values()[i];
    acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  auto pp = pred.node(), pt = target.node();
  return make_op({1}, {acc / static_cast<double>(n)}, {pp, pt},
                 [pp, pt, n](Node& self) {
                   const double g = self.grad[0] / static_cast<double>(n);
                   if (pp->requires_grad) {
                     pp->ensure_grad();
                     for (size_t i = 0; i < n; ++i) {
                       const double p = std::min(
                           std::max(pp->value[i], kBceEps), 1.0 - kBceEps);
                       const double t = pt->value[i];
                       pp->grad[i] += g * (p - t) / (p * (1.0 - p));
                     }
                     pp->seeded = true;
                   }
                   if (pt->requires_grad) {
                     pt->ensure_grad();
                     for (size_t i = 0; i < n; ++i) {
                       const double p = std::min(
                           std::max(pp->value[i], kBceEps), 1.0 - kBceEps);
                       pt->grad[i] += g * (std::log(1.0 - p) - std::log(p));
                     }
                     pt->seeded = true;
                   }
                 });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences at x. Probes every element by default; for expensive
// composites, max_probes > 0 checks a seeded random subset. Returns the
// maximum relative error, with denominators floored at 1e-8.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h = 1e-5,
                         int max_probes = -1, uint64_t probe_seed = 7) {
  Tensor xl = Tensor::from(x.shape(), x.values(), true);
  std::vector<double> analytic;
  {
    Graph g;
    RecordScope rec(g);
    Tensor y = f(xl);
    if (y.size() != 1)
      throw ShapeError("grad_check: f must return a scalar");
    g.backward(y.node());
    analytic = xl.grad();
  }
  std::vector<size_t> probes;
  const size_t n = x.values().size();
  if (max_probes > 0 && static_cast<size_t>(max_probes) < n) {
    Rng rng(probe_seed);
    for (int i = 0; i < max_probes; ++i)
      probes.push_back(static_cast<size_t>(rng.next_u64() % n));
    std::sort(probes.begin(), probes.end());
    probes.erase(std::unique(probes.begin(), probes.end()), probes.end());
  } else {
    probes.resize(n);
    std::iota(probes.begin(), probes.end(), size_t{0});
  }
  double max_rel = 0.0;
  NoGradScope no_grad;
  std::vector<double> vals = x.values();
  for (size_t i : probes) {
    const double keep = vals[i];
    vals[i] = keep + h;
    const double fp = f(Tensor::from(x.shape(), vals)).item();
    vals[i] = keep - h;
    const double fm = f(Tensor::from(x.shape(), vals)).item();
    vals[i] = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace affnet
