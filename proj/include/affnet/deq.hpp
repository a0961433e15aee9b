#pragma once

// Deep-equilibrium fusion: a multi-source attention/FFN update map, a flat
// fixed-point solver (Anderson acceleration with damped-Picard fallback), an
// implicit backward pass that solves the adjoint equation instead of
// differentiating through solver iterations, and convergence diagnostics.

#include <deque>
#include <limits>
#include <optional>

#include "affnet/blocks.hpp"

namespace affnet {

struct SolverConfig {
  double tol = 1e-5;
  int max_iter = 40;
  int anderson_memory = 5;
  double damping = 0.5;
};

struct DEQTrace {
  int iterations = 0;
  std::vector<double> residuals;  // ‖f(z_k)−z_k‖ / (‖z_k‖+ε), one per iteration
  bool converged = false;
  std::string solver;
  std::vector<std::string> warnings;
};

// Divergence (non-finite iterate) during a fixed-point solve; carries the
// partial trace for diagnostics.
class DivergenceError : public NumericError {
 public:
  DEQTrace trace;
  DivergenceError(const std::string& msg, DEQTrace t)
      : NumericError(msg), trace(std::move(t)) {}
};

namespace detail {

constexpr double kResidualEps = 1e-8;

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Gaussian elimination with partial pivoting for the tiny Anderson systems.
inline bool solve_linear(std::vector<double> a, std::vector<double> b,
                         std::vector<double>& x, int n) {
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
    if (std::abs(a[pivot * n + col]) < 1e-300) return false;
    if (pivot != col) {
      for (int j = 0; j < n; ++j) std::swap(a[col * n + j], a[pivot * n + j]);
      std::swap(b[col], b[pivot]);
    }
    for (int r = col + 1; r < n; ++r) {
      const double m = a[r * n + col] / a[col * n + col];
      for (int j = col; j < n; ++j) a[r * n + j] -= m * a[col * n + j];
      b[r] -= m * b[col];
    }
  }
  x.assign(n, 0.0);
  for (int r = n - 1; r >= 0; --r) {
    double s = b[r];
    for (int j = r + 1; j < n; ++j) s -= a[r * n + j] * x[j];
    x[r] = s / (a[r * n + r]);
    if (!std::isfinite(x[r])) return false;
  }
  return true;
}

// Mixes the iterate history; nullopt when the least-squares system is
// unusable and the caller should take a plain damped step instead.
inline std::optional<std::vector<double>> anderson_mix(
    const std::deque<std::vector<double>>& zs,
    const std::deque<std::vector<double>>& fs, double beta) {
  const int m = static_cast<int>(zs.size());
  const size_t n = zs.back().size();
  std::vector<std::vector<double>> res(m);
  for (int i = 0; i < m; ++i) {
    res[i].resize(n);
    for (size_t j = 0; j < n; ++j) res[i][j] = fs[i][j] - zs[i][j];
  }
  std::vector<double> h(static_cast<size_t>(m) * m, 0.0);
  double tr = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      double dot = 0.0;
      for (size_t k = 0; k < n; ++k) dot += res[i][k] * res[j][k];
      h[i * m + j] = dot;
      h[j * m + i] = dot;
      if (i == j) tr += dot;
    }
  // Relative-only regularization: an absolute floor would dominate H once
  // residuals are small (entries scale as residual²) and stall convergence.
  const double jitter = 1e-10 * tr / m;
  for (int i = 0; i < m; ++i) h[i * m + i] += jitter;

  std::vector<double> alpha;
  if (!solve_linear(h, std::vector<double>(m, 1.0), alpha, m))
    return std::nullopt;
  double s = 0.0;
  for (double a : alpha) s += a;
  if (!std::isfinite(s) || std::abs(s) < 1e-12) return std::nullopt;
  for (double& a : alpha) a /= s;

  std::vector<double> z_next(n, 0.0);
  for (int i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      z_next[j] += alpha[i] * ((1.0 - beta) * zs[i][j] + beta * fs[i][j]);
  if (!all_finite(z_next)) return std::nullopt;
  return z_next;
}

}  // namespace detail

inline void validate_solver_config(const SolverConfig& cfg) {
  if (!(cfg.tol > 0.0)) throw ConfigError("solver tol must be positive");
  if (cfg.max_iter < 1) throw ConfigError("solver max_iter must be >= 1");
  if (cfg.anderson_memory < 1)
    throw ConfigError("solver anderson_memory must be >= 1");
  if (!(cfg.damping > 0.0 && cfg.damping <= 1.0))
    throw ConfigError("solver damping must be in (0, 1]");
}

using FlatFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Solves z = F(z) from the given starting iterate (modified in place). Each
// iteration evaluates F once, records the relative residual at the current
// iterate, and accepts it when the residual is below tol, so the reported
// residual is measured at the returned point. On non-convergence z holds the
// best iterate seen.
inline DEQTrace fixed_point_solve(const FlatFn& f, std::vector<double>& z,
                                  const SolverConfig& cfg, bool anderson) {
  validate_solver_config(cfg);
  DEQTrace trace;
  trace.solver = anderson ? "anderson" : "picard";

  std::deque<std::vector<double>> hist_z, hist_f;
  std::vector<double> best_z = z;
  double best_r = std::numeric_limits<double>::infinity();

  for (int k = 0; k < cfg.max_iter; ++k) {
    std::vector<double> fz = f(z);
    if (fz.size() != z.size())
      throw ShapeError("fixed_point_solve: map changed dimension");
    if (!detail::all_finite(fz))
      throw DivergenceError(
          "fixed_point_solve: non-finite iterate at iteration " +
              std::to_string(k),
          trace);
    std::vector<double> diff(z.size());
    for (size_t i = 0; i < z.size(); ++i) diff[i] = fz[i] - z[i];
    const double r = detail::l2_norm(diff) /
                     (detail::l2_norm(z) + detail::kResidualEps);
    trace.residuals.push_back(r);
    ++trace.iterations;
    if (r < best_r) {
      best_r = r;
      best_z = z;
    }
    if (r < cfg.tol) {
      trace.converged = true;
      return trace;
    }

    std::optional<std::vector<double>> next;
    if (anderson) {
      hist_z.push_back(z);
      hist_f.push_back(fz);
      if (static_cast<int>(hist_z.size()) > cfg.anderson_memory) {
        hist_z.pop_front();
        hist_f.pop_front();
      }
      next = detail::anderson_mix(hist_z, hist_f, cfg.damping);
    }
    if (!next) {
      next.emplace(z.size());
      for (size_t i = 0; i < z.size(); ++i)
        (*next)[i] = (1.0 - cfg.damping) * z[i] + cfg.damping * fz[i];
    }
    z = std::move(*next);
  }
  z = std::move(best_z);
  return trace;
}

// ---------------------------------------------------------------------------
// The equilibrium update map: per-source input and state projections feed a
// joint single-head attention over all tokens, followed by a shared
// two-layer FFN with residual: f(Z;X) = FFN(Z + Attn(Q,K,V)) + Z.
// ---------------------------------------------------------------------------

namespace detail {

// Orthonormal square matrix via twice-applied modified Gram-Schmidt.
inline std::vector<double> random_orthogonal(int c, Rng& rng) {
  std::vector<double> q(static_cast<size_t>(c) * c);
  for (double& v : q) v = rng.gaussian();
  for (int pass = 0; pass < 2; ++pass) {
    for (int col = 0; col < c; ++col) {
      for (int prev = 0; prev < col; ++prev) {
        double dot = 0.0;
        for (int r = 0; r < c; ++r) dot += q[r * c + col] * q[r * c + prev];
        for (int r = 0; r < c; ++r) q[r * c + col] -= dot * q[r * c + prev];
      }
      double norm = 0.0;
      for (int r = 0; r < c; ++r) norm += q[r * c + col] * q[r * c + col];
      norm = std::sqrt(norm);
      if (norm < 1e-12) {  // degenerate draw; replace with a unit column
        for (int r = 0; r < c; ++r) q[r * c + col] = r == col % c ? 1.0 : 0.0;
        norm = 1.0;
      }
      for (int r = 0; r < c; ++r) q[r * c + col] /= norm;
    }
  }
  return q;
}

inline Linear projection_with_std(int c, Rng& rng, double std_dev) {
  Linear lin;
  lin.w = init_param({c, c}, rng, std_dev);
  return lin;
}

}  // namespace detail

struct DEQOperator {
  int c = 0;
  int sources = 0;
  std::vector<Linear> xq, xk, xv;  // per-source input projections (no bias)
  std::vector<Linear> zq, zk, zv;  // per-source state projections (no bias)
  Linear ffn_in, ffn_out;          // shared FFN, width c throughout

  DEQOperator() = default;

  // The FFN pair is initialized as W_in = a·Q, W_out = −b·Qᵀ with Q
  // orthonormal and ab = ffn_gain: its Jacobian is −ab·QᵀDQ with D the
  // (positive, near 0.5) activation-derivative diagonal, which pulls the
  // update map's spectrum below 1 so the iteration starts contractive.
  // Attention projections get small spectral scales, the state side smaller
  // than the input side. Contractivity is encouraged, not enforced; training
  // can drift and divergence is surfaced through the trace.
  DEQOperator(int sources_, int c_, Rng& rng, double ffn_gain = 1.0) {
    if (sources_ < 2 || sources_ > 3)
      throw ConfigError("equilibrium operator needs 2 or 3 sources, got " +
                        std::to_string(sources_));
    if (c_ < 1) throw ConfigError("equilibrium operator needs c >= 1");
    c = c_;
    sources = sources_;
    const double x_std = 0.9 / c;
    const double z_std = 0.45 / c;
    for (int i = 0; i < sources; ++i) {
      xq.push_back(detail::projection_with_std(c, rng, x_std));
      xk.push_back(detail::projection_with_std(c, rng, x_std));
      xv.push_back(detail::projection_with_std(c, rng, x_std));
      zq.push_back(detail::projection_with_std(c, rng, z_std));
      zk.push_back(detail::projection_with_std(c, rng, z_std));
      zv.push_back(detail::projection_with_std(c, rng, z_std));
    }
    const std::vector<double> q = detail::random_orthogonal(c, rng);
    const double a = std::sqrt(ffn_gain), b = std::sqrt(ffn_gain);
    std::vector<double> w_in(q.size()), w_out(q.size());
    for (int r = 0; r < c; ++r)
      for (int col = 0; col < c; ++col) {
        w_in[r * c + col] = a * q[r * c + col];
        w_out[r * c + col] = -b * q[col * c + r];
      }
    ffn_in.w = Tensor::from({c, c}, std::move(w_in), true);
    ffn_in.b = Tensor::zeros({c}, true);
    ffn_out.w = Tensor::from({c, c}, std::move(w_out), true);
    ffn_out.b = Tensor::zeros({c}, true);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    for (int i = 0; i < sources; ++i) {
      const std::string s = prefix + ".src" + std::to_string(i);
      xq[i].collect(s + ".xq", out);
      xk[i].collect(s + ".xk", out);
      xv[i].collect(s + ".xv", out);
      zq[i].collect(s + ".zq", out);
      zk[i].collect(s + ".zk", out);
      zv[i].collect(s + ".zv", out);
    }
    ffn_in.collect(prefix + ".ffn_in", out);
    ffn_out.collect(prefix + ".ffn_out", out);
  }

  // Value-only copy with gradients disconnected; used inside adjoint solves
  // so repeated inner backward passes cannot touch the live parameters.
  DEQOperator detached() const {
    auto det = [](const Linear& lin) {
      Linear out;
      out.w = Tensor::from(lin.w.shape(), lin.w.values(), false);
      if (lin.b.defined())
        out.b = Tensor::from(lin.b.shape(), lin.b.values(), false);
      return out;
    };
    DEQOperator op;
    op.c = c;
    op.sources = sources;
    for (int i = 0; i < sources; ++i) {
      op.xq.push_back(det(xq[i]));
      op.xk.push_back(det(xk[i]));
      op.xv.push_back(det(xv[i]));
      op.zq.push_back(det(zq[i]));
      op.zk.push_back(det(zk[i]));
      op.zv.push_back(det(zv[i]));
    }
    op.ffn_in = det(ffn_in);
    op.ffn_out = det(ffn_out);
    return op;
  }
};

inline std::vector<Tensor> f_theta(const std::vector<Tensor>& z_blocks,
                                   const std::vector<Tensor>& x_blocks,
                                   const DEQOperator& op) {
  if (static_cast<int>(z_blocks.size()) != op.sources ||
      static_cast<int>(x_blocks.size()) != op.sources)
    throw ShapeError("f_theta: got " + std::to_string(z_blocks.size()) +
                     " state and " + std::to_string(x_blocks.size()) +
                     " input blocks for a " + std::to_string(op.sources) +
                     "-source operator");
  std::vector<int> sizes;
  for (int i = 0; i < op.sources; ++i) {
    const auto& zs = z_blocks[i].shape();
    if (zs.size() != 2 || zs[1] != op.c)
      throw ShapeError("f_theta: block " + std::to_string(i) + " has shape " +
                       shape_str(zs) + ", want [tokens x " +
                       std::to_string(op.c) + "]");
    require_same_shape(zs, x_blocks[i].shape(), "f_theta");
    sizes.push_back(zs[0]);
  }

  std::vector<Tensor> qs, ks, vs;
  for (int i = 0; i < op.sources; ++i) {
    qs.push_back(add(op.xq[i].forward(x_blocks[i]),
                     op.zq[i].forward(z_blocks[i])));
    ks.push_back(add(op.xk[i].forward(x_blocks[i]),
                     op.zk[i].forward(z_blocks[i])));
    vs.push_back(add(op.xv[i].forward(x_blocks[i]),
                     op.zv[i].forward(z_blocks[i])));
  }
  Tensor q = concat(qs, 0), k = concat(ks, 0), v = concat(vs, 0);
  Tensor scores =
      scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(static_cast<double>(op.c)));
  Tensor attended = matmul(softmax(scores, 1), v);
  Tensor z_joint = concat(z_blocks, 0);
  Tensor u = add(z_joint, attended);
  Tensor ffn = op.ffn_out.forward(gelu(op.ffn_in.forward(u)));
  return split(add(ffn, z_joint), 0, sizes);
}

namespace detail {

inline std::vector<double> pack_blocks(const std::vector<Tensor>& blocks) {
  std::vector<double> flat;
  size_t n = 0;
  for (const auto& b : blocks) n += b.values().size();
  flat.reserve(n);
  for (const auto& b : blocks)
    flat.insert(flat.end(), b.values().begin(), b.values().end());
  return flat;
}

inline std::vector<Tensor> unpack_blocks(const std::vector<double>& flat,
                                         const std::vector<Shape>& shapes,
                                         bool requires_grad = false) {
  std::vector<Tensor> blocks;
  size_t off = 0;
  for (const auto& s : shapes) {
    const size_t n = static_cast<size_t>(numel(s));
    blocks.push_back(Tensor::from(
        s, std::vector<double>(flat.begin() + off, flat.begin() + off + n),
        requires_grad));
    off += n;
  }
  return blocks;
}

}  // namespace detail

// Solves Z = f(Z;X) from Z⁰ = 0. Runs outside any recording graph; the
// returned blocks are plain tensors.
inline std::pair<std::vector<Tensor>, DEQTrace> deq_solve(
    const std::vector<Tensor>& x_blocks, const DEQOperator& op,
    const SolverConfig& cfg, bool use_anderson = true) {
  std::vector<Shape> shapes;
  size_t n = 0;
  for (const auto& x : x_blocks) {
    if (!detail::all_finite(x.values()))
      throw NumericError("deq_solve: non-finite input");
    shapes.push_back(x.shape());
    n += x.values().size();
  }

  NoGradScope no_grad;
  std::vector<Tensor> x_det;
  for (const auto& x : x_blocks)
    x_det.push_back(Tensor::from(x.shape(), x.values(), false));

  FlatFn f = [&](const std::vector<double>& zf) {
    return detail::pack_blocks(
        f_theta(detail::unpack_blocks(zf, shapes), x_det, op));
  };
  std::vector<double> z(n, 0.0);
  DEQTrace trace = fixed_point_solve(f, z, cfg, use_anderson);
  return {detail::unpack_blocks(z, shapes), trace};
}

// Solves the adjoint equation g = grad_out + Jᵀg given a Jᵀ-product. Falls
// back to a 25-term truncated Neumann sum (with a recorded warning) when the
// solver does not converge.
inline std::pair<std::vector<double>, DEQTrace> adjoint_solve(
    const FlatFn& jt_product, const std::vector<double>& grad_out,
    const SolverConfig& cfg) {
  FlatFn f = [&](const std::vector<double>& g) {
    std::vector<double> jg = jt_product(g);
    if (jg.size() != grad_out.size())
      throw ShapeError("adjoint_solve: product changed dimension");
    for (size_t i = 0; i < jg.size(); ++i) jg[i] += grad_out[i];
    return jg;
  };
  std::vector<double> g(grad_out.size(), 0.0);
  DEQTrace trace = fixed_point_solve(f, g, cfg, true);
  if (!trace.converged) {
    trace.warnings.push_back(
        "adjoint fixed point did not converge; truncated Neumann fallback "
        "(25 terms)");
    g.assign(grad_out.size(), 0.0);
    for (int k = 0; k < 25; ++k) {
      g = f(g);
      if (!detail::all_finite(g))
        throw DivergenceError("adjoint Neumann fallback diverged", trace);
    }
  }
  return {g, trace};
}

// Implicit backward for an equilibrium point: solves the adjoint equation at
// z_star with parameters and inputs held fixed, then pushes the adjoint
// through a single application of the update map so gradients land on the
// live x blocks and operator parameters. Returns the adjoint trace.
inline DEQTrace deq_backward(const std::vector<double>& grad_out_flat,
                             const std::vector<Tensor>& z_star,
                             const std::vector<Tensor>& x_blocks,
                             const DEQOperator& op, const SolverConfig& cfg) {
  std::vector<Shape> shapes;
  size_t n = 0;
  for (const auto& z : z_star) {
    shapes.push_back(z.shape());
    n += z.values().size();
  }
  if (grad_out_flat.size() != n)
    throw ShapeError("deq_backward: gradient size mismatch");

  DEQOperator op_det = op.detached();
  std::vector<Tensor> x_det;
  for (const auto& x : x_blocks)
    x_det.push_back(Tensor::from(x.shape(), x.values(), false));
  const std::vector<double> z_flat = detail::pack_blocks(z_star);

  FlatFn jt_product = [&](const std::vector<double>& g) {
    Graph inner;
    RecordScope scope(inner);
    std::vector<Tensor> z_vars = detail::unpack_blocks(z_flat, shapes, true);
    Tensor joint = concat(f_theta(z_vars, x_det, op_det), 0);
    inner.backward_with_seed(joint.node(), g);
    std::vector<double> jg;
    jg.reserve(n);
    for (const auto& zv : z_vars) {
      const auto grad = zv.grad();
      jg.insert(jg.end(), grad.begin(), grad.end());
    }
    return jg;
  };
  auto [adjoint, trace] = adjoint_solve(jt_product, grad_out_flat, cfg);

  Graph push;
  RecordScope scope(push);
  std::vector<Tensor> z_fixed = detail::unpack_blocks(z_flat, shapes, false);
  Tensor joint = concat(f_theta(z_fixed, x_blocks, op), 0);
  push.backward_with_seed(joint.node(), adjoint);
  return trace;
}

// Equilibrium fusion as a differentiable op: forward solves the fixed point
// off-tape; the recorded node routes its output gradient through the
// implicit backward above. Returns the enriched blocks in source order.
inline std::pair<std::vector<Tensor>, DEQTrace> deq_fuse(
    const std::vector<Tensor>& sources, const DEQOperator& op,
    const SolverConfig& cfg) {
  auto [z_blocks, trace] = deq_solve(sources, op, cfg);

  std::vector<int> sizes;
  int total = 0;
  for (const auto& z : z_blocks) {
    sizes.push_back(z.shape()[0]);
    total += z.shape()[0];
  }
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& s : sources) parents.push_back(s.node());
  ParamList params;
  op.collect("op", params);
  for (const auto& p : params) parents.push_back(p.tensor.node());

  std::vector<Tensor> z_star = z_blocks;  // shared-value copies for the closure
  std::vector<Tensor> sources_copy = sources;
  DEQOperator op_copy = op;
  SolverConfig cfg_copy = cfg;
  Tensor joint = make_op(
      {total, op.c}, detail::pack_blocks(z_blocks), std::move(parents),
      [z_star, sources_copy, op_copy, cfg_copy](Node& self) {
        deq_backward(self.grad, z_star, sources_copy, op_copy, cfg_copy);
      });
  return {split(joint, 0, sizes), trace};
}

// ---------------------------------------------------------------------------
// Trace CSV dump: rows of call_id,solver,iter,residual.
// ---------------------------------------------------------------------------

inline std::string trace_csv_header() { return "call_id,solver,iter,residual\n"; }

inline void append_trace_csv(std::string& csv, int call_id,
                             const DEQTrace& trace) {
  for (int i = 0; i < trace.iterations; ++i) {
    char row[128];
    std::snprintf(row, sizeof row, "%d,%s,%d,%.9e\n", call_id,
                  trace.solver.c_str(), i, trace.residuals[i]);
    csv += row;
  }
}

}  // namespace affnet
