#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a Node. Nodes created while a Graph scope is
// active and fed by at least one grad-requiring input are recorded on that
// Graph (a tape, in execution order, which is automatically a topological
// order). Graph::backward seeds a scalar loss with gradient 1 and sweeps the
// tape once in reverse; each node's backward closure accumulates into its
// parents' grad buffers. Values are double precision; on-disk serialization
// is float32 (see save_tnsr / load_tnsr).
//
// Concurrency: a Graph and the tensors recorded on it belong to one thread.
// The active-graph pointer is thread_local, so distinct threads may run
// distinct graphs at the same time without sharing.

#include <cstring>
#include <functional>
#include <memory>

#include "affnet/common.hpp"

namespace affnet {

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
  long long n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void require_same_shape(const Shape& a, const Shape& b,
                               const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // lazily allocated, same length as value
  bool requires_grad = false;
  bool seeded = false;  // has received any gradient during the current sweep
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  void accumulate(const std::vector<double>& g) {
    ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    seeded = true;
  }
};

class Graph;

namespace detail {
inline thread_local std::vector<Graph*> g_graph_stack;
}  // namespace detail

// Tape of executed operations. Destroying the Graph releases intermediate
// nodes (leaves referenced elsewhere survive; their grads persist until
// explicitly cleared, so gradients accumulate across backward passes).
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(std::shared_ptr<Node> n) { nodes_.push_back(std::move(n)); }
  size_t num_nodes() const { return nodes_.size(); }

  static Graph* active() {
    return detail::g_graph_stack.empty() ? nullptr
                                         : detail::g_graph_stack.back();
  }

  // Seeds `out` with `seed` (d loss / d out) and sweeps the tape once.
  void backward_with_seed(const std::shared_ptr<Node>& out,
                          const std::vector<double>& seed) {
    if (seed.size() != out->value.size())
      throw ShapeError("backward: seed size mismatch");
    out->accumulate(seed);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.seeded && n.backward) n.backward(n);
    }
  }

  void backward(const std::shared_ptr<Node>& loss) {
    if (loss->value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(loss->shape));
    backward_with_seed(loss, {1.0});
  }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

// RAII: makes `g` the active recording target for the current thread.
class RecordScope {
 public:
  explicit RecordScope(Graph& g) { detail::g_graph_stack.push_back(&g); }
  ~RecordScope() { detail::g_graph_stack.pop_back(); }
  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;
};

// RAII: disables recording (used by fixed-point solvers and optimizers).
class NoGradScope {
 public:
  NoGradScope() { detail::g_graph_stack.push_back(nullptr); }
  ~NoGradScope() { detail::g_graph_stack.pop_back(); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    if (static_cast<long long>(values.size()) != numel(shape))
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto count = numel(shape);
    return from(std::move(shape), std::vector<double>(count, 0.0),
                requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto count = numel(shape);
    return from(std::move(shape), std::vector<double>(count, v),
                requires_grad);
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long long size() const { return static_cast<long long>(node_->value.size()); }
  const std::vector<double>& values() const { return node_->value; }
  // Mutation is reserved for the optimizer (single writer, between graphs).
  std::vector<double>& mutable_values() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }

  double item() const {
    if (node_->value.size() != 1)
      throw ShapeError("Tensor::item: not a scalar, shape " +
                       shape_str(node_->shape));
    return node_->value[0];
  }

  // Gradient w.r.t. this tensor after a backward pass; zeros if none reached.
  std::vector<double> grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return std::vector<double>(node_->value.size(), 0.0);
  }

  void zero_grad() {
    node_->grad.clear();
    node_->seeded = false;
  }

 private:
  std::shared_ptr<Node> node_;
};

// Central factory for op results. When no graph is recording (or no input
// needs gradients) the parents and closure are dropped so solver loops don't
// retain history.
inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  if (static_cast<long long>(value.size()) != numel(shape))
    throw ShapeError("make_op: value size does not match shape");
  n->shape = std::move(shape);
  n->value = std::move(value);
  Graph* g = Graph::active();
  bool needs = false;
  if (g != nullptr)
    for (const auto& p : parents)
      if (p->requires_grad) {
        needs = true;
        break;
      }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
    g->record(n);
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// TNSR serialization: one text header line "TNSR v1 <ndim> <extents...>\n"
// followed by row-major little-endian float32 payload.
// ---------------------------------------------------------------------------

inline std::string tnsr_bytes(const Shape& shape,
                              const std::vector<double>& values) {
  std::ostringstream head;
  head << "TNSR v1 " << shape.size();
  for (int e : shape) head << " " << e;
  head << "\n";
  std::string out = head.str();
  out.reserve(out.size() + values.size() * 4);
  for (double v : values) {
    float f = static_cast<float>(v);
    char buf[4];
    std::memcpy(buf, &f, 4);
    out.append(buf, 4);
  }
  return out;
}

inline void save_tnsr(const std::filesystem::path& path, const Tensor& t) {
  atomic_write_file(path, tnsr_bytes(t.shape(), t.values()));
}

inline Tensor load_tnsr(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  size_t nl = bytes.find('\n');
  if (nl == std::string::npos)
    throw DataError("TNSR: missing header line in " + path.string());
  std::istringstream head(bytes.substr(0, nl));
  std::string magic, version;
  int ndim = -1;
  head >> magic >> version >> ndim;
  if (magic != "TNSR" || version != "v1")
    throw DataError("TNSR: bad magic/version in " + path.string());
  if (ndim < 0 || ndim > 8)
    throw DataError("TNSR: implausible ndim in " + path.string());
  Shape shape(static_cast<size_t>(ndim));
  for (int i = 0; i < ndim; ++i) {
    if (!(head >> shape[i]) || shape[i] <= 0)
      throw DataError("TNSR: bad extent in " + path.string());
  }
  const long long count = ndim == 0 ? 1 : numel(shape);
  if (ndim == 0) shape = {1};
  const size_t payload = bytes.size() - nl - 1;
  if (payload != static_cast<size_t>(count) * 4)
    throw DataError("TNSR: payload of " + std::to_string(payload) +
                    " bytes does not match header of " + path.string() +
                    " (byte offset " + std::to_string(nl + 1) + ")");
  std::vector<double> values(static_cast<size_t>(count));
  const char* src = bytes.data() + nl + 1;
  for (long long i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, src + i * 4, 4);
    values[static_cast<size_t>(i)] = static_cast<double>(f);
  }
  return Tensor::from(shape, std::move(values));
}

}  // namespace affnet
