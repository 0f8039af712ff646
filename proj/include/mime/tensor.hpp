#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mime/random.hpp"

namespace mime {

// All tensors are rank-2; a row vector is [1 x n] and a scalar is [1 x 1].
struct Shape {
  int rows = 0;
  int cols = 0;

  friend bool operator==(const Shape&, const Shape&) = default;
  int64_t numel() const { return static_cast<int64_t>(rows) * cols; }
  std::string str() const {
    return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
  }
};

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument("mime: " + msg);
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

// A trainable array living outside any tape. Gradients accumulate here
// across backward passes until zero_grad().
template <typename S>
struct Parameter {
  std::string name;
  int index = -1;  // position within the owning store
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;

  S* data() { return value.data(); }
  const S* data() const { return value.data(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <typename S>
class ParameterStore {
 public:
  Parameter<S>& create(const std::string& name, Shape shape) {
    require(shape.rows > 0 && shape.cols > 0, "parameter " + name + ": extents must be positive");
    require(by_name_.find(name) == by_name_.end(), "duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->index = static_cast<int>(params_.size());
    p->shape = shape;
    p->value.assign(static_cast<size_t>(shape.numel()), S(0));
    p->grad.assign(static_cast<size_t>(shape.numel()), S(0));
    Parameter<S>* raw = p.get();
    by_name_[name] = raw;
    params_.push_back(std::move(p));
    return *raw;
  }

  // uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
  Parameter<S>& create_uniform(const std::string& name, Shape shape, int fan_in, Rng& rng) {
    Parameter<S>& p = create(name, shape);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p.value) v = static_cast<S>(rng.uniform(-bound, bound));
    return p;
  }

  Parameter<S>* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }
  const Parameter<S>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  size_t size() const { return params_.size(); }
  Parameter<S>& at(size_t i) { return *params_[i]; }
  const Parameter<S>& at(size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (auto& p : params_) n += p->shape.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::unordered_map<std::string, Parameter<S>*> by_name_;
};

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <typename S>
void gemm_nn(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c,
             int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    S* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = a[static_cast<size_t>(i) * k + p];
      const S* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename S>
void gemm_nt(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c,
             int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<size_t>(i) * k;
    S* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* brow = b + static_cast<size_t>(j) * k;
      S acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename S>
void gemm_tn(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c,
             int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<size_t>(i) * k;
    const S* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      S* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename S>
class Tape;

// Lightweight handle into a tape node.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  int id() const { return id_; }

  const Shape& shape() const;
  std::span<const S> values() const;
  std::span<const S> grad() const;
  bool requires_grad() const;

  // value of a [1 x 1] tensor
  S item() const {
    require(shape().numel() == 1, "item(): tensor " + shape().str() + " is not scalar");
    return values()[0];
  }

 private:
  friend class Tape<S>;
  Tensor(Tape<S>* tape, int id) : tape_(tape), id_(id) {}
  Tape<S>* tape_ = nullptr;
  int id_ = -1;
};

// Execution-ordered record of primitives. Node order is creation order,
// so every operand precedes its consumers and a single reverse sweep
// implements backpropagation.
template <typename S>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<S> storage;    // owned values; empty for parameter leaves
    const S* data = nullptr;   // owned storage or parameter storage
    std::vector<S> grad;       // allocated during backward when requires_grad
    Parameter<S>* param = nullptr;
    std::function<void(Tape&)> backprop;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool finite_checks = false;

  // When set, backward() accumulates leaf gradients into
  // (*grad_sink)[param.index] instead of param.grad. Each slot must already
  // be sized to the parameter's element count. Lets worker threads collect
  // gradients privately and merge them in a fixed order afterwards.
  std::vector<std::vector<S>>* grad_sink = nullptr;

  size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  Tensor<S> input(Shape shape, std::span<const S> values) {
    require(shape.rows > 0 && shape.cols > 0, "input: extents must be positive, got " + shape.str());
    require(static_cast<int64_t>(values.size()) == shape.numel(),
            "input: " + std::to_string(values.size()) + " values for shape " + shape.str());
    auto [id, out] = alloc(shape, false);
    std::copy(values.begin(), values.end(), out);
    return after_op(id, "input");
  }

  Tensor<S> constant(Shape shape, S fill) {
    auto [id, out] = alloc(shape, false);
    std::fill(out, out + shape.numel(), fill);
    return after_op(id, "constant");
  }

  // Leaf viewing parameter storage; gradients flow back into p.grad.
  // Binding the same parameter more than once is fine: every binding's
  // gradient is accumulated.
  Tensor<S> leaf(Parameter<S>& p) {
    Node n;
    n.shape = p.shape;
    n.data = p.value.data();
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Tensor<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  void backward(Tensor<S> loss) {
    require(loss.valid() && loss.tape() == this, "backward: loss is not on this tape");
    require(loss.shape().numel() == 1,
            "backward: loss must be scalar, got " + loss.shape().str());
    require(!backward_done_, "backward: called twice without reset");
    require(nodes_[static_cast<size_t>(loss.id())].requires_grad,
            "backward: loss is not connected to any parameter");
    backward_done_ = true;
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad.assign(static_cast<size_t>(n.shape.numel()), S(0));
    }
    nodes_[static_cast<size_t>(loss.id())].grad[0] = S(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad) continue;
      if (n.backprop) n.backprop(*this);
      if (n.param) {
        S* g = grad_sink ? (*grad_sink)[static_cast<size_t>(n.param->index)].data()
                         : n.param->grad.data();
        for (int64_t j = 0; j < n.shape.numel(); ++j) g[j] += n.grad[static_cast<size_t>(j)];
      }
    }
  }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  // -- helpers used by the op implementations --

  std::pair<int, S*> alloc(Shape shape, bool requires_grad) {
    Node n;
    n.shape = shape;
    n.storage.assign(static_cast<size_t>(shape.numel()), S(0));
    n.data = n.storage.data();
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1, nodes_.back().storage.data()};
  }

  Tensor<S> after_op(int id, const char* op) {
    if (finite_checks) {
      const Node& n = nodes_[static_cast<size_t>(id)];
      for (int64_t j = 0; j < n.shape.numel(); ++j) {
        if (!std::isfinite(static_cast<double>(n.data[j]))) {
          fail(std::string(op) + ": non-finite output at flat index " + std::to_string(j));
        }
      }
    }
    return Tensor<S>(this, id);
  }

  void set_backprop(int id, std::function<void(Tape&)> fn) {
    nodes_[static_cast<size_t>(id)].backprop = std::move(fn);
  }

  // accumulate into a node's grad if that node participates
  S* grad_of(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    return n.grad.empty() ? nullptr : n.grad.data();
  }
  const S* values_of(int id) const { return nodes_[static_cast<size_t>(id)].data; }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename S>
const Shape& Tensor<S>::shape() const {
  return tape_->node(id_).shape;
}
template <typename S>
std::span<const S> Tensor<S>::values() const {
  const auto& n = tape_->node(id_);
  return {n.data, static_cast<size_t>(n.shape.numel())};
}
template <typename S>
std::span<const S> Tensor<S>::grad() const {
  const auto& n = tape_->node(id_);
  return {n.grad.data(), n.grad.size()};
}
template <typename S>
bool Tensor<S>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

// ---------------------------------------------------------------------------
// Primitives. Each op validates shapes, computes values, and registers a
// backward closure capturing node indices only (the node vector may grow).
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Tape<S>& same_tape(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.valid() && b.valid(), "op: tensor handle is empty");
  require(a.tape() == b.tape(), "op: operands live on different tapes");
  return *a.tape();
}

// broadcast kind for elementwise binary ops
enum class Bcast { same, row };  // row: b is [1 x n] applied to each row of a

template <typename S>
Bcast bcast_kind(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.shape().rows == 1 && b.shape().cols == a.shape().cols) return Bcast::row;
  fail(std::string(op) + ": shapes " + a.shape().str() + " and " + b.shape().str() +
       " do not match (cols " + std::to_string(a.shape().cols) + " vs " +
       std::to_string(b.shape().cols) + ")");
}

}  // namespace detail

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> elementwise_binary(const Tensor<S>& a, const Tensor<S>& b, const char* op,
                             FwdFn fwd, BwdFn bwd) {
  Tape<S>& t = detail::same_tape(a, b);
  const auto kind = detail::bcast_kind(a, b, op);
  const Shape sh = a.shape();
  auto [id, out] = t.alloc(sh, a.requires_grad() || b.requires_grad());
  const S* av = a.values().data();
  const S* bv = b.values().data();
  const int rows = sh.rows, cols = sh.cols;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const size_t ai = static_cast<size_t>(i) * cols + j;
      const size_t bi = kind == detail::Bcast::same ? ai : static_cast<size_t>(j);
      out[ai] = fwd(av[ai], bv[bi]);
    }
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), bi = b.id(), kind, rows, cols, bwd](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      const S* av2 = tp.values_of(ai);
      const S* bv2 = tp.values_of(bi);
      S* ga = tp.grad_of(ai);
      S* gb = tp.grad_of(bi);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
          const size_t x = static_cast<size_t>(i) * cols + j;
          const size_t y = kind == detail::Bcast::same ? x : static_cast<size_t>(j);
          S da, db;
          bwd(av2[x], bv2[y], g[x], da, db);
          if (ga) ga[x] += da;
          if (gb) gb[y] += db;
        }
    });
  }
  return t.after_op(id, op);
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise_binary(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S, S, S g, S& da, S& db) { da = g; db = g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise_binary(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S, S, S g, S& da, S& db) { da = g; db = -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise_binary(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S x, S y, S g, S& da, S& db) { da = g * y; db = g * x; });
}

// scale * t + shift, elementwise with scalar attributes
template <typename S>
Tensor<S> affine(const Tensor<S>& a, S scale, S shift) {
  Tape<S>& t = *a.tape();
  const Shape sh = a.shape();
  auto [id, out] = t.alloc(sh, a.requires_grad());
  const S* av = a.values().data();
  for (int64_t j = 0; j < sh.numel(); ++j) out[j] = scale * av[j] + shift;
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), scale, n = sh.numel()](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      S* ga = tp.grad_of(ai);
      if (ga)
        for (int64_t j = 0; j < n; ++j) ga[j] += scale * g[j];
    });
  }
  return t.after_op(id, "affine");
}

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> elementwise_unary(const Tensor<S>& a, const char* op, FwdFn fwd, BwdFn bwd) {
  Tape<S>& t = *a.tape();
  const Shape sh = a.shape();
  auto [id, out] = t.alloc(sh, a.requires_grad());
  const S* av = a.values().data();
  for (int64_t j = 0; j < sh.numel(); ++j) out[j] = fwd(av[j]);
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), n = sh.numel(), bwd](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      const S* x = tp.values_of(ai);
      const S* y = tp.values_of(id);
      S* ga = tp.grad_of(ai);
      if (ga)
        for (int64_t j = 0; j < n; ++j) ga[j] += bwd(x[j], y[j]) * g[j];
    });
  }
  return t.after_op(id, op);
}

// relu'(0) := 0
template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return elementwise_unary(
      a, "relu", [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

inline constexpr double kExpClamp = 30.0;

// inputs clamped to [-30, 30] before exponentiation
template <typename S>
Tensor<S> exp_op(const Tensor<S>& a) {
  return elementwise_unary(
      a, "exp",
      [](S x) {
        const S c = std::clamp(x, S(-kExpClamp), S(kExpClamp));
        return std::exp(c);
      },
      [](S x, S y) { return std::abs(x) <= S(kExpClamp) ? y : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return elementwise_unary(
      a, "sigmoid",
      [](S x) {
        const S c = std::clamp(x, S(-kExpClamp), S(kExpClamp));
        return S(1) / (S(1) + std::exp(-c));
      },
      [](S x, S y) { return std::abs(x) <= S(kExpClamp) ? y * (S(1) - y) : S(0); });
}

template <typename S>
Tensor<S> log_op(const Tensor<S>& a) {
  for (S v : a.values()) require(v > S(0), "log: non-positive input");
  return elementwise_unary(
      a, "log", [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
  Tape<S>& t = detail::same_tape(a, b);
  const Shape sa = a.shape(), sb = b.shape();
  const int m = trans_a ? sa.cols : sa.rows;
  const int ka = trans_a ? sa.rows : sa.cols;
  const int kb = trans_b ? sb.cols : sb.rows;
  const int n = trans_b ? sb.rows : sb.cols;
  require(ka == kb, "matmul: inner dimensions " + std::to_string(ka) + " vs " +
                        std::to_string(kb) + " (" + sa.str() + " * " + sb.str() + ")");
  auto [id, out] = t.alloc({m, n}, a.requires_grad() || b.requires_grad());
  const S* av = a.values().data();
  const S* bv = b.values().data();
  if (!trans_a && !trans_b) {
    detail::gemm_nn(av, bv, out, m, ka, n);
  } else if (!trans_a && trans_b) {
    detail::gemm_nt(av, bv, out, m, ka, n);
  } else if (trans_a && !trans_b) {
    detail::gemm_tn(av, bv, out, sa.rows, m, n);
  } else {
    // (A^T B^T)_ij = sum_p A[p,i] B[j,p]
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        S acc = 0;
        for (int p = 0; p < ka; ++p)
          acc += av[static_cast<size_t>(p) * m + i] * bv[static_cast<size_t>(j) * ka + p];
        out[static_cast<size_t>(i) * n + j] = acc;
      }
  }
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), bi = b.id(), trans_a, trans_b, m, k = ka,
                        n](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      const S* av2 = tp.values_of(ai);
      const S* bv2 = tp.values_of(bi);
      S* ga = tp.grad_of(ai);
      S* gb = tp.grad_of(bi);
      if (!trans_a && !trans_b) {
        if (ga) detail::gemm_nt(g, bv2, ga, m, n, k);   // dA = G B^T
        if (gb) detail::gemm_tn(av2, g, gb, m, k, n);   // dB = A^T G
      } else if (!trans_a && trans_b) {
        if (ga) detail::gemm_nn(g, bv2, ga, m, n, k);   // dA = G B
        if (gb) detail::gemm_tn(g, av2, gb, m, n, k);   // dB = G^T A
      } else if (trans_a && !trans_b) {
        if (ga) detail::gemm_nt(bv2, g, ga, k, n, m);   // dA = B G^T  -> [k x m]
        if (gb) detail::gemm_nn(av2, g, gb, k, m, n);   // dB = A G
      } else {
        if (ga)
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              S acc = 0;
              for (int j = 0; j < n; ++j)
                acc += g[static_cast<size_t>(i) * n + j] * bv2[static_cast<size_t>(j) * k + p];
              ga[static_cast<size_t>(p) * m + i] += acc;
            }
        if (gb)
          for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p) {
              S acc = 0;
              for (int i = 0; i < m; ++i)
                acc += g[static_cast<size_t>(i) * n + j] * av2[static_cast<size_t>(p) * m + i];
              gb[static_cast<size_t>(j) * k + p] += acc;
            }
      }
    });
  }
  return t.after_op(id, "matmul");
}

template <typename S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  require(a.shape().rows == b.shape().rows,
          "concat: row counts differ, " + std::to_string(a.shape().rows) + " vs " +
              std::to_string(b.shape().rows));
  const int rows = a.shape().rows, ca = a.shape().cols, cb = b.shape().cols;
  auto [id, out] = t.alloc({rows, ca + cb}, a.requires_grad() || b.requires_grad());
  const S* av = a.values().data();
  const S* bv = b.values().data();
  for (int i = 0; i < rows; ++i) {
    std::copy(av + static_cast<size_t>(i) * ca, av + static_cast<size_t>(i + 1) * ca,
              out + static_cast<size_t>(i) * (ca + cb));
    std::copy(bv + static_cast<size_t>(i) * cb, bv + static_cast<size_t>(i + 1) * cb,
              out + static_cast<size_t>(i) * (ca + cb) + ca);
  }
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), bi = b.id(), rows, ca, cb](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      S* ga = tp.grad_of(ai);
      S* gb = tp.grad_of(bi);
      for (int i = 0; i < rows; ++i) {
        const S* grow = g + static_cast<size_t>(i) * (ca + cb);
        if (ga)
          for (int j = 0; j < ca; ++j) ga[static_cast<size_t>(i) * ca + j] += grow[j];
        if (gb)
          for (int j = 0; j < cb; ++j) gb[static_cast<size_t>(i) * cb + j] += grow[ca + j];
      }
    });
  }
  return t.after_op(id, "concat");
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1) {
  Tape<S>& t = *a.tape();
  require(0 <= r0 && r0 < r1 && r1 <= a.shape().rows,
          "slice: row range [" + std::to_string(r0) + ", " + std::to_string(r1) +
              ") out of bounds for " + a.shape().str());
  const int cols = a.shape().cols;
  auto [id, out] = t.alloc({r1 - r0, cols}, a.requires_grad());
  const S* av = a.values().data();
  std::copy(av + static_cast<size_t>(r0) * cols, av + static_cast<size_t>(r1) * cols, out);
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), r0, rows = r1 - r0, cols](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      S* ga = tp.grad_of(ai);
      if (ga)
        for (int64_t j = 0; j < static_cast<int64_t>(rows) * cols; ++j)
          ga[static_cast<size_t>(r0) * cols + j] += g[j];
    });
  }
  return t.after_op(id, "slice");
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int c1) {
  Tape<S>& t = *a.tape();
  require(0 <= c0 && c0 < c1 && c1 <= a.shape().cols,
          "slice: column range [" + std::to_string(c0) + ", " + std::to_string(c1) +
              ") out of bounds for " + a.shape().str());
  const int rows = a.shape().rows, cols = a.shape().cols, w = c1 - c0;
  auto [id, out] = t.alloc({rows, w}, a.requires_grad());
  const S* av = a.values().data();
  for (int i = 0; i < rows; ++i)
    std::copy(av + static_cast<size_t>(i) * cols + c0, av + static_cast<size_t>(i) * cols + c1,
              out + static_cast<size_t>(i) * w);
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), c0, rows, cols, w](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      S* ga = tp.grad_of(ai);
      if (ga)
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < w; ++j)
            ga[static_cast<size_t>(i) * cols + c0 + j] += g[static_cast<size_t>(i) * w + j];
    });
  }
  return t.after_op(id, "slice");
}

// [1 x n] -> [m x n], every row a copy
template <typename S>
Tensor<S> broadcast_rows(const Tensor<S>& a, int m) {
  Tape<S>& t = *a.tape();
  require(a.shape().rows == 1, "broadcast_rows: expected a row vector, got " + a.shape().str());
  require(m >= 1, "broadcast_rows: target rows must be >= 1");
  const int n = a.shape().cols;
  auto [id, out] = t.alloc({m, n}, a.requires_grad());
  const S* av = a.values().data();
  for (int i = 0; i < m; ++i) std::copy(av, av + n, out + static_cast<size_t>(i) * n);
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), m, n](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      S* ga = tp.grad_of(ai);
      if (ga)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) ga[j] += g[static_cast<size_t>(i) * n + j];
    });
  }
  return t.after_op(id, "broadcast_rows");
}

// Gather rows of a 2-D table. Ids are data, not differentiable.
template <typename S>
Tensor<S> embed_lookup(const Tensor<S>& table, std::span<const int> ids) {
  Tape<S>& t = *table.tape();
  require(!ids.empty(), "embed_lookup: empty id list");
  const int count = table.shape().rows, dim = table.shape().cols;
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < count,
            "embed_lookup: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                " outside table of " + std::to_string(count) + " rows");
  }
  auto [id, out] = t.alloc({static_cast<int>(ids.size()), dim}, table.requires_grad());
  const S* tv = table.values().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(tv + static_cast<size_t>(ids[i]) * dim, tv + static_cast<size_t>(ids[i] + 1) * dim,
              out + i * dim);
  if (t.node(id).requires_grad) {
    std::vector<int> idv(ids.begin(), ids.end());
    t.set_backprop(id, [id, ti = table.id(), idv = std::move(idv), dim](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      S* gt = tp.grad_of(ti);
      if (gt)
        for (size_t i = 0; i < idv.size(); ++i)
          for (int j = 0; j < dim; ++j)
            gt[static_cast<size_t>(idv[i]) * dim + j] += g[i * dim + j];
    });
  }
  return t.after_op(id, "embed_lookup");
}

// Row-wise softmax with max subtraction.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  Tape<S>& t = *a.tape();
  require(a.shape().cols > 0, "softmax: reduced axis is empty");
  const int rows = a.shape().rows, cols = a.shape().cols;
  auto [id, out] = t.alloc(a.shape(), a.requires_grad());
  const S* av = a.values().data();
  for (int i = 0; i < rows; ++i) {
    const S* x = av + static_cast<size_t>(i) * cols;
    S* y = out + static_cast<size_t>(i) * cols;
    S mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    S sum = 0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= sum;
  }
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), rows, cols](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      const S* y = tp.values_of(id);
      S* ga = tp.grad_of(ai);
      if (!ga) return;
      for (int i = 0; i < rows; ++i) {
        const S* yr = y + static_cast<size_t>(i) * cols;
        const S* gr = g + static_cast<size_t>(i) * cols;
        S dot = 0;
        for (int j = 0; j < cols; ++j) dot += yr[j] * gr[j];
        S* gar = ga + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return t.after_op(id, "softmax");
}

// Row-wise (x - mean) / sqrt(var + eps); affine scale/shift live outside.
template <typename S>
Tensor<S> layer_norm_rows(const Tensor<S>& a, S eps = S(1e-5)) {
  Tape<S>& t = *a.tape();
  const int rows = a.shape().rows, cols = a.shape().cols;
  require(cols > 0, "layer_norm: empty rows");
  auto [id, out] = t.alloc(a.shape(), a.requires_grad());
  const S* av = a.values().data();
  std::vector<S> inv_std(static_cast<size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const S* x = av + static_cast<size_t>(i) * cols;
    S mean = 0;
    for (int j = 0; j < cols; ++j) mean += x[j];
    mean /= static_cast<S>(cols);
    S var = 0;
    for (int j = 0; j < cols; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<S>(cols);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    S* y = out + static_cast<size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) y[j] = (x[j] - mean) * is;
  }
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), rows, cols, inv_std = std::move(inv_std)](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      const S* y = tp.values_of(id);
      S* ga = tp.grad_of(ai);
      if (!ga) return;
      for (int i = 0; i < rows; ++i) {
        const S* yr = y + static_cast<size_t>(i) * cols;
        const S* gr = g + static_cast<size_t>(i) * cols;
        S gmean = 0, gydot = 0;
        for (int j = 0; j < cols; ++j) {
          gmean += gr[j];
          gydot += gr[j] * yr[j];
        }
        gmean /= static_cast<S>(cols);
        gydot /= static_cast<S>(cols);
        const S is = inv_std[static_cast<size_t>(i)];
        S* gar = ga + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) gar[j] += is * (gr[j] - gmean - yr[j] * gydot);
      }
    });
  }
  return t.after_op(id, "layer_norm");
}

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& a) {
  Tape<S>& t = *a.tape();
  auto [id, out] = t.alloc({1, 1}, a.requires_grad());
  S acc = 0;
  for (S v : a.values()) acc += v;
  out[0] = acc;
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), n = a.shape().numel()](Tape<S>& tp) {
      const S g = tp.node(id).grad[0];
      S* ga = tp.grad_of(ai);
      if (ga)
        for (int64_t j = 0; j < n; ++j) ga[j] += g;
    });
  }
  return t.after_op(id, "sum");
}

template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.shape().numel());
  return affine(reduce_sum(a), inv, S(0));
}

// Mean (or sum) of -log softmax(logits)[target] over rows. Rows whose target
// is `ignore_index` are excluded; if every row is excluded the op is rejected.
template <typename S>
Tensor<S> cross_entropy_with_logits(const Tensor<S>& logits, std::span<const int> targets,
                                    bool mean = true, int ignore_index = -1) {
  Tape<S>& t = *logits.tape();
  const int rows = logits.shape().rows, cols = logits.shape().cols;
  require(static_cast<int>(targets.size()) == rows,
          "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
              std::to_string(rows) + " rows");
  int active = 0;
  for (int i = 0; i < rows; ++i) {
    if (targets[i] == ignore_index) continue;
    require(targets[i] >= 0 && targets[i] < cols,
            "cross_entropy: target " + std::to_string(targets[i]) + " out of range at row " +
                std::to_string(i));
    ++active;
  }
  require(active > 0, "cross_entropy: every position is excluded");
  auto [id, out] = t.alloc({1, 1}, logits.requires_grad());
  const S* lv = logits.values().data();
  S total = 0;
  for (int i = 0; i < rows; ++i) {
    if (targets[i] == ignore_index) continue;
    const S* x = lv + static_cast<size_t>(i) * cols;
    S mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    S sum = 0;
    for (int j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
    total += (std::log(sum) + mx) - x[targets[i]];
  }
  out[0] = mean ? total / static_cast<S>(active) : total;
  if (t.node(id).requires_grad) {
    std::vector<int> tgt(targets.begin(), targets.end());
    t.set_backprop(id, [id, li = logits.id(), tgt = std::move(tgt), rows, cols, mean, active,
                        ignore_index](Tape<S>& tp) {
      const S g = tp.node(id).grad[0];
      const S* lv2 = tp.values_of(li);
      S* gl = tp.grad_of(li);
      if (!gl) return;
      const S scale = mean ? g / static_cast<S>(active) : g;
      for (int i = 0; i < rows; ++i) {
        if (tgt[static_cast<size_t>(i)] == ignore_index) continue;
        const S* x = lv2 + static_cast<size_t>(i) * cols;
        S mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        S sum = 0;
        for (int j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
        S* gr = gl + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
          const S p = std::exp(x[j] - mx) / sum;
          gr[j] += scale * (p - (j == tgt[static_cast<size_t>(i)] ? S(1) : S(0)));
        }
      }
    });
  }
  return t.after_op(id, "cross_entropy");
}

// Inverted-scaling dropout; identity when rate is 0 or rng is null.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return a;
  require(rate < 1.0, "dropout: rate must be < 1");
  Tape<S>& t = *a.tape();
  const Shape sh = a.shape();
  auto [id, out] = t.alloc(sh, a.requires_grad());
  const S* av = a.values().data();
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  std::vector<S> mask(static_cast<size_t>(sh.numel()));
  for (int64_t j = 0; j < sh.numel(); ++j) {
    mask[static_cast<size_t>(j)] = rng->uniform() < rate ? S(0) : keep_scale;
    out[j] = av[j] * mask[static_cast<size_t>(j)];
  }
  if (t.node(id).requires_grad) {
    t.set_backprop(id, [id, ai = a.id(), mask = std::move(mask)](Tape<S>& tp) {
      const S* g = tp.node(id).grad.data();
      S* ga = tp.grad_of(ai);
      if (ga)
        for (size_t j = 0; j < mask.size(); ++j) ga[j] += g[j] * mask[j];
    });
  }
  return t.after_op(id, "dropout");
}

}  // namespace mime
