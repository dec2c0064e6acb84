#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations record a node on
// the thread's active Tape whenever at least one input is tracked by it; a
// tensor becomes tracked through Tape::watch or by being the result of a
// recorded operation. Everything else is a constant.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "eadlab/error.hpp"

namespace eadlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor;
class Tape;

namespace detail {

struct Storage {
  std::vector<double> data;
  std::vector<double> grad;
};

// in_grads[k] is empty when input k is not tracked.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> in_grads)>;

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

inline thread_local Tape* active_tape = nullptr;
inline std::atomic<std::uint64_t> next_tape_id{1};

inline void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

Tensor make_result(Shape shape, std::vector<double> values, std::span<const Tensor* const> inputs,
                   BackwardFn fn, const char* op);

}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), storage_(std::make_shared<detail::Storage>()) {
    if (!std::isfinite(fill)) throw NumericError("Tensor: non-finite fill value");
    storage_->data.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), storage_(std::make_shared<detail::Storage>()) {
    if (values.size() != shape_size(shape_)) {
      throw DimensionError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                           shape_str(shape_));
    }
    detail::require_finite(values, "Tensor");
    storage_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return storage_->data.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw IndexError("Tensor::dim: axis out of range");
    return shape_[axis];
  }

  std::span<const double> data() const { return storage_->data; }
  // Writes go through to every handle sharing this storage.
  std::span<double> mutable_data() { return storage_->data; }

  double item() const {
    if (size() != 1) throw ContractError("Tensor::item on tensor of shape " + shape_str(shape_));
    return storage_->data[0];
  }
  double operator[](std::size_t i) const { return storage_->data[i]; }
  double at(std::size_t i, std::size_t j) const { return storage_->data[i * shape_.back() + j]; }

  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const double> grad() const { return storage_->grad; }
  void zero_grad() { storage_->grad.assign(size(), 0.0); }
  void clear_grad() { storage_->grad.clear(); }

  inline bool tracked() const;
  std::size_t tape_node() const { return node_; }
  std::uint64_t tape_id() const { return tape_id_; }

  Tensor detach() const {
    Tensor t = *this;
    t.tape_id_ = 0;
    t.node_ = detail::kNoNode;
    return t;
  }

  Tensor clone() const { return Tensor(shape_, storage_->data); }

  bool shares_storage(const Tensor& other) const { return storage_ == other.storage_; }

 private:
  friend class Tape;
  friend Tensor detail::make_result(Shape, std::vector<double>, std::span<const Tensor* const>,
                                    detail::BackwardFn, const char*);

  Shape shape_;
  std::shared_ptr<detail::Storage> storage_;
  std::uint64_t tape_id_ = 0;
  std::size_t node_ = detail::kNoNode;
};

// Append-only record of differentiable operations. Constructing a Tape makes
// it the active tape of the calling thread until it is destroyed; tapes nest
// and must be destroyed in reverse order of construction.
class Tape {
 public:
  Tape() : id_(detail::next_tape_id.fetch_add(1)), previous_(detail::active_tape) {
    detail::active_tape = this;
  }
  ~Tape() { detail::active_tape = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape; }

  std::uint64_t id() const { return id_; }
  bool frozen() const { return frozen_; }
  std::size_t size() const { return nodes_.size(); }

  // Marks `leaf` as a differentiable input. The returned handle shares storage
  // with `leaf`; its grad is reset to zeros and filled by backward().
  Tensor watch(const Tensor& leaf) {
    if (frozen_) throw ContractError("Tape::watch on a frozen tape");
    if (detail::active_tape != this) throw ContractError("Tape::watch on a tape that is not active");
    Tensor t = leaf;
    t.storage_->grad.assign(t.size(), 0.0);
    t.tape_id_ = id_;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{{}, t.size(), nullptr, t.storage_});
    return t;
  }

  std::size_t record(std::vector<std::size_t> parents, std::size_t out_size, detail::BackwardFn fn) {
    nodes_.push_back(Node{std::move(parents), out_size, std::move(fn), nullptr});
    return nodes_.size() - 1;
  }

  void backward(const Tensor& loss) {
    if (frozen_) throw ContractError("Tape::backward on a frozen tape");
    if (loss.size() != 1) throw ContractError("Tape::backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (loss.tape_id_ != 0 && loss.tape_id_ != id_) throw ContractError("Tape::backward: loss recorded on another tape");

    std::vector<std::vector<double>> grads(nodes_.size());
    if (loss.tape_id_ == id_) grads[loss.node_].assign(1, 1.0);

    std::vector<std::span<double>> in_grads;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (grads[i].empty()) continue;
      Node& node = nodes_[i];
      if (node.leaf) {
        auto& g = node.leaf->grad;
        if (g.size() != grads[i].size()) g.assign(grads[i].size(), 0.0);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += grads[i][k];
      } else if (node.backward) {
        in_grads.clear();
        for (std::size_t p : node.parents) {
          if (p == detail::kNoNode) {
            in_grads.emplace_back();
          } else {
            if (grads[p].empty()) grads[p].assign(nodes_[p].size, 0.0);
            in_grads.emplace_back(grads[p]);
          }
        }
        node.backward(grads[i], in_grads);
      }
      grads[i].clear();
      grads[i].shrink_to_fit();
    }
    for (auto& node : nodes_) {
      if (node.leaf && node.leaf->grad.size() != node.size) node.leaf->grad.assign(node.size, 0.0);
    }
    frozen_ = true;
  }

 private:
  struct Node {
    std::vector<std::size_t> parents;
    std::size_t size;
    detail::BackwardFn backward;
    std::shared_ptr<detail::Storage> leaf;
  };

  std::vector<Node> nodes_;
  bool frozen_ = false;
  std::uint64_t id_;
  Tape* previous_;
};

inline bool Tensor::tracked() const {
  const Tape* tape = detail::active_tape;
  return tape != nullptr && tape_id_ == tape->id() && !tape->frozen();
}

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values, std::span<const Tensor* const> inputs,
                          BackwardFn fn, const char* op) {
  require_finite(values, op);
  Tensor out(std::move(shape));
  out.storage_->data = std::move(values);
  bool any = false;
  for (const Tensor* in : inputs) any = any || in->tracked();
  if (!any) return out;
  std::vector<std::size_t> parents;
  parents.reserve(inputs.size());
  for (const Tensor* in : inputs) parents.push_back(in->tracked() ? in->tape_node() : kNoNode);
  Tape* tape = active_tape;
  out.node_ = tape->record(std::move(parents), out.size(), std::move(fn));
  out.tape_id_ = tape->id();
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                          BackwardFn fn, const char* op) {
  return make_result(std::move(shape), std::move(values), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                     std::move(fn), op);
}

// Backward closures hold detached handles onto their inputs' storage; inputs
// must not be mutated in place while the recording tape is unfrozen.
inline Tensor keep(const Tensor& t) { return t.detach(); }

// f returns the value; dfdx(x, y) its derivative. Derivatives are evaluated
// during the forward pass so the closure holds a single buffer.
template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx, const char* op) {
  std::vector<double> y(x.size());
  auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
  if (!x.tracked()) return make_result(x.shape(), std::move(y), {&x}, nullptr, op);
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) d[i] = dfdx(xs[i], y[i]);
  return make_result(x.shape(), std::move(y), {&x},
                     [d = std::move(d)](std::span<const double> g, std::span<const std::span<double>> in) {
                       auto gx = in[0];
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d[i];
                     },
                     op);
}

inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// Accumulates g into an input that may have been broadcast from size 1.
inline void accumulate(std::span<double> dst, std::span<const double> g, double scale = 1.0) {
  if (dst.empty()) return;
  if (dst.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
  } else {
    double s = 0.0;
    for (double v : g) s += v;
    dst[0] += scale * s;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  Shape shape = detail::broadcast_shape(a, b, "add");
  std::size_t n = shape_size(shape);
  std::vector<double> y(n);
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = as[a.size() == 1 ? 0 : i] + bs[b.size() == 1 ? 0 : i];
  return detail::make_result(std::move(shape), std::move(y), {&a, &b},
                             [](std::span<const double> g, std::span<const std::span<double>> in) {
                               detail::accumulate(in[0], g);
                               detail::accumulate(in[1], g);
                             },
                             "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Shape shape = detail::broadcast_shape(a, b, "sub");
  std::size_t n = shape_size(shape);
  std::vector<double> y(n);
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = as[a.size() == 1 ? 0 : i] - bs[b.size() == 1 ? 0 : i];
  return detail::make_result(std::move(shape), std::move(y), {&a, &b},
                             [](std::span<const double> g, std::span<const std::span<double>> in) {
                               detail::accumulate(in[0], g);
                               detail::accumulate(in[1], g, -1.0);
                             },
                             "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Shape shape = detail::broadcast_shape(a, b, "mul");
  std::size_t n = shape_size(shape);
  std::vector<double> y(n);
  auto as = a.data();
  auto bs = b.data();
  const bool a1 = a.size() == 1 && n != 1;
  const bool b1 = b.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) y[i] = as[a1 ? 0 : i] * bs[b1 ? 0 : i];
  auto ain = detail::keep(a);
  auto bin = detail::keep(b);
  return detail::make_result(
      std::move(shape), std::move(y), {&a, &b},
      [ain, bin, a1, b1](std::span<const double> g, std::span<const std::span<double>> in) {
        if (!in[0].empty()) {
          if (a1) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * bin[i];
            in[0][0] += s;
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * bin[b1 ? 0 : i];
          }
        }
        if (!in[1].empty()) {
          if (b1) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * ain[i];
            in[1][0] += s;
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) in[1][i] += g[i] * ain[a1 ? 0 : i];
          }
        }
      },
      "mul");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; }, "scale");
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; }, "add_scalar");
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }, "square");
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; },
                       "tanh");
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                       [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; }, "exp");
}

inline Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive entry " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }, "log");
}

inline Tensor sin(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); },
                       "sin");
}

inline Tensor cos(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); },
                       "cos");
}

// Gradient passes through strictly inside [lo, hi] and is zero where the
// input saturates.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                       [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; }, "clamp");
}

inline Tensor clamp01(const Tensor& x) { return clamp(x, 0.0, 1.0); }

// Per-element bounds; lo and hi have x.size() entries.
inline Tensor clamp(const Tensor& x, std::span<const double> lo, std::span<const double> hi) {
  if (lo.size() != x.size() || hi.size() != x.size()) throw DimensionError("clamp: bound size mismatch");
  std::vector<double> y(x.size());
  std::vector<double> pass(x.size());
  auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = std::clamp(xs[i], lo[i], hi[i]);
    pass[i] = (xs[i] >= lo[i] && xs[i] <= hi[i]) ? 1.0 : 0.0;
  }
  return detail::make_result(x.shape(), std::move(y), {&x},
                             [pass = std::move(pass)](std::span<const double> g, std::span<const std::span<double>> in) {
                               for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * pass[i];
                             },
                             "clamp");
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result(Shape{}, {s}, {&x},
                             [](std::span<const double> g, std::span<const std::span<double>> in) {
                               for (double& d : in[0]) d += g[0];
                             },
                             "sum");
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// [m x n] -> [m]
inline Tensor row_sums(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("row_sums: expected rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> y(m, 0.0);
  auto xs = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] += xs[i * n + j];
  return detail::make_result(Shape{m}, std::move(y), {&x},
                             [n](std::span<const double> g, std::span<const std::span<double>> in) {
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) in[0][i * n + j] += g[i];
                             },
                             "row_sums");
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(y), {&x},
                             [](std::span<const double> g, std::span<const std::span<double>> in) {
                               for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                             },
                             "reshape");
}

// Stacks rank-2 blocks with equal column counts on top of each other.
inline Tensor concat_rows(const std::vector<Tensor>& blocks) {
  if (blocks.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = blocks.front().rank() == 2 ? blocks.front().dim(1) : 0;
  std::size_t rows = 0;
  for (const auto& b : blocks) {
    if (b.rank() != 2 || b.dim(1) != n) throw DimensionError("concat_rows: block shape " + shape_str(b.shape()));
    rows += b.dim(0);
  }
  std::vector<double> y;
  y.reserve(rows * n);
  std::vector<std::size_t> offsets;
  for (const auto& b : blocks) {
    offsets.push_back(y.size());
    y.insert(y.end(), b.data().begin(), b.data().end());
  }
  offsets.push_back(y.size());

  std::vector<const Tensor*> inputs;
  for (const auto& b : blocks) inputs.push_back(&b);
  return detail::make_result(Shape{rows, n}, std::move(y), inputs,
                             [offsets](std::span<const double> g, std::span<const std::span<double>> in) {
                               for (std::size_t k = 0; k < in.size(); ++k) {
                                 if (in[k].empty()) continue;
                                 for (std::size_t i = offsets[k]; i < offsets[k + 1]; ++i) in[k][i - offsets[k]] += g[i];
                               }
                             },
                             "concat_rows");
}

// Scalar view of one entry.
inline Tensor element(const Tensor& x, std::size_t index) {
  if (index >= x.size()) throw IndexError("element: index " + std::to_string(index) + " out of range");
  return detail::make_result(Shape{}, {x[index]}, {&x},
                             [index](std::span<const double> g, std::span<const std::span<double>> in) {
                               in[0][index] += g[0];
                             },
                             "element");
}

// Builds a tensor of the given shape from size-1 tensors, in row-major order.
inline Tensor assemble(const std::vector<Tensor>& scalars, Shape shape) {
  if (scalars.size() != shape_size(shape)) throw DimensionError("assemble: entry count does not match shape");
  std::vector<double> y;
  std::vector<const Tensor*> inputs;
  for (const auto& t : scalars) {
    if (t.size() != 1) throw DimensionError("assemble: entries must be size 1");
    y.push_back(t.item());
    inputs.push_back(&t);
  }
  return detail::make_result(std::move(shape), std::move(y), inputs,
                             [](std::span<const double> g, std::span<const std::span<double>> in) {
                               for (std::size_t k = 0; k < in.size(); ++k)
                                 if (!in[k].empty()) in[k][0] += g[k];
                             },
                             "assemble");
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() != 2 || begin + count > x.dim(0)) throw IndexError("slice_rows: range out of bounds");
  const std::size_t n = x.dim(1);
  std::vector<double> y(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n);
  return detail::make_result(Shape{count, n}, std::move(y), {&x},
                             [begin, n](std::span<const double> g, std::span<const std::span<double>> in) {
                               for (std::size_t i = 0; i < g.size(); ++i) in[0][begin * n + i] += g[i];
                             },
                             "slice_rows");
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m x k] * [k x n]. Loops run k-outermost so each row of b streams once.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(m * n, 0.0);
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* brow = bs.data() + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = as[i * k + kk];
      if (av == 0.0) continue;
      double* yrow = y.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  }
  auto ain = detail::keep(a);
  auto bin = detail::keep(b);
  return detail::make_result(
      Shape{m, n}, std::move(y), {&a, &b},
      [ain, bin, m, k, n](std::span<const double> g, std::span<const std::span<double>> in) {
        auto as = ain.data();
        auto bs = bin.data();
        if (!in[0].empty() && m < 8) {
          // da = g * b^T by dot products; cheaper than transposing b for few rows.
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = bs.data() + kk * n;
            for (std::size_t i = 0; i < m; ++i) {
              const double* grow = g.data() + i * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              in[0][i * k + kk] += acc;
            }
          }
        } else if (!in[0].empty()) {
          // da = g * b^T, as row updates against an explicit transpose.
          std::vector<double> bt(n * k);
          for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t j = 0; j < n; ++j) bt[j * k + kk] = bs[kk * n + j];
          for (std::size_t i = 0; i < m; ++i) {
            double* drow = in[0].data() + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double gv = g[i * n + j];
              if (gv == 0.0) continue;
              const double* btrow = bt.data() + j * k;
              for (std::size_t kk = 0; kk < k; ++kk) drow[kk] += gv * btrow[kk];
            }
          }
        }
        if (!in[1].empty()) {
          // db = a^T * g
          for (std::size_t kk = 0; kk < k; ++kk) {
            double* drow = in[1].data() + kk * n;
            for (std::size_t i = 0; i < m; ++i) {
              const double av = as[i * k + kk];
              if (av == 0.0) continue;
              const double* grow = g.data() + i * n;
              for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
          }
        }
      },
      "matmul");
}

// x[m x n] + bias[n] on every row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.size() != x.dim(1)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> y(x.data().begin(), x.data().end());
  auto bs = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += bs[j];
  return detail::make_result(Shape{m, n}, std::move(y), {&x, &bias},
                             [m, n](std::span<const double> g, std::span<const std::span<double>> in) {
                               if (!in[0].empty())
                                 for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                               if (!in[1].empty())
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) in[1][j] += g[i * n + j];
                             },
                             "add_bias");
}

namespace detail {

inline std::array<double, 9> invert3(std::span<const double> a) {
  const double c00 = a[4] * a[8] - a[5] * a[7];
  const double c01 = a[5] * a[6] - a[3] * a[8];
  const double c02 = a[3] * a[7] - a[4] * a[6];
  const double det = a[0] * c00 + a[1] * c01 + a[2] * c02;
  double scale_ref = 0.0;
  for (std::size_t i = 0; i < 9; ++i) scale_ref = std::max(scale_ref, std::abs(a[i]));
  if (!(std::abs(det) > 1e-14 * scale_ref * scale_ref * scale_ref)) throw DomainError("inv3: singular matrix");
  const double inv = 1.0 / det;
  return {c00 * inv,
          (a[2] * a[7] - a[1] * a[8]) * inv,
          (a[1] * a[5] - a[2] * a[4]) * inv,
          c01 * inv,
          (a[0] * a[8] - a[2] * a[6]) * inv,
          (a[2] * a[3] - a[0] * a[5]) * inv,
          c02 * inv,
          (a[1] * a[6] - a[0] * a[7]) * inv,
          (a[0] * a[4] - a[1] * a[3]) * inv};
}

}  // namespace detail

// Inverse of a 3x3 matrix; d(A^-1) = -A^-1 dA A^-1.
inline Tensor inv3(const Tensor& a) {
  if (a.shape() != Shape{3, 3}) throw DimensionError("inv3: expected [3x3], got " + shape_str(a.shape()));
  auto r = detail::invert3(a.data());
  std::vector<double> y(r.begin(), r.end());
  return detail::make_result(Shape{3, 3}, std::move(y), {&a},
                             [r](std::span<const double> g, std::span<const std::span<double>> in) {
                               // dA = -R^T g R^T
                               double t[9] = {};
                               for (int i = 0; i < 3; ++i)
                                 for (int j = 0; j < 3; ++j)
                                   for (int k = 0; k < 3; ++k) t[i * 3 + j] += r[k * 3 + i] * g[k * 3 + j];
                               for (int i = 0; i < 3; ++i)
                                 for (int j = 0; j < 3; ++j) {
                                   double acc = 0.0;
                                   for (int k = 0; k < 3; ++k) acc += t[i * 3 + k] * r[j * 3 + k];
                                   in[0][i * 3 + j] -= acc;
                                 }
                             },
                             "inv3");
}

// Maps points [... x 2] through the projective transform h [3x3]:
// (x, y) -> ((h0.p) / (h2.p), (h1.p) / (h2.p)) with p = (x, y, 1).
inline Tensor apply_homography(const Tensor& h, const Tensor& points) {
  if (h.shape() != Shape{3, 3}) throw DimensionError("apply_homography: expected [3x3] transform");
  if (points.rank() == 0 || points.shape().back() != 2) {
    throw DimensionError("apply_homography: points must have trailing extent 2");
  }
  const std::size_t count = points.size() / 2;
  auto hs = h.data();
  auto ps = points.data();
  std::vector<double> y(points.size());
  std::vector<double> inv_w(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double x = ps[2 * i], v = ps[2 * i + 1];
    const double w = hs[6] * x + hs[7] * v + hs[8];
    if (!(std::abs(w) > 1e-12)) throw DomainError("apply_homography: point maps to infinity");
    inv_w[i] = 1.0 / w;
    y[2 * i] = (hs[0] * x + hs[1] * v + hs[2]) * inv_w[i];
    y[2 * i + 1] = (hs[3] * x + hs[4] * v + hs[5]) * inv_w[i];
  }
  auto hin = detail::keep(h);
  auto pin = detail::keep(points);
  auto yout = std::make_shared<const std::vector<double>>(y);
  return detail::make_result(
      points.shape(), std::move(y), {&h, &points},
      [hin, pin, yout, inv_w = std::move(inv_w)](std::span<const double> g, std::span<const std::span<double>> in) {
        auto hs = hin.data();
        auto ps = pin.data();
        const auto& ys = *yout;
        for (std::size_t i = 0; i < inv_w.size(); ++i) {
          const double gu = g[2 * i] * inv_w[i], gv = g[2 * i + 1] * inv_w[i];
          const double u = ys[2 * i], v = ys[2 * i + 1];
          const double p[3] = {ps[2 * i], ps[2 * i + 1], 1.0};
          if (!in[0].empty()) {
            for (int j = 0; j < 3; ++j) {
              in[0][j] += gu * p[j];
              in[0][3 + j] += gv * p[j];
              in[0][6 + j] -= (gu * u + gv * v) * p[j];
            }
          }
          if (!in[1].empty()) {
            in[1][2 * i] += gu * (hs[0] - u * hs[6]) + gv * (hs[3] - v * hs[6]);
            in[1][2 * i + 1] += gu * (hs[1] - u * hs[7]) + gv * (hs[4] - v * hs[7]);
          }
        }
      },
      "apply_homography");
}

// ---------------------------------------------------------------------------
// Sampling

// Samples image [H x W x C] at continuous pixel coordinates [H' x W' x 2]
// (x = column, y = row; integer values hit pixel centres). Samples outside
// the image read zeros. Differentiable in both image and coords.
inline Tensor bilinear_sample(const Tensor& image, const Tensor& coords) {
  if (image.rank() != 3) throw DimensionError("bilinear_sample: image must be [H x W x C]");
  if (coords.rank() != 3 || coords.dim(2) != 2) throw DimensionError("bilinear_sample: coords must be [H' x W' x 2]");
  const std::size_t ih = image.dim(0), iw = image.dim(1), ch = image.dim(2);
  const std::size_t oh = coords.dim(0), ow = coords.dim(1);
  const std::size_t count = oh * ow;
  auto img = image.data();
  auto cs = coords.data();

  // Corner layout per sample: (y0, x0), (y0, x0+1), (y0+1, x0), (y0+1, x0+1).
  struct Tap {
    std::int64_t x0, y0;
    double wx, wy;
  };
  std::vector<Tap> taps(count);
  std::vector<double> y(count * ch, 0.0);
  auto pixel = [&](std::int64_t r, std::int64_t c) -> const double* {
    if (r < 0 || c < 0 || r >= static_cast<std::int64_t>(ih) || c >= static_cast<std::int64_t>(iw)) return nullptr;
    return img.data() + (static_cast<std::size_t>(r) * iw + static_cast<std::size_t>(c)) * ch;
  };
  for (std::size_t i = 0; i < count; ++i) {
    const double x = cs[2 * i], yy = cs[2 * i + 1];
    const double fx = std::floor(x), fy = std::floor(yy);
    Tap t{static_cast<std::int64_t>(fx), static_cast<std::int64_t>(fy), x - fx, yy - fy};
    taps[i] = t;
    const double* p[4] = {pixel(t.y0, t.x0), pixel(t.y0, t.x0 + 1), pixel(t.y0 + 1, t.x0), pixel(t.y0 + 1, t.x0 + 1)};
    // Nested lerps: constant neighbourhoods and grid-aligned coords reproduce
    // texel values exactly.
    for (std::size_t c = 0; c < ch; ++c) {
      const double v00 = p[0] ? p[0][c] : 0.0, v01 = p[1] ? p[1][c] : 0.0;
      const double v10 = p[2] ? p[2][c] : 0.0, v11 = p[3] ? p[3][c] : 0.0;
      const double top = v00 + t.wx * (v01 - v00);
      const double bottom = v10 + t.wx * (v11 - v10);
      y[i * ch + c] = top + t.wy * (bottom - top);
    }
  }
  auto iin = detail::keep(image);
  return detail::make_result(
      Shape{oh, ow, ch}, std::move(y), {&image, &coords},
      [iin, taps = std::move(taps), ih, iw, ch](std::span<const double> g, std::span<const std::span<double>> in) {
        auto img = iin.data();
        auto index = [&](std::int64_t r, std::int64_t c) -> std::int64_t {
          if (r < 0 || c < 0 || r >= static_cast<std::int64_t>(ih) || c >= static_cast<std::int64_t>(iw)) return -1;
          return (r * static_cast<std::int64_t>(iw) + c) * static_cast<std::int64_t>(ch);
        };
        for (std::size_t i = 0; i < taps.size(); ++i) {
          const Tap& t = taps[i];
          const double w[4] = {(1 - t.wx) * (1 - t.wy), t.wx * (1 - t.wy), (1 - t.wx) * t.wy, t.wx * t.wy};
          const std::int64_t idx[4] = {index(t.y0, t.x0), index(t.y0, t.x0 + 1), index(t.y0 + 1, t.x0),
                                       index(t.y0 + 1, t.x0 + 1)};
          double gx = 0.0, gy = 0.0;
          for (std::size_t c = 0; c < ch; ++c) {
            const double go = g[i * ch + c];
            if (go == 0.0) continue;
            double v[4];
            for (int k = 0; k < 4; ++k) {
              v[k] = idx[k] < 0 ? 0.0 : img[static_cast<std::size_t>(idx[k]) + c];
              if (!in[0].empty() && idx[k] >= 0) in[0][static_cast<std::size_t>(idx[k]) + c] += w[k] * go;
            }
            gx += go * ((1 - t.wy) * (v[1] - v[0]) + t.wy * (v[3] - v[2]));
            gy += go * ((1 - t.wx) * (v[2] - v[0]) + t.wx * (v[3] - v[1]));
          }
          if (!in[1].empty()) {
            in[1][2 * i] += gx;
            in[1][2 * i + 1] += gy;
          }
        }
      },
      "bilinear_sample");
}

// ---------------------------------------------------------------------------
// Losses

// Mean over the batch of -log softmax(logits)[label].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be [B x C]");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw DimensionError("softmax_cross_entropy: label count does not match batch");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) throw IndexError("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
  }
  auto zs = logits.data();
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = zs.data() + i * c;
    const double m = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(z[j] - lse);
    loss += lse - z[labels[i]];
  }
  loss /= static_cast<double>(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result(Shape{}, {loss}, {&logits},
                             [probs = std::move(probs), lab = std::move(lab), b, c](
                                 std::span<const double> g, std::span<const std::span<double>> in) {
                               const double s = g[0] / static_cast<double>(b);
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   in[0][i * c + j] +=
                                       s * (probs[i * c + j] - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
                             },
                             "softmax_cross_entropy");
}

}  // namespace eadlab
