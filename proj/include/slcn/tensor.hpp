#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node holding row-major data, an optional
// gradient buffer, and (when recorded) the tape edge that produced it.
// Forward/backward on a given tape is single-threaded; tensors without tape
// attachment are immutable values safe to share across threads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace slcn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline thread_local bool grad_enabled = true;

struct KinkState {
  bool active = false;
  double min_margin = std::numeric_limits<double>::infinity();
};
inline thread_local KinkState kink_state;

inline void note_margin(double m) {
  if (m < kink_state.min_margin) kink_state.min_margin = m;
}

}  // namespace detail

/// Disables tape recording on this thread while alive.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Records how close ReLU inputs and pooling decisions come to their kinks
/// while alive. Finite-difference harnesses reject points with small margins.
struct KinkWatch {
  KinkWatch() {
    detail::kink_state.active = true;
    detail::kink_state.min_margin = std::numeric_limits<double>::infinity();
  }
  ~KinkWatch() { detail::kink_state.active = false; }
  KinkWatch(const KinkWatch&) = delete;
  KinkWatch& operator=(const KinkWatch&) = delete;
  static double min_margin() { return detail::kink_state.min_margin; }
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized like data once gradients flow, else empty
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaves
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;
};

template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires float or double");

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_parts(std::move(shape), {}, T(0));
  }
  static Tensor full(Shape shape, T value) {
    return from_parts(std::move(shape), {}, value);
  }
  static Tensor from(Shape shape, std::vector<T> values) {
    auto n = numel_of(shape);
    if (n != static_cast<std::int64_t>(values.size()))
      throw Error("tensor: shape " + shape_str(shape) + " wants " + std::to_string(n) +
                  " values, got " + std::to_string(values.size()));
    for (auto e : shape)
      if (e <= 0) throw Error("tensor: non-positive extent in shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    return Tensor(std::move(node));
  }
  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return check()->shape; }
  int rank() const { return static_cast<int>(check()->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(check()->data.size()); }
  std::int64_t dim(int i) const { return check()->shape.at(static_cast<std::size_t>(i)); }

  std::vector<T>& data() { return check()->data; }
  const std::vector<T>& data() const { return check()->data; }

  T item() const {
    if (numel() != 1) throw Error("tensor: item() on non-scalar shape " + shape_str(shape()));
    return check()->data[0];
  }

  bool requires_grad() const { return check()->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    auto& n = *check();
    if (flag && n.op) throw Error("tensor: requires_grad can only be set on leaves");
    n.requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw Error("tensor: no gradient present");
    return node_->grad;
  }
  void zero_grad() { check()->grad.clear(); }

  /// Value copy with no tape attachment and no grad flag.
  Tensor detached() const {
    auto& n = *check();
    return from(n.shape, n.data);
  }

  /// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
  /// calls until zero_grad().
  void backward() const {
    auto* root = check().get();
    if (root->data.size() != 1)
      throw Error("backward: root must be scalar, got shape " + shape_str(root->shape));
    if (!root->op || !root->requires_grad) throw Error("backward: detached root");

    // Post-order over the requires_grad subgraph; children before parents.
    std::vector<TensorNode<T>*> topo;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->inputs.size()) {
        auto* child = top.first->inputs[top.second++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        topo.push_back(top.first);
        stack.pop_back();
      }
    }

    // Interior grads are scratch for this sweep; leaf grads persist.
    for (auto* n : topo)
      if (n->op) n->grad.assign(n->data.size(), T(0));
    root->grad[0] = T(1);

    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
      if ((*it)->op && (*it)->backward_fn) (*it)->backward_fn(**it);
  }

  const std::shared_ptr<TensorNode<T>>& impl() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor from_parts(Shape shape, std::vector<T>, T fill) {
    auto n = numel_of(shape);
    for (auto e : shape)
      if (e <= 0) throw Error("tensor: non-positive extent in shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data.assign(static_cast<std::size_t>(n), fill);
    return Tensor(std::move(node));
  }

  const std::shared_ptr<TensorNode<T>>& check() const {
    if (!node_) throw Error("tensor: use of undefined tensor");
    return node_;
  }

  std::shared_ptr<TensorNode<T>> node_;

  template <class U>
  friend Tensor<U> detail_make_op(const char* op, Shape shape, std::vector<U> data,
                                  std::vector<Tensor<U>> inputs,
                                  std::function<void(TensorNode<U>&)> backward);
};

namespace detail {

template <class T>
std::vector<T>& ensure_grad(TensorNode<T>& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

template <class T>
void check_finite(const char* op, const Tensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(v)) throw Error(std::string(op) + ": non-finite input");
}

inline void op_require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw Error(std::string(op) + ": " + msg);
}

}  // namespace detail

template <class T>
Tensor<T> detail_make_op(const char* op, Shape shape, std::vector<T> data,
                         std::vector<Tensor<T>> inputs,
                         std::function<void(TensorNode<T>&)> backward) {
  bool req = false;
  if (detail::grad_enabled)
    for (const auto& in : inputs)
      if (in.requires_grad()) req = true;
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->requires_grad = req;
  if (req) {
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::op_require(a.shape() == b.shape(), "add",
                     "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  detail::check_finite("add", a);
  detail::check_finite("add", b);
  std::vector<T> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  auto an = a.impl(), bn = b.impl();
  return detail_make_op<T>("add", a.shape(), std::move(out), {a, b},
                           [an, bn](TensorNode<T>& self) {
                             if (an->requires_grad) {
                               auto& ga = detail::ensure_grad(*an);
                               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                             }
                             if (bn->requires_grad) {
                               auto& gb = detail::ensure_grad(*bn);
                               for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i];
                             }
                           });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::op_require(a.shape() == b.shape(), "mul",
                     "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  detail::check_finite("mul", a);
  detail::check_finite("mul", b);
  std::vector<T> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  auto an = a.impl(), bn = b.impl();
  return detail_make_op<T>("mul", a.shape(), std::move(out), {a, b},
                           [an, bn](TensorNode<T>& self) {
                             if (an->requires_grad) {
                               auto& ga = detail::ensure_grad(*an);
                               for (std::size_t i = 0; i < ga.size(); ++i)
                                 ga[i] += self.grad[i] * bn->data[i];
                             }
                             if (bn->requires_grad) {
                               auto& gb = detail::ensure_grad(*bn);
                               for (std::size_t i = 0; i < gb.size(); ++i)
                                 gb[i] += self.grad[i] * an->data[i];
                             }
                           });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  detail::check_finite("scale", x);
  detail::op_require(std::isfinite(static_cast<double>(c)), "scale", "non-finite factor");
  std::vector<T> out(x.data());
  for (auto& v : out) v *= c;
  auto xn = x.impl();
  return detail_make_op<T>("scale", x.shape(), std::move(out), {x},
                           [xn, c](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * self.grad[i];
                           });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  detail::check_finite("relu", x);
  const auto& xd = x.data();
  if (detail::kink_state.active)
    for (T v : xd) detail::note_margin(std::abs(static_cast<double>(v)));
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto xn = x.impl();
  return detail_make_op<T>("relu", x.shape(), std::move(out), {x},
                           [xn](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t i = 0; i < gx.size(); ++i)
                               if (xn->data[i] > T(0)) gx[i] += self.grad[i];
                           });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  detail::check_finite("sigmoid", x);
  const auto& xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = xd[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  auto xn = x.impl();
  return detail_make_op<T>("sigmoid", x.shape(), std::move(out), {x},
                           [xn](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t i = 0; i < gx.size(); ++i) {
                               T y = self.data[i];
                               gx[i] += self.grad[i] * y * (T(1) - y);
                             }
                           });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  detail::check_finite("softplus", x);
  const auto& xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = xd[i];
    out[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  auto xn = x.impl();
  return detail_make_op<T>("softplus", x.shape(), std::move(out), {x},
                           [xn](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t i = 0; i < gx.size(); ++i) {
                               T v = xn->data[i];
                               T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                               : std::exp(v) / (T(1) + std::exp(v));
                               gx[i] += self.grad[i] * s;
                             }
                           });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  detail::check_finite("log", x);
  const auto& xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    detail::op_require(xd[i] > T(0), "log", "non-positive input");
    out[i] = std::log(xd[i]);
  }
  auto xn = x.impl();
  return detail_make_op<T>("log", x.shape(), std::move(out), {x},
                           [xn](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t i = 0; i < gx.size(); ++i)
                               gx[i] += self.grad[i] / xn->data[i];
                           });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  detail::check_finite("exp", x);
  const auto& xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(xd[i]);
    detail::op_require(std::isfinite(out[i]), "exp", "overflow");
  }
  auto xn = x.impl();
  return detail_make_op<T>("exp", x.shape(), std::move(out), {x},
                           [xn](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t i = 0; i < gx.size(); ++i)
                               gx[i] += self.grad[i] * self.data[i];
                           });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  detail::check_finite("sum_all", x);
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto xn = x.impl();
  return detail_make_op<T>("sum_all", {1}, {acc}, {x},
                           [xn](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             T g = self.grad[0];
                             for (auto& v : gx) v += g;
                           });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  detail::check_finite("mean_all", x);
  T acc = T(0);
  for (T v : x.data()) acc += v;
  T inv = T(1) / static_cast<T>(x.numel());
  auto xn = x.impl();
  return detail_make_op<T>("mean_all", {1}, {acc * inv}, {x},
                           [xn, inv](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             T g = self.grad[0] * inv;
                             for (auto& v : gx) v += g;
                           });
}

namespace detail {

// Shared [rows, T] view for ops that reduce or index the trailing time axis.
// Rank 2 is [C,T]; rank 3 is [N,C,T] flattened to rows = N*C.
template <class T>
void time_view(const char* op, const Tensor<T>& x, std::int64_t& rows, std::int64_t& tlen) {
  op_require(x.rank() == 2 || x.rank() == 3, op,
             "expected rank 2 or 3, got shape " + shape_str(x.shape()));
  tlen = x.shape().back();
  rows = x.numel() / tlen;
}

}  // namespace detail

template <class T>
Tensor<T> mean_over_time(const Tensor<T>& x) {
  detail::check_finite("mean_over_time", x);
  std::int64_t rows, tlen;
  detail::time_view("mean_over_time", x, rows, tlen);
  std::vector<T> out(static_cast<std::size_t>(rows));
  const T* xd = x.data().data();
  T inv = T(1) / static_cast<T>(tlen);
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::int64_t t = 0; t < tlen; ++t) acc += xd[r * tlen + t];
    out[static_cast<std::size_t>(r)] = acc * inv;
  }
  Shape oshape(x.shape().begin(), x.shape().end() - 1);
  auto xn = x.impl();
  return detail_make_op<T>("mean_over_time", std::move(oshape), std::move(out), {x},
                           [xn, rows, tlen, inv](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::int64_t r = 0; r < rows; ++r) {
                               T g = self.grad[static_cast<std::size_t>(r)] * inv;
                               for (std::int64_t t = 0; t < tlen; ++t) gx[r * tlen + t] += g;
                             }
                           });
}

template <class T>
Tensor<T> max_over_time(const Tensor<T>& x) {
  detail::check_finite("max_over_time", x);
  std::int64_t rows, tlen;
  detail::time_view("max_over_time", x, rows, tlen);
  std::vector<T> out(static_cast<std::size_t>(rows));
  std::vector<std::int64_t> arg(static_cast<std::size_t>(rows));
  const T* xd = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xd + r * tlen;
    std::int64_t best = 0;
    for (std::int64_t t = 1; t < tlen; ++t)
      if (row[t] > row[best]) best = t;  // first max wins ties
    out[static_cast<std::size_t>(r)] = row[best];
    arg[static_cast<std::size_t>(r)] = best;
    if (detail::kink_state.active && tlen > 1) {
      T second = -std::numeric_limits<T>::infinity();
      for (std::int64_t t = 0; t < tlen; ++t)
        if (t != best && row[t] > second) second = row[t];
      detail::note_margin(static_cast<double>(row[best] - second));
    }
  }
  Shape oshape(x.shape().begin(), x.shape().end() - 1);
  auto xn = x.impl();
  return detail_make_op<T>("max_over_time", std::move(oshape), std::move(out), {x},
                           [xn, tlen, arg = std::move(arg)](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t r = 0; r < arg.size(); ++r)
                               gx[static_cast<std::int64_t>(r) * tlen + arg[r]] += self.grad[r];
                           });
}

// ---------------------------------------------------------------------------
// Structural ops

template <class T>
Tensor<T> slice_time(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  detail::check_finite("slice_time", x);
  std::int64_t rows, tlen;
  detail::time_view("slice_time", x, rows, tlen);
  detail::op_require(start >= 0 && len >= 1 && start + len <= tlen, "slice_time",
                     "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of extent " + std::to_string(tlen));
  std::vector<T> out(static_cast<std::size_t>(rows * len));
  const T* xd = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t t = 0; t < len; ++t) out[r * len + t] = xd[r * tlen + start + t];
  Shape oshape = x.shape();
  oshape.back() = len;
  auto xn = x.impl();
  return detail_make_op<T>("slice_time", std::move(oshape), std::move(out), {x},
                           [xn, rows, tlen, start, len](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::int64_t r = 0; r < rows; ++r)
                               for (std::int64_t t = 0; t < len; ++t)
                                 gx[r * tlen + start + t] += self.grad[r * len + t];
                           });
}

template <class T>
Tensor<T> pad_time(const Tensor<T>& x, std::int64_t left, std::int64_t right) {
  detail::check_finite("pad_time", x);
  detail::op_require(left >= 0 && right >= 0, "pad_time", "negative pad");
  std::int64_t rows, tlen;
  detail::time_view("pad_time", x, rows, tlen);
  std::int64_t olen = tlen + left + right;
  std::vector<T> out(static_cast<std::size_t>(rows * olen), T(0));
  const T* xd = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t t = 0; t < tlen; ++t) out[r * olen + left + t] = xd[r * tlen + t];
  Shape oshape = x.shape();
  oshape.back() = olen;
  auto xn = x.impl();
  return detail_make_op<T>("pad_time", std::move(oshape), std::move(out), {x},
                           [xn, rows, tlen, olen, left](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::int64_t r = 0; r < rows; ++r)
                               for (std::int64_t t = 0; t < tlen; ++t)
                                 gx[r * tlen + t] += self.grad[r * olen + left + t];
                           });
}

template <class T>
Tensor<T> select_channel(const Tensor<T>& x, std::int64_t channel) {
  detail::check_finite("select_channel", x);
  detail::op_require(x.rank() == 2 || x.rank() == 3, "select_channel",
                     "expected rank 2 or 3, got shape " + shape_str(x.shape()));
  std::int64_t batch = x.rank() == 3 ? x.dim(0) : 1;
  std::int64_t channels = x.rank() == 3 ? x.dim(1) : x.dim(0);
  std::int64_t tlen = x.shape().back();
  detail::op_require(channel >= 0 && channel < channels, "select_channel",
                     "channel " + std::to_string(channel) + " out of " + std::to_string(channels));
  std::vector<T> out(static_cast<std::size_t>(batch * tlen));
  const T* xd = x.data().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t t = 0; t < tlen; ++t)
      out[n * tlen + t] = xd[(n * channels + channel) * tlen + t];
  Shape oshape = x.rank() == 3 ? Shape{batch, tlen} : Shape{tlen};
  auto xn = x.impl();
  return detail_make_op<T>("select_channel", std::move(oshape), std::move(out), {x},
                           [xn, batch, channels, tlen, channel](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::int64_t n = 0; n < batch; ++n)
                               for (std::int64_t t = 0; t < tlen; ++t)
                                 gx[(n * channels + channel) * tlen + t] += self.grad[n * tlen + t];
                           });
}

namespace detail {

template <class T>
Tensor<T> concat_axis(const char* op, const std::vector<Tensor<T>>& parts, int axis) {
  op_require(!parts.empty(), op, "empty input list");
  const Shape& first = parts.front().shape();
  int rank = static_cast<int>(first.size());
  std::int64_t total = 0;
  for (const auto& p : parts) {
    check_finite(op, p);
    op_require(p.rank() == rank, op,
               "rank mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        op_require(p.dim(d) == first[static_cast<std::size_t>(d)], op,
                   "shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    total += p.dim(axis);
  }
  Shape oshape = first;
  oshape[static_cast<std::size_t>(axis)] = total;

  // outer = product of dims before axis, inner = product after.
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= oshape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= oshape[static_cast<std::size_t>(d)];

  std::vector<T> out(static_cast<std::size_t>(numel_of(oshape)));
  std::vector<std::int64_t> extents;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    std::int64_t e = p.dim(axis);
    const T* pd = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(pd + o * e * inner, pd + (o + 1) * e * inner,
                out.data() + (o * total + offset) * inner);
    extents.push_back(e);
    offset += e;
  }

  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.impl());
  return detail_make_op<T>(op, std::move(oshape), std::move(out), parts,
                           [nodes, extents, outer, inner, total](TensorNode<T>& self) {
                             std::int64_t off = 0;
                             for (std::size_t i = 0; i < nodes.size(); ++i) {
                               std::int64_t e = extents[i];
                               if (nodes[i]->requires_grad) {
                                 auto& gp = ensure_grad(*nodes[i]);
                                 for (std::int64_t o = 0; o < outer; ++o)
                                   for (std::int64_t k = 0; k < e * inner; ++k)
                                     gp[o * e * inner + k] +=
                                         self.grad[(o * total + off) * inner + k];
                               }
                               off += e;
                             }
                           });
}

}  // namespace detail

/// Concatenate feature maps along the channel axis: [C,T] or [N,C,T].
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::op_require(!parts.empty(), "concat_channels", "empty input list");
  int rank = parts.front().rank();
  detail::op_require(rank == 2 || rank == 3, "concat_channels",
                     "expected rank 2 or 3, got shape " + shape_str(parts.front().shape()));
  return detail::concat_axis("concat_channels", parts, rank - 2);
}

/// Concatenate feature vectors along the trailing axis: [F] or [N,F].
template <class T>
Tensor<T> concat_features(const std::vector<Tensor<T>>& parts) {
  detail::op_require(!parts.empty(), "concat_features", "empty input list");
  int rank = parts.front().rank();
  detail::op_require(rank == 1 || rank == 2, "concat_features",
                     "expected rank 1 or 2, got shape " + shape_str(parts.front().shape()));
  return detail::concat_axis("concat_features", parts, rank - 1);
}

/// Rescale each channel of a feature map: out[n,c,t] = x[n,c,t] * s[n,c].
template <class T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s) {
  detail::check_finite("channel_scale", x);
  detail::check_finite("channel_scale", s);
  detail::op_require(x.rank() == 2 || x.rank() == 3, "channel_scale",
                     "expected rank 2 or 3, got shape " + shape_str(x.shape()));
  Shape want(x.shape().begin(), x.shape().end() - 1);
  detail::op_require(s.shape() == want, "channel_scale",
                     "scale shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
  std::int64_t rows = s.numel();
  std::int64_t tlen = x.shape().back();
  std::vector<T> out(x.data());
  const T* sd = s.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T f = sd[r];
    for (std::int64_t t = 0; t < tlen; ++t) out[r * tlen + t] *= f;
  }
  auto xn = x.impl(), sn = s.impl();
  return detail_make_op<T>("channel_scale", x.shape(), std::move(out), {x, s},
                           [xn, sn, rows, tlen](TensorNode<T>& self) {
                             if (xn->requires_grad) {
                               auto& gx = detail::ensure_grad(*xn);
                               for (std::int64_t r = 0; r < rows; ++r) {
                                 T f = sn->data[static_cast<std::size_t>(r)];
                                 for (std::int64_t t = 0; t < tlen; ++t)
                                   gx[r * tlen + t] += self.grad[r * tlen + t] * f;
                               }
                             }
                             if (sn->requires_grad) {
                               auto& gs = detail::ensure_grad(*sn);
                               for (std::int64_t r = 0; r < rows; ++r) {
                                 T acc = T(0);
                                 for (std::int64_t t = 0; t < tlen; ++t)
                                   acc += self.grad[r * tlen + t] * xn->data[r * tlen + t];
                                 gs[static_cast<std::size_t>(r)] += acc;
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// y = x W^T + b with W stored [out,in]; x is [F] or [N,F].
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::check_finite("affine", x);
  detail::check_finite("affine", w);
  detail::check_finite("affine", b);
  detail::op_require(x.rank() == 1 || x.rank() == 2, "affine",
                     "expected rank 1 or 2 input, got shape " + shape_str(x.shape()));
  detail::op_require(w.rank() == 2, "affine", "weight must be rank 2, got " + shape_str(w.shape()));
  std::int64_t batch = x.rank() == 2 ? x.dim(0) : 1;
  std::int64_t fin = x.shape().back();
  std::int64_t fout = w.dim(0);
  detail::op_require(w.dim(1) == fin, "affine",
                     "input features " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  detail::op_require(b.rank() == 1 && b.dim(0) == fout, "affine",
                     "bias shape " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  std::vector<T> out(static_cast<std::size_t>(batch * fout));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  const T* bd = b.data().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t o = 0; o < fout; ++o) {
      T acc = bd[o];
      const T* xrow = xd + n * fin;
      const T* wrow = wd + o * fin;
      for (std::int64_t f = 0; f < fin; ++f) acc += xrow[f] * wrow[f];
      out[n * fout + o] = acc;
    }
  Shape oshape = x.rank() == 2 ? Shape{batch, fout} : Shape{fout};
  auto xn = x.impl(), wn = w.impl(), bn = b.impl();
  return detail_make_op<T>(
      "affine", std::move(oshape), std::move(out), {x, w, b},
      [xn, wn, bn, batch, fin, fout](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (xn->requires_grad) {
          auto& gx = detail::ensure_grad(*xn);
          for (std::int64_t n = 0; n < batch; ++n)
            for (std::int64_t o = 0; o < fout; ++o) {
              T go = g[n * fout + o];
              const T* wrow = wn->data.data() + o * fin;
              for (std::int64_t f = 0; f < fin; ++f) gx[n * fin + f] += go * wrow[f];
            }
        }
        if (wn->requires_grad) {
          auto& gw = detail::ensure_grad(*wn);
          for (std::int64_t n = 0; n < batch; ++n)
            for (std::int64_t o = 0; o < fout; ++o) {
              T go = g[n * fout + o];
              const T* xrow = xn->data.data() + n * fin;
              for (std::int64_t f = 0; f < fin; ++f) gw[o * fin + f] += go * xrow[f];
            }
        }
        if (bn->requires_grad) {
          auto& gb = detail::ensure_grad(*bn);
          for (std::int64_t n = 0; n < batch; ++n)
            for (std::int64_t o = 0; o < fout; ++o) gb[o] += g[n * fout + o];
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// 1D convolution, x [C_in,T] or [N,C_in,T], w [C_out,C_in,K], b [C_out].
/// Output extent is floor((T + pad_left + pad_right - K)/stride) + 1.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride,
                 std::int64_t pad_left, std::int64_t pad_right) {
  detail::check_finite("conv1d", x);
  detail::check_finite("conv1d", w);
  detail::check_finite("conv1d", b);
  detail::op_require(x.rank() == 2 || x.rank() == 3, "conv1d",
                     "expected rank 2 or 3 input, got shape " + shape_str(x.shape()));
  detail::op_require(w.rank() == 3, "conv1d", "kernel must be rank 3, got " + shape_str(w.shape()));
  detail::op_require(stride >= 1, "conv1d", "stride must be >= 1");
  detail::op_require(pad_left >= 0 && pad_right >= 0, "conv1d", "negative pad");
  bool batched = x.rank() == 3;
  std::int64_t batch = batched ? x.dim(0) : 1;
  std::int64_t cin = batched ? x.dim(1) : x.dim(0);
  std::int64_t tlen = x.shape().back();
  std::int64_t cout = w.dim(0), ksize = w.dim(2);
  detail::op_require(w.dim(1) == cin, "conv1d",
                     "input channels " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
  detail::op_require(b.rank() == 1 && b.dim(0) == cout, "conv1d",
                     "bias shape " + shape_str(b.shape()) + " vs kernel " + shape_str(w.shape()));
  detail::op_require(tlen + pad_left + pad_right >= ksize, "conv1d",
                     "kernel " + std::to_string(ksize) + " exceeds padded extent " +
                         std::to_string(tlen + pad_left + pad_right));
  std::int64_t tout = (tlen + pad_left + pad_right - ksize) / stride + 1;

  std::vector<T> out(static_cast<std::size_t>(batch * cout * tout));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  const T* bd = b.data().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t co = 0; co < cout; ++co) {
      T* orow = out.data() + (n * cout + co) * tout;
      for (std::int64_t to = 0; to < tout; ++to) {
        T acc = bd[co];
        std::int64_t j0 = to * stride - pad_left;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const T* xrow = xd + (n * cin + ci) * tlen;
          const T* wrow = wd + (co * cin + ci) * ksize;
          for (std::int64_t k = 0; k < ksize; ++k) {
            std::int64_t j = j0 + k;
            if (j >= 0 && j < tlen) acc += xrow[j] * wrow[k];
          }
        }
        orow[to] = acc;
      }
    }

  Shape oshape = batched ? Shape{batch, cout, tout} : Shape{cout, tout};
  auto xn = x.impl(), wn = w.impl(), bn = b.impl();
  return detail_make_op<T>(
      "conv1d", std::move(oshape), std::move(out), {x, w, b},
      [xn, wn, bn, batch, cin, tlen, cout, ksize, tout, stride, pad_left](TensorNode<T>& self) {
        const T* g = self.grad.data();
        bool want_x = xn->requires_grad, want_w = wn->requires_grad, want_b = bn->requires_grad;
        T* gx = want_x ? detail::ensure_grad(*xn).data() : nullptr;
        T* gw = want_w ? detail::ensure_grad(*wn).data() : nullptr;
        T* gb = want_b ? detail::ensure_grad(*bn).data() : nullptr;
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t co = 0; co < cout; ++co)
            for (std::int64_t to = 0; to < tout; ++to) {
              T go = g[(n * cout + co) * tout + to];
              if (go == T(0)) continue;
              if (want_b) gb[co] += go;
              std::int64_t j0 = to * stride - pad_left;
              for (std::int64_t ci = 0; ci < cin; ++ci) {
                const T* xrow = xn->data.data() + (n * cin + ci) * tlen;
                const T* wrow = wn->data.data() + (co * cin + ci) * ksize;
                for (std::int64_t k = 0; k < ksize; ++k) {
                  std::int64_t j = j0 + k;
                  if (j < 0 || j >= tlen) continue;
                  if (want_w) gw[(co * cin + ci) * ksize + k] += go * xrow[j];
                  if (want_x) gx[(n * cin + ci) * tlen + j] += go * wrow[k];
                }
              }
            }
      });
}

template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride,
                 std::int64_t pad) {
  return conv1d(x, w, b, stride, pad, pad);
}

/// Non-overlapping max pooling with stride == window; a trailing remainder
/// shorter than the window is dropped. Ties route to the first maximum.
template <class T>
Tensor<T> maxpool1d(const Tensor<T>& x, std::int64_t window) {
  detail::check_finite("maxpool1d", x);
  detail::op_require(window >= 1, "maxpool1d", "window must be >= 1");
  std::int64_t rows, tlen;
  detail::time_view("maxpool1d", x, rows, tlen);
  detail::op_require(tlen >= window, "maxpool1d",
                     "extent " + std::to_string(tlen) + " < window " + std::to_string(window));
  std::int64_t tout = tlen / window;
  std::vector<T> out(static_cast<std::size_t>(rows * tout));
  std::vector<std::int64_t> arg(out.size());
  const T* xd = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t to = 0; to < tout; ++to) {
      const T* win = xd + r * tlen + to * window;
      std::int64_t best = 0;
      for (std::int64_t k = 1; k < window; ++k)
        if (win[k] > win[best]) best = k;
      out[r * tout + to] = win[best];
      arg[r * tout + to] = r * tlen + to * window + best;
      if (detail::kink_state.active && window > 1) {
        T second = -std::numeric_limits<T>::infinity();
        for (std::int64_t k = 0; k < window; ++k)
          if (k != best && win[k] > second) second = win[k];
        detail::note_margin(static_cast<double>(win[best] - second));
      }
    }
  Shape oshape = x.shape();
  oshape.back() = tout;
  auto xn = x.impl();
  return detail_make_op<T>("maxpool1d", std::move(oshape), std::move(out), {x},
                           [xn, arg = std::move(arg)](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::size_t i = 0; i < arg.size(); ++i)
                               gx[static_cast<std::size_t>(arg[i])] += self.grad[i];
                           });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
struct BnStats {
  Tensor<T> mean;
  Tensor<T> var;  // population variance
};

namespace detail {

template <class T>
void bn_dims(const char* op, const Tensor<T>& x, std::int64_t& batch, std::int64_t& channels,
             std::int64_t& tlen) {
  op_require(x.rank() == 2 || x.rank() == 3, op,
             "expected rank 2 or 3 input, got shape " + shape_str(x.shape()));
  batch = x.rank() == 3 ? x.dim(0) : 1;
  channels = x.rank() == 3 ? x.dim(1) : x.dim(0);
  tlen = x.shape().back();
}

template <class T>
void bn_param_check(const char* op, const Tensor<T>& p, std::int64_t channels, const char* name) {
  op_require(p.rank() == 1 && p.dim(0) == channels, op,
             std::string(name) + " shape " + shape_str(p.shape()) + " vs " +
                 std::to_string(channels) + " channels");
}

}  // namespace detail

/// Training-mode batch norm: per-channel statistics over batch and time.
/// Batch statistics (population variance) are also returned for EMA updates.
template <class T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          double eps, BnStats<T>* stats_out = nullptr) {
  detail::op_require(eps > 0, "batchnorm", "eps must be > 0");
  detail::check_finite("batchnorm", x);
  detail::check_finite("batchnorm", gamma);
  detail::check_finite("batchnorm", beta);
  std::int64_t batch, channels, tlen;
  detail::bn_dims("batchnorm", x, batch, channels, tlen);
  detail::bn_param_check("batchnorm", gamma, channels, "gamma");
  detail::bn_param_check("batchnorm", beta, channels, "beta");

  const std::int64_t m = batch * tlen;
  std::vector<T> mean(static_cast<std::size_t>(channels), T(0));
  std::vector<T> var(static_cast<std::size_t>(channels), T(0));
  const T* xd = x.data().data();
  for (std::int64_t c = 0; c < channels; ++c) {
    T acc = T(0);
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* row = xd + (n * channels + c) * tlen;
      for (std::int64_t t = 0; t < tlen; ++t) acc += row[t];
    }
    mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
    T vacc = T(0);
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* row = xd + (n * channels + c) * tlen;
      for (std::int64_t t = 0; t < tlen; ++t) {
        T d = row[t] - mean[static_cast<std::size_t>(c)];
        vacc += d * d;
      }
    }
    var[static_cast<std::size_t>(c)] = vacc / static_cast<T>(m);
  }

  std::vector<T> inv_std(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c)
    inv_std[static_cast<std::size_t>(c)] =
        T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + static_cast<T>(eps));

  std::vector<T> out(x.data().size());
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* row = xd + (n * channels + c) * tlen;
      T* orow = out.data() + (n * channels + c) * tlen;
      T mu = mean[static_cast<std::size_t>(c)];
      T is = inv_std[static_cast<std::size_t>(c)];
      T ga = gd[c], be = bd[c];
      for (std::int64_t t = 0; t < tlen; ++t) orow[t] = (row[t] - mu) * is * ga + be;
    }

  if (stats_out) {
    stats_out->mean = Tensor<T>::from({channels}, mean);
    stats_out->var = Tensor<T>::from({channels}, var);
  }

  auto xn = x.impl(), gn = gamma.impl(), bn = beta.impl();
  return detail_make_op<T>(
      "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, batch, channels, tlen, mean = std::move(mean),
       inv_std = std::move(inv_std)](TensorNode<T>& self) {
        const std::int64_t m = batch * tlen;
        const T* g = self.grad.data();
        const T* xd = xn->data.data();
        for (std::int64_t c = 0; c < channels; ++c) {
          T mu = mean[static_cast<std::size_t>(c)];
          T is = inv_std[static_cast<std::size_t>(c)];
          T gsum = T(0), gxhat = T(0);
          for (std::int64_t n = 0; n < batch; ++n) {
            const T* grow = g + (n * channels + c) * tlen;
            const T* xrow = xd + (n * channels + c) * tlen;
            for (std::int64_t t = 0; t < tlen; ++t) {
              gsum += grow[t];
              gxhat += grow[t] * (xrow[t] - mu) * is;
            }
          }
          if (gn->requires_grad) detail::ensure_grad(*gn)[static_cast<std::size_t>(c)] += gxhat;
          if (bn->requires_grad) detail::ensure_grad(*bn)[static_cast<std::size_t>(c)] += gsum;
          if (xn->requires_grad) {
            auto& gx = detail::ensure_grad(*xn);
            T ga = gn->data[static_cast<std::size_t>(c)];
            T k = ga * is;
            T mg = gsum / static_cast<T>(m);
            T mgx = gxhat / static_cast<T>(m);
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* grow = g + (n * channels + c) * tlen;
              const T* xrow = xd + (n * channels + c) * tlen;
              T* gxrow = gx.data() + (n * channels + c) * tlen;
              for (std::int64_t t = 0; t < tlen; ++t) {
                T xhat = (xrow[t] - mu) * is;
                gxrow[t] += k * (grow[t] - mg - xhat * mgx);
              }
            }
          }
        }
      });
}

/// Inference-mode batch norm: per-channel affine map from running statistics.
template <class T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& running_mean, const Tensor<T>& running_var, double eps) {
  detail::op_require(eps > 0, "batchnorm", "eps must be > 0");
  detail::check_finite("batchnorm", x);
  detail::check_finite("batchnorm", gamma);
  detail::check_finite("batchnorm", beta);
  detail::check_finite("batchnorm", running_mean);
  detail::check_finite("batchnorm", running_var);
  std::int64_t batch, channels, tlen;
  detail::bn_dims("batchnorm", x, batch, channels, tlen);
  detail::bn_param_check("batchnorm", gamma, channels, "gamma");
  detail::bn_param_check("batchnorm", beta, channels, "beta");
  detail::bn_param_check("batchnorm", running_mean, channels, "running mean");
  detail::bn_param_check("batchnorm", running_var, channels, "running var");
  for (T v : running_var.data())
    detail::op_require(v > T(0), "batchnorm", "running variance must be strictly positive");

  std::vector<T> inv_std(static_cast<std::size_t>(channels));
  const T* rv = running_var.data().data();
  for (std::int64_t c = 0; c < channels; ++c)
    inv_std[static_cast<std::size_t>(c)] = T(1) / std::sqrt(rv[c] + static_cast<T>(eps));

  std::vector<T> out(x.data().size());
  const T* xd = x.data().data();
  const T* rm = running_mean.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* row = xd + (n * channels + c) * tlen;
      T* orow = out.data() + (n * channels + c) * tlen;
      T mu = rm[c], is = inv_std[static_cast<std::size_t>(c)];
      T ga = gd[c], be = bd[c];
      for (std::int64_t t = 0; t < tlen; ++t) orow[t] = (row[t] - mu) * is * ga + be;
    }

  auto xn = x.impl(), gn = gamma.impl(), bn = beta.impl(), mn = running_mean.impl();
  return detail_make_op<T>(
      "batchnorm", x.shape(), std::move(out),
      {x, gamma, beta, running_mean, running_var},
      [xn, gn, bn, mn, batch, channels, tlen, inv_std = std::move(inv_std)](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* xd = xn->data.data();
        const T* rm = mn->data.data();
        for (std::int64_t c = 0; c < channels; ++c) {
          T is = inv_std[static_cast<std::size_t>(c)];
          T ga = gn->data[static_cast<std::size_t>(c)];
          T gsum = T(0), gxhat = T(0);
          for (std::int64_t n = 0; n < batch; ++n) {
            const T* grow = g + (n * channels + c) * tlen;
            const T* xrow = xd + (n * channels + c) * tlen;
            for (std::int64_t t = 0; t < tlen; ++t) {
              gsum += grow[t];
              gxhat += grow[t] * (xrow[t] - rm[c]) * is;
            }
          }
          if (gn->requires_grad) detail::ensure_grad(*gn)[static_cast<std::size_t>(c)] += gxhat;
          if (bn->requires_grad) detail::ensure_grad(*bn)[static_cast<std::size_t>(c)] += gsum;
          if (xn->requires_grad) {
            auto& gx = detail::ensure_grad(*xn);
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* grow = g + (n * channels + c) * tlen;
              T* gxrow = gx.data() + (n * channels + c) * tlen;
              for (std::int64_t t = 0; t < tlen; ++t) gxrow[t] += grow[t] * ga * is;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Classification heads and losses

/// Softmax over the trailing class axis, numerically stable.
template <class T>
Tensor<T> softmax_classes(const Tensor<T>& x) {
  detail::check_finite("softmax", x);
  detail::op_require(x.rank() == 1 || x.rank() == 2, "softmax",
                     "expected rank 1 or 2, got shape " + shape_str(x.shape()));
  std::int64_t k = x.shape().back();
  std::int64_t rows = x.numel() / k;
  std::vector<T> out(x.data().size());
  const T* xd = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xd + r * k;
    T mx = row[0];
    for (std::int64_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    T denom = T(0);
    for (std::int64_t i = 0; i < k; ++i) denom += std::exp(row[i] - mx);
    T* orow = out.data() + r * k;
    for (std::int64_t i = 0; i < k; ++i) orow[i] = std::exp(row[i] - mx) / denom;
  }
  auto xn = x.impl();
  return detail_make_op<T>("softmax", x.shape(), std::move(out), {x},
                           [xn, rows, k](TensorNode<T>& self) {
                             auto& gx = detail::ensure_grad(*xn);
                             for (std::int64_t r = 0; r < rows; ++r) {
                               const T* y = self.data.data() + r * k;
                               const T* g = self.grad.data() + r * k;
                               T dot = T(0);
                               for (std::int64_t i = 0; i < k; ++i) dot += g[i] * y[i];
                               for (std::int64_t i = 0; i < k; ++i)
                                 gx[r * k + i] += y[i] * (g[i] - dot);
                             }
                           });
}

/// Mean binary cross-entropy with logits over all N*C entries, in the
/// log-sum-exp form that never overflows.
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::check_finite("bce_with_logits", logits);
  detail::check_finite("bce_with_logits", targets);
  detail::op_require(logits.shape() == targets.shape(), "bce_with_logits",
                     "shape mismatch " + shape_str(logits.shape()) + " vs " +
                         shape_str(targets.shape()));
  for (T t : targets.data())
    detail::op_require(t == T(0) || t == T(1), "bce_with_logits", "targets must be 0 or 1");
  const auto& zd = logits.data();
  const auto& td = targets.data();
  T acc = T(0);
  for (std::size_t i = 0; i < zd.size(); ++i) {
    T z = zd[i];
    // softplus(z) - z*t, grouped so the max(z,0) - z*t part (exact for
    // t in {0,1}) cannot absorb the tiny log1p term
    acc += (std::max(z, T(0)) - z * td[i]) + std::log1p(std::exp(-std::abs(z)));
  }
  T inv = T(1) / static_cast<T>(zd.size());
  auto zn = logits.impl(), tn = targets.impl();
  return detail_make_op<T>("bce_with_logits", {1}, {acc * inv}, {logits, targets},
                           [zn, tn, inv](TensorNode<T>& self) {
                             if (!zn->requires_grad) return;
                             auto& gz = detail::ensure_grad(*zn);
                             T g = self.grad[0] * inv;
                             for (std::size_t i = 0; i < gz.size(); ++i) {
                               T z = zn->data[i];
                               T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                                               : std::exp(z) / (T(1) + std::exp(z));
                               gz[i] += g * (s - tn->data[i]);
                             }
                           });
}

/// Mean multiclass cross-entropy from logits [N,K] and class indices.
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<std::int64_t>& classes) {
  detail::check_finite("cross_entropy", logits);
  detail::op_require(logits.rank() == 2, "cross_entropy",
                     "expected rank 2 logits, got shape " + shape_str(logits.shape()));
  std::int64_t n = logits.dim(0), k = logits.dim(1);
  detail::op_require(static_cast<std::int64_t>(classes.size()) == n, "cross_entropy",
                     "class count " + std::to_string(classes.size()) + " vs batch " +
                         std::to_string(n));
  for (auto c : classes)
    detail::op_require(c >= 0 && c < k, "cross_entropy",
                       "class index " + std::to_string(c) + " out of range [0," +
                           std::to_string(k) + ")");
  const T* zd = logits.data().data();
  std::vector<T> probs(logits.data().size());
  T acc = T(0);
  for (std::int64_t r = 0; r < n; ++r) {
    const T* row = zd + r * k;
    T mx = row[0];
    for (std::int64_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    T denom = T(0);
    for (std::int64_t i = 0; i < k; ++i) denom += std::exp(row[i] - mx);
    // (mx - z_true) is exact, so a near-zero loss is not absorbed into mx
    acc += (mx - row[classes[static_cast<std::size_t>(r)]]) + std::log(denom);
    T* prow = probs.data() + r * k;
    for (std::int64_t i = 0; i < k; ++i) prow[i] = std::exp(row[i] - mx) / denom;
  }
  T inv = T(1) / static_cast<T>(n);
  auto zn = logits.impl();
  return detail_make_op<T>("cross_entropy", {1}, {acc * inv}, {logits},
                           [zn, classes, n, k, inv, probs = std::move(probs)](TensorNode<T>& self) {
                             auto& gz = detail::ensure_grad(*zn);
                             T g = self.grad[0] * inv;
                             for (std::int64_t r = 0; r < n; ++r) {
                               const T* prow = probs.data() + r * k;
                               T* grow = gz.data() + r * k;
                               for (std::int64_t i = 0; i < k; ++i) grow[i] += g * prow[i];
                               grow[classes[static_cast<std::size_t>(r)]] -= g;
                             }
                           });
}

}  // namespace slcn
