#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "pemvc/errors.hpp"

namespace pemvc {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

namespace detail {
template <typename S>
struct TensorStorage {
  std::vector<S> data;
  std::vector<S> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major n-d tensor. Copies share the underlying storage, so a
// Tensor behaves like a handle; every op in ops.hpp allocates fresh
// storage for its output (views are materialized, never strided aliases).
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        st_(std::make_shared<detail::TensorStorage<S>>()) {
    check_shape();
    st_->data.assign(static_cast<size_t>(shape_numel(shape_)), S(0));
  }

  Tensor(std::vector<int> shape, std::vector<S> data)
      : shape_(std::move(shape)),
        st_(std::make_shared<detail::TensorStorage<S>>()) {
    check_shape();
    if (static_cast<int64_t>(data.size()) != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape_));
    }
    st_->data = std::move(data);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = value;
    return t;
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return shape_numel(shape_); }
  bool defined() const { return static_cast<bool>(st_); }

  S* data() { return st_->data.data(); }
  const S* data() const { return st_->data.data(); }
  std::vector<S>& vec() { return st_->data; }
  const std::vector<S>& vec() const { return st_->data; }

  S item() const {
    if (numel() != 1) {
      throw UsageError("item() on non-scalar tensor of shape " + shape_str(shape_));
    }
    return st_->data[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    st_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return st_ && !st_->grad.empty(); }

  // Lazily materializes a zero gradient buffer of matching shape.
  std::vector<S>& grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), S(0));
    return st_->grad;
  }
  const std::vector<S>& grad_cref() const { return st_->grad; }

  void accumulate_grad(const std::vector<S>& g) {
    auto& dst = grad();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  void zero_grad() {
    if (st_) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }

  // Releases the gradient buffer entirely (sgd_step's "cleared" state).
  void clear_grad() {
    if (st_) {
      st_->grad.clear();
      st_->grad.shrink_to_fit();
    }
  }

  // Deep copy: fresh storage, same bits, grad not carried over.
  Tensor clone() const {
    Tensor t(shape_, st_->data);
    t.st_->requires_grad = st_->requires_grad;
    return t;
  }

  // Storage identity; the tape tracks tensors by this key.
  const void* id() const { return static_cast<const void*>(st_.get()); }

 private:
  void check_shape() const {
    for (int e : shape_) {
      if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape_));
    }
  }

  std::vector<int> shape_;
  std::shared_ptr<detail::TensorStorage<S>> st_;
};

// Reverse-mode tape. Ops append nodes in execution order; backward() walks
// them in reverse. Leaf tensors (requires_grad, never produced by an op)
// accumulate gradients across backward calls; op outputs are zeroed at the
// start of every pass so repeated backward never double-counts through
// intermediates.
template <typename S>
class Tape {
 public:
  bool tracked(const Tensor<S>& t) const {
    return tracked_.count(t.id()) != 0;
  }

  // True when an op consuming these inputs must be recorded.
  bool needs(std::initializer_list<const Tensor<S>*> inputs) const {
    for (const Tensor<S>* t : inputs) {
      if (t->requires_grad() || tracked(*t)) return true;
    }
    return false;
  }

  void record(const Tensor<S>& out, std::function<void()> backward_fn) {
    tracked_.insert(out.id());
    nodes_.push_back(Node{out, std::move(backward_fn)});
  }

  size_t size() const { return nodes_.size(); }

  void backward(Tensor<S>& loss) {
    if (loss.numel() != 1) {
      throw UsageError("backward expects a scalar loss, got shape " +
                       shape_str(loss.shape()));
    }
    if (!tracked(loss)) {
      throw UsageError("backward: loss tensor is not on this tape");
    }
    for (auto& n : nodes_) n.out.zero_grad();
    loss.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->out.has_grad()) continue;  // branch never reached the loss
      it->back();
    }
  }

 private:
  struct Node {
    Tensor<S> out;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
  std::unordered_set<const void*> tracked_;
};

// Vanilla SGD update: w <- w - lr * g, then the gradient buffer is
// released so a missing backward pass is caught on the next step.
template <typename S>
void sgd_step(const std::vector<Tensor<S>*>& params, double lr) {
  if (!(lr > 0)) throw ConfigError("sgd_step: learning rate must be positive");
  for (Tensor<S>* p : params) {
    if (!p->has_grad()) {
      throw UsageError("sgd_step: parameter of shape " + shape_str(p->shape()) +
                       " has no gradient; was backward() run?");
    }
  }
  for (Tensor<S>* p : params) {
    S* w = p->data();
    const std::vector<S>& g = p->grad_cref();
    for (size_t i = 0; i < g.size(); ++i) w[i] -= static_cast<S>(lr) * g[i];
    p->clear_grad();
  }
}

}  // namespace pemvc
