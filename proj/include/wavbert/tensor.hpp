#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wavbert/error.hpp"

namespace wavbert {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (!has_grad) {
      grad.assign(value.size(), 0.0);
      has_grad = true;
    }
  }
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

class Tensor;

// Ordered record of differentiable operations executed on this thread.
// Each entry owns the produced node and an adjoint closure that pushes the
// node's gradient into its inputs. Adjoints run in reverse record order.
class Tape {
 public:
  using Adjoint = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(detail::NodePtr output, Adjoint adjoint) {
    entries_.push_back(Entry{std::move(output), std::move(adjoint)});
  }

  // Releases every intermediate activation held by the tape.
  void clear() noexcept { entries_.clear(); }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  bool contains(const detail::Node* node) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [node](const Entry& e) { return e.output.get() == node; });
  }

  inline void backward(const Tensor& loss);

  static Tape& current() { return *active(); }

 private:
  friend class TapeScope;

  struct Entry {
    detail::NodePtr output;
    Adjoint adjoint;
  };

  static Tape*& active() {
    thread_local Tape fallback;
    thread_local Tape* current = &fallback;
    return current;
  }

  std::vector<Entry> entries_;
};

// Installs a fresh tape for the current thread; the previous one is
// restored (and this one released) on destruction.
class TapeScope {
 public:
  TapeScope() : previous_(Tape::active()) { Tape::active() = &tape_; }
  ~TapeScope() { Tape::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* previous_;
};

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Dense row-major float64 tensor. Copies share the underlying node (handle
// semantics); use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " elements but " +
                           std::to_string(values.size()) + " values were given");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor({}, {value}); }

  // Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return Tensor(std::move(shape), std::move(values), true);
  }

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) {
      throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape()));
    }
    return node_->shape[axis];
  }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }

  double item() const {
    if (numel() != 1) {
      throw ContractError("tensor: item() on non-scalar of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) {
      throw DimensionError("tensor: index rank mismatch for shape " + shape_str(shape()));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= node_->shape[axis]) {
        throw DimensionError("tensor: index out of range for shape " + shape_str(shape()));
      }
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return node_->value[flat];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return node_->has_grad; }
  std::span<const double> grad() const {
    if (!node_->has_grad) throw ContractError("tensor: gradient not populated");
    return node_->grad;
  }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->has_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Independent copy of the values; never requires grad.
  Tensor clone() const { return Tensor(shape(), node_->value); }

  const detail::NodePtr& node() const { return node_; }
  bool same(const Tensor& other) const { return node_ == other.node_; }

 private:
  detail::NodePtr node_;
};

inline void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad() || (!loss.is_leaf() && !contains(loss.node().get()))) {
    throw ContractError("backward: loss is not reachable from the tape");
  }
  // Intermediate gradients restart from zero; leaf gradients accumulate.
  for (auto& e : entries_) {
    e.output->grad.assign(e.output->value.size(), 0.0);
    e.output->has_grad = true;
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->adjoint();
}

inline void backward(const Tensor& loss) { Tape::current().backward(loss); }

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

// Builds an op result. When `track` is set the node is marked as a tape
// intermediate and `adjoint` is recorded; the adjoint receives the output
// node so it can read the upstream gradient.
inline Tensor make_result(Shape shape, std::vector<double> values, bool track,
                          std::function<void(const Node&)> adjoint) {
  Tensor out(std::move(shape), std::move(values));
  if (track) {
    out.set_requires_grad(true);
    out.node()->leaf = false;
    Node* raw = out.node().get();
    Tape::current().record(out.node(), [raw, fn = std::move(adjoint)]() { fn(*raw); });
  }
  return out;
}

// Target gradient buffer for an input, or nullptr when it needs none.
inline double* grad_target(const NodePtr& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return node->grad.data();
}

}  // namespace detail

}  // namespace wavbert
