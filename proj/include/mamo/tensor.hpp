#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to a node holding its shape, values and (after
// backward) gradient. Operations executed while a Tape is active, and with at
// least one input that requires gradients, are appended to that tape; backward
// replays the tape in reverse application order. With no active tape every
// operation produces a constant, which is how stop-gradient paths are built.
//
// Broadcasting is never implicit, with two documented exceptions: a tensor
// holding exactly one element broadcasts against any shape in the elementwise
// ops, and add_bias adds a vector to every row.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mamo {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward reaches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  // Returns the parent's gradient buffer, allocating zeros on first use.
  std::vector<T>& parent_grad(std::size_t i);
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  // A leaf that participates in gradient computation.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  // Direct mutation is reserved for optimizers, EMA and initialisation.
  std::span<T> mutable_values() { return node_->values; }
  T item() const;
  T at(std::size_t flat) const { return node_->values.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }
  const char* op() const { return node_->op; }

  // Independent copy of the values; never shares storage or history.
  Tensor detach_copy() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of applied operations. At most one tape per scalar type is
// active on a thread; install one with Tape::Scope.
template <typename T>
class Tape {
 public:
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  // Suspends recording for the lifetime of the guard.
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  void record(std::shared_ptr<TensorNode<T>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Populates gradients of every requires_grad ancestor of `loss`.
  // Throws ShapeError for a non-scalar loss and NumericError naming the
  // primitive whose backward produced a non-finite value.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
};

// ---- primitives ------------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
// x[..., n] + bias[n] on every row.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

// a[..., m, k] @ b. b is either a rank-2 [k, n] matrix shared by every
// leading batch entry, or a rank-3 [batch, k, n] stack matching a's leading
// extents. With transpose_b, b's last two axes are read as [n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
// Softmax over the last axis of scores [batch, heads, queries, keys]; keys with
// key_valid[b * keys + k] == 0 receive probability zero.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> key_valid);

// Normalises over the last axis then applies gain/shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T(1e-5));
// Row-wise unit L2 norm over the last axis.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12));

// table[V, d] rows selected by ids -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// Treats x as rows over its last axis and picks rows by flat index.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);
template <typename T> Tensor<T> l1(const Tensor<T>& pred, const Tensor<T>& target);
// Mean over rows of -log softmax(logits[r])[targets[r]].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

// Names of the differentiable primitives above, as recorded in TensorNode::op.
const std::vector<std::string>& primitive_set();

}  // namespace mamo
