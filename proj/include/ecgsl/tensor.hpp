#pragma once

// Dense tensors with a reverse-mode differentiation tape.
//
// Values live in `Array<T>` (plain data) or in tape nodes referenced through
// `Tensor<T>` handles. Every op appends a node to the tape of its inputs;
// `Tape::backward` walks the tape in reverse creation order, which is a valid
// topological order because a node can only reference earlier nodes.
//
// Only float and double are instantiated.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ecgsl/error.hpp"

namespace ecgsl {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <class T>
struct Array {
  Shape shape;
  std::vector<T> data;

  Array() = default;
  explicit Array(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Array(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    require(data.size() == numel(shape), ErrorCode::Shape,
            "array data length " + std::to_string(data.size()) +
                " does not match shape " + shape_string(shape));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  template <class U>
  Array<U> cast() const {
    return Array<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

  bool operator==(const Array&) const = default;
};

template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::size_t index = 0;
  Tape<T>* tape = nullptr;
  std::function<void(Node&)> backward;

  // Zero-initialised gradient buffer, allocated on first use.
  std::span<T> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  // Empty when no gradient reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  T item() const {
    require(size() == 1, ErrorCode::Shape, "item() on non-scalar tensor " + shape_string(shape()));
    return node_->value[0];
  }
  Array<T> value() const { return Array<T>(node_->shape, node_->value); }
  Array<T> grad_array() const {
    Array<T> out(node_->shape);
    if (!node_->grad.empty()) out.data = node_->grad;
    return out;
  }
  Tape<T>& tape() const { return *node_->tape; }
  detail::Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<T> constant(Array<T> value) { return make_leaf(std::move(value), false); }
  Tensor<T> variable(Array<T> value) { return make_leaf(std::move(value), true); }

  // Records an op result. `backward` receives the result node and must push
  // its gradient into the parents it captured.
  Tensor<T> record(const char* op, Shape shape, std::vector<T> value, bool requires_grad,
                   std::function<void(detail::Node<T>&)> backward);

  // Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
  // Intermediate gradients are recomputed from scratch on every call, so two
  // calls without zero_grad() double the leaf gradients.
  void backward(const Tensor<T>& loss);

  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

  // Hash of the branch pattern taken by piecewise ops (ReLU sign, max-pool
  // argmax). Two evaluations with equal signatures lie on the same smooth piece.
  std::uint64_t kink_signature() const { return kink_signature_; }
  void mix_kink(std::uint64_t v) {
    kink_signature_ ^= v + 0x9e3779b97f4a7c15ULL + (kink_signature_ << 6) + (kink_signature_ >> 2);
  }

 private:
  Tensor<T> make_leaf(Array<T> value, bool requires_grad);

  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  std::uint64_t kink_signature_ = 0;
};

// ---------------------------------------------------------------------------
// Ops. Shapes are checked eagerly and violations raise ErrorCode::Shape.

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
// x[..., N] + bias[N]
template <class T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

// a[M, K] . b[K, N]
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> transpose(const Tensor<T>& a);
// x[M, K] . w[K, N] + b[N]
template <class T> Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Cross-correlation. x is [C_in, L] or [B, C_in, L]; kernel is [C_out, C_in, K].
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding, const Tensor<T>* bias = nullptr);
// Adjoint of conv1d with respect to its input. x is [C_in, L] or [B, C_in, L];
// kernel is [C_in, C_out, K]; output length (L-1)*stride - 2*padding + K + output_padding.
template <class T>
Tensor<T> conv1d_transpose(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                           std::size_t padding, std::size_t output_padding,
                           const Tensor<T>* bias = nullptr);
// Non-overlapping max pooling over the last axis of [B, C, L], window = stride = size.
template <class T> Tensor<T> max_pool1d(const Tensor<T>& x, std::size_t size);

template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> tanh(const Tensor<T>& x);
// Softmax over the last axis.
template <class T> Tensor<T> softmax(const Tensor<T>& x);
// Softmax over the last axis of x[R, C] restricted to entries where mask is
// nonzero (row-major R*C). Excluded entries get weight exactly 0; a row with
// no admissible entry is all zeros.
template <class T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> mask);
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));
// Inverted dropout; the identity when `training` is false.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64* rng);

// Mean over rows i with mask[i] of mean_j (pred[i,j] - target[i,j])^2.
template <class T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target,
                     std::span<const std::uint8_t> mask);
// Mean softmax cross-entropy of logits[B, C] against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
// Rows of x[N, ...] at the given indices, in order.
template <class T>
Tensor<T> index_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
// Mean over the last axis; [..., N] -> [...].
template <class T> Tensor<T> mean_last(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose +/-eps probes straddle a kink
};

using GradCheckFn = std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>;

// Central differences per coordinate against the tape gradient. Relative
// error is |a - n| / max(1e-8, |a| + |n|).
GradCheckResult grad_check(const GradCheckFn& f, const Array<double>& x, double eps = 1e-5);

}  // namespace ecgsl
