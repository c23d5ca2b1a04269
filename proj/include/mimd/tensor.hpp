#pragma once

// Dense double-precision tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle: shape plus shared storage. Tensors that are not
// attached to a Tape are constants; ops on constants record nothing. Attaching
// a leaf with Tape::track makes it differentiable, and every op whose inputs
// touch a tape records a node on it. Tape::backward sweeps the nodes in reverse
// order and returns gradients for tracked leaves only.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mimd/random.hpp"

namespace mimd {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using NodeId = std::int64_t;

class Tape;

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  /// Constant tensor; `values.size()` must equal the shape product.
  Tensor(Shape shape, Array values);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor from(Shape shape, std::initializer_list<double> values);
  static Tensor scalar(double value) { return filled({1}, value); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return values_ ? values_->size() : 0; }
  /// Axis extent; negative axes count from the end.
  Index dim(Index axis) const;

  const Array& values() const { return *values_; }
  /// Writable storage. Shared with every handle (and tracked copy) of this tensor.
  Array& mutable_values() { return *values_; }
  double item() const;

  /// Row-major view of a rank-2 tensor, or of a rank-3 tensor as (d0*d1, d2).
  Eigen::Map<const RowMatrix> matrix() const;

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  NodeId node() const { return node_; }

  /// Same values under a new shape with equal element count (shares storage).
  Tensor reshaped(Shape shape) const;
  /// Deep copy detached from any tape.
  Tensor clone() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<Array> values_;
  Tape* tape_ = nullptr;
  NodeId node_ = -1;
};

enum class OpKind {
  Leaf, Add, Sub, Mul, Scale, MatMul, Transpose, Softmax, LayerNorm, Gelu,
  Dropout, Concat, Narrow, Reshape, Gather, Sum, CrossEntropy
};

/// Leaf gradients produced by Tape::backward, keyed by node id.
class Gradients {
 public:
  bool contains(const Tensor& t) const;
  /// Gradient for a tracked leaf, shaped like the leaf's values. Throws if absent.
  const Array& of(const Tensor& t) const;
  const std::unordered_map<NodeId, Array>& map() const { return grads_; }

 private:
  friend class Tape;
  std::unordered_map<NodeId, Array> grads_;
};

class Tape {
 public:
  /// Accumulates `grad` into the gradient slot of `node` (ignored for node < 0).
  using Accumulate = std::function<void(NodeId node, const Array& grad)>;
  using BackwardFn = std::function<void(const Array& grad_out, const Accumulate& acc)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable alias of `leaf` sharing its storage.
  Tensor track(const Tensor& leaf);

  /// Records an op result. Parents must already be on this tape (or be -1).
  Tensor record(OpKind kind, Shape shape, Array values, std::vector<NodeId> parents,
                BackwardFn backward);

  /// Reverse sweep from a scalar root. Gradients accumulate at fan-out.
  Gradients backward(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  const std::vector<NodeId>& parents(NodeId id) const {
    return nodes_.at(static_cast<std::size_t>(id)).parents;
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> parents;
    Index size;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- ops -------------------------------------------------------------------
// `b` may broadcast to `a` along trailing axes (size-1 axes of `b` stretch).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

/// (M,K)x(K,N) -> (M,N); a rank-3 `a` of shape (B,M,K) is a batch of matrices.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor softmax(const Tensor& x, Index axis);
/// Normalizes over the last axis with population variance, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Exact erf form: x * Phi(x).
Tensor gelu(const Tensor& x);
/// Inverted dropout. Identity when `training` is false or `rate` is 0.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

Tensor concat(std::span<const Tensor> parts, Index axis);
Tensor narrow(const Tensor& x, Index axis, Index start, Index length);
Tensor reshape(const Tensor& x, Shape shape);
/// out[i] = x[index[i]]; backward scatters.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<Index>> index, Shape shape);
Tensor sum(const Tensor& x);
/// -ln(max(probs[label], 1e-12)) as a scalar tensor.
Tensor cross_entropy(const Tensor& probs, Index label);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// Standard normal CDF.
double normal_cdf(double x);

}  // namespace mimd
