#pragma once

// Reverse-mode automatic differentiation over vqg::Tensor.
//
// A Value is a cheap handle to a graph node. Ops build new nodes and never
// touch their inputs. Shapes must line up exactly: the only implicit
// broadcast is add_bias. Everything else (replication, reshaping) goes through
// explicit ops so each backward rule stays a few lines long.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vqg/tensor.hpp"

namespace vqg {

class Value;

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Tensor out;
  Tensor grad;  // empty-shaped placeholder until first accumulation
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  /// Adds `g` into this node's gradient, allocating it on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

}  // namespace detail

class Value {
 public:
  Value() = default;

  /// Leaf that never receives a gradient.
  static Value constant(Tensor t);
  /// Leaf whose gradient is accumulated by backward().
  static Value parameter(Tensor t);

  /// Builds an interior node. Exposed so tests can construct custom nodes;
  /// an empty `rule` on a node that requires a gradient makes backward()
  /// fail.
  static Value from_op(std::string op, Tensor out, std::vector<Value> parents,
                       detail::BackwardFn rule);

  bool defined() const { return node_ != nullptr; }
  const Tensor& data() const { return node_->out; }
  const Shape& shape() const { return node_->out.shape(); }
  double item() const { return node_->out.item(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  const std::string& op() const { return node_->op; }

  /// Mutable storage of a leaf (optimizer updates, finite differences).
  Tensor& leaf_data();

  bool has_grad() const { return node_->has_grad; }
  /// Gradient, or a zero tensor of the output shape if none accumulated.
  Tensor grad() const;
  void zero_grad();

  const detail::Node* node() const { return node_.get(); }
  bool same_node(const Value& other) const { return node_ == other.node_; }

 private:
  explicit Value(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend std::vector<Value> backward(const Value& root);
};

/// Runs reverse accumulation from a one-element root. Parameter leaves
/// accumulate additively; callers zero them between steps. Returns the
/// parameter leaves reached.
std::vector<Value> backward(const Value& root);

// Linear algebra. matmul accepts [.., m, k] x [.., k, n] with identical
// leading dims, or [.., m, k] x [k, n] where the right operand is shared.
Value matmul(const Value& a, const Value& b);
Value transpose(const Value& a);

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);
/// a[..., j] + bias[j].
Value add_bias(const Value& a, const Value& bias);

Value relu(const Value& a);
Value sigmoid(const Value& a);
Value log(const Value& a);
/// Elementwise clamp to [lo, hi]; zero gradient where the bound is active.
Value clamp(const Value& a, double lo, double hi);

Value softmax(const Value& a, std::size_t axis);
/// Max over an axis (removed). Gradient goes to the first maximal index.
Value max(const Value& a, std::size_t axis);
Value sum(const Value& a, std::size_t axis);
Value mean(const Value& a, std::size_t axis);
Value sum_all(const Value& a);
Value mean_all(const Value& a);

Value concat_last(const std::vector<Value>& parts);
Value reshape(const Value& a, Shape shape);
/// Inserts a new axis of size n at `axis`, repeating the input along it.
Value expand(const Value& a, std::size_t axis, std::size_t n);
/// Slice `index` of the leading axis (the axis is removed).
Value select(const Value& a, std::size_t index);

/// Depthwise 1-D convolution with kernel 3 and zero "same" padding along
/// `axis`; weight is [3, C], bias is [C], C = last dim of x.
Value depthwise_conv3(const Value& x, std::size_t axis, const Value& weight,
                      const Value& bias);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }

}  // namespace vqg
