#include "vqg/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace vqg {

namespace detail {

Tensor& Node::grad_buffer() {
  if (!has_grad) {
    grad = Tensor::zeros(out.shape());
    has_grad = true;
  }
  return grad;
}

void Node::accumulate(const Tensor& g) {
  Tensor& buf = grad_buffer();
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

namespace {

using detail::Node;

void require_finite(const char* op, const Value& v) {
  if (!v.data().all_finite()) {
    throw NonFiniteError(std::string(op) + ": non-finite input of shape " +
                         shape_str(v.shape()));
  }
}

void require_same_shape(const char* op, const Value& a, const Value& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisLayout layout(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

Value finish(const char* op, Tensor out, std::vector<Value> parents,
             detail::BackwardFn rule) {
#ifndef NDEBUG
  if (!out.all_finite()) {
    throw NonFiniteError(std::string(op) + ": produced non-finite output");
  }
#endif
  return Value::from_op(op, std::move(out), std::move(parents),
                        std::move(rule));
}

// C[m,n] += A[m,k] B[k,n]
void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += G[m,n] B[k,n]^T
void mm_nt(const double* g, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * b[p * n + j];
      c[i * k + p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T G[m,n]
void mm_tn(const double* a, const double* g, double* c, std::size_t m,
           std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      const double* grow = g + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

template <typename F>
Value unary(const char* op, const Value& a, F f, detail::BackwardFn rule) {
  require_finite(op, a);
  Tensor out(a.shape());
  auto src = a.data().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(src[i]);
  return finish(op, std::move(out), {a}, std::move(rule));
}

}  // namespace

// ---------------------------------------------------------------------------
// Value

Value Value::constant(Tensor t) {
  auto node = std::make_shared<Node>();
  node->out = std::move(t);
  node->op = "constant";
  return Value(std::move(node));
}

Value Value::parameter(Tensor t) {
  auto node = std::make_shared<Node>();
  node->out = std::move(t);
  node->op = "parameter";
  node->requires_grad = true;
  return Value(std::move(node));
}

Value Value::from_op(std::string op, Tensor out, std::vector<Value> parents,
                     detail::BackwardFn rule) {
  auto node = std::make_shared<Node>();
  node->out = std::move(out);
  node->op = std::move(op);
  node->is_leaf = false;
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(std::move(p.node_));
    node->backward = std::move(rule);
  }
  return Value(std::move(node));
}

Tensor& Value::leaf_data() {
  if (!node_->is_leaf) {
    throw std::logic_error("Value::leaf_data: '" + node_->op +
                           "' is not a leaf");
  }
  return node_->out;
}

Tensor Value::grad() const {
  if (node_->has_grad) return node_->grad;
  return Tensor::zeros(node_->out.shape());
}

void Value::zero_grad() {
  node_->has_grad = false;
  node_->grad = Tensor();
}

std::vector<Value> backward(const Value& root) {
  if (!root.defined() || root.data().size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " +
                     (root.defined() ? shape_str(root.shape()) : "<null>"));
  }
  std::vector<Value> leaves;
  if (!root.requires_grad()) return leaves;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* start = root.node_.get();
  stack.emplace_back(start, 0);
  seen.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order) {
    if (!node->is_leaf && !node->backward) {
      throw std::logic_error("backward: node '" + node->op +
                             "' has no backward rule");
    }
  }
  for (Node* node : order) {
    if (!node->is_leaf) {
      node->has_grad = false;
      node->grad = Tensor();
    }
  }

  root.node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->is_leaf || !node->has_grad) continue;
    node->backward(*node);
  }
  // Leaf handles are recovered through the parent links.
  std::unordered_set<Node*> emitted;
  for (Node* node : order) {
    for (auto& p : node->parents) {
      if (p->is_leaf && p->requires_grad && emitted.insert(p.get()).second) {
        leaves.push_back(Value(p));
      }
    }
  }
  if (root.node_->is_leaf) leaves.push_back(root);
  return leaves;
}

// ---------------------------------------------------------------------------
// Linear algebra

Value matmul(const Value& a, const Value& b) {
  require_finite("matmul", a);
  require_finite("matmul", b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                     shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  if (sb[sb.size() - 2] != k) fail();
  const std::size_t n = sb.back();

  const bool shared_rhs = sb.size() == 2;
  if (!shared_rhs) {
    if (sa.size() != sb.size() ||
        !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
      fail();
    }
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];

  Shape out_shape = sa;
  out_shape.back() = n;
  Tensor out(out_shape);
  const double* pa = a.data().data().data();
  const double* pb = b.data().data().data();
  double* pc = out.data().data();
  if (shared_rhs) {
    mm_nn(pa, pb, pc, batch * m, k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t) {
      mm_nn(pa + t * m * k, pb + t * k * n, pc + t * m * n, m, k, n);
    }
  }
  return finish("matmul", std::move(out), {a, b},
                [batch, m, k, n, shared_rhs](Node& self) {
                  Node& na = *self.parents[0];
                  Node& nb = *self.parents[1];
                  const double* g = self.grad.data().data();
                  const double* va = na.out.data().data();
                  const double* vb = nb.out.data().data();
                  if (na.requires_grad) {
                    double* ga = na.grad_buffer().data().data();
                    if (shared_rhs) {
                      mm_nt(g, vb, ga, batch * m, k, n);
                    } else {
                      for (std::size_t t = 0; t < batch; ++t) {
                        mm_nt(g + t * m * n, vb + t * k * n, ga + t * m * k, m,
                              k, n);
                      }
                    }
                  }
                  if (nb.requires_grad) {
                    double* gb = nb.grad_buffer().data().data();
                    if (shared_rhs) {
                      mm_tn(va, g, gb, batch * m, k, n);
                    } else {
                      for (std::size_t t = 0; t < batch; ++t) {
                        mm_tn(va + t * m * k, g + t * m * n, gb + t * k * n, m,
                              k, n);
                      }
                    }
                  }
                });
}

Value transpose(const Value& a) {
  require_finite("transpose", a);
  const Shape& s = a.shape();
  if (s.size() < 2) {
    throw ShapeError("transpose: needs rank >= 2, got " + shape_str(s));
  }
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s.back();
  const std::size_t batch = a.data().size() / (r * c == 0 ? 1 : r * c);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  Tensor out(out_shape);
  auto src = a.data().data();
  auto dst = out.data();
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        dst[t * r * c + j * r + i] = src[t * r * c + i * c + j];
      }
    }
  }
  return finish("transpose", std::move(out), {a},
                [batch, r, c](Node& self) {
                  auto g = self.grad.data();
                  auto ga = self.parents[0]->grad_buffer().data();
                  for (std::size_t t = 0; t < batch; ++t) {
                    for (std::size_t i = 0; i < r; ++i) {
                      for (std::size_t j = 0; j < c; ++j) {
                        ga[t * r * c + i * c + j] += g[t * r * c + j * r + i];
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename F>
Value binary(const char* op, const Value& a, const Value& b, F f,
             detail::BackwardFn rule) {
  require_same_shape(op, a, b);
  require_finite(op, a);
  require_finite(op, b);
  Tensor out(a.shape());
  auto pa = a.data().data();
  auto pb = b.data().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(pa[i], pb[i]);
  return finish(op, std::move(out), {a, b}, std::move(rule));
}

void add_scaled(Node& parent, std::span<const double> g, double s) {
  if (!parent.requires_grad) return;
  auto dst = parent.grad_buffer().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * g[i];
}

}  // namespace

Value add(const Value& a, const Value& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](Node& self) {
                  add_scaled(*self.parents[0], self.grad.data(), 1.0);
                  add_scaled(*self.parents[1], self.grad.data(), 1.0);
                });
}

Value sub(const Value& a, const Value& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](Node& self) {
                  add_scaled(*self.parents[0], self.grad.data(), 1.0);
                  add_scaled(*self.parents[1], self.grad.data(), -1.0);
                });
}

Value mul(const Value& a, const Value& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](Node& self) {
                  Node& na = *self.parents[0];
                  Node& nb = *self.parents[1];
                  auto g = self.grad.data();
                  if (na.requires_grad) {
                    auto ga = na.grad_buffer().data();
                    auto vb = nb.out.data();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      ga[i] += g[i] * vb[i];
                    }
                  }
                  if (nb.requires_grad) {
                    auto gb = nb.grad_buffer().data();
                    auto va = na.out.data();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gb[i] += g[i] * va[i];
                    }
                  }
                });
}

Value scale(const Value& a, double c) {
  if (!std::isfinite(c)) throw NonFiniteError("scale: non-finite factor");
  return unary("scale", a, [c](double x) { return c * x; }, [c](Node& self) {
    add_scaled(*self.parents[0], self.grad.data(), c);
  });
}

Value add_bias(const Value& a, const Value& bias) {
  require_finite("add_bias", a);
  require_finite("add_bias", bias);
  if (a.shape().empty() || bias.shape().size() != 1 ||
      bias.shape()[0] != a.shape().back()) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                     " does not match last dim of " + shape_str(a.shape()));
  }
  const std::size_t c = bias.shape()[0];
  Tensor out = a.data();
  auto dst = out.data();
  auto pb = bias.data().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += pb[i % c];
  return finish("add_bias", std::move(out), {a, bias}, [c](Node& self) {
    auto g = self.grad.data();
    add_scaled(*self.parents[0], g, 1.0);
    Node& nb = *self.parents[1];
    if (nb.requires_grad) {
      auto gb = nb.grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
    }
  });
}

Value relu(const Value& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](Node& self) {
                 Node& na = *self.parents[0];
                 auto g = self.grad.data();
                 auto x = na.out.data();
                 auto ga = na.grad_buffer().data();
                 for (std::size_t i = 0; i < g.size(); ++i) {
                   if (x[i] > 0.0) ga[i] += g[i];
                 }
               });
}

Value sigmoid(const Value& a) {
  return unary("sigmoid", a,
               [](double x) {
                 if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](Node& self) {
                 Node& na = *self.parents[0];
                 auto g = self.grad.data();
                 auto y = self.out.data();
                 auto ga = na.grad_buffer().data();
                 for (std::size_t i = 0; i < g.size(); ++i) {
                   ga[i] += g[i] * y[i] * (1.0 - y[i]);
                 }
               });
}

Value log(const Value& a) {
  for (double x : a.data().data()) {
    if (!(x > 0.0)) {
      throw NonFiniteError("log: non-positive input in tensor of shape " +
                           shape_str(a.shape()));
    }
  }
  return unary("log", a, [](double x) { return std::log(x); },
               [](Node& self) {
                 Node& na = *self.parents[0];
                 auto g = self.grad.data();
                 auto x = na.out.data();
                 auto ga = na.grad_buffer().data();
                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
               });
}

Value clamp(const Value& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](Node& self) {
                 Node& na = *self.parents[0];
                 auto g = self.grad.data();
                 auto x = na.out.data();
                 auto ga = na.grad_buffer().data();
                 for (std::size_t i = 0; i < g.size(); ++i) {
                   if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
                 }
               });
}

// ---------------------------------------------------------------------------
// Axis ops

Value softmax(const Value& a, std::size_t axis) {
  require_finite("softmax", a);
  const AxisLayout l = layout("softmax", a.shape(), axis);
  Tensor out(a.shape());
  auto x = a.data().data();
  auto y = out.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t r = 0; r < l.inner; ++r) {
      const std::size_t base = o * l.n * l.inner + r;
      double m = x[base];
      for (std::size_t i = 1; i < l.n; ++i) m = std::max(m, x[base + i * l.inner]);
      double s = 0.0;
      for (std::size_t i = 0; i < l.n; ++i) {
        const double e = std::exp(x[base + i * l.inner] - m);
        y[base + i * l.inner] = e;
        s += e;
      }
      for (std::size_t i = 0; i < l.n; ++i) y[base + i * l.inner] /= s;
    }
  }
  return finish("softmax", std::move(out), {a}, [l](Node& self) {
    auto g = self.grad.data();
    auto y = self.out.data();
    auto ga = self.parents[0]->grad_buffer().data();
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t r = 0; r < l.inner; ++r) {
        const std::size_t base = o * l.n * l.inner + r;
        double dot = 0.0;
        for (std::size_t i = 0; i < l.n; ++i) {
          dot += g[base + i * l.inner] * y[base + i * l.inner];
        }
        for (std::size_t i = 0; i < l.n; ++i) {
          const std::size_t k = base + i * l.inner;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

Value max(const Value& a, std::size_t axis) {
  require_finite("max", a);
  const AxisLayout l = layout("max", a.shape(), axis);
  if (l.n == 0) throw ShapeError("max: empty reduction axis");
  Tensor out(drop_axis(a.shape(), axis));
  std::vector<std::size_t> argmax(out.size());
  auto x = a.data().data();
  auto y = out.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t r = 0; r < l.inner; ++r) {
      const std::size_t base = o * l.n * l.inner + r;
      std::size_t best = 0;
      for (std::size_t i = 1; i < l.n; ++i) {
        if (x[base + i * l.inner] > x[base + best * l.inner]) best = i;
      }
      y[o * l.inner + r] = x[base + best * l.inner];
      argmax[o * l.inner + r] = base + best * l.inner;
    }
  }
  return finish("max", std::move(out), {a},
                [argmax = std::move(argmax)](Node& self) {
                  auto g = self.grad.data();
                  auto ga = self.parents[0]->grad_buffer().data();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[argmax[i]] += g[i];
                  }
                });
}

namespace {

Value reduce_sum(const char* op, const Value& a, std::size_t axis,
                 bool average) {
  require_finite(op, a);
  const AxisLayout l = layout(op, a.shape(), axis);
  Tensor out(drop_axis(a.shape(), axis));
  auto x = a.data().data();
  auto y = out.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.n; ++i) {
      for (std::size_t r = 0; r < l.inner; ++r) {
        y[o * l.inner + r] += x[(o * l.n + i) * l.inner + r];
      }
    }
  }
  const double factor = average ? 1.0 / static_cast<double>(l.n) : 1.0;
  if (average) {
    for (double& v : y) v /= static_cast<double>(l.n);
  }
  return finish(op, std::move(out), {a}, [l, factor](Node& self) {
    auto g = self.grad.data();
    auto ga = self.parents[0]->grad_buffer().data();
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t i = 0; i < l.n; ++i) {
        for (std::size_t r = 0; r < l.inner; ++r) {
          ga[(o * l.n + i) * l.inner + r] += factor * g[o * l.inner + r];
        }
      }
    }
  });
}

}  // namespace

Value sum(const Value& a, std::size_t axis) {
  return reduce_sum("sum", a, axis, false);
}

Value mean(const Value& a, std::size_t axis) {
  return reduce_sum("mean", a, axis, true);
}

Value sum_all(const Value& a) {
  require_finite("sum_all", a);
  double s = 0.0;
  for (double v : a.data().data()) s += v;
  return finish("sum_all", Tensor::scalar(s), {a}, [](Node& self) {
    const double g = self.grad[0];
    for (double& v : self.parents[0]->grad_buffer().data()) v += g;
  });
}

Value mean_all(const Value& a) {
  require_finite("mean_all", a);
  const std::size_t n = a.data().size();
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  double s = 0.0;
  for (double v : a.data().data()) s += v;
  s /= static_cast<double>(n);
  return finish("mean_all", Tensor::scalar(s), {a}, [n](Node& self) {
    const double g = self.grad[0] / static_cast<double>(n);
    for (double& v : self.parents[0]->grad_buffer().data()) v += g;
  });
}

// ---------------------------------------------------------------------------
// Structural ops

Value concat_last(const std::vector<Value>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat_last: rank-0 input");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_finite("concat_last", p);
    const Shape& s = p.shape();
    if (s.size() != first.size() ||
        !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw ShapeError("concat_last: shape mismatch " + shape_str(first) +
                       " vs " + shape_str(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = shape_numel(first) / (first.back() ? first.back() : 1);
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor out(out_shape);
  auto dst = out.data();
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto src = parts[p].data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * widths[p]),
                  widths[p],
                  dst.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += widths[p];
  }
  return finish("concat_last", std::move(out), parts,
                [rows, total, widths](Node& self) {
                  auto g = self.grad.data();
                  std::size_t offset = 0;
                  for (std::size_t p = 0; p < widths.size(); ++p) {
                    Node& np = *self.parents[p];
                    if (np.requires_grad) {
                      auto gp = np.grad_buffer().data();
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < widths[p]; ++j) {
                          gp[r * widths[p] + j] += g[r * total + offset + j];
                        }
                      }
                    }
                    offset += widths[p];
                  }
                });
}

Value reshape(const Value& a, Shape shape) {
  if (shape_numel(shape) != a.data().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  require_finite("reshape", a);
  Tensor out(std::move(shape), a.data().values());
  return finish("reshape", std::move(out), {a}, [](Node& self) {
    add_scaled(*self.parents[0], self.grad.data(), 1.0);
  });
}

Value expand(const Value& a, std::size_t axis, std::size_t n) {
  require_finite("expand", a);
  const Shape& s = a.shape();
  if (axis > s.size()) {
    throw ShapeError("expand: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  const std::size_t inner = outer ? a.data().size() / outer : 0;
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  Tensor out(out_shape);
  auto src = a.data().data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * inner), inner,
                  dst.begin() + static_cast<std::ptrdiff_t>((o * n + i) * inner));
    }
  }
  return finish("expand", std::move(out), {a}, [outer, inner, n](Node& self) {
    auto g = self.grad.data();
    auto ga = self.parents[0]->grad_buffer().data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < inner; ++r) {
          ga[o * inner + r] += g[(o * n + i) * inner + r];
        }
      }
    }
  });
}

Value select(const Value& a, std::size_t index) {
  const Shape& s = a.shape();
  if (s.empty() || index >= s[0]) {
    throw ShapeError("select: index " + std::to_string(index) +
                     " out of range for shape " + shape_str(s));
  }
  require_finite("select", a);
  Shape out_shape(s.begin() + 1, s.end());
  const std::size_t inner = shape_numel(out_shape);
  auto src = a.data().data();
  std::vector<double> values(
      src.begin() + static_cast<std::ptrdiff_t>(index * inner),
      src.begin() + static_cast<std::ptrdiff_t>((index + 1) * inner));
  Tensor out(std::move(out_shape), std::move(values));
  return finish("select", std::move(out), {a}, [index, inner](Node& self) {
    auto g = self.grad.data();
    auto ga = self.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < inner; ++r) ga[index * inner + r] += g[r];
  });
}

Value depthwise_conv3(const Value& x, std::size_t axis, const Value& weight,
                      const Value& bias) {
  require_finite("depthwise_conv3", x);
  require_finite("depthwise_conv3", weight);
  require_finite("depthwise_conv3", bias);
  const Shape& s = x.shape();
  if (s.size() < 2 || axis + 1 >= s.size()) {
    throw ShapeError("depthwise_conv3: axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(s));
  }
  const std::size_t c = s.back();
  if (weight.shape() != Shape{3, c} || bias.shape() != Shape{c}) {
    throw ShapeError("depthwise_conv3: weight " + shape_str(weight.shape()) +
                     " / bias " + shape_str(bias.shape()) +
                     " do not match channels of " + shape_str(s));
  }
  const AxisLayout l = layout("depthwise_conv3", s, axis);
  Tensor out(s);
  auto px = x.data().data();
  auto pw = weight.data().data();
  auto pb = bias.data().data();
  auto py = out.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.n; ++i) {
      for (std::size_t r = 0; r < l.inner; ++r) {
        const std::size_t ch = r % c;
        double acc = pb[ch];
        for (std::size_t k = 0; k < 3; ++k) {
          if (i + k < 1 || i + k - 1 >= l.n) continue;
          acc += pw[k * c + ch] * px[(o * l.n + i + k - 1) * l.inner + r];
        }
        py[(o * l.n + i) * l.inner + r] = acc;
      }
    }
  }
  return finish("depthwise_conv3", std::move(out), {x, weight, bias},
                [l, c](Node& self) {
                  Node& nx = *self.parents[0];
                  Node& nw = *self.parents[1];
                  Node& nb = *self.parents[2];
                  auto g = self.grad.data();
                  auto px = nx.out.data();
                  auto pw = nw.out.data();
                  double* gx = nx.requires_grad ? nx.grad_buffer().data().data()
                                                : nullptr;
                  double* gw = nw.requires_grad ? nw.grad_buffer().data().data()
                                                : nullptr;
                  double* gb = nb.requires_grad ? nb.grad_buffer().data().data()
                                                : nullptr;
                  for (std::size_t o = 0; o < l.outer; ++o) {
                    for (std::size_t i = 0; i < l.n; ++i) {
                      for (std::size_t r = 0; r < l.inner; ++r) {
                        const std::size_t ch = r % c;
                        const double gv = g[(o * l.n + i) * l.inner + r];
                        if (gb) gb[ch] += gv;
                        for (std::size_t k = 0; k < 3; ++k) {
                          if (i + k < 1 || i + k - 1 >= l.n) continue;
                          const std::size_t src =
                              (o * l.n + i + k - 1) * l.inner + r;
                          if (gx) gx[src] += pw[k * c + ch] * gv;
                          if (gw) gw[k * c + ch] += px[src] * gv;
                        }
                      }
                    }
                  }
                });
}

}  // namespace vqg
