#include "chamtoy/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "chamtoy/kernels.hpp"

namespace chamtoy {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::vector<Scalar>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), Scalar{0});
  return grad;
}

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor::Tensor() : node_(std::make_shared<Node>()) {
  node_->data.assign(1, Scalar{0});
}

Tensor::Tensor(NodePtr node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar{0}, requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<Scalar>(n, value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<Scalar> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, Scalar stddev,
                     bool requires_grad) {
  std::vector<Scalar> data(shape_numel(shape));
  for (auto& x : data) x = static_cast<Scalar>(rng.normal()) * stddev;
  return from_data(std::move(shape), std::move(data), requires_grad);
}

std::size_t Tensor::extent(int axis) const {
  return node_->shape[detail::normalize_axis(axis, rank())];
}

Scalar Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), Scalar{0});
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() without seed needs a single-element tensor");
  }
  const Scalar one = 1;
  backward(std::span<const Scalar>(&one, 1));
}

std::vector<NodePtr> graph_order(const Tensor& root) {
  std::vector<NodePtr> order;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS; recursion depth would track graph depth.
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++];
      if (seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward(std::span<const Scalar> seed) const {
  if (seed.size() != numel()) throw ShapeError("backward seed size mismatch");
  const auto order = graph_order(*this);
  // Interior grads are scratch for this pass; leaves accumulate.
  for (const auto& n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), Scalar{0});
  }
  auto& g = node_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (!n.is_leaf() && n.requires_grad) n.backward(n);
  }
}

Tensor Tensor::detach() const {
  return from_data(shape(), node_->data, false);
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](Scalar x) { return std::isfinite(x); });
}

namespace detail {

Tensor make_result(Shape shape, std::vector<Scalar> data,
                   std::vector<NodePtr> parents, std::string op,
                   std::function<void(Node& self)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  const bool needs =
      grad_enabled() &&
      std::any_of(parents.begin(), parents.end(),
                  [](const NodePtr& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

// Flat input index for every output element.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  if (in == out) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    stride[i + offset] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  std::vector<std::size_t> coord(rank, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t flat = 0;
    for (std::size_t d = 0; d < rank; ++d) flat += coord[d] * stride[d];
    idx[o] = flat;
    for (std::size_t d = rank; d-- > 0;) {
      if (++coord[d] < out[d]) break;
      coord[d] = 0;
    }
  }
  return idx;
}

// f(a, b) -> value; da(a, b, y) and db(a, b, y) -> partials.
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f,
                 DA da, DB db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto ia = broadcast_index(a.shape(), out_shape);
  auto ib = broadcast_index(b.shape(), out_shape);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<Scalar> out(ia.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = f(ad[ia[o]], bd[ib[o]]);
  return detail::make_result(
      std::move(out_shape), std::move(out), {a.node(), b.node()}, name,
      [ia = std::move(ia), ib = std::move(ib), da, db](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& ga = pa.ensure_grad();
          for (std::size_t o = 0; o < self.grad.size(); ++o) {
            ga[ia[o]] += self.grad[o] *
                         da(pa.data[ia[o]], pb.data[ib[o]], self.data[o]);
          }
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t o = 0; o < self.grad.size(); ++o) {
            gb[ib[o]] += self.grad[o] *
                         db(pa.data[ia[o]], pb.data[ib[o]], self.data[o]);
          }
        }
      });
}

template <class F, class D>
Tensor unary_op(const Tensor& a, const char* name, F f, D d) {
  const auto ad = a.data();
  std::vector<Scalar> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  return detail::make_result(a.shape(), std::move(out), {a.node()}, name,
                             [d](Node& self) {
                               Node& p = *self.parents[0];
                               auto& g = p.ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[i] *
                                         d(p.data[i], self.data[i]);
                               }
                             });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](Scalar x, Scalar y) { return x + y; },
      [](Scalar, Scalar, Scalar) { return Scalar{1}; },
      [](Scalar, Scalar, Scalar) { return Scalar{1}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](Scalar x, Scalar y) { return x - y; },
      [](Scalar, Scalar, Scalar) { return Scalar{1}; },
      [](Scalar, Scalar, Scalar) { return Scalar{-1}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](Scalar x, Scalar y) { return x * y; },
      [](Scalar, Scalar y, Scalar) { return y; },
      [](Scalar x, Scalar, Scalar) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (Scalar y : b.data()) {
    if (y == 0) throw DomainError("div: zero denominator");
  }
  return binary_op(
      a, b, "div", [](Scalar x, Scalar y) { return x / y; },
      [](Scalar, Scalar y, Scalar) { return 1 / y; },
      [](Scalar, Scalar y, Scalar out) { return -out / y; });
}

Tensor pow(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "pow",
      [](Scalar x, Scalar y) {
        if (x < 0 && std::trunc(y) != y) {
          throw DomainError("pow: negative base with non-integer exponent");
        }
        if (x == 0 && y < 0) throw DomainError("pow: zero base, negative exponent");
        return std::pow(x, y);
      },
      [](Scalar x, Scalar y, Scalar) {
        return y == 0 ? Scalar{0} : y * std::pow(x, y - 1);
      },
      [](Scalar x, Scalar, Scalar out) {
        return x > 0 ? out * std::log(x) : Scalar{0};
      });
}

Tensor pow(const Tensor& a, Scalar exponent) {
  return pow(a, Tensor::scalar(exponent));
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, "neg", [](Scalar x) { return -x; },
      [](Scalar, Scalar) { return Scalar{-1}; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](Scalar x) { return std::exp(x); },
      [](Scalar, Scalar y) { return y; });
}

Tensor log(const Tensor& a) {
  for (Scalar x : a.data()) {
    if (!(x > 0)) throw DomainError("log: non-positive operand");
  }
  return unary_op(
      a, "log", [](Scalar x) { return std::log(x); },
      [](Scalar x, Scalar) { return 1 / x; });
}

Tensor add_scalar(const Tensor& a, Scalar c) {
  return unary_op(
      a, "add_scalar", [c](Scalar x) { return x + c; },
      [](Scalar, Scalar) { return Scalar{1}; });
}

Tensor mul_scalar(const Tensor& a, Scalar c) {
  return unary_op(
      a, "mul_scalar", [c](Scalar x) { return x * c; },
      [c](Scalar, Scalar) { return c; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Linear algebra and shape

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul inner dimension mismatch: " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<Scalar> out(m * n);
  kernels::gemm_nn(m, k, n, a.data(), b.data(), out, false);
  return detail::make_result({m, n}, std::move(out), {a.node(), b.node()},
                             "matmul", [m, k, n](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                 kernels::gemm_nt(m, k, n, self.grad, pb.data,
                                                  pa.ensure_grad());
                               }
                               if (pb.requires_grad) {
                                 kernels::gemm_tn(m, k, n, pa.data, self.grad,
                                                  pb.ensure_grad());
                               }
                             });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<Scalar> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  }
  return detail::make_result({c, r}, std::move(out), {a.node()}, "transpose",
                             [r, c](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                   g[i * c + j] += self.grad[j * r + i];
                                 }
                               }
                             });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " +
                     shape_str(shape));
  }
  return detail::make_result(std::move(shape),
                             std::vector<Scalar>(a.data().begin(),
                                                 a.data().end()),
                             {a.node()}, "reshape", [](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Softmax and reductions

namespace {

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (x.rank() == 0) throw ShapeError("softmax on a rank-0 tensor");
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.n == 0) throw ShapeError("softmax over an empty axis");
  std::vector<Scalar> out(x.numel());
  const auto xd = x.data();
  if (s.inner == 1) {
    kernels::softmax_rows(s.outer, s.n, xd, out);
  } else {
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        Scalar mx = xd[base];
        for (std::size_t a = 1; a < s.n; ++a) {
          mx = std::max(mx, xd[base + a * s.inner]);
        }
        Scalar sum = 0;
        for (std::size_t a = 0; a < s.n; ++a) {
          const std::size_t k = base + a * s.inner;
          out[k] = std::exp(xd[k] - mx);
          sum += out[k];
        }
        for (std::size_t a = 0; a < s.n; ++a) out[base + a * s.inner] /= sum;
      }
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node()}, "softmax", [s](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            Scalar dot = 0;
            for (std::size_t a = 0; a < s.n; ++a) {
              const std::size_t k = base + a * s.inner;
              dot += self.grad[k] * self.data[k];
            }
            for (std::size_t a = 0; a < s.n; ++a) {
              const std::size_t k = base + a * s.inner;
              g[k] += self.data[k] * (self.grad[k] - dot);
            }
          }
        }
      });
}

Tensor sum(const Tensor& x, int axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.n == 0) throw ShapeError("sum over an empty axis");
  std::vector<Scalar> out(s.outer * s.inner, Scalar{0});
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < s.n; ++a) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        out[o * s.inner + i] += xd[(o * s.n + a) * s.inner + i];
      }
    }
  }
  return detail::make_result(drop_axis(x.shape(), ax), std::move(out),
                             {x.node()}, "sum", [s](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 for (std::size_t a = 0; a < s.n; ++a) {
                                   for (std::size_t i = 0; i < s.inner; ++i) {
                                     g[(o * s.n + a) * s.inner + i] +=
                                         self.grad[o * s.inner + i];
                                   }
                                 }
                               }
                             });
}

Tensor mean(const Tensor& x, int axis) {
  const std::size_t n = x.extent(axis);
  if (n == 0) throw ShapeError("mean over an empty axis");
  return mul_scalar(sum(x, axis), Scalar{1} / static_cast<Scalar>(n));
}

Tensor max(const Tensor& x, int axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.n == 0) throw ShapeError("max over an empty axis");
  std::vector<Scalar> out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.n) * s.inner + i;
      for (std::size_t a = 1; a < s.n; ++a) {
        const std::size_t k = (o * s.n + a) * s.inner + i;
        if (xd[k] > xd[best]) best = k;
      }
      out[o * s.inner + i] = xd[best];
      arg[o * s.inner + i] = best;
    }
  }
  return detail::make_result(drop_axis(x.shape(), ax), std::move(out),
                             {x.node()}, "max",
                             [arg = std::move(arg)](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t r = 0; r < arg.size(); ++r) {
                                 g[arg[r]] += self.grad[r];
                               }
                             });
}

Tensor rms(const Tensor& x, int axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.n == 0) throw ShapeError("rms over an empty axis");
  std::vector<Scalar> out(s.outer * s.inner, Scalar{0});
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < s.n; ++a) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const Scalar v = xd[(o * s.n + a) * s.inner + i];
        out[o * s.inner + i] += v * v;
      }
    }
  }
  for (auto& v : out) v = std::sqrt(v / static_cast<Scalar>(s.n));
  return detail::make_result(
      drop_axis(x.shape(), ax), std::move(out), {x.node()}, "rms",
      [s](Node& self) {
        Node& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const Scalar y = self.data[o * s.inner + i];
            if (y == 0) continue;
            const Scalar scale =
                self.grad[o * s.inner + i] / (static_cast<Scalar>(s.n) * y);
            for (std::size_t a = 0; a < s.n; ++a) {
              const std::size_t k = (o * s.n + a) * s.inner + i;
              g[k] += scale * p.data[k];
            }
          }
        }
      });
}

Tensor sum_all(const Tensor& x) {
  return sum(reshape(x, {x.numel()}), 0);
}

Tensor mean_all(const Tensor& x) {
  return mean(reshape(x, {x.numel()}), 0);
}

}  // namespace chamtoy
