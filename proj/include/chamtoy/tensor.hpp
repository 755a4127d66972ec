#ifndef CHAMTOY_TENSOR_HPP_
#define CHAMTOY_TENSOR_HPP_

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "chamtoy/common.hpp"
#include "chamtoy/random.hpp"

namespace chamtoy {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the define-by-run graph. Leaves are created by the user;
// interior nodes by ops. `backward` reads self.grad and accumulates into the
// parents' grads.
struct Node {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(Node& self)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<Scalar>& ensure_grad();
};

class Tensor {
 public:
  Tensor();
  explicit Tensor(NodePtr node);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<Scalar> data,
                          bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, Scalar stddev = 1,
                      bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the back.
  std::size_t extent(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const Scalar> data() const { return node_->data; }
  // Direct write access for parameter updates and test perturbations. Does not
  // invalidate graphs already built from this tensor.
  std::span<Scalar> mutable_data() { return node_->data; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> mutable_grad() { return node_->ensure_grad(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  Scalar item() const;
  Scalar operator[](std::size_t i) const { return node_->data[i]; }

  void zero_grad();
  // Reverse pass seeded with ones; the tensor must hold a single element.
  void backward() const;
  void backward(std::span<const Scalar> seed) const;

  Tensor detach() const;
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Nodes reachable from root, each after all of its parents.
std::vector<NodePtr> graph_order(const Tensor& root);

bool grad_enabled();

// Disables graph construction for its lifetime (per thread).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool all_finite(const Tensor& t);

namespace detail {
// Creates an op result. Parents and the backward closure are kept only when
// gradients are enabled and some parent requires them.
Tensor make_result(Shape shape, std::vector<Scalar> data,
                   std::vector<NodePtr> parents, std::string op,
                   std::function<void(Node& self)> backward);
std::size_t normalize_axis(int axis, std::size_t rank);
}  // namespace detail

// Elementwise, with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, Scalar exponent);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor add_scalar(const Tensor& a, Scalar c);
Tensor mul_scalar(const Tensor& a, Scalar c);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& x, int axis = -1);

// Reductions drop the reduced axis.
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
Tensor max(const Tensor& x, int axis);
Tensor rms(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

}  // namespace chamtoy

#endif  // CHAMTOY_TENSOR_HPP_
