#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmvr/rng.hpp"

namespace mmvr {

// Dense row-major tensors of 64-bit floats with reverse-mode automatic
// differentiation. Rank 1 and 2 only; everything the encoders need is a
// matrix, a row vector or a scalar (shape {1}). Doubles throughout: gradient
// checking and bit-exact determinism matter more than speed at this scale.
using Shape = std::vector<int>;

namespace detail {

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily; always matches data.size() once touched
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;  // accumulates into parents' grad
  const char* op = "leaf";

  void ensure_grad();
};

}  // namespace detail

// Tape recording is on by default; evaluation code switches it off so forward
// passes do not build graphs.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int rows() const;  // extent 0 (1 for rank-1)
  int cols() const;  // last extent
  std::int64_t size() const;

  double* data();
  const double* data() const;
  double at(int r, int c) const;
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool value);
  // Gradient buffer, zero-initialized on first access. Only meaningful after backward().
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool grad_allocated() const;
  void zero_grad();

  Tensor clone(bool requires_grad = false) const;  // deep copy, detached from the graph
  Tensor detach() const;                           // clone(false): value copy without graph edges

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Topologically ordered operation records reachable from a root. backward()
// seeds the root with grad 1 and visits each record exactly once in reverse
// topological order.
class Graph {
 public:
  static Graph build(const Tensor& root);
  void run_backward();
  const std::vector<detail::TensorNode*>& order() const { return order_; }

 private:
  std::shared_ptr<detail::TensorNode> root_;
  std::vector<detail::TensorNode*> order_;
};

// Convenience: Graph::build(root).run_backward(). Root must be scalar.
void backward(const Tensor& root);

//
// Primitives. Each op validates shapes, computes the forward value and, when
// tape recording is on and an input requires grad, registers a backward rule.
//

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);   // same shape
Tensor mul(const Tensor& a, const Tensor& b);   // elementwise, same shape
Tensor scale(const Tensor& x, double c);
Tensor add_rowvec(const Tensor& m, const Tensor& row);   // [R,C] + [1,C]
Tensor scale_rows(const Tensor& m, const Tensor& col);   // row r scaled by col[r], col is [R] or [R,1]
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& x);      // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor dropout(const Tensor& x, double p, Rng& rng, bool train);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice_rows(const Tensor& x, int start, int len);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor max_over_rows(const Tensor& x);   // [T,C] -> [1,C], elementwise max over the sequence axis
Tensor l2_normalize(const Tensor& x);    // whole buffer as one vector; exact zero input stays zero
Tensor sum_all(const Tensor& x);         // -> scalar
Tensor sum_rows(const Tensor& x);        // [T,C] -> [1,C]

// Max over coordinates of |analytic - central difference| / max(1e-8, |analytic| + |numeric|).
// f must map x to a scalar tensor and be deterministic; throws Error if f(x) is non-finite.
// A coordinate failing at eps is rescored at 32*eps and eps/32 and keeps its
// best agreement: cancellation drowns tiny gradients at small steps while
// curvature biases large ones, but a wrong gradient fails at every scale.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

}  // namespace mmvr
