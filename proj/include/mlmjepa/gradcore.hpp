#pragma once

// Tape-free reverse-mode autodiff over dense row-major double arrays.
//
// Every op records its parents and a backward closure on the result node.
// Calling backward() on a scalar walks the reachable graph in reverse
// topological order. Tensors are cheap shared handles; a graph must stay on
// the thread that built it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlmjepa/error.hpp"

namespace mlmjepa::grad {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  double* grad_buffer();  // allocates zeros on first use
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  /// Product of all extents but the last (1 for scalars).
  std::size_t rows() const;
  /// Last extent (1 for scalars).
  std::size_t cols() const;

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }

  /// Gradient buffer; all zeros when nothing has been accumulated.
  std::vector<double> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Seeds d(this)/d(this) = 1 and propagates to every reachable leaf.
  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Binary ops broadcast over 2-D views: each operand's row count is 1 or R
// and its column count is 1 or C.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor pow(const Tensor& x, double p);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// axis 0 reduces over rows -> [1, C]; axis 1 reduces over columns -> [R, 1].
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
/// Population variance along an axis.
Tensor variance(const Tensor& x, int axis);
Tensor softmax(const Tensor& x, int axis = 1);
Tensor log_softmax(const Tensor& x, int axis = 1);

/// Row-wise (x - mean) / sqrt(var + eps) without affine parameters.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
/// Row-wise x / sqrt(mean(x^2) + eps), times `gain` when it is defined.
Tensor rms_norm(const Tensor& x, const Tensor& gain = {}, double eps = 1e-5);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& x, Shape shape);
Tensor detach(const Tensor& x);

/// out[i, :] = table[index[i], :]
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> index);

/// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

struct AttentionLayout {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t heads = 1;
  /// batch*length flags; keys with 0 are never attended and queries with 0
  /// produce zero output.
  std::span<const std::uint8_t> valid;
  /// 0 = global; otherwise only keys with |i - j| <= window are visible.
  std::size_t window = 0;
};

/// Scaled dot-product attention over [batch*length, hidden] operands.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout);

/// Rotary position embedding on [batch*length, hidden]; position = index in
/// the sequence. Pairs (2i, 2i+1) inside each head rotate by pos * base^(-2i/d).
Tensor rope(const Tensor& x, std::size_t batch, std::size_t length, std::size_t heads,
            double base = 10000.0);

/// Per-channel 1-D convolution along the sequence of [batch*length, hidden]
/// with kernel [width, hidden], odd width, stride 1, zero boundary.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, std::size_t batch,
                        std::size_t length);

}  // namespace mlmjepa::grad
