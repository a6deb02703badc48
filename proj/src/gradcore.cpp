#include "mlmjepa/gradcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace mlmjepa::grad {

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const std::string& op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericalError(op, "non-finite output in op '" + op + "'");
    }
  }
}

Tensor make_op(std::string op, Shape shape, std::vector<double> value,
               std::initializer_list<Tensor> inputs, BackwardFn fn) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Accumulation target for parent i, or nullptr when it takes no gradient.
double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer() : nullptr;
}

const std::vector<double>& parent_value(const Node& self, std::size_t i) {
  return self.parents[i]->value;
}

struct Broadcast {
  std::size_t rows, cols;
  std::size_t a_rows, a_cols, b_rows, b_cols;
  Shape shape;

  std::size_t ia(std::size_t r, std::size_t c) const {
    return (a_rows == 1 ? 0 : r) * a_cols + (a_cols == 1 ? 0 : c);
  }
  std::size_t ib(std::size_t r, std::size_t c) const {
    return (b_rows == 1 ? 0 : r) * b_cols + (b_cols == 1 ? 0 : c);
  }
};

Broadcast broadcast(const std::string& op, const Tensor& a, const Tensor& b) {
  Broadcast bc{};
  bc.a_rows = a.rows();
  bc.a_cols = a.cols();
  bc.b_rows = b.rows();
  bc.b_cols = b.cols();
  bc.rows = std::max(bc.a_rows, bc.b_rows);
  bc.cols = std::max(bc.a_cols, bc.b_cols);
  auto fits = [](std::size_t n, std::size_t full) { return n == 1 || n == full; };
  if (!fits(bc.a_rows, bc.rows) || !fits(bc.b_rows, bc.rows) || !fits(bc.a_cols, bc.cols) ||
      !fits(bc.b_cols, bc.cols)) {
    throw ShapeError(op + ": cannot broadcast " + shape_string(a.shape()) + " with " +
                     shape_string(b.shape()));
  }
  const std::size_t n = bc.rows * bc.cols;
  if (a.size() == n) {
    bc.shape = a.shape();
  } else if (b.size() == n) {
    bc.shape = b.shape();
  } else {
    bc.shape = {bc.rows, bc.cols};
  }
  return bc;
}

// f(x, y) -> out; dfa/dfb(x, y, out) -> partial derivative.
template <class F, class DA, class DB>
Tensor binary(std::string op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  const Broadcast bc = broadcast(op, a, b);
  std::vector<double> out(bc.rows * bc.cols);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t r = 0; r < bc.rows; ++r) {
    for (std::size_t c = 0; c < bc.cols; ++c) {
      out[r * bc.cols + c] = f(av[bc.ia(r, c)], bv[bc.ib(r, c)]);
    }
  }
  return make_op(std::move(op), bc.shape, std::move(out), {a, b}, [bc, dfa, dfb](Node& self) {
    const auto& x = parent_value(self, 0);
    const auto& y = parent_value(self, 1);
    double* ga = parent_grad(self, 0);
    double* gb = parent_grad(self, 1);
    for (std::size_t r = 0; r < bc.rows; ++r) {
      for (std::size_t c = 0; c < bc.cols; ++c) {
        const std::size_t o = r * bc.cols + c;
        const double g = self.grad[o];
        const double xa = x[bc.ia(r, c)];
        const double yb = y[bc.ib(r, c)];
        if (ga) ga[bc.ia(r, c)] += g * dfa(xa, yb, self.value[o]);
        if (gb) gb[bc.ib(r, c)] += g * dfb(xa, yb, self.value[o]);
      }
    }
  });
}

// f(x) -> y; df(x, y) -> dy/dx.
template <class F, class D>
Tensor unary(std::string op, const Tensor& x, F f, D df) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_op(std::move(op), x.shape(), std::move(out), {x}, [df](Node& self) {
    const auto& xs = parent_value(self, 0);
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += self.grad[i] * df(xs[i], self.value[i]);
  });
}

// Iteration over 1-D lanes of a 2-D view along `axis`.
struct Lanes {
  std::size_t count, length, stride, lane_stride;
  std::size_t at(std::size_t lane, std::size_t i) const { return lane * lane_stride + i * stride; }
};

Lanes lanes_of(const Tensor& x, int axis, const std::string& op) {
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  if (axis == 1) return {r, c, 1, c};
  if (axis == 0) return {c, r, c, 1};
  throw ShapeError(op + ": axis must be 0 or 1");
}

Shape reduced_shape(const Tensor& x, int axis) {
  return axis == 0 ? Shape{1, x.cols()} : Shape{x.rows(), 1};
}

void require_2d_inner(const std::string& op, const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.cols() != b.shape()[0]) {
    throw ShapeError(op + ": inner extents disagree, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
}

}  // namespace

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

double* Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (element_count(shape) != values.size()) {
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = "leaf";
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(element_count(shape), 0.0);
  return requires_grad ? parameter(std::move(shape), std::move(v))
                       : constant(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

std::size_t Tensor::rows() const {
  const auto& s = node_->shape;
  if (s.empty()) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor pow(const Tensor& x, double p) {
  return unary(
      "pow", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op("sum", {}, {s}, {x}, [](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const std::size_t n = parent_value(self, 0).size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, int axis) {
  const Lanes ln = lanes_of(x, axis, "sum");
  std::vector<double> out(ln.count, 0.0);
  const auto xv = x.values();
  for (std::size_t l = 0; l < ln.count; ++l) {
    for (std::size_t i = 0; i < ln.length; ++i) out[l] += xv[ln.at(l, i)];
  }
  return make_op("sum_axis", reduced_shape(x, axis), std::move(out), {x}, [ln](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t l = 0; l < ln.count; ++l) {
      for (std::size_t i = 0; i < ln.length; ++i) gx[ln.at(l, i)] += self.grad[l];
    }
  });
}

Tensor mean(const Tensor& x, int axis) {
  const Lanes ln = lanes_of(x, axis, "mean");
  if (ln.length == 0) throw ShapeError("mean: empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(ln.length));
}

Tensor variance(const Tensor& x, int axis) {
  const Lanes ln = lanes_of(x, axis, "variance");
  if (ln.length == 0) throw ShapeError("variance: empty axis");
  const double inv_n = 1.0 / static_cast<double>(ln.length);
  std::vector<double> mu(ln.count, 0.0);
  std::vector<double> out(ln.count, 0.0);
  const auto xv = x.values();
  for (std::size_t l = 0; l < ln.count; ++l) {
    for (std::size_t i = 0; i < ln.length; ++i) mu[l] += xv[ln.at(l, i)];
    mu[l] *= inv_n;
    for (std::size_t i = 0; i < ln.length; ++i) {
      const double d = xv[ln.at(l, i)] - mu[l];
      out[l] += d * d;
    }
    out[l] *= inv_n;
  }
  return make_op("variance", reduced_shape(x, axis), std::move(out), {x},
                 [ln, mu = std::move(mu), inv_n](Node& self) {
                   double* gx = parent_grad(self, 0);
                   if (!gx) return;
                   const auto& xs = parent_value(self, 0);
                   for (std::size_t l = 0; l < ln.count; ++l) {
                     for (std::size_t i = 0; i < ln.length; ++i) {
                       const std::size_t j = ln.at(l, i);
                       gx[j] += self.grad[l] * 2.0 * (xs[j] - mu[l]) * inv_n;
                     }
                   }
                 });
}

Tensor softmax(const Tensor& x, int axis) {
  const Lanes ln = lanes_of(x, axis, "softmax");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t l = 0; l < ln.count; ++l) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ln.length; ++i) m = std::max(m, xv[ln.at(l, i)]);
    double z = 0.0;
    for (std::size_t i = 0; i < ln.length; ++i) {
      const std::size_t j = ln.at(l, i);
      out[j] = std::exp(xv[j] - m);
      z += out[j];
    }
    for (std::size_t i = 0; i < ln.length; ++i) out[ln.at(l, i)] /= z;
  }
  return make_op("softmax", x.shape(), std::move(out), {x}, [ln](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    for (std::size_t l = 0; l < ln.count; ++l) {
      double dot = 0.0;
      for (std::size_t i = 0; i < ln.length; ++i) {
        const std::size_t j = ln.at(l, i);
        dot += self.grad[j] * y[j];
      }
      for (std::size_t i = 0; i < ln.length; ++i) {
        const std::size_t j = ln.at(l, i);
        gx[j] += y[j] * (self.grad[j] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const Lanes ln = lanes_of(x, axis, "log_softmax");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t l = 0; l < ln.count; ++l) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ln.length; ++i) m = std::max(m, xv[ln.at(l, i)]);
    double z = 0.0;
    for (std::size_t i = 0; i < ln.length; ++i) z += std::exp(xv[ln.at(l, i)] - m);
    const double lse = m + std::log(z);
    for (std::size_t i = 0; i < ln.length; ++i) {
      const std::size_t j = ln.at(l, i);
      out[j] = xv[j] - lse;
    }
  }
  return make_op("log_softmax", x.shape(), std::move(out), {x}, [ln](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t l = 0; l < ln.count; ++l) {
      double gsum = 0.0;
      for (std::size_t i = 0; i < ln.length; ++i) gsum += self.grad[ln.at(l, i)];
      for (std::size_t i = 0; i < ln.length; ++i) {
        const std::size_t j = ln.at(l, i);
        gx[j] += self.grad[j] - std::exp(self.value[j]) * gsum;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  std::vector<double> out(x.size());
  std::vector<double> inv_std(r);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * inv_std[i];
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x},
                 [r, c, inv_std = std::move(inv_std)](Node& self) {
                   double* gx = parent_grad(self, 0);
                   if (!gx) return;
                   const double inv_c = 1.0 / static_cast<double>(c);
                   for (std::size_t i = 0; i < r; ++i) {
                     const double* g = self.grad.data() + i * c;
                     const double* y = self.value.data() + i * c;
                     double gm = 0.0;
                     double gy = 0.0;
                     for (std::size_t j = 0; j < c; ++j) {
                       gm += g[j];
                       gy += g[j] * y[j];
                     }
                     gm *= inv_c;
                     gy *= inv_c;
                     for (std::size_t j = 0; j < c; ++j) {
                       gx[i * c + j] += inv_std[i] * (g[j] - gm - y[j] * gy);
                     }
                   }
                 });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("rms_norm: eps must be positive");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  const bool has_gain = gain.defined();
  if (has_gain && gain.size() != c) {
    throw ShapeError("rms_norm: gain " + shape_string(gain.shape()) + " for width " +
                     std::to_string(c));
  }
  std::vector<double> normed(x.size());
  std::vector<double> inv_rms(r);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < c; ++j) ms += xv[i * c + j] * xv[i * c + j];
    inv_rms[i] = 1.0 / std::sqrt(ms / static_cast<double>(c) + eps);
    for (std::size_t j = 0; j < c; ++j) normed[i * c + j] = xv[i * c + j] * inv_rms[i];
  }
  std::vector<double> out = normed;
  if (has_gain) {
    const auto gv = gain.values();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= gv[j];
    }
  }
  auto fn = [r, c, has_gain, inv_rms = std::move(inv_rms),
             normed = std::move(normed)](Node& self) {
    double* gx = parent_grad(self, 0);
    double* gg = has_gain ? parent_grad(self, 1) : nullptr;
    const double* gain_v = has_gain ? parent_value(self, 1).data() : nullptr;
    const double inv_c = 1.0 / static_cast<double>(c);
    std::vector<double> gn(c);
    for (std::size_t i = 0; i < r; ++i) {
      const double* g = self.grad.data() + i * c;
      const double* n = normed.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        gn[j] = has_gain ? g[j] * gain_v[j] : g[j];
        dot += gn[j] * n[j];
        if (gg) gg[j] += g[j] * n[j];
      }
      dot *= inv_c;
      if (gx) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += inv_rms[i] * (gn[j] - n[j] * dot);
      }
    }
  };
  if (has_gain) return make_op("rms_norm", x.shape(), std::move(out), {x, gain}, std::move(fn));
  return make_op("rms_norm", x.shape(), std::move(out), {x}, std::move(fn));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d_inner("matmul", a, b);
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      if (s == 0.0) continue;
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * brow[j];
    }
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = parent_value(self, 0).data();
    const double* bv = parent_value(self, 1).data();
    const double* g = self.grad.data();
    if (double* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* brow = bv + p * n;
          const double* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (double* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = av[i * k + p];
          if (s == 0.0) continue;
          double* gbrow = gb + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
        }
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (element_count(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> v(x.values().begin(), x.values().end());
  return make_op("reshape", std::move(shape), std::move(v), {x}, [](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor detach(const Tensor& x) {
  auto node = std::make_shared<Node>();
  node->shape = x.shape();
  node->value.assign(x.values().begin(), x.values().end());
  node->op = "detach";
  return Tensor(std::move(node));
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> index) {
  const std::size_t r = table.rows();
  const std::size_t c = table.cols();
  std::vector<double> out(index.size() * c);
  const auto tv = table.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of " +
                       std::to_string(r) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(index[i] * c), c, out.begin() + i * c);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op("gather_rows", {index.size(), c}, std::move(out), {table},
                 [c, idx = std::move(idx)](Node& self) {
                   double* gt = parent_grad(self, 0);
                   if (!gt) return;
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     for (std::size_t j = 0; j < c; ++j) gt[idx[i] * c + j] += self.grad[i * c + j];
                   }
                 });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != n || n == 0) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  }
  std::vector<double> probs(n * v);
  double loss = 0.0;
  const auto lv = logits.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= v) throw ShapeError("softmax_cross_entropy: target out of range");
    const double* row = lv.data() + i * v;
    const double m = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(row[j] - m);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    loss += (m + std::log(z)) - row[targets[i]];
  }
  loss /= static_cast<double>(n);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_op("softmax_cross_entropy", {}, {loss}, {logits},
                 [n, v, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                   double* gl = parent_grad(self, 0);
                   if (!gl) return;
                   const double g = self.grad[0] / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i) {
                     for (std::size_t j = 0; j < v; ++j) {
                       const double onehot = (j == tgt[i]) ? 1.0 : 0.0;
                       gl[i * v + j] += g * (probs[i * v + j] - onehot);
                     }
                   }
                 });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout) {
  const std::size_t B = layout.batch;
  const std::size_t L = layout.length;
  const std::size_t H = q.cols();
  const std::size_t nh = layout.heads;
  if (q.rows() != B * L || k.rows() != B * L || v.rows() != B * L || k.cols() != H ||
      v.cols() != H) {
    throw ShapeError("attention: operands must all be [batch*length, hidden]");
  }
  if (nh == 0 || H % nh != 0) throw ShapeError("attention: hidden not divisible by heads");
  if (layout.valid.size() != B * L) throw ShapeError("attention: mask size mismatch");
  const std::size_t dh = H / nh;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t w = layout.window;
  std::vector<std::uint8_t> valid(layout.valid.begin(), layout.valid.end());

  auto key_range = [L, w](std::size_t i) {
    if (w == 0) return std::pair<std::size_t, std::size_t>{0, L};
    const std::size_t lo = i > w ? i - w : 0;
    const std::size_t hi = std::min(L, i + w + 1);
    return std::pair<std::size_t, std::size_t>{lo, hi};
  };

  std::vector<double> probs(B * nh * L * L, 0.0);
  std::vector<double> out(B * L * H, 0.0);
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  std::vector<double> scores(L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < nh; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        if (!valid[b * L + i]) continue;
        const auto [lo, hi] = key_range(i);
        const double* qi = qv + (b * L + i) * H + h * dh;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = lo; j < hi; ++j) {
          if (!valid[b * L + j]) continue;
          const double* kj = kv + (b * L + j) * H + h * dh;
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          scores[j] = s * inv_sqrt;
          m = std::max(m, scores[j]);
        }
        double* p = probs.data() + ((b * nh + h) * L + i) * L;
        double z = 0.0;
        for (std::size_t j = lo; j < hi; ++j) {
          if (!valid[b * L + j]) continue;
          p[j] = std::exp(scores[j] - m);
          z += p[j];
        }
        double* oi = out.data() + (b * L + i) * H + h * dh;
        for (std::size_t j = lo; j < hi; ++j) {
          if (!valid[b * L + j]) continue;
          p[j] /= z;
          const double* vj = vv + (b * L + j) * H + h * dh;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }

  return make_op(
      "attention", {B * L, H}, std::move(out), {q, k, v},
      [=, probs = std::move(probs), valid = std::move(valid)](Node& self) {
        const double* qv = parent_value(self, 0).data();
        const double* kv = parent_value(self, 1).data();
        const double* vv = parent_value(self, 2).data();
        double* gq = parent_grad(self, 0);
        double* gk = parent_grad(self, 1);
        double* gv = parent_grad(self, 2);
        const double* g = self.grad.data();
        std::vector<double> gp(L);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < nh; ++h) {
            for (std::size_t i = 0; i < L; ++i) {
              if (!valid[b * L + i]) continue;
              const auto [lo, hi] = key_range(i);
              const double* p = probs.data() + ((b * nh + h) * L + i) * L;
              const double* gi = g + (b * L + i) * H + h * dh;
              double dot = 0.0;
              for (std::size_t j = lo; j < hi; ++j) {
                if (!valid[b * L + j]) continue;
                const double* vj = vv + (b * L + j) * H + h * dh;
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += gi[d] * vj[d];
                gp[j] = s;
                dot += p[j] * s;
                if (gv) {
                  double* gvj = gv + (b * L + j) * H + h * dh;
                  for (std::size_t d = 0; d < dh; ++d) gvj[d] += p[j] * gi[d];
                }
              }
              const double* qi = qv + (b * L + i) * H + h * dh;
              for (std::size_t j = lo; j < hi; ++j) {
                if (!valid[b * L + j]) continue;
                const double gs = p[j] * (gp[j] - dot) * inv_sqrt;
                const double* kj = kv + (b * L + j) * H + h * dh;
                if (gq) {
                  double* gqi = gq + (b * L + i) * H + h * dh;
                  for (std::size_t d = 0; d < dh; ++d) gqi[d] += gs * kj[d];
                }
                if (gk) {
                  double* gkj = gk + (b * L + j) * H + h * dh;
                  for (std::size_t d = 0; d < dh; ++d) gkj[d] += gs * qi[d];
                }
              }
            }
          }
        }
      });
}

Tensor rope(const Tensor& x, std::size_t batch, std::size_t length, std::size_t heads,
            double base) {
  const std::size_t H = x.cols();
  if (x.rows() != batch * length) throw ShapeError("rope: rows != batch*length");
  if (heads == 0 || H % heads != 0 || (H / heads) % 2 != 0) {
    throw ShapeError("rope: head width must be even");
  }
  const std::size_t dh = H / heads;
  const std::size_t half = dh / 2;
  // cos/sin tables indexed [pos, i]
  std::vector<double> cs(length * half);
  std::vector<double> sn(length * half);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(pos) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cs[pos * half + i] = std::cos(theta);
      sn[pos * half + i] = std::sin(theta);
    }
  }
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t row = 0; row < batch * length; ++row) {
    const std::size_t pos = row % length;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t j = row * H + h * dh + 2 * i;
        const double c = cs[pos * half + i];
        const double s = sn[pos * half + i];
        out[j] = xv[j] * c - xv[j + 1] * s;
        out[j + 1] = xv[j] * s + xv[j + 1] * c;
      }
    }
  }
  return make_op("rope", x.shape(), std::move(out), {x},
                 [=, cs = std::move(cs), sn = std::move(sn)](Node& self) {
                   double* gx = parent_grad(self, 0);
                   if (!gx) return;
                   const double* g = self.grad.data();
                   for (std::size_t row = 0; row < batch * length; ++row) {
                     const std::size_t pos = row % length;
                     for (std::size_t h = 0; h < heads; ++h) {
                       for (std::size_t i = 0; i < half; ++i) {
                         const std::size_t j = row * H + h * dh + 2 * i;
                         const double c = cs[pos * half + i];
                         const double s = sn[pos * half + i];
                         gx[j] += g[j] * c + g[j + 1] * s;
                         gx[j + 1] += -g[j] * s + g[j + 1] * c;
                       }
                     }
                   }
                 });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel, std::size_t batch,
                        std::size_t length) {
  const std::size_t H = x.cols();
  const std::size_t width = kernel.rows();
  if (x.rows() != batch * length) throw ShapeError("depthwise_conv1d: rows != batch*length");
  if (kernel.cols() != H || width % 2 == 0) {
    throw ShapeError("depthwise_conv1d: kernel must be [odd width, hidden], got " +
                     shape_string(kernel.shape()));
  }
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(width / 2);
  const auto L = static_cast<std::ptrdiff_t>(length);
  std::vector<double> out(x.size(), 0.0);
  const double* xv = x.values().data();
  const double* kv = kernel.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::ptrdiff_t t = 0; t < L; ++t) {
      double* o = out.data() + (b * length + static_cast<std::size_t>(t)) * H;
      for (std::ptrdiff_t off = -half; off <= half; ++off) {
        const std::ptrdiff_t src = t + off;
        if (src < 0 || src >= L) continue;
        const double* xi = xv + (b * length + static_cast<std::size_t>(src)) * H;
        const double* kr = kv + static_cast<std::size_t>(off + half) * H;
        for (std::size_t c = 0; c < H; ++c) o[c] += kr[c] * xi[c];
      }
    }
  }
  return make_op("depthwise_conv1d", x.shape(), std::move(out), {x, kernel}, [=](Node& self) {
    const double* xv = parent_value(self, 0).data();
    const double* kv = parent_value(self, 1).data();
    double* gx = parent_grad(self, 0);
    double* gk = parent_grad(self, 1);
    const double* g = self.grad.data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::ptrdiff_t t = 0; t < L; ++t) {
        const double* gt = g + (b * length + static_cast<std::size_t>(t)) * H;
        for (std::ptrdiff_t off = -half; off <= half; ++off) {
          const std::ptrdiff_t src = t + off;
          if (src < 0 || src >= L) continue;
          const std::size_t xi = (b * length + static_cast<std::size_t>(src)) * H;
          const std::size_t kr = static_cast<std::size_t>(off + half) * H;
          for (std::size_t c = 0; c < H; ++c) {
            if (gx) gx[xi + c] += kv[kr + c] * gt[c];
            if (gk) gk[kr + c] += xv[xi + c] * gt[c];
          }
        }
      }
    }
  });
}

}  // namespace mlmjepa::grad
