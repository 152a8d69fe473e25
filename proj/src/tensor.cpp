#include "brnpa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "brnpa/error.hpp"

namespace brnpa {

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

// Wraps a computed value; attaches history when any input needs gradients.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   std::function<void(detail::Node&)> backward) {
  auto node = make_node(std::move(shape), std::move(value));
  if (g_grad_enabled) {
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const NodePtr& n) { return n->requires_grad; });
    if (needs) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ValidationError(std::string(op) + ": undefined tensor");
}

enum class Broadcast { Same, LeftScalar, RightScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::RightScalar;
  if (a.numel() == 1) return Broadcast::LeftScalar;
  throw ShapeError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                   shape_to_string(b.shape()) + " are not compatible");
}

template <typename Forward, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Forward f, DA da, DB db) {
  const Broadcast kind = broadcast_kind(a, b, op);
  const Shape shape = kind == Broadcast::LeftScalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto pa = a.node();
  auto pb = b.node();
  const auto& av = pa->value;
  const auto& bv = pb->value;
  const std::size_t sa = kind == Broadcast::LeftScalar ? 0 : 1;
  const std::size_t sb = kind == Broadcast::RightScalar ? 0 : 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * sa], bv[i * sb]);
  return make_result(shape, std::move(out), {pa, pb},
                     [pa, pb, sa, sb, da, db](detail::Node& self) {
                       const std::size_t n = self.value.size();
                       if (pa->requires_grad) {
                         auto& ga = pa->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           ga[i * sa] += self.grad[i] * da(pa->value[i * sa], pb->value[i * sb]);
                       }
                       if (pb->requires_grad) {
                         auto& gb = pb->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           gb[i * sb] += self.grad[i] * db(pa->value[i * sa], pb->value[i * sb]);
                       }
                     });
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, const char* op, Forward f, Derivative d) {
  require_defined(a, op);
  auto pa = a.node();
  std::vector<double> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa->value[i]);
  return make_result(pa->shape, std::move(out), {pa}, [pa, d](detail::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * d(pa->value[i], self.value[i]);
  });
}

// Splits `shape` around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

void check_axis(const Tensor& a, std::optional<std::size_t> axis, const char* op) {
  require_defined(a, op);
  if (a.numel() == 0) throw ValidationError(std::string(op) + ": empty reduction");
  if (axis && *axis >= a.rank())
    throw ValidationError(std::string(op) + ": axis " + std::to_string(*axis) +
                          " out of range for shape " + shape_to_string(a.shape()));
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("shape " + shape_to_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values, std::string name) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  t.node_->name = std::move(name);
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ValidationError("axis out of range");
  return shape()[axis];
}

std::span<const double> Tensor::values() const {
  require_defined(*this, "values");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  require_defined(*this, "mutable_values");
  if (!node_->is_leaf()) throw ValidationError("only leaf tensors can be modified in place");
  return node_->value;
}

const std::vector<double>& Tensor::value_vector() const {
  require_defined(*this, "values");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }
bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  require_defined(*this, "grad");
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

const std::string& Tensor::name() const {
  require_defined(*this, "name");
  return node_->name;
}

bool Tensor::is_leaf() const { return defined() && node_->is_leaf(); }

Tensor Tensor::detach() const { return from(shape(), node_->value); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor add(const Tensor& a, double b) {
  return unary(
      a, "add", [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double b) {
  return unary(
      a, "mul", [b](double x) { return x * b; }, [b](double, double) { return b; });
}

Tensor add_n(std::span<const Tensor> terms) {
  if (terms.empty()) throw ValidationError("add_n: no terms");
  const Shape shape = terms.front().shape();
  std::vector<NodePtr> inputs;
  std::vector<double> out(shape_numel(shape), 0.0);
  for (const auto& t : terms) {
    if (t.shape() != shape)
      throw ShapeError("add_n: shapes " + shape_to_string(shape) + " and " +
                       shape_to_string(t.shape()) + " differ");
    const auto v = t.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    inputs.push_back(t.node());
  }
  auto captured = inputs;
  return make_result(shape, std::move(out), std::move(inputs), [captured](detail::Node& self) {
    for (const auto& in : captured) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner extents of " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " do not agree");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  auto pa = a.node();
  auto pb = b.node();
  std::vector<double> out(m * p, 0.0);
  const double* av = pa->value.data();
  const double* bv = pb->value.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const double x = av[i * k + t];
      const double* brow = bv + t * p;
      double* orow = out.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += x * brow[j];
    }
  return make_result({m, p}, std::move(out), {pa, pb}, [pa, pb, m, k, p](detail::Node& self) {
    const double* g = self.grad.data();
    if (pa->requires_grad) {
      // grad_a = grad_out . b^T
      auto& ga = pa->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          const double* brow = pb->value.data() + t * p;
          const double* grow = g + i * p;
          double acc = 0.0;
          for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
          ga[i * k + t] += acc;
        }
    }
    if (pb->requires_grad) {
      // grad_b = a^T . grad_out
      auto& gb = pb->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          const double x = pa->value[i * k + t];
          const double* grow = g + i * p;
          double* gbrow = gb.data() + t * p;
          for (std::size_t j = 0; j < p; ++j) gbrow[j] += x * grow[j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto pa = a.node();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = pa->value[i * c + j];
  return make_result({c, r}, std::move(out), {pa}, [pa, r, c](detail::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(shape));
  auto pa = a.node();
  return make_result(std::move(shape), pa->value, {pa}, [pa](detail::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
  if (stride == 0) throw ValidationError("conv2d: stride must be positive");
  if (kernel == 0 || kernel > extent + 2 * padding)
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " does not fit extent " +
                     std::to_string(extent) + " with padding " + std::to_string(padding));
  return (extent + 2 * padding - kernel) / stride + 1;
}

namespace {

// Output columns ox with 0 <= ox*stride + offset < extent, offset = kx - padding.
std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t extent,
                                                std::ptrdiff_t offset, std::size_t stride) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(extent) - 1 - offset);
  hi = hi < 0 ? -1 : hi / s;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_extent) - 1);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding,
              const Tensor& bias) {
  require_defined(input, "conv2d");
  require_defined(kernel, "conv2d");
  if (stride == 0) throw ValidationError("conv2d: stride must be positive");
  if (input.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != input.dim(0) ||
      kernel.dim(2) != kernel.dim(3))
    throw ShapeError("conv2d: input " + shape_to_string(input.shape()) + " and kernel " +
                     shape_to_string(kernel.shape()) + " are not compatible");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (bias.defined() && bias.shape() != Shape{cout})
    throw ShapeError("conv2d: bias " + shape_to_string(bias.shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  const std::size_t oh = conv_output_extent(h, k, stride, padding);
  const std::size_t ow = conv_output_extent(w, k, stride, padding);
  const std::size_t rows = cin * k * k, cols = oh * ow;

  auto pin = input.node();
  auto pk = kernel.node();
  auto pbias = bias.defined() ? bias.node() : NodePtr{};
  const double* in = pin->value.data();
  const double* kv = pk->value.data();
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Column r = (ci, ky, kx) holds the input tap for every output position;
  // padding taps are zero. Accumulating over r keeps the (ci, ky, kx) order.
  auto col = std::make_shared<std::vector<double>>(rows * cols, 0.0);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky) {
      const auto [y0, y1] = valid_range(oh, h, static_cast<std::ptrdiff_t>(ky) - pad, stride);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const auto [x0, x1] = valid_range(ow, w, static_cast<std::ptrdiff_t>(kx) - pad, stride);
        double* crow = col->data() + ((ci * k + ky) * k + kx) * cols;
        for (std::size_t y = y0; y < y1; ++y) {
          const double* irow = in + ci * h * w + (y * stride + ky - padding) * w;
          for (std::size_t x = x0; x < x1; ++x) crow[y * ow + x] = irow[x * stride + kx - padding];
        }
      }
    }

  std::vector<double> out(cout * cols, 0.0);
  if (pbias)
    for (std::size_t co = 0; co < cout; ++co)
      std::fill(out.begin() + static_cast<std::ptrdiff_t>(co * cols),
                out.begin() + static_cast<std::ptrdiff_t>((co + 1) * cols), pbias->value[co]);
  const double* c = col->data();
  std::size_t co = 0;
  for (; co + 4 <= cout; co += 4) {
    double* o0 = out.data() + co * cols;
    double* o1 = o0 + cols;
    double* o2 = o1 + cols;
    double* o3 = o2 + cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const double w0 = kv[co * rows + r], w1 = kv[(co + 1) * rows + r];
      const double w2 = kv[(co + 2) * rows + r], w3 = kv[(co + 3) * rows + r];
      const double* cr = c + r * cols;
      for (std::size_t p = 0; p < cols; ++p) {
        o0[p] += w0 * cr[p];
        o1[p] += w1 * cr[p];
        o2[p] += w2 * cr[p];
        o3[p] += w3 * cr[p];
      }
    }
  }
  for (; co < cout; ++co) {
    double* o = out.data() + co * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const double wr = kv[co * rows + r];
      const double* cr = c + r * cols;
      for (std::size_t p = 0; p < cols; ++p) o[p] += wr * cr[p];
    }
  }

  std::vector<NodePtr> inputs{pin, pk};
  if (pbias) inputs.push_back(pbias);
  return make_result(
      {cout, oh, ow}, std::move(out), std::move(inputs),
      [pin, pk, pbias, col, cin, h, w, cout, k, oh, ow, rows, cols, stride, padding, pad](detail::Node& self) {
        const double* g = self.grad.data();
        if (pbias && pbias->requires_grad) {
          auto& gb = pbias->ensure_grad();
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            for (std::size_t i = 0; i < cols; ++i) acc += g[co * cols + i];
            gb[co] += acc;
          }
        }
        if (pk->requires_grad) {
          double* gk = pk->ensure_grad().data();
          const double* c = col->data();
          std::size_t co = 0;
          for (; co + 4 <= cout; co += 4) {
            const double* g0 = g + co * cols;
            const double* g1 = g0 + cols;
            const double* g2 = g1 + cols;
            const double* g3 = g2 + cols;
            for (std::size_t r = 0; r < rows; ++r) {
              const double* cr = c + r * cols;
              double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
              for (std::size_t p = 0; p < cols; ++p) {
                a0 += cr[p] * g0[p];
                a1 += cr[p] * g1[p];
                a2 += cr[p] * g2[p];
                a3 += cr[p] * g3[p];
              }
              gk[co * rows + r] += a0;
              gk[(co + 1) * rows + r] += a1;
              gk[(co + 2) * rows + r] += a2;
              gk[(co + 3) * rows + r] += a3;
            }
          }
          for (; co < cout; ++co) {
            const double* gc = g + co * cols;
            for (std::size_t r = 0; r < rows; ++r) {
              const double* cr = c + r * cols;
              double acc = 0.0;
              for (std::size_t p = 0; p < cols; ++p) acc += cr[p] * gc[p];
              gk[co * rows + r] += acc;
            }
          }
        }
        if (!pin->requires_grad) return;
        double* gin = pin->ensure_grad().data();
        const double* kv = pk->value.data();
        for (std::size_t co = 0; co < cout; ++co) {
          const double* gplane = g + co * cols;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            double* giplane = gin + ci * h * w;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto [y0, y1] = valid_range(oh, h, static_cast<std::ptrdiff_t>(ky) - pad, stride);
              for (std::size_t kx = 0; kx < k; ++kx) {
                const double wgt = kv[((co * cin + ci) * k + ky) * k + kx];
                const auto [x0, x1] = valid_range(ow, w, static_cast<std::ptrdiff_t>(kx) - pad, stride);
                for (std::size_t y = y0; y < y1; ++y) {
                  double* girow = giplane + (y * stride + ky - padding) * w;
                  const double* grow = gplane + y * ow;
                  for (std::size_t x = x0; x < x1; ++x) girow[x * stride + kx - padding] += wgt * grow[x];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a, std::optional<std::size_t> axis) {
  check_axis(a, axis, "sum");
  auto pa = a.node();
  if (!axis) {
    double acc = 0.0;
    for (double v : pa->value) acc += v;
    return make_result({}, {acc}, {pa}, [pa](detail::Node& self) {
      auto& ga = pa->ensure_grad();
      for (double& g : ga) g += self.grad[0];
    });
  }
  const AxisSplit s = split_axis(pa->shape, *axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += pa->value[(o * s.extent + e) * s.inner + i];
  return make_result(drop_axis(pa->shape, *axis), std::move(out), {pa}, [pa, s](detail::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i)
          ga[(o * s.extent + e) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor mean(const Tensor& a, std::optional<std::size_t> axis) {
  check_axis(a, axis, "mean");
  const double count = static_cast<double>(axis ? a.dim(*axis) : a.numel());
  return mul(sum(a, axis), 1.0 / count);
}

namespace {

// Per output slot, the flat input index of the maximum (lowest index on ties).
std::vector<std::size_t> arg_extrema(const detail::Node& a, std::optional<std::size_t> axis) {
  if (!axis) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.value.size(); ++i)
      if (a.value[i] > a.value[best]) best = i;
    return {best};
  }
  const AxisSplit s = split_axis(a.shape, *axis);
  std::vector<std::size_t> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.extent * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const std::size_t idx = (o * s.extent + e) * s.inner + i;
        if (a.value[idx] > a.value[best]) best = idx;
      }
      out[o * s.inner + i] = best;
    }
  return out;
}

}  // namespace

Tensor max(const Tensor& a, std::optional<std::size_t> axis) {
  check_axis(a, axis, "max");
  auto pa = a.node();
  auto where = arg_extrema(*pa, axis);
  std::vector<double> out(where.size());
  for (std::size_t i = 0; i < where.size(); ++i) out[i] = pa->value[where[i]];
  Shape shape = axis ? drop_axis(pa->shape, *axis) : Shape{};
  return make_result(std::move(shape), std::move(out), {pa}, [pa, where](detail::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t i = 0; i < where.size(); ++i) ga[where[i]] += self.grad[i];
  });
}

Tensor argmax(const Tensor& a, std::optional<std::size_t> axis) {
  check_axis(a, axis, "argmax");
  auto where = arg_extrema(*a.node(), axis);
  std::vector<double> out(where.size());
  if (!axis) {
    out[0] = static_cast<double>(where[0]);
  } else {
    const AxisSplit s = split_axis(a.shape(), *axis);
    for (std::size_t i = 0; i < where.size(); ++i)
      out[i] = static_cast<double>((where[i] / s.inner) % s.extent);
  }
  return Tensor::from(axis ? drop_axis(a.shape(), *axis) : Shape{}, std::move(out));
}

// ---------------------------------------------------------------------------
// Activations and losses

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary(
      a, "clamp_min", [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

namespace {
constexpr double kLogFloor = 1e-300;
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return std::log(x > kLogFloor ? x : kLogFloor); },
      [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

namespace {

// Rows over the last axis.
std::pair<std::size_t, std::size_t> rows_of(const Tensor& a, const char* op) {
  require_defined(a, op);
  if (a.rank() == 0 || a.shape().back() == 0)
    throw ShapeError(std::string(op) + ": needs a non-empty last axis");
  const std::size_t cols = a.shape().back();
  return {a.numel() / cols, cols};
}

std::vector<double> log_softmax_values(const std::vector<double>& v, std::size_t rows,
                                       std::size_t cols) {
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * cols;
    double m = x[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - m);
    const double lz = std::log(z) + m;
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = x[j] - lz;
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& a) {
  const auto [rows, cols] = rows_of(a, "softmax");
  auto pa = a.node();
  auto out = log_softmax_values(pa->value, rows, cols);
  for (double& v : out) v = std::exp(v);
  return make_result(pa->shape, std::move(out), {pa}, [pa, rows, cols](detail::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const auto [rows, cols] = rows_of(a, "log_softmax");
  auto pa = a.node();
  auto out = log_softmax_values(pa->value, rows, cols);
  return make_result(pa->shape, std::move(out), {pa}, [pa, rows, cols](detail::Node& self) {
    auto& ga = pa->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double gsum = 0.0;
      for (std::size_t j = 0; j < cols; ++j) gsum += g[j];
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 1) throw ShapeError("cross_entropy: expected rank-1 logits, got " +
                                           shape_to_string(logits.shape()));
  if (label >= logits.numel())
    throw ValidationError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                          std::to_string(logits.numel()) + " classes");
  return mul(select(log_softmax(logits), 0, label), -1.0);
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  require_defined(p_logits, "kl_divergence");
  require_defined(q_logits, "kl_divergence");
  if (p_logits.shape() != q_logits.shape() || p_logits.rank() != 1)
    throw ShapeError("kl_divergence: logits " + shape_to_string(p_logits.shape()) + " and " +
                     shape_to_string(q_logits.shape()) + " differ");
  const Tensor log_p = log_softmax(p_logits);
  const Tensor log_q = log_softmax(q_logits);
  return sum(mul(softmax(p_logits), sub(log_p, log_q)));
}

Tensor stop_gradient(const Tensor& a) {
  require_defined(a, "stop_gradient");
  return Tensor::from(a.shape(), a.value_vector());
}

// ---------------------------------------------------------------------------
// Indexing

Tensor select(const Tensor& a, std::size_t axis, std::size_t index) {
  require_defined(a, "select");
  if (axis >= a.rank() || index >= a.dim(axis))
    throw ValidationError("select: index " + std::to_string(index) + " on axis " +
                          std::to_string(axis) + " out of range for " + shape_to_string(a.shape()));
  auto pa = a.node();
  const AxisSplit s = split_axis(pa->shape, axis);
  std::vector<double> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i)
      out[o * s.inner + i] = pa->value[(o * s.extent + index) * s.inner + i];
  return make_result(drop_axis(pa->shape, axis), std::move(out), {pa},
                     [pa, s, index](detail::Node& self) {
                       auto& ga = pa->ensure_grad();
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t i = 0; i < s.inner; ++i)
                           ga[(o * s.extent + index) * s.inner + i] += self.grad[o * s.inner + i];
                     });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ValidationError("concat: no parts");
  std::vector<NodePtr> inputs;
  std::vector<double> out;
  for (const auto& p : parts) {
    require_defined(p, "concat");
    out.insert(out.end(), p.values().begin(), p.values().end());
    inputs.push_back(p.node());
  }
  const std::size_t n = out.size();
  auto captured = inputs;
  return make_result({n}, std::move(out), std::move(inputs), [captured](detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& in : captured) {
      const std::size_t len = in->value.size();
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ValidationError("stack: no parts");
  const Shape inner = parts.front().shape();
  for (const auto& p : parts)
    if (p.shape() != inner)
      throw ShapeError("stack: shapes " + shape_to_string(inner) + " and " +
                       shape_to_string(p.shape()) + " differ");
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return reshape(concat(parts), std::move(shape));
}

}  // namespace brnpa
