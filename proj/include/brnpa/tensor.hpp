#pragma once

// Dense row-major float64 arrays with tape-free reverse-mode differentiation.
//
// Every op result keeps shared ownership of its inputs plus a closure that
// pushes its gradient back to them, so the graph is the object graph itself.
// backward() walks it once in reverse topological order and then releases it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace brnpa {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool consumed = false;  // set on the loss node after a reverse pass
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  /// Trainable leaf; the reverse pass accumulates into its gradient.
  static Tensor parameter(Shape shape, std::vector<double> values, std::string name = {});

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const double> values() const;
  /// Writable access for leaves only (optimizer updates, test perturbation).
  std::span<double> mutable_values();
  const std::vector<double>& value_vector() const;
  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }

  bool requires_grad() const;
  bool has_grad() const;
  /// Gradient buffer; all zeros when nothing has flowed in yet.
  std::vector<double> grad() const;
  void zero_grad();

  const std::string& name() const;
  bool is_leaf() const;

  /// Identity used to key parameters in gradient records.
  const void* id() const { return node_.get(); }

  /// Copy of the values with no history (used for constants derived from a tensor).
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive on a thread, ops on that thread record no history.
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

// Elementwise. Shapes must match, or one side must hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor add_n(std::span<const Tensor> terms);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }

/// [M x K] . [K x P] -> [M x P]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// input [Cin x H x W], kernel [Cout x Cin x k x k], optional bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding,
              const Tensor& bias = {});
std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

/// Reductions over one axis (removed from the shape) or over everything.
Tensor sum(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);
Tensor mean(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);
/// Ties go to the lowest flat index; the gradient flows to that element only.
Tensor max(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);
/// Indices stored as doubles. Not differentiable.
Tensor argmax(const Tensor& a, std::optional<std::size_t> axis = std::nullopt);

Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
/// max(a, floor) elementwise; gradient passes only where a > floor.
Tensor clamp_min(const Tensor& a, double floor);
/// Natural log, argument clamped below at 1e-300.
Tensor log(const Tensor& a);
/// Softmax over the last axis.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);

/// -log softmax(logits)[label] for a rank-1 logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t label);
/// sum_i p_i (log p_i - log q_i) with p = softmax(p_logits), q = softmax(q_logits).
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);

/// Forward identity; contributes nothing to the reverse pass.
Tensor stop_gradient(const Tensor& a);

/// Slice `index` along `axis`, dropping that axis.
Tensor select(const Tensor& a, std::size_t axis, std::size_t index);
/// Flattens each part and concatenates.
Tensor concat(std::span<const Tensor> parts);
/// Stacks equally shaped parts along a new leading axis.
Tensor stack(std::span<const Tensor> parts);

}  // namespace brnpa
