#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "brnpa/tensor.hpp"

namespace brnpa {

/// Gradients of every trainable leaf reached by one reverse pass, in the
/// order the traversal discovered them.
struct GradientRecord {
  struct Entry {
    Tensor parameter;
    std::vector<double> gradient;
  };
  std::vector<Entry> entries;
  std::uint64_t step = 0;

  /// Gradient for `parameter`, or nullptr when the pass did not reach it.
  const std::vector<double>* find(const Tensor& parameter) const;
};

/// Reverse pass from a scalar loss. Accumulates into leaf gradients and
/// releases the graph; a second call on the same loss throws.
GradientRecord backward(const Tensor& loss);

/// SGD with heavy-ball momentum: v <- m*v + g, p <- p - lr*v.
class Sgd {
 public:
  Sgd(double learning_rate, double momentum);

  /// Updates each parameter from its accumulated gradient, then zeroes it.
  void step(std::span<Tensor> parameters);
  /// Same update, with gradients taken from an explicit record.
  void step(std::span<Tensor> parameters, const GradientRecord& grads);

  double learning_rate() const { return learning_rate_; }
  double momentum() const { return momentum_; }
  std::uint64_t steps_taken() const { return steps_; }

 private:
  void apply(Tensor& parameter, const std::vector<double>& grad);

  double learning_rate_;
  double momentum_;
  std::uint64_t steps_ = 0;
  std::vector<std::pair<const void*, std::vector<double>>> velocity_;
};

}  // namespace brnpa
