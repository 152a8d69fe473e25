#include "brnpa/autograd.hpp"

#include <unordered_set>

#include "brnpa/error.hpp"

namespace brnpa {

const std::vector<double>* GradientRecord::find(const Tensor& parameter) const {
  for (const auto& e : entries)
    if (e.parameter.id() == parameter.id()) return &e.gradient;
  return nullptr;
}

GradientRecord backward(const Tensor& loss) {
  if (!loss.defined()) throw ValidationError("backward: undefined loss");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_to_string(loss.shape()));
  auto root = loss.node();
  if (root->consumed)
    throw ValidationError("backward: graph already consumed; run the forward pass again");

  GradientRecord record;
  if (!root->requires_grad) {
    root->consumed = true;
    return record;
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack{{root, 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (child->consumed)
        throw ValidationError("backward: graph reuses a tensor released by an earlier pass");
      if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }

  // Leaves in discovery order (reverse post-order puts the loss first).
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->is_leaf()) record.entries.push_back({Tensor(*it), (*it)->ensure_grad()});

  // Release the graph: interior grads and history are no longer needed.
  for (auto& node : order) {
    if (node->is_leaf()) continue;
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->backward = nullptr;
    node->inputs.clear();
    node->consumed = true;
  }
  root->consumed = true;
  return record;
}

Sgd::Sgd(double learning_rate, double momentum) : learning_rate_(learning_rate), momentum_(momentum) {
  if (!(learning_rate >= 0.0)) throw ValidationError("sgd: learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("sgd: momentum must be in [0,1)");
}

void Sgd::apply(Tensor& parameter, const std::vector<double>& grad) {
  if (grad.size() != parameter.numel())
    throw ShapeError("sgd: gradient of length " + std::to_string(grad.size()) +
                     " does not match parameter " + shape_to_string(parameter.shape()));
  std::vector<double>* velocity = nullptr;
  for (auto& [id, v] : velocity_)
    if (id == parameter.id()) velocity = &v;
  if (!velocity) {
    velocity_.emplace_back(parameter.id(), std::vector<double>(grad.size(), 0.0));
    velocity = &velocity_.back().second;
  }
  auto values = parameter.mutable_values();
  for (std::size_t i = 0; i < grad.size(); ++i) {
    (*velocity)[i] = momentum_ * (*velocity)[i] + grad[i];
    values[i] -= learning_rate_ * (*velocity)[i];
  }
}

void Sgd::step(std::span<Tensor> parameters) {
  for (auto& p : parameters) {
    apply(p, p.grad());
    p.zero_grad();
  }
  ++steps_;
}

void Sgd::step(std::span<Tensor> parameters, const GradientRecord& grads) {
  for (auto& p : parameters) {
    if (const auto* g = grads.find(p)) apply(p, *g);
    p.zero_grad();
  }
  ++steps_;
}

}  // namespace brnpa
