#pragma once

#include <functional>

#include "fcbfuse/tensor.hpp"

namespace fcbfuse {

template <typename T>
using BackpropFn =
    std::function<void(const TensorNode<T>&, const std::vector<T>&, BackwardCtx<T>&)>;

// Builds an op node: runs the forward kernel once, and when gradients are
// being tracked wires inputs, keeps the forward closure for graph
// re-execution, and installs the backprop rule.
template <typename T>
Tensor<T> make_node(const char* op, Shape shape, std::vector<Tensor<T>> inputs,
                    std::function<void(TensorNode<T>&)> fwd, BackpropFn<T> bwd) {
  Tensor<T> out = Tensor<T>::uninit(std::move(shape));
  TensorNode<T>& n = *out.node();
  n.op = op;
  fwd(n);
  n.bump();
  if (grad_enabled()) {
    bool any = false;
    for (auto& i : inputs) any = any || i.requires_grad();
    if (any) {
      n.requires_grad = true;
      n.inputs.reserve(inputs.size());
      for (auto& i : inputs) n.inputs.push_back(i.node());
      n.recompute = std::move(fwd);
      n.backprop = std::move(bwd);
    }
  }
  return out;
}

}  // namespace fcbfuse
