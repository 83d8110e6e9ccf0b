#pragma once

#include <functional>
#include <vector>

#include "mkis/tensor.hpp"

namespace mkis {

// Record of executed differentiable operations. Each op pushes one backward
// closure; backward() replays them in exact reverse execution order.
// Gradient accumulation is additive: a tensor consumed k times receives the
// sum of k contributions. A tape belongs to one training step and one thread.
template <typename T>
class TapeT {
 public:
  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the recorded ops in reverse.
  void backward(TensorT<T> loss) {
    if (loss.numel() != 1) throw ShapeError("backward() expects a scalar loss tensor");
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

using Tape = TapeT<float>;
using DTape = TapeT<double>;

}  // namespace mkis
