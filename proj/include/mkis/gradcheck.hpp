#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mkis/tape.hpp"
#include "mkis/tensor.hpp"

namespace mkis {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t skipped = 0;  // coordinates discarded because a ReLU crossed zero under the probe
};

// Central-difference verification of reverse-mode gradients.
//
// `fn` rebuilds the scalar loss from the current parameter values; it is called
// once with a tape (analytic pass) and twice per coordinate without one. It must
// be a pure function of the parameter values — freeze dropout seeds and pass
// batch-norm running stats by value inside, or the probes will disagree.
//
// Coordinates whose +/-eps probes flip any ReLU activation sign are skipped:
// the loss is not differentiable there and central differences straddle the kink.
template <typename T>
GradCheckResult grad_check(const std::function<TensorT<T>(TapeT<T>*)>& fn,
                           const std::vector<TensorT<T>>& params, double eps);

}  // namespace mkis
