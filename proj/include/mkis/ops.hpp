#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mkis/bytemap.hpp"
#include "mkis/tape.hpp"
#include "mkis/tensor.hpp"

namespace mkis {

enum class Mode { train, infer };

// Per-channel running statistics owned by a batch-norm layer. Train-mode
// forwards update them by exponential moving average.
template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;

  static BatchNormStats fresh(int64_t channels) {
    BatchNormStats s;
    s.mean.assign(channels, T(0));
    s.var.assign(channels, T(1));
    return s;
  }
};

// When set (thread-local), relu() appends one active/inactive bit per element.
// grad_check uses this to detect finite-difference steps that cross a kink.
struct ReluSignRecorder {
  std::vector<uint8_t> bits;
};
ReluSignRecorder* relu_sign_recorder();
void set_relu_sign_recorder(ReluSignRecorder* rec);

// --- Differentiable primitives -------------------------------------------
//
// Every op takes an optional tape; the result is registered for backward
// iff a tape is given and some input requires a gradient. Summation order
// inside conv2d / conv_transpose2d is fixed per output element (in-channel,
// then kernel row, then kernel column) so 64-bit results are bit-identical
// to a direct-loop evaluation.

// input B x Cin x H x W, kernel Cout x Cin x Kh x Kw. No bias term; the
// layers using conv2d normalize right after, and the classifier's bias is
// applied by add_channel_bias.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, int stride, int padding,
                  TapeT<T>* tape);

// input B x Cin x H x W, kernel Cin x Cout x Kh x Kw. Forward equals the
// adjoint of conv2d's input gradient; H' = (H-1)*stride - 2*padding + Kh.
template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& input, const TensorT<T>& kernel, int stride,
                            int padding, TapeT<T>* tape);

template <typename T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                      BatchNormStats<T>& running, Mode mode, double epsilon, double momentum,
                      TapeT<T>* tape);

template <typename T>
TensorT<T> relu(const TensorT<T>& input, TapeT<T>* tape);

// Inverted dropout: train mode zeroes with probability p and scales
// survivors by 1/(1-p); infer mode passes the tensor through untouched.
// The mask is a pure function of rng_seed.
template <typename T>
TensorT<T> dropout(const TensorT<T>& input, double p, Mode mode, uint64_t rng_seed,
                   TapeT<T>* tape);

// Per-pixel distribution over channels, stabilized by max subtraction.
template <typename T>
TensorT<T> softmax_channels(const TensorT<T>& input, TapeT<T>* tape);

template <typename T>
TensorT<T> elementwise_add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape);

// Sum of all elements as a scalar tensor; backward broadcasts the seed.
template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& input, TapeT<T>* tape);

// out[b,c,h,w] = input[b,c,h,w] + bias[c]
template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& input, const TensorT<T>& bias, TapeT<T>* tape);

// Mean over counted pixels of -w[y] * ln(probs[y]), ln clamped at 1e-12.
// probs B x C x H x W, target B-stacked H x W label maps, mask optional.
// Differentiable w.r.t. probs.
template <typename T>
TensorT<T> weighted_cross_entropy(const TensorT<T>& probs, const std::vector<ByteMap>& target,
                                  const std::vector<double>& class_weights,
                                  const std::vector<const ByteMap*>* mask, TapeT<T>* tape);

// Fused softmax + weighted negative log-likelihood on logits. Numerically
// stable route used by training; same value as softmax_channels followed by
// weighted_cross_entropy up to the ln clamp.
template <typename T>
TensorT<T> softmax_weighted_cross_entropy(const TensorT<T>& logits,
                                          const std::vector<ByteMap>& target,
                                          const std::vector<double>& class_weights,
                                          const std::vector<const ByteMap*>* mask, TapeT<T>* tape);

}  // namespace mkis
