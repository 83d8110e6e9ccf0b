#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mkis/ops.hpp"
#include "mkis/tape.hpp"
#include "mkis/tensor.hpp"

namespace mkis {

// Architecture hyper-parameters. Defaults give the published network:
// four parallel input convolutions feeding six two-scale blocks, two of
// which downsample, then a two-stage transposed-convolution decoder and a
// 1x1 per-pixel classifier.
struct ModelConfig {
  int in_channels = 3;
  int width = 24;                          // channels everywhere between input and classifier
  std::vector<int> input_kernels = {3, 5, 7, 11};
  std::vector<int> block_kernels = {3, 5};
  int num_blocks = 6;
  std::vector<int> stride2_blocks = {2, 4};  // 1-based block indices that downsample
  int decoder_kernel = 4;
  int decoder_stages = 2;
  double dropout_p = 0.4;
  int num_classes = 2;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  // Throws ConfigError on any violated invariant.
  void validate() const;

  // Spatial divisor forward() requires of H and W.
  int64_t spatial_multiple() const { return int64_t(1) << decoder_stages; }

  bool operator==(const ModelConfig&) const = default;
};

// One convolution (or transposed convolution) branch with its batch norm.
template <typename T>
struct ConvBnT {
  TensorT<T> weight;
  TensorT<T> gamma;
  TensorT<T> beta;
  BatchNormStats<T> stats;
  int kernel = 0;
  int stride = 1;
};

template <typename T>
struct NamedTensorT {
  std::string name;
  TensorT<T> tensor;  // handle sharing the model's storage
};

// Named view of one batch-norm running-statistics vector.
template <typename T>
struct NamedBufferT {
  std::string name;
  std::vector<T>* data;
};

template <typename T>
class ModelT {
 public:
  // Builds and initializes all parameters: weights by fan-in-scaled uniform
  // He-style initialization (each tensor from its own stream derived from
  // rng_seed, so the result is independent of construction order), BN
  // gamma = 1, beta = 0, classifier bias = 0.
  ModelT(ModelConfig config, uint64_t rng_seed);

  const ModelConfig& config() const { return config_; }

  // Encoder only: input block plus all two-scale blocks. Exposed so the
  // encoder's receptive field can be probed directly.
  TensorT<T> encode(const TensorT<T>& batch, Mode mode, TapeT<T>* tape);

  // Full network up to (and excluding) the softmax. dropout_seed selects the
  // train-mode dropout mask; it is ignored at inference.
  TensorT<T> forward_logits(const TensorT<T>& batch, Mode mode, TapeT<T>* tape,
                            uint64_t dropout_seed = 0);

  // forward_logits followed by softmax_channels: per-pixel class distribution.
  TensorT<T> forward(const TensorT<T>& batch, Mode mode, TapeT<T>* tape,
                     uint64_t dropout_seed = 0);

  // All trainable tensors in a stable, documented order: input branches (in
  // input_kernels order), blocks 1..N (branches in block_kernels order),
  // decoder stages, classifier weight, classifier bias.
  std::vector<NamedTensorT<T>> parameters();

  // Batch-norm running statistics in the same stable order.
  std::vector<NamedBufferT<T>> named_buffers();

  void set_requires_grad(bool on);

  std::vector<ConvBnT<T>> input_branches;
  std::vector<std::vector<ConvBnT<T>>> blocks;
  std::vector<ConvBnT<T>> decoder;
  TensorT<T> classifier_weight;
  TensorT<T> classifier_bias;

 private:
  ModelConfig config_;
};

using Model = ModelT<float>;
using DModel = ModelT<double>;

// ---- Complexity accounting -------------------------------------------------

struct StageInfo {
  std::string name;
  int64_t out_h = 0;
  int64_t out_w = 0;
  int64_t madds = 0;
  int receptive_field = 0;
};

struct ComplexityReport {
  int64_t trainable_params = 0;
  int64_t madds = 0;  // at the stated resolution
  int64_t input_h = 0;
  int64_t input_w = 0;
  int64_t model_size_bytes = 0;  // 32-bit serialization; 0 if not computed
  std::vector<int> per_stage_receptive_field;
  std::vector<int> input_branch_receptive_fields;
  std::vector<StageInfo> stages;
};

// Closed-form trainable-parameter count; equals the element count of an
// instantiated model exactly.
int64_t count_parameters(const ModelConfig& config);

// Multiply-adds of all convolutions at the given input resolution, counting
// K^2 * Cin * Cout per conv output pixel and per transposed-conv input
// pixel. BN, ReLU, and softmax are excluded.
int64_t count_madds(const ModelConfig& config, int64_t height, int64_t width_px);

// Receptive field after each stage (input block, each two-scale block, each
// decoder stage, classifier), using the standard recursion with the largest
// kernel of each stage's parallel branches.
std::vector<int> receptive_fields(const ModelConfig& config);

// RF of each input-block branch alone (= its kernel size).
std::vector<int> input_branch_receptive_fields(const ModelConfig& config);

// Spatial side lengths: input, after the input block, after each two-scale
// block, after each decoder stage.
std::vector<std::pair<int64_t, int64_t>> stage_resolutions(const ModelConfig& config,
                                                           int64_t height, int64_t width_px);

// Fills everything except model_size_bytes (which needs the serializer; see
// analyze_complexity in model_io.hpp).
ComplexityReport complexity_report(const ModelConfig& config, int64_t height, int64_t width_px);

// Human-readable table for the CLI summary.
std::string render_complexity(const ComplexityReport& report);

}  // namespace mkis
