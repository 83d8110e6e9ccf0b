#include "mkis/model.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "mkis/error.hpp"
#include "mkis/rng.hpp"

namespace mkis {

namespace {

void require_odd_unique(const std::vector<int>& kernels, const char* what) {
  if (kernels.empty()) throw ConfigError(std::string(what) + " must not be empty");
  std::set<int> seen;
  for (int k : kernels) {
    if (k < 1 || k % 2 == 0)
      throw ConfigError(std::string(what) + " entry " + std::to_string(k) +
                        " is not a positive odd kernel size");
    if (!seen.insert(k).second)
      throw ConfigError(std::string(what) + " lists kernel " + std::to_string(k) + " twice");
  }
}

template <typename T>
void he_uniform_fill(TensorT<T>& w, uint64_t seed) {
  const int64_t fan_in = w.ndim() == 4 ? w.dim(1) * w.dim(2) * w.dim(3) : w.dim(0);
  const double bound = std::sqrt(6.0 / double(fan_in));
  Rng rng(seed);
  for (T& v : w.values()) v = T(rng.uniform(-bound, bound));
}

// Output side length of a same-padding odd-kernel convolution; identical for
// every odd kernel, so parallel branches always fuse cleanly.
int64_t conv_out(int64_t n, int stride) { return (n - 1) / stride + 1; }

std::string branch_prefix(const std::string& stage, int kernel) {
  return stage + ".k" + std::to_string(kernel);
}

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (width < 1) throw ConfigError("width must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (num_blocks < 1) throw ConfigError("num_blocks must be >= 1");
  require_odd_unique(input_kernels, "input_kernels");
  require_odd_unique(block_kernels, "block_kernels");
  std::set<int> seen;
  for (int b : stride2_blocks) {
    if (b < 1 || b > num_blocks)
      throw ConfigError("stride2_blocks entry " + std::to_string(b) + " is outside 1.." +
                        std::to_string(num_blocks));
    if (!seen.insert(b).second)
      throw ConfigError("stride2_blocks lists block " + std::to_string(b) + " twice");
  }
  if (decoder_stages != int(stride2_blocks.size()))
    throw ConfigError("decoder_stages (" + std::to_string(decoder_stages) +
                      ") must equal the number of stride-2 blocks (" +
                      std::to_string(stride2_blocks.size()) + ") so the decoder restores the "
                      "input resolution exactly");
  if (decoder_stages > 0 && decoder_kernel != 4)
    throw ConfigError("decoder_kernel must be 4: the decoder uses stride 2 and padding 1, and "
                      "only kernel 4 then doubles the resolution exactly");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    throw ConfigError("dropout_p must lie in [0, 1)");
  if (!(bn_epsilon > 0.0)) throw ConfigError("bn_epsilon must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0))
    throw ConfigError("bn_momentum must lie in (0, 1]");
}

template <typename T>
ModelT<T>::ModelT(ModelConfig config, uint64_t rng_seed) : config_(std::move(config)) {
  config_.validate();
  const int64_t w = config_.width;
  uint64_t stream = 0;  // one derived rng stream per randomly initialized tensor

  auto make_branch = [&](int kernel, int stride, Shape weight_shape) {
    ConvBnT<T> br;
    br.kernel = kernel;
    br.stride = stride;
    br.weight = TensorT<T>::zeros(std::move(weight_shape), true);
    he_uniform_fill(br.weight, derive_seed(rng_seed, stream++));
    br.gamma = TensorT<T>::full({w}, T(1), true);
    br.beta = TensorT<T>::zeros({w}, true);
    br.stats = BatchNormStats<T>::fresh(w);
    return br;
  };

  for (int k : config_.input_kernels)
    input_branches.push_back(make_branch(k, 1, {w, config_.in_channels, k, k}));

  for (int b = 1; b <= config_.num_blocks; ++b) {
    const bool down = std::find(config_.stride2_blocks.begin(), config_.stride2_blocks.end(),
                                b) != config_.stride2_blocks.end();
    std::vector<ConvBnT<T>> block;
    for (int k : config_.block_kernels) block.push_back(make_branch(k, down ? 2 : 1, {w, w, k, k}));
    blocks.push_back(std::move(block));
  }

  for (int d = 0; d < config_.decoder_stages; ++d)
    decoder.push_back(
        make_branch(config_.decoder_kernel, 2, {w, w, config_.decoder_kernel, config_.decoder_kernel}));

  classifier_weight = TensorT<T>::zeros({config_.num_classes, w, 1, 1}, true);
  he_uniform_fill(classifier_weight, derive_seed(rng_seed, stream++));
  classifier_bias = TensorT<T>::zeros({config_.num_classes}, true);
}

template <typename T>
static TensorT<T> run_branch(ConvBnT<T>& br, const TensorT<T>& x, bool transpose,
                             const ModelConfig& cfg, Mode mode, TapeT<T>* tape) {
  TensorT<T> y = transpose ? conv_transpose2d(x, br.weight, br.stride, 1, tape)
                           : conv2d(x, br.weight, br.stride, (br.kernel - 1) / 2, tape);
  return batch_norm(y, br.gamma, br.beta, br.stats, mode, cfg.bn_epsilon, cfg.bn_momentum, tape);
}

template <typename T>
TensorT<T> ModelT<T>::encode(const TensorT<T>& batch, Mode mode, TapeT<T>* tape) {
  TensorT<T> fused;
  bool first = true;
  for (auto& br : input_branches) {
    TensorT<T> y = run_branch(br, batch, false, config_, mode, tape);
    fused = first ? y : elementwise_add(fused, y, tape);
    first = false;
  }
  TensorT<T> x = relu(fused, tape);

  for (auto& block : blocks) {
    first = true;
    for (auto& br : block) {
      TensorT<T> y = run_branch(br, x, false, config_, mode, tape);
      fused = first ? y : elementwise_add(fused, y, tape);
      first = false;
    }
    x = relu(fused, tape);
  }
  return x;
}

template <typename T>
TensorT<T> ModelT<T>::forward_logits(const TensorT<T>& batch, Mode mode, TapeT<T>* tape,
                                     uint64_t dropout_seed) {
  if (batch.ndim() != 4)
    throw ShapeError("forward expects a BxCxHxW batch, got " + shape_str(batch.shape()));
  if (batch.dim(1) != config_.in_channels)
    throw ShapeError("forward expects " + std::to_string(config_.in_channels) +
                     " input channels, got " + std::to_string(batch.dim(1)));
  const int64_t m = config_.spatial_multiple();
  if (batch.dim(2) % m || batch.dim(3) % m)
    throw GeometryError("input " + std::to_string(batch.dim(2)) + "x" +
                        std::to_string(batch.dim(3)) + " is not divisible by " +
                        std::to_string(m) + "; pad the input (pad_to_multiple) before forward");

  TensorT<T> x = encode(batch, mode, tape);
  x = dropout(x, config_.dropout_p, mode, dropout_seed, tape);
  for (auto& br : decoder) {
    x = run_branch(br, x, true, config_, mode, tape);
    x = relu(x, tape);
  }
  x = conv2d(x, classifier_weight, 1, 0, tape);
  return add_channel_bias(x, classifier_bias, tape);
}

template <typename T>
TensorT<T> ModelT<T>::forward(const TensorT<T>& batch, Mode mode, TapeT<T>* tape,
                              uint64_t dropout_seed) {
  return softmax_channels(forward_logits(batch, mode, tape, dropout_seed), tape);
}

template <typename T>
std::vector<NamedTensorT<T>> ModelT<T>::parameters() {
  std::vector<NamedTensorT<T>> out;
  auto add_branch = [&](const std::string& prefix, ConvBnT<T>& br) {
    out.push_back({prefix + ".weight", br.weight});
    out.push_back({prefix + ".bn.gamma", br.gamma});
    out.push_back({prefix + ".bn.beta", br.beta});
  };
  for (auto& br : input_branches) add_branch(branch_prefix("input", br.kernel), br);
  for (size_t b = 0; b < blocks.size(); ++b)
    for (auto& br : blocks[b]) add_branch(branch_prefix("block" + std::to_string(b + 1), br.kernel), br);
  for (size_t d = 0; d < decoder.size(); ++d)
    add_branch("decoder" + std::to_string(d + 1), decoder[d]);
  out.push_back({"classifier.weight", classifier_weight});
  out.push_back({"classifier.bias", classifier_bias});
  return out;
}

template <typename T>
std::vector<NamedBufferT<T>> ModelT<T>::named_buffers() {
  std::vector<NamedBufferT<T>> out;
  auto add_branch = [&](const std::string& prefix, ConvBnT<T>& br) {
    out.push_back({prefix + ".bn.running_mean", &br.stats.mean});
    out.push_back({prefix + ".bn.running_var", &br.stats.var});
  };
  for (auto& br : input_branches) add_branch(branch_prefix("input", br.kernel), br);
  for (size_t b = 0; b < blocks.size(); ++b)
    for (auto& br : blocks[b]) add_branch(branch_prefix("block" + std::to_string(b + 1), br.kernel), br);
  for (size_t d = 0; d < decoder.size(); ++d)
    add_branch("decoder" + std::to_string(d + 1), decoder[d]);
  return out;
}

template <typename T>
void ModelT<T>::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(on);
}

// ---- Complexity accounting -------------------------------------------------

int64_t count_parameters(const ModelConfig& config) {
  config.validate();
  const int64_t w = config.width;
  int64_t total = 0;
  for (int k : config.input_kernels) total += int64_t(k) * k * config.in_channels * w + 2 * w;
  for (int b = 0; b < config.num_blocks; ++b)
    for (int k : config.block_kernels) total += int64_t(k) * k * w * w + 2 * w;
  for (int d = 0; d < config.decoder_stages; ++d)
    total += int64_t(config.decoder_kernel) * config.decoder_kernel * w * w + 2 * w;
  total += w * int64_t(config.num_classes) + config.num_classes;
  return total;
}

namespace {

// Walks the stage sequence once, reporting resolution, receptive field, and
// MAdds per stage through the callback.
template <typename Fn>
void walk_stages(const ModelConfig& config, int64_t h, int64_t w, Fn&& emit) {
  const int64_t ch = config.width;
  int rf = 1, jump = 1;

  {  // input block: parallel same-padding convolutions at stride 1
    int64_t madds = 0;
    for (int k : config.input_kernels)
      madds += int64_t(k) * k * config.in_channels * ch * h * w;
    const int kmax = *std::max_element(config.input_kernels.begin(), config.input_kernels.end());
    rf += (kmax - 1) * jump;
    emit("input", h, w, madds, rf);
  }

  const int kblock = *std::max_element(config.block_kernels.begin(), config.block_kernels.end());
  for (int b = 1; b <= config.num_blocks; ++b) {
    const bool down = std::find(config.stride2_blocks.begin(), config.stride2_blocks.end(), b) !=
                      config.stride2_blocks.end();
    const int stride = down ? 2 : 1;
    const int64_t oh = conv_out(h, stride), ow = conv_out(w, stride);
    int64_t madds = 0;
    for (int k : config.block_kernels) madds += int64_t(k) * k * ch * ch * oh * ow;
    rf += (kblock - 1) * jump;
    jump *= stride;
    h = oh;
    w = ow;
    emit("block" + std::to_string(b), h, w, madds, rf);
  }

  // A 4x4 stride-2 padding-1 transposed conv gives each output pixel exactly
  // two adjacent input taps, but the taps of adjacent pixels can land on the
  // same coarser pixels, so the true footprint depends on output parity.
  // Reported here is the maximum over output positions: the count of encoder
  // pixels reachable through d decoder stages follows n <- floor(n/2) + 2.
  const int encoder_rf = rf;
  const int encoder_jump = jump;
  int reach = 1;
  for (int d = 1; d <= config.decoder_stages; ++d) {
    // Transposed conv: every input pixel scatters a full K x K x Cin x Cout
    // window, so the multiply count lives at the input resolution.
    const int64_t madds =
        int64_t(config.decoder_kernel) * config.decoder_kernel * ch * ch * h * w;
    reach = reach / 2 + 2;
    rf = encoder_rf + (reach - 1) * encoder_jump;
    jump /= 2;
    h *= 2;
    w *= 2;
    emit("decoder" + std::to_string(d), h, w, madds, rf);
  }

  emit("classifier", h, w, int64_t(ch) * config.num_classes * h * w, rf);
}

}  // namespace

int64_t count_madds(const ModelConfig& config, int64_t height, int64_t width_px) {
  config.validate();
  int64_t total = 0;
  walk_stages(config, height, width_px,
              [&](const std::string&, int64_t, int64_t, int64_t madds, int) { total += madds; });
  return total;
}

std::vector<int> receptive_fields(const ModelConfig& config) {
  config.validate();
  std::vector<int> rfs;
  walk_stages(config, 1 << 20, 1 << 20,
              [&](const std::string&, int64_t, int64_t, int64_t, int rf) { rfs.push_back(rf); });
  return rfs;
}

std::vector<int> input_branch_receptive_fields(const ModelConfig& config) {
  return config.input_kernels;
}

std::vector<std::pair<int64_t, int64_t>> stage_resolutions(const ModelConfig& config,
                                                           int64_t height, int64_t width_px) {
  config.validate();
  std::vector<std::pair<int64_t, int64_t>> res = {{height, width_px}};
  walk_stages(config, height, width_px,
              [&](const std::string& name, int64_t h, int64_t w, int64_t, int) {
                if (name != "classifier") res.emplace_back(h, w);
              });
  return res;
}

ComplexityReport complexity_report(const ModelConfig& config, int64_t height, int64_t width_px) {
  config.validate();
  ComplexityReport r;
  r.trainable_params = count_parameters(config);
  r.input_h = height;
  r.input_w = width_px;
  r.input_branch_receptive_fields = input_branch_receptive_fields(config);
  walk_stages(config, height, width_px,
              [&](const std::string& name, int64_t h, int64_t w, int64_t madds, int rf) {
                r.stages.push_back({name, h, w, madds, rf});
                r.per_stage_receptive_field.push_back(rf);
                r.madds += madds;
              });
  return r;
}

std::string render_complexity(const ComplexityReport& r) {
  std::ostringstream os;
  os << "stage         output       rf    madds\n";
  for (const auto& s : r.stages) {
    os << std::left << std::setw(13) << s.name << std::right << std::setw(5) << s.out_h << " x "
       << std::left << std::setw(6) << s.out_w << std::right << std::setw(4) << s.receptive_field
       << std::setw(12) << s.madds << "\n";
  }
  os << "\n";
  os << "input branch receptive fields:";
  for (int k : r.input_branch_receptive_fields) os << " " << k;
  os << "\n";
  os << "trainable parameters: " << r.trainable_params << " (" << std::fixed
     << std::setprecision(3) << double(r.trainable_params) / 1e6 << " M)\n";
  os << "madds at " << r.input_h << "x" << r.input_w << ": " << r.madds << " (" << std::fixed
     << std::setprecision(3) << double(r.madds) / 1e9 << " B)\n";
  if (r.model_size_bytes > 0)
    os << "model size: " << r.model_size_bytes << " bytes (" << std::fixed << std::setprecision(2)
       << double(r.model_size_bytes) / (1024.0 * 1024.0) << " MB)\n";
  return os.str();
}

template class ModelT<float>;
template class ModelT<double>;

}  // namespace mkis
