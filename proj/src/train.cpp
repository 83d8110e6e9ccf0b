#include "mkis/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mkis/error.hpp"
#include "mkis/model_io.hpp"
#include "mkis/ops.hpp"
#include "mkis/rng.hpp"

namespace mkis {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
  if (checkpoint_interval > 0 && checkpoint_path.empty())
    throw ConfigError("checkpoint_interval is set but checkpoint_path is empty");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
}

double lr_schedule(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  return config.learning_rate * std::pow(config.lr_decay, double(epoch));
}

// ---- median-frequency balancing ---------------------------------------------------

namespace {

struct FreqAccum {
  std::vector<int64_t> class_pixels;   // class-c pixels over the whole dataset
  std::vector<int64_t> appear_pixels;  // counted pixels of images where class c appears

  explicit FreqAccum(int num_classes)
      : class_pixels(size_t(num_classes), 0), appear_pixels(size_t(num_classes), 0) {}

  void add(const Sample& s) {
    const int num_classes = int(class_pixels.size());
    std::vector<int64_t> local(size_t(num_classes), 0);
    int64_t counted = 0;
    const ByteMap* mask = s.fov_mask ? &*s.fov_mask : nullptr;
    for (int64_t i = 0; i < s.label.size(); ++i) {
      if (mask && mask->v[size_t(i)] == 0) continue;
      const uint8_t y = s.label.v[size_t(i)];
      if (y >= num_classes)
        throw DataError("sample '" + s.id + "' has label value " + std::to_string(int(y)) +
                        " outside [0," + std::to_string(num_classes) + ")");
      ++local[y];
      ++counted;
    }
    for (int c = 0; c < num_classes; ++c)
      if (local[size_t(c)] > 0) {
        class_pixels[size_t(c)] += local[size_t(c)];
        appear_pixels[size_t(c)] += counted;
      }
  }

  ClassWeights finish() const {
    const int num_classes = int(class_pixels.size());
    std::vector<double> freq(static_cast<size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
      if (class_pixels[size_t(c)] == 0)
        throw DataError("class " + std::to_string(c) +
                        " never appears in the dataset; cannot balance frequencies");
      freq[size_t(c)] = double(class_pixels[size_t(c)]) / double(appear_pixels[size_t(c)]);
    }
    std::vector<double> sorted = freq;
    std::sort(sorted.begin(), sorted.end());
    const size_t half = sorted.size() / 2;
    const double median = sorted.size() % 2 ? sorted[half] : 0.5 * (sorted[half - 1] + sorted[half]);
    ClassWeights out;
    out.w.resize(size_t(num_classes));
    for (int c = 0; c < num_classes; ++c) out.w[size_t(c)] = median / freq[size_t(c)];
    return out;
  }
};

}  // namespace

ClassWeights median_frequency_weights(SampleSource& dataset, int num_classes) {
  if (num_classes < 2) throw ConfigError("median_frequency_weights needs at least 2 classes");
  if (dataset.size() < 1) throw DataError("cannot balance class frequencies of an empty dataset");
  FreqAccum acc(num_classes);
  for (int64_t i = 0; i < dataset.size(); ++i) acc.add(dataset.get(i));
  return acc.finish();
}

ClassWeights median_frequency_weights(const std::vector<Sample>& samples, int num_classes) {
  if (num_classes < 2) throw ConfigError("median_frequency_weights needs at least 2 classes");
  if (samples.empty()) throw DataError("cannot balance class frequencies of an empty dataset");
  FreqAccum acc(num_classes);
  for (const Sample& s : samples) acc.add(s);
  return acc.finish();
}

// ---- train log --------------------------------------------------------------------

void write_train_log_csv(const TrainLog& log, std::ostream& os) {
  os << "epoch,step,loss,lr,seconds\n";
  for (const TrainRecord& r : log.records) {
    os << r.epoch << ',' << r.step << ',' << std::setprecision(17) << r.loss << ',' << r.lr
       << ',' << std::setprecision(6) << r.seconds << '\n';
  }
}

void write_train_log_csv(const TrainLog& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open train log '" + path + "' for writing");
  write_train_log_csv(log, os);
}

// ---- Adam -------------------------------------------------------------------------

template <typename T>
void adam_step(std::vector<NamedTensorT<T>>& params, AdamStateT<T>& state,
               const TrainConfig& config, double lr) {
  const int64_t t = state.t + 1;
  const T bc1 = T(1.0 - std::pow(config.beta1, double(t)));
  const T bc2 = T(1.0 - std::pow(config.beta2, double(t)));
  const T b1 = T(config.beta1), b2 = T(config.beta2);
  const T eps = T(config.adam_epsilon), step_size = T(lr);

  for (NamedTensorT<T>& p : params) {
    auto g = p.tensor.grad();
    for (size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(double(g[i])))
        throw NumericError("non-finite gradient in parameter '" + p.name + "' at step " +
                           std::to_string(t));
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) m.assign(g.size(), T(0));
    if (v.empty()) v.assign(g.size(), T(0));
    if (m.size() != g.size() || v.size() != g.size())
      throw ShapeError("adam state for '" + p.name + "' does not match the parameter size");

    T* theta = p.tensor.data();
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      theta[i] -= step_size * mhat / (std::sqrt(vhat) + eps);
    }
  }
  state.t = t;
}

template void adam_step<float>(std::vector<NamedTensorT<float>>&, AdamStateT<float>&,
                               const TrainConfig&, double);
template void adam_step<double>(std::vector<NamedTensorT<double>>&, AdamStateT<double>&,
                                const TrainConfig&, double);

// ---- training loop ----------------------------------------------------------------

namespace {

// Stream tags keep every RNG purpose independent of the others.
constexpr uint64_t kShuffleStream = 0x53480000ULL;
constexpr uint64_t kDropoutStream = 0xD0000000ULL;

template <typename T>
void write_checkpoint(ModelT<T>& model, const AdamStateT<T>& state, const TrainConfig& config,
                      int epoch, int64_t done_batches, int64_t global_step) {
  ExtraRecordsT<T> extras;
  extras.push_back({"opt.t", {T(state.t)}});
  extras.push_back({"opt.epoch", {T(epoch)}});
  extras.push_back({"opt.epoch_step", {T(done_batches)}});
  extras.push_back({"opt.global_step", {T(global_step)}});
  for (const auto& [name, mv] : state.m) extras.push_back({"adam.m." + name, mv});
  for (const auto& [name, vv] : state.v) extras.push_back({"adam.v." + name, vv});
  // write-then-rename so an interrupted save never clobbers the last good file
  const std::string tmp = config.checkpoint_path + ".tmp";
  save_model(model, tmp, extras);
  std::filesystem::rename(tmp, config.checkpoint_path);
}

}  // namespace

template <typename T>
TrainLog train(ModelT<T>& model, SampleSource& train_set, const TrainConfig& config,
               const ClassWeights& weights) {
  config.validate();
  if (train_set.size() < 1) throw DataError("training set is empty");
  const int num_classes = model.config().num_classes;
  if (int(weights.w.size()) != num_classes)
    throw ConfigError("expected " + std::to_string(num_classes) + " class weights, got " +
                      std::to_string(weights.w.size()));
  for (double wv : weights.w)
    if (!(wv > 0.0) || !std::isfinite(wv))
      throw ConfigError("class weights must be positive and finite");

  AdamStateT<T> state;
  int start_epoch = 0;
  int64_t start_batches = 0;  // completed batches within start_epoch
  int64_t global_step = 0;

  if (!config.resume_from.empty()) {
    LoadedModelT<T> loaded = load_model_full<T>(config.resume_from);
    if (!(loaded.model.config() == model.config()))
      throw ConfigError("checkpoint '" + config.resume_from +
                        "' was written for a different model configuration");
    model = std::move(loaded.model);
    for (const auto& [name, data] : loaded.extras) {
      if (data.empty()) continue;
      if (name == "opt.t")
        state.t = int64_t(data[0]);
      else if (name == "opt.epoch")
        start_epoch = int(data[0]);
      else if (name == "opt.epoch_step")
        start_batches = int64_t(data[0]);
      else if (name == "opt.global_step")
        global_step = int64_t(data[0]);
      else if (name.starts_with("adam.m."))
        state.m[name.substr(7)] = data;
      else if (name.starts_with("adam.v."))
        state.v[name.substr(7)] = data;
      // other extras are ignored: checkpoints may carry additional payloads
    }
  }

  model.set_requires_grad(true);
  std::vector<NamedTensorT<T>> params = model.parameters();

  const int64_t multiple = model.config().spatial_multiple();
  const int64_t n = train_set.size();
  TrainLog log;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), int64_t(0));
    Rng shuffle(derive_seed(config.rng_seed, kShuffleStream + uint64_t(epoch)));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[size_t(i)], order[size_t(shuffle.next_below(uint64_t(i) + 1))]);

    const double lr = config.decay_lr_per_epoch ? lr_schedule(config, epoch) : config.learning_rate;
    int64_t done = epoch == start_epoch ? start_batches : 0;

    for (int64_t bs = done * config.batch_size; bs < n; bs += config.batch_size, ++done) {
      if (config.max_steps > 0 && global_step >= config.max_steps) return log;
      const auto t0 = std::chrono::steady_clock::now();

      // assemble the batch, padding to the model's geometry on the fly
      std::vector<Sample> batch;
      for (int64_t i = bs; i < std::min<int64_t>(bs + config.batch_size, n); ++i) {
        Sample s = train_set.get(order[size_t(i)]);
        if (s.image.h % multiple != 0 || s.image.w % multiple != 0) {
          // padded pixels must never reach the loss: mask them out
          if (!s.fov_mask) s.fov_mask = ByteMap(s.image.h, s.image.w, 1);
          s = pad_to_multiple(s, multiple, nullptr);
        }
        batch.push_back(std::move(s));
      }
      std::vector<const Sample*> ptrs;
      std::vector<ByteMap> labels;
      std::vector<const ByteMap*> masks;
      bool any_mask = false;
      for (const Sample& s : batch) {
        ptrs.push_back(&s);
        labels.push_back(s.label);
        masks.push_back(s.fov_mask ? &*s.fov_mask : nullptr);
        any_mask = any_mask || s.fov_mask.has_value();
      }

      TensorT<T> x = batch_tensor<T>(ptrs);
      TapeT<T> tape;
      const uint64_t dropout_seed =
          derive_seed(config.rng_seed, kDropoutStream + uint64_t(global_step));
      TensorT<T> logits = model.forward_logits(x, Mode::train, &tape, dropout_seed);
      TensorT<T> loss = softmax_weighted_cross_entropy(logits, labels, weights.w,
                                                       any_mask ? &masks : nullptr, &tape);
      const double loss_value = double(loss.item());
      if (!std::isfinite(loss_value))
        throw NumericError("training loss is not finite at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(global_step + 1) +
                           "; the last checkpoint is retained");

      for (NamedTensorT<T>& p : params) p.tensor.zero_grad();
      tape.backward(loss);
      adam_step(params, state, config, lr);
      ++global_step;

      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.records.push_back({epoch, global_step, loss_value, lr, seconds});

      if (config.checkpoint_interval > 0 && global_step % config.checkpoint_interval == 0)
        write_checkpoint(model, state, config, epoch, done + 1, global_step);
    }
  }
  return log;
}

template TrainLog train<float>(ModelT<float>&, SampleSource&, const TrainConfig&,
                               const ClassWeights&);
template TrainLog train<double>(ModelT<double>&, SampleSource&, const TrainConfig&,
                                const ClassWeights&);

}  // namespace mkis
