#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mkis/data.hpp"
#include "mkis/model.hpp"

namespace mkis {

// Per-class loss weights, index = class id.
struct ClassWeights {
  std::vector<double> w;
};

struct TrainConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;  // Adam first-moment decay
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 10;
  int batch_size = 4;
  uint64_t rng_seed = 0;

  // Optimizer steps between checkpoints; 0 disables checkpointing.
  int64_t checkpoint_interval = 0;
  std::string checkpoint_path;  // required when checkpoint_interval > 0
  std::string resume_from;      // checkpoint to restore before training

  // Kept for the config surface: the pipeline is deterministic regardless
  // (fixed accumulation orders, counter-based RNG streams).
  bool deterministic = true;

  // Optional per-epoch learning-rate decay: when enabled, each epoch uses
  // lr_schedule(*this, epoch) instead of the constant learning_rate.
  bool decay_lr_per_epoch = false;
  double lr_decay = 0.9;

  int64_t max_steps = 0;  // optional cap on total optimizer steps (0 = none)

  // Throws ConfigError on any violated invariant (epochs >= 1, rates in
  // range, batch_size >= 1, checkpoint path present when interval > 0).
  void validate() const;
};

// The exponential schedule value for one epoch:
// learning_rate * lr_decay^epoch. Independent of decay_lr_per_epoch, which
// only controls whether train() applies the schedule.
double lr_schedule(const TrainConfig& config, int epoch);

// Median-frequency balancing. For each class c:
//   freq_c = (class-c pixels, inside FOV masks where present)
//          / (counted pixels of the images in which class c appears)
//   w_c    = median(freq) / freq_c   (two-class median = arithmetic mean)
// Throws DataError when a class never appears in the dataset.
ClassWeights median_frequency_weights(SampleSource& dataset, int num_classes = 2);
ClassWeights median_frequency_weights(const std::vector<Sample>& samples, int num_classes = 2);

struct TrainRecord {
  int epoch = 0;
  int64_t step = 0;  // global optimizer step, 1-based
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;  // wall time spent on this step
};

struct TrainLog {
  std::vector<TrainRecord> records;
};

// CSV with header "epoch,step,loss,lr,seconds"; loss/lr at full precision.
void write_train_log_csv(const TrainLog& log, std::ostream& os);
void write_train_log_csv(const TrainLog& log, const std::string& path);

// Adam moments keyed by parameter name. t counts completed steps.
template <typename T>
struct AdamStateT {
  int64_t t = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

using AdamState = AdamStateT<float>;
using DAdamState = AdamStateT<double>;

// One Adam update using the gradients accumulated in each parameter's
// .grad() buffer:
//   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;  t <- t+1
//   theta <- theta - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
// Missing state entries are created zero-filled. Throws NumericError naming
// the parameter and step when a gradient is non-finite. Gradients are left
// in place; the caller zeroes them between steps.
template <typename T>
void adam_step(std::vector<NamedTensorT<T>>& params, AdamStateT<T>& state,
               const TrainConfig& config, double lr);

// Full training loop: config.epochs passes over train_set in a per-epoch
// shuffled order derived from rng_seed, minimizing the class-weighted
// cross-entropy with Adam. Samples are padded to the model's spatial
// multiple on the fly (maskless samples get an all-ones FOV mask first so
// padding never enters the loss). Checkpoints carry model, running stats,
// Adam moments, and loop position; config.resume_from restores one and
// continues exactly where it stopped. Returns one log record per step.
template <typename T>
TrainLog train(ModelT<T>& model, SampleSource& train_set, const TrainConfig& config,
               const ClassWeights& weights);

}  // namespace mkis
