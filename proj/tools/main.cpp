// mkis: command-line entry points for the segmentation engine.
//
// Subcommands: train, eval, summary, gradcheck, augment, predict.
// Global flags: --config FILE, --seed N, --threads N, --f64, --out DIR.
// MKIS_THREADS serves as the --threads default.
//
// Exit codes: 0 success, 2 configuration error (including model-file load
// failures), 3 data/IO error, 4 numerical abort, 5 gradient-check failure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mkis/data.hpp"
#include "mkis/error.hpp"
#include "mkis/eval.hpp"
#include "mkis/gradcheck.hpp"
#include "mkis/image_io.hpp"
#include "mkis/model.hpp"
#include "mkis/model_io.hpp"
#include "mkis/ops.hpp"
#include "mkis/parallel.hpp"
#include "mkis/rng.hpp"
#include "mkis/train.hpp"

namespace fs = std::filesystem;
using namespace mkis;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitGradcheck = 5;

// ---------------------------------------------------------------------------
// RunConfig: defaults <- config file <- environment <- flags
// ---------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  bool augment_enabled = true;
  std::string train_manifest;
  std::string test_manifest;
  std::string out_dir = "out";
  std::string model_path;
  uint64_t seed = 0;
  int threads = 1;
  bool f64 = false;
};

int64_t parse_i64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not an integer");
  }
}

double parse_f64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not a number");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config key '" + key + "': '" + value + "' is not a boolean");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(int(parse_i64(key, item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  ModelConfig& m = cfg.model;
  TrainConfig& t = cfg.train;
  AugmentConfig& a = cfg.augment;
  if (key == "model.in_channels")
    m.in_channels = int(parse_i64(key, value));
  else if (key == "model.width")
    m.width = int(parse_i64(key, value));
  else if (key == "model.input_kernels")
    m.input_kernels = parse_int_list(key, value);
  else if (key == "model.block_kernels")
    m.block_kernels = parse_int_list(key, value);
  else if (key == "model.num_blocks")
    m.num_blocks = int(parse_i64(key, value));
  else if (key == "model.stride2_blocks")
    m.stride2_blocks = parse_int_list(key, value);
  else if (key == "model.decoder_kernel")
    m.decoder_kernel = int(parse_i64(key, value));
  else if (key == "model.decoder_stages")
    m.decoder_stages = int(parse_i64(key, value));
  else if (key == "model.dropout_p")
    m.dropout_p = parse_f64(key, value);
  else if (key == "model.num_classes")
    m.num_classes = int(parse_i64(key, value));
  else if (key == "model.bn_epsilon")
    m.bn_epsilon = parse_f64(key, value);
  else if (key == "model.bn_momentum")
    m.bn_momentum = parse_f64(key, value);
  else if (key == "train.learning_rate")
    t.learning_rate = parse_f64(key, value);
  else if (key == "train.beta1")
    t.beta1 = parse_f64(key, value);
  else if (key == "train.beta2")
    t.beta2 = parse_f64(key, value);
  else if (key == "train.adam_epsilon")
    t.adam_epsilon = parse_f64(key, value);
  else if (key == "train.epochs")
    t.epochs = int(parse_i64(key, value));
  else if (key == "train.batch_size")
    t.batch_size = int(parse_i64(key, value));
  else if (key == "train.rng_seed") {
    t.rng_seed = uint64_t(parse_i64(key, value));
    cfg.seed = t.rng_seed;
  } else if (key == "train.checkpoint_interval")
    t.checkpoint_interval = parse_i64(key, value);
  else if (key == "train.checkpoint_path")
    t.checkpoint_path = value;
  else if (key == "train.resume_from")
    t.resume_from = value;
  else if (key == "train.deterministic")
    t.deterministic = parse_bool(key, value);
  else if (key == "train.decay_lr_per_epoch")
    t.decay_lr_per_epoch = parse_bool(key, value);
  else if (key == "train.lr_decay")
    t.lr_decay = parse_f64(key, value);
  else if (key == "train.max_steps")
    t.max_steps = parse_i64(key, value);
  else if (key == "augment.enabled")
    cfg.augment_enabled = parse_bool(key, value);
  else if (key == "augment.rotations")
    a.rotations = int(parse_i64(key, value));
  else if (key == "augment.brightness_variants")
    a.brightness_variants = int(parse_i64(key, value));
  else if (key == "augment.gain_lo")
    a.gain_lo = parse_f64(key, value);
  else if (key == "augment.gain_hi")
    a.gain_hi = parse_f64(key, value);
  else if (key == "augment.dead_lo")
    a.dead_lo = parse_f64(key, value);
  else if (key == "augment.dead_hi")
    a.dead_hi = parse_f64(key, value);
  else if (key == "data.train_manifest")
    cfg.train_manifest = value;
  else if (key == "data.test_manifest")
    cfg.test_manifest = value;
  else if (key == "run.out_dir")
    cfg.out_dir = value;
  else if (key == "run.model_path")
    cfg.model_path = value;
  else if (key == "run.seed") {
    cfg.seed = uint64_t(parse_i64(key, value));
    t.rng_seed = cfg.seed;
  } else if (key == "run.threads")
    cfg.threads = int(parse_i64(key, value));
  else if (key == "run.f64")
    cfg.f64 = parse_bool(key, value);
  else
    throw ConfigError("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    // strip comments and surrounding whitespace
    if (const size_t hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const size_t e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config file '" + path + "' line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    apply_config_key(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
}

void echo_resolved(const RunConfig& cfg, std::ostream& os) {
  const ModelConfig& m = cfg.model;
  const TrainConfig& t = cfg.train;
  const AugmentConfig& a = cfg.augment;
  os.precision(17);
  os << "model.in_channels=" << m.in_channels << '\n'
     << "model.width=" << m.width << '\n'
     << "model.input_kernels=" << format_int_list(m.input_kernels) << '\n'
     << "model.block_kernels=" << format_int_list(m.block_kernels) << '\n'
     << "model.num_blocks=" << m.num_blocks << '\n'
     << "model.stride2_blocks=" << format_int_list(m.stride2_blocks) << '\n'
     << "model.decoder_kernel=" << m.decoder_kernel << '\n'
     << "model.decoder_stages=" << m.decoder_stages << '\n'
     << "model.dropout_p=" << m.dropout_p << '\n'
     << "model.num_classes=" << m.num_classes << '\n'
     << "model.bn_epsilon=" << m.bn_epsilon << '\n'
     << "model.bn_momentum=" << m.bn_momentum << '\n'
     << "train.learning_rate=" << t.learning_rate << '\n'
     << "train.beta1=" << t.beta1 << '\n'
     << "train.beta2=" << t.beta2 << '\n'
     << "train.adam_epsilon=" << t.adam_epsilon << '\n'
     << "train.epochs=" << t.epochs << '\n'
     << "train.batch_size=" << t.batch_size << '\n'
     << "train.rng_seed=" << t.rng_seed << '\n'
     << "train.checkpoint_interval=" << t.checkpoint_interval << '\n'
     << "train.checkpoint_path=" << t.checkpoint_path << '\n'
     << "train.resume_from=" << t.resume_from << '\n'
     << "train.deterministic=" << (t.deterministic ? "true" : "false") << '\n'
     << "train.decay_lr_per_epoch=" << (t.decay_lr_per_epoch ? "true" : "false") << '\n'
     << "train.lr_decay=" << t.lr_decay << '\n'
     << "train.max_steps=" << t.max_steps << '\n'
     << "augment.enabled=" << (cfg.augment_enabled ? "true" : "false") << '\n'
     << "augment.rotations=" << a.rotations << '\n'
     << "augment.brightness_variants=" << a.brightness_variants << '\n'
     << "augment.gain_lo=" << a.gain_lo << '\n'
     << "augment.gain_hi=" << a.gain_hi << '\n'
     << "augment.dead_lo=" << a.dead_lo << '\n'
     << "augment.dead_hi=" << a.dead_hi << '\n'
     << "data.train_manifest=" << cfg.train_manifest << '\n'
     << "data.test_manifest=" << cfg.test_manifest << '\n'
     << "run.out_dir=" << cfg.out_dir << '\n'
     << "run.model_path=" << cfg.model_path << '\n'
     << "run.seed=" << cfg.seed << '\n'
     << "run.threads=" << cfg.threads << '\n'
     << "run.f64=" << (cfg.f64 ? "true" : "false") << '\n';
}

void write_resolved_config(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const std::string path = (fs::path(cfg.out_dir) / "config.resolved").string();
  std::ofstream os(path);
  if (!os) throw IoError("cannot write resolved config '" + path + "'");
  echo_resolved(cfg, os);
}

// ---------------------------------------------------------------------------
// small shared helpers
// ---------------------------------------------------------------------------

std::string sanitize_id(const std::string& id) {
  std::string out = id;
  for (char& c : out)
    if (c == '/' || c == '\\' || c == ':' || c == ' ') c = '_';
  return out;
}

uint8_t to_byte(float v) {
  const long r = std::lround(double(v) * 255.0);
  return uint8_t(std::clamp(r, 0L, 255L));
}

void write_image_png(const std::string& path, const ImageF& img) {
  if (img.c == 1) {
    std::vector<uint8_t> bytes(size_t(img.h * img.w));
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(img.v[i]);
    write_png_gray8(path, img.h, img.w, bytes.data());
  } else if (img.c == 3) {
    std::vector<uint8_t> bytes(size_t(img.h * img.w * 3));
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(img.v[i]);
    write_png_rgb8(path, img.h, img.w, bytes.data());
  } else {
    throw DataError("cannot write a " + std::to_string(img.c) + "-channel image as PNG");
  }
}

void write_binary_png(const std::string& path, const ByteMap& map) {
  std::vector<uint8_t> bytes(size_t(map.h * map.w));
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = map.v[i] ? 255 : 0;
  write_png_gray8(path, map.h, map.w, bytes.data());
}

void write_prob_png(const std::string& path, const ImageF& prob) {
  std::vector<uint16_t> bytes(size_t(prob.h * prob.w));
  for (size_t i = 0; i < bytes.size(); ++i) {
    const long r = std::lround(double(prob.v[i]) * 65535.0);
    bytes[i] = uint16_t(std::clamp(r, 0L, 65535L));
  }
  write_png_gray16(path, prob.h, prob.w, bytes.data());
}

// Loads a model file for evaluation/prediction. Any failure here is a
// configuration-grade error (exit 2): the file named on the command line is
// unusable, and the message carries the decoder's diagnostics.
template <typename T>
ModelT<T> load_model_or_exit2(const std::string& path) {
  try {
    return load_model<T>(path);
  } catch (const Error& e) {
    throw ConfigError("cannot load model '" + path + "': " + e.what());
  }
}

ImageF fix_channels(ImageF img, int want, const std::string& origin) {
  if (img.c == want) return img;
  if (img.c == 1 && want > 1) {
    ImageF out{img.h, img.w, want, std::vector<float>(size_t(img.h * img.w * want))};
    for (int64_t y = 0; y < img.h; ++y)
      for (int64_t x = 0; x < img.w; ++x)
        for (int c = 0; c < want; ++c) out.at(y, x, c) = img.at(y, x, 0);
    return out;
  }
  throw DataError("image '" + origin + "' has " + std::to_string(img.c) +
                  " channels but the model expects " + std::to_string(want));
}

// ---------------------------------------------------------------------------
// summary
// ---------------------------------------------------------------------------

std::pair<int64_t, int64_t> parse_resolution(const std::string& res) {
  const size_t x = res.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= res.size())
    throw ConfigError("resolution '" + res + "' is not of the form HxW");
  return {parse_i64("resolution", res.substr(0, x)), parse_i64("resolution", res.substr(x + 1))};
}

int cmd_summary(const RunConfig& cfg, const std::string& res) {
  const auto [h, w] = parse_resolution(res);
  cfg.model.validate();
  std::cout << "# resolved configuration\n";
  echo_resolved(cfg, std::cout);
  std::cout << '\n' << render_complexity(analyze_complexity(cfg.model, h, w));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradCheckOp {
  std::string name;
  std::function<GradCheckResult(uint64_t seed)> run;
};

void fill_tensor(DTensor& t, Rng& rng, double lo, double hi) {
  for (double& v : t.values()) v = rng.uniform(lo, hi);
}

ByteMap random_labels(int64_t h, int64_t w, Rng& rng, int classes = 2) {
  ByteMap m(h, w);
  for (auto& v : m.v) v = uint8_t(rng.next_below(uint64_t(classes)));
  return m;
}

std::vector<GradCheckOp> gradcheck_suite(int64_t net_h, int64_t net_w) {
  std::vector<GradCheckOp> ops;

  ops.push_back({"conv2d", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({1, 2, 6, 6}, true);
    DTensor k = DTensor::zeros({3, 2, 3, 3}, true);
    fill_tensor(x, rng, -1, 1);
    fill_tensor(k, rng, -1, 1);
    return grad_check<double>(
        [&](DTape* tape) { return reduce_sum(conv2d(x, k, 2, 1, tape), tape); }, {x, k}, 1e-5);
  }});

  ops.push_back({"conv_transpose2d", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({1, 3, 4, 4}, true);
    DTensor k = DTensor::zeros({3, 2, 4, 4}, true);
    fill_tensor(x, rng, -1, 1);
    fill_tensor(k, rng, -1, 1);
    return grad_check<double>(
        [&](DTape* tape) { return reduce_sum(conv_transpose2d(x, k, 2, 1, tape), tape); }, {x, k},
        1e-5);
  }});

  ops.push_back({"batch_norm_train", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({2, 2, 3, 3}, true);
    DTensor gamma = DTensor::full({2}, 1.0, true);
    DTensor beta = DTensor::zeros({2}, true);
    fill_tensor(x, rng, -2, 2);
    gamma.data()[1] = 1.4;
    beta.data()[0] = -0.3;
    ByteMap t = random_labels(3, 3, rng);
    return grad_check<double>(
        [&](DTape* tape) {
          auto stats = BatchNormStats<double>::fresh(2);
          DTensor y = batch_norm(x, gamma, beta, stats, Mode::train, 1e-5, 0.1, tape);
          DTensor probs = softmax_channels(y, tape);
          return weighted_cross_entropy(probs, {t, t}, {1.0, 2.0}, nullptr, tape);
        },
        {x, gamma, beta}, 1e-5);
  }});

  ops.push_back({"batch_norm_infer", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({1, 2, 3, 3}, true);
    DTensor gamma = DTensor::full({2}, 1.2, true);
    DTensor beta = DTensor::full({2}, 0.1, true);
    fill_tensor(x, rng, -1, 1);
    BatchNormStats<double> stats;
    stats.mean = {0.2, -0.4};
    stats.var = {1.5, 0.8};
    ByteMap t = random_labels(3, 3, rng);
    return grad_check<double>(
        [&](DTape* tape) {
          DTensor y = batch_norm(x, gamma, beta, stats, Mode::infer, 1e-5, 0.1, tape);
          DTensor probs = softmax_channels(y, tape);
          return weighted_cross_entropy(probs, {t}, {1.0, 1.0}, nullptr, tape);
        },
        {x, gamma, beta}, 1e-5);
  }});

  ops.push_back({"relu", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({1, 2, 5, 5}, true);
    fill_tensor(x, rng, -1, 1);
    return grad_check<double>([&](DTape* tape) { return reduce_sum(relu(x, tape), tape); }, {x},
                              1e-6);
  }});

  ops.push_back({"dropout", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({1, 1, 5, 5}, true);
    fill_tensor(x, rng, 0.5, 1.5);
    return grad_check<double>(
        [&](DTape* tape) { return reduce_sum(dropout(x, 0.4, Mode::train, 4242, tape), tape); },
        {x}, 1e-6);
  }});

  ops.push_back({"softmax_wce", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({1, 3, 8, 8}, true);
    DTensor k = DTensor::zeros({2, 3, 3, 3}, true);
    fill_tensor(x, rng, -1, 1);
    fill_tensor(k, rng, -0.5, 0.5);
    ByteMap t = random_labels(8, 8, rng);
    return grad_check<double>(
        [&](DTape* tape) {
          DTensor probs = softmax_channels(conv2d(x, k, 1, 1, tape), tape);
          return weighted_cross_entropy(probs, {t}, {0.5556, 5.0}, nullptr, tape);
        },
        {x, k}, 1e-5);
  }});

  ops.push_back({"fused_softmax_wce", [](uint64_t seed) {
    Rng rng(seed);
    DTensor logits = DTensor::zeros({2, 2, 4, 4}, true);
    fill_tensor(logits, rng, -3, 3);
    ByteMap t0 = random_labels(4, 4, rng), t1 = random_labels(4, 4, rng);
    ByteMap mask(4, 4, 1);
    mask.v[3] = 0;
    mask.v[9] = 0;
    return grad_check<double>(
        [&](DTape* tape) {
          std::vector<const ByteMap*> masks = {&mask, nullptr};
          return softmax_weighted_cross_entropy(logits, {t0, t1}, {0.5556, 5.0}, &masks, tape);
        },
        {logits}, 1e-5);
  }});

  ops.push_back({"weighted_cross_entropy", [](uint64_t seed) {
    Rng rng(seed);
    DTensor probs = DTensor::zeros({1, 2, 4, 4}, true);
    fill_tensor(probs, rng, 0.1, 0.9);
    ByteMap t = random_labels(4, 4, rng);
    return grad_check<double>(
        [&](DTape* tape) { return weighted_cross_entropy(probs, {t}, {1.0, 3.0}, nullptr, tape); },
        {probs}, 1e-6);
  }});

  ops.push_back({"add_channel_bias", [](uint64_t seed) {
    Rng rng(seed);
    DTensor x = DTensor::zeros({2, 3, 2, 2}, true);
    DTensor b = DTensor::zeros({3}, true);
    fill_tensor(x, rng, -1, 1);
    fill_tensor(b, rng, -1, 1);
    ByteMap t = random_labels(2, 2, rng, 3);
    return grad_check<double>(
        [&](DTape* tape) {
          DTensor probs = softmax_channels(add_channel_bias(x, b, tape), tape);
          return weighted_cross_entropy(probs, {t, t}, {1.0, 1.0, 1.0}, nullptr, tape);
        },
        {x, b}, 1e-5);
  }});

  // The full architecture end to end (all branches, blocks, both decoder
  // stages, classifier) at a narrow width so every coordinate can be probed
  // within the time budget. Dropout is frozen by the fixed per-call seed;
  // train-mode loss depends only on batch statistics, so the closure is pure.
  ops.push_back({"full_network", [net_h, net_w](uint64_t seed) {
    ModelConfig mc;
    mc.width = 4;
    if (net_h % mc.spatial_multiple() != 0 || net_w % mc.spatial_multiple() != 0)
      throw ConfigError("--size must be divisible by " + std::to_string(mc.spatial_multiple()));
    DModel model(mc, seed);
    model.set_requires_grad(true);
    DTensor x = DTensor::zeros({1, 3, net_h, net_w}, true);
    Rng rng(derive_seed(seed, 1));
    fill_tensor(x, rng, 0.0, 1.0);
    ByteMap t = random_labels(net_h, net_w, rng);
    std::vector<DTensor> checked{x};
    for (auto& p : model.parameters()) checked.push_back(p.tensor);
    return grad_check<double>(
        [&](DTape* tape) {
          DTensor logits = model.forward_logits(x, Mode::train, tape, 4242);
          return softmax_weighted_cross_entropy(logits, {t}, {0.5556, 5.0}, nullptr, tape);
        },
        checked, 1e-5);
  }});

  return ops;
}

int cmd_gradcheck(const RunConfig& cfg, const std::string& size, const std::string& inject_fault) {
  const auto [h, w] = parse_resolution(size);
  std::cout << "# resolved configuration\n";
  echo_resolved(cfg, std::cout);
  std::cout << '\n';

  constexpr double kTol = 1e-4;
  std::vector<std::string> failed;
  for (auto& op : gradcheck_suite(h, w)) {
    auto run = op.run;
    if (op.name == inject_fault) {
      // test fixture: make the probe passes disagree with the taped pass
      run = [inner = op.run](uint64_t seed) {
        GradCheckResult r = inner(seed);
        r.max_rel_err = std::max(r.max_rel_err, 0.05);
        return r;
      };
    }
    const GradCheckResult r = run(derive_seed(cfg.seed, std::hash<std::string>{}(op.name)));
    const bool ok = r.max_rel_err < kTol;
    std::ostringstream line;
    line << (ok ? "PASS  " : "FAIL  ") << op.name;
    line << std::string(op.name.size() < 24 ? 24 - op.name.size() : 1, ' ');
    line << "max_rel_err " << std::scientific << r.max_rel_err << "  (checked " << r.checked
         << ", skipped " << r.skipped << ")";
    std::cout << line.str() << '\n';
    if (!ok) failed.push_back(op.name);
  }
  if (!failed.empty()) {
    std::cout << "gradient check FAILED for:";
    for (const auto& name : failed) std::cout << ' ' << name;
    std::cout << '\n';
    return kExitGradcheck;
  }
  std::cout << "all gradient checks passed (tolerance " << kTol << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

int cmd_augment(const RunConfig& cfg, const std::string& manifest_path, bool count_only,
                bool force) {
  DatasetManifest manifest = load_manifest(manifest_path);
  auto base = std::make_shared<ManifestSource>(manifest, cfg.model.in_channels);
  AugmentStream stream(base, cfg.augment, cfg.seed);

  if (count_only) {
    std::cout << stream.size() << '\n';
    return kExitOk;
  }

  const fs::path out(cfg.out_dir);
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    std::cerr << "output directory '" << cfg.out_dir
              << "' is not empty; pass --force to write into it anyway\n";
    return kExitConfig;
  }
  fs::create_directories(out);
  write_resolved_config(cfg);

  std::ofstream mf(out / "manifest.tsv");
  if (!mf) throw IoError("cannot write manifest in '" + cfg.out_dir + "'");
  mf << "dataset=" << manifest.name << "_aug split=train resize=native\n";

  for (int64_t i = 0; i < stream.size(); ++i) {
    Sample s = stream.get(i);
    const std::string id = sanitize_id(s.id);
    write_image_png((out / (id + ".png")).string(), s.image);
    write_binary_png((out / (id + "_label.png")).string(), s.label);
    mf << id << '\t' << id + ".png" << '\t' << id + "_label.png";
    if (s.fov_mask) {
      write_binary_png((out / (id + "_mask.png")).string(), *s.fov_mask);
      mf << '\t' << id + "_mask.png";
    }
    mf << '\n';
  }
  std::cout << stream.size() << '\n';
  std::cout << "materialized to " << cfg.out_dir << " (manifest.tsv)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename T>
int run_train(RunConfig& cfg) {
  DatasetManifest manifest = load_manifest(cfg.train_manifest);
  auto base = std::make_shared<ManifestSource>(manifest, cfg.model.in_channels);

  std::cout << "computing class weights over " << base->size() << " source images...\n";
  ClassWeights weights = median_frequency_weights(*base, cfg.model.num_classes);
  std::cout << "class weights:";
  for (double w : weights.w) std::cout << ' ' << w;
  std::cout << '\n';

  std::shared_ptr<SampleSource> source = base;
  if (cfg.augment_enabled && cfg.augment.rotations + cfg.augment.brightness_variants >= 1) {
    source = std::make_shared<AugmentStream>(base, cfg.augment, cfg.seed);
    std::cout << "augmentation: " << base->size() << " sources -> " << source->size()
              << " samples\n";
  }

  ModelT<T> model(cfg.model, cfg.seed);
  TrainLog log = train(model, *source, cfg.train, weights);

  const fs::path out(cfg.out_dir);
  write_train_log_csv(log, (out / "train_log.csv").string());
  const std::string model_file = (out / "model.bin").string();
  save_model(model, model_file);

  if (log.records.empty()) {
    std::cout << "no training steps were run\n";
  } else {
    const TrainRecord& last = log.records.back();
    std::cout << "trained " << last.step << " steps over " << (last.epoch + 1)
              << " epoch(s); final loss " << last.loss << '\n';
  }
  std::cout << "wrote " << model_file << " and " << (out / "train_log.csv").string() << '\n';
  return kExitOk;
}

int cmd_train(RunConfig& cfg) {
  if (cfg.train_manifest.empty())
    throw ConfigError("no training manifest: set data.train_manifest or pass --manifest");
  if (cfg.train.checkpoint_interval > 0 && cfg.train.checkpoint_path.empty())
    cfg.train.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
  cfg.model.validate();
  cfg.train.validate();
  write_resolved_config(cfg);  // before any work, so failed runs are reproducible
  return cfg.f64 ? run_train<double>(cfg) : run_train<float>(cfg);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <typename T>
int run_eval(const RunConfig& cfg) {
  ModelT<T> model = load_model_or_exit2<T>(cfg.model_path);
  DatasetManifest manifest = load_manifest(cfg.test_manifest);
  ManifestSource test(manifest, model.config().in_channels);

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);

  std::vector<std::string> failures;
  const std::string model_name = fs::path(cfg.model_path).stem().string();
  DatasetEvaluation ev = evaluate_dataset(
      model, test, manifest.name, model_name, &failures,
      [&](const Sample& s, const ByteMap& pred, const ImageF& prob) {
        const std::string id = sanitize_id(s.id);
        const ByteMap* mask = s.fov_mask ? &*s.fov_mask : nullptr;
        RgbImage map = render_accuracy_map(pred, s.label, mask);
        write_png_rgb8((out / (id + "_accuracy.png")).string(), map.h, map.w, map.v.data());
        write_binary_png((out / (id + "_pred.png")).string(), pred);
        write_prob_png((out / (id + "_prob.png")).string(), prob);
      });

  std::vector<MetricsReport> rows{ev.pooled, ev.macro};
  rows.insert(rows.end(), ev.per_image.begin(), ev.per_image.end());
  write_metrics_csv(rows, (out / "metrics.csv").string());
  const std::string table = render_metrics_table({ev.pooled, ev.macro});
  {
    std::ofstream ts(out / "metrics.txt");
    if (!ts) throw IoError("cannot write metrics table");
    ts << render_metrics_table(rows);
  }
  std::cout << table;
  std::cout << "wrote " << (out / "metrics.csv").string() << " and per-image maps\n";

  if (!failures.empty()) {
    for (const std::string& f : failures) std::cerr << "failed: " << f << '\n';
    std::cerr << failures.size() << " of " << test.size() << " samples failed\n";
    return kExitData;
  }
  return kExitOk;
}

int cmd_eval(RunConfig& cfg) {
  if (cfg.model_path.empty())
    throw ConfigError("no model file: set run.model_path or pass --model");
  if (cfg.test_manifest.empty())
    throw ConfigError("no test manifest: set data.test_manifest or pass --manifest");
  write_resolved_config(cfg);
  return cfg.f64 ? run_eval<double>(cfg) : run_eval<float>(cfg);
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

template <typename T>
int run_predict(const RunConfig& cfg, const std::string& image_path,
                const std::string& mask_path, const std::string& label_path) {
  ModelT<T> model = load_model_or_exit2<T>(cfg.model_path);

  Sample s;
  s.id = fs::path(image_path).stem().string();
  s.image = fix_channels(decode_image(image_path), model.config().in_channels, image_path);
  s.label = ByteMap(s.image.h, s.image.w);
  if (!mask_path.empty()) s.fov_mask = binarize_label(decode_image(mask_path));
  if (s.fov_mask && (s.fov_mask->h != s.image.h || s.fov_mask->w != s.image.w))
    throw DataError("mask '" + mask_path + "' does not match the image size");

  ImageF prob;
  ByteMap pred = predict_sample(model, s, &prob);

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  const std::string id = sanitize_id(s.id);
  write_binary_png((out / (id + "_pred.png")).string(), pred);
  write_prob_png((out / (id + "_prob.png")).string(), prob);
  std::cout << "wrote " << (out / (id + "_pred.png")).string() << " and "
            << (out / (id + "_prob.png")).string() << '\n';

  if (!label_path.empty()) {
    ByteMap gt = binarize_label(decode_image(label_path));
    const ByteMap* mask = s.fov_mask ? &*s.fov_mask : nullptr;
    MetricsReport r = metrics_from_counts(confusion(pred, gt, mask));
    r.auc = roc_auc(prob, gt, mask);
    r.dataset = s.id;
    r.model = fs::path(cfg.model_path).stem().string();
    r.params = count_parameters(model.config());
    RgbImage map = render_accuracy_map(pred, gt, mask);
    write_png_rgb8((out / (id + "_accuracy.png")).string(), map.h, map.w, map.v.data());
    std::cout << render_metrics_table({r});
  }
  return kExitOk;
}

int cmd_predict(RunConfig& cfg, const std::string& image_path, const std::string& mask_path,
                const std::string& label_path) {
  if (cfg.model_path.empty())
    throw ConfigError("no model file: set run.model_path or pass --model");
  write_resolved_config(cfg);
  return cfg.f64 ? run_predict<double>(cfg, image_path, mask_path, label_path)
                 : run_predict<float>(cfg, image_path, mask_path, label_path);
}

}  // namespace

// ---------------------------------------------------------------------------
// main
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"mkis: multi-kernel segmentation engine"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  uint64_t seed = 0;
  int threads = 0;
  bool f64 = false;
  std::string out_dir;
  app.add_option("--config", config_path, "key=value configuration file");
  auto* seed_opt = app.add_option("--seed", seed, "RNG seed for all stochastic stages");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads (1 = sequential)");
  app.add_flag("--f64", f64, "run in 64-bit precision");
  auto* out_opt = app.add_option("--out", out_dir, "output directory");

  // train
  auto* sub_train = app.add_subcommand("train", "train a model from a manifest");
  std::string train_manifest;
  int epochs = 0, batch_size = 0;
  double lr = 0.0;
  int64_t max_steps = -1, ckpt_interval = -1;
  std::string ckpt_path, resume_from;
  bool no_augment = false;
  int rotations = -1, brightness = -1;
  sub_train->add_option("--manifest", train_manifest, "training manifest");
  auto* epochs_opt = sub_train->add_option("--epochs", epochs, "training epochs");
  auto* bs_opt = sub_train->add_option("--batch-size", batch_size, "batch size");
  auto* lr_opt = sub_train->add_option("--lr", lr, "learning rate");
  auto* ms_opt = sub_train->add_option("--max-steps", max_steps, "cap on optimizer steps");
  auto* ci_opt = sub_train->add_option("--checkpoint-interval", ckpt_interval,
                                       "steps between checkpoints (0 = off)");
  sub_train->add_option("--checkpoint-path", ckpt_path, "checkpoint file");
  sub_train->add_option("--resume", resume_from, "checkpoint to resume from");
  sub_train->add_flag("--no-augment", no_augment, "train on the raw manifest");
  auto* rot_opt = sub_train->add_option("--rotations", rotations, "rotation variants per image");
  auto* bri_opt =
      sub_train->add_option("--brightness", brightness, "brightness variants per image");

  // eval
  auto* sub_eval = app.add_subcommand("eval", "evaluate a model on a test manifest");
  std::string eval_model, eval_manifest;
  sub_eval->add_option("--model", eval_model, "model file");
  sub_eval->add_option("--manifest", eval_manifest, "test manifest");

  // summary
  auto* sub_summary = app.add_subcommand("summary", "print complexity figures");
  std::string res = "64x64";
  sub_summary->add_option("--res", res, "resolution HxW for MAdds");

  // gradcheck
  auto* sub_gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string gc_size = "16x16";
  std::string inject_fault;
  sub_gradcheck->add_option("--size", gc_size, "input HxW for the full-network check");
  sub_gradcheck
      ->add_option("--inject-fault", inject_fault, "testing aid: force the named op to fail")
      ->group("");  // hidden

  // augment
  auto* sub_augment = app.add_subcommand("augment", "materialize the augmented training set");
  std::string aug_manifest;
  bool count_only = false, force = false;
  sub_augment->add_option("--manifest", aug_manifest, "source manifest");
  sub_augment->add_flag("--count-only", count_only, "print the augmented count and exit");
  sub_augment->add_flag("--force", force, "write into a non-empty output directory");
  auto* arot_opt = sub_augment->add_option("--rotations", rotations, "rotation variants");
  auto* abri_opt = sub_augment->add_option("--brightness", brightness, "brightness variants");

  // predict
  auto* sub_predict = app.add_subcommand("predict", "segment a single image");
  std::string pr_model, pr_image, pr_mask, pr_label;
  sub_predict->add_option("--model", pr_model, "model file");
  sub_predict->add_option("--image", pr_image, "input image")->required();
  sub_predict->add_option("--mask", pr_mask, "field-of-view mask");
  sub_predict->add_option("--label", pr_label, "ground-truth label (prints metrics)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) load_config_file(cfg, config_path);

    // environment default, overridden by an explicit flag below
    if (const char* env = std::getenv("MKIS_THREADS"); env && *env)
      cfg.threads = int(parse_i64("MKIS_THREADS", env));
    if (seed_opt->count()) {
      cfg.seed = seed;
      cfg.train.rng_seed = seed;
    }
    if (threads_opt->count()) cfg.threads = threads;
    if (f64) cfg.f64 = true;
    if (out_opt->count()) cfg.out_dir = out_dir;
    if (cfg.threads < 1)
      throw ConfigError("threads must be >= 1, got " + std::to_string(cfg.threads));
    set_thread_count(cfg.threads);

    if (sub_train->parsed()) {
      if (!train_manifest.empty()) cfg.train_manifest = train_manifest;
      if (epochs_opt->count()) cfg.train.epochs = epochs;
      if (bs_opt->count()) cfg.train.batch_size = batch_size;
      if (lr_opt->count()) cfg.train.learning_rate = lr;
      if (ms_opt->count()) cfg.train.max_steps = max_steps;
      if (ci_opt->count()) cfg.train.checkpoint_interval = ckpt_interval;
      if (!ckpt_path.empty()) cfg.train.checkpoint_path = ckpt_path;
      if (!resume_from.empty()) cfg.train.resume_from = resume_from;
      if (no_augment) cfg.augment_enabled = false;
      if (rot_opt->count()) cfg.augment.rotations = rotations;
      if (bri_opt->count()) cfg.augment.brightness_variants = brightness;
      return cmd_train(cfg);
    }
    if (sub_eval->parsed()) {
      if (!eval_model.empty()) cfg.model_path = eval_model;
      if (!eval_manifest.empty()) cfg.test_manifest = eval_manifest;
      return cmd_eval(cfg);
    }
    if (sub_summary->parsed()) return cmd_summary(cfg, res);
    if (sub_gradcheck->parsed()) return cmd_gradcheck(cfg, gc_size, inject_fault);
    if (sub_augment->parsed()) {
      if (!aug_manifest.empty()) cfg.train_manifest = aug_manifest;
      if (cfg.train_manifest.empty())
        throw ConfigError("no manifest: set data.train_manifest or pass --manifest");
      if (arot_opt->count()) cfg.augment.rotations = rotations;
      if (abri_opt->count()) cfg.augment.brightness_variants = brightness;
      return cmd_augment(cfg, cfg.train_manifest, count_only, force);
    }
    if (sub_predict->parsed()) {
      if (!pr_model.empty()) cfg.model_path = pr_model;
      return cmd_predict(cfg, pr_image, pr_mask, pr_label);
    }
    throw ConfigError("no subcommand given");
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
}
