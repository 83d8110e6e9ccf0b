#include "mkis/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "mkis/parallel.hpp"
#include "mkis/rng.hpp"

namespace mkis {

namespace {
thread_local ReluSignRecorder* g_relu_recorder = nullptr;

constexpr double kLnClampProb = 1e-12;

template <typename T>
void require_4d(const TensorT<T>& t, const char* op) {
  if (t.ndim() != 4)
    throw ShapeError(std::string(op) + ": expected a 4-D tensor, got " + shape_str(t.shape()));
}

// Shared label/mask walk for both cross-entropy routes. Calls
// fn(sample, pixel, class) for every counted pixel and returns the count.
template <typename T, typename Fn>
int64_t for_each_counted_pixel(const TensorT<T>& scores, const std::vector<ByteMap>& target,
                               const std::vector<const ByteMap*>* mask, const char* op, Fn&& fn) {
  require_4d(scores, op);
  const int64_t b = scores.dim(0), c = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  if (c < 2) throw ShapeError(std::string(op) + ": needs at least 2 channels on axis 1");
  if (static_cast<int64_t>(target.size()) != b)
    throw ShapeError(std::string(op) + ": got " + std::to_string(target.size()) +
                     " label maps for batch of " + std::to_string(b));
  if (mask && static_cast<int64_t>(mask->size()) != b)
    throw ShapeError(std::string(op) + ": mask count does not match batch");
  int64_t count = 0;
  for (int64_t i = 0; i < b; ++i) {
    const ByteMap& lab = target[i];
    if (lab.h != h || lab.w != w)
      throw ShapeError(std::string(op) + ": label map " + std::to_string(i) + " is " +
                       std::to_string(lab.h) + "x" + std::to_string(lab.w) + ", scores are " +
                       std::to_string(h) + "x" + std::to_string(w));
    const ByteMap* m = mask ? (*mask)[i] : nullptr;
    if (m && (m->h != h || m->w != w))
      throw ShapeError(std::string(op) + ": mask " + std::to_string(i) + " shape mismatch");
    for (int64_t p = 0; p < h * w; ++p) {
      if (m && m->v[p] == 0) continue;
      const uint8_t y = lab.v[p];
      if (y >= c)
        throw DataError(std::string(op) + ": label value " + std::to_string(int(y)) +
                        " outside [0," + std::to_string(c) + ") in sample " + std::to_string(i));
      fn(i, p, y);
      ++count;
    }
  }
  if (count == 0) throw DataError(std::string(op) + ": mask excludes every pixel (empty loss)");
  return count;
}

void validate_weights(const std::vector<double>& w, int64_t classes, const char* op) {
  if (static_cast<int64_t>(w.size()) != classes)
    throw ConfigError(std::string(op) + ": " + std::to_string(w.size()) + " class weights for " +
                      std::to_string(classes) + " channels");
  for (double v : w)
    if (!(v > 0) || !std::isfinite(v))
      throw ConfigError(std::string(op) + ": class weights must be positive and finite");
}
}  // namespace

ReluSignRecorder* relu_sign_recorder() { return g_relu_recorder; }
void set_relu_sign_recorder(ReluSignRecorder* rec) { g_relu_recorder = rec; }

template <typename T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                      BatchNormStats<T>& running, Mode mode, double epsilon, double momentum,
                      TapeT<T>* tape) {
  require_4d(input, "batch_norm");
  const int64_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("batch_norm: gamma/beta length must equal channel axis 1 (" +
                     std::to_string(c) + ")");
  if (static_cast<int64_t>(running.mean.size()) != c ||
      static_cast<int64_t>(running.var.size()) != c)
    throw ShapeError("batch_norm: running stats length must equal channel count");
  if (!(epsilon > 0)) throw ConfigError("batch_norm: epsilon must be positive");
  if (!(momentum > 0 && momentum < 1)) throw ConfigError("batch_norm: momentum must be in (0,1)");

  const int64_t n = b * h * w;  // statistic set per channel
  if (mode == Mode::train && n <= 1)
    throw GeometryError("batch_norm: degenerate batch, " + std::to_string(n) +
                        " value(s) per channel cannot define train-mode statistics");

  const bool rg = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(input.shape(), rg);

  // batch statistics (train) or running statistics (infer), per channel
  auto mean_used = std::make_shared<std::vector<T>>(c);
  auto var_used = std::make_shared<std::vector<T>>(c);
  if (mode == Mode::train) {
    for (int64_t ch = 0; ch < c; ++ch) {
      T sum = 0;
      for (int64_t i = 0; i < b; ++i) {
        const T* plane = input.data() + (i * c + ch) * h * w;
        for (int64_t p = 0; p < h * w; ++p) sum += plane[p];
      }
      const T mu = sum / static_cast<T>(n);
      T sq = 0;
      for (int64_t i = 0; i < b; ++i) {
        const T* plane = input.data() + (i * c + ch) * h * w;
        for (int64_t p = 0; p < h * w; ++p) {
          const T d = plane[p] - mu;
          sq += d * d;
        }
      }
      const T var = sq / static_cast<T>(n);
      (*mean_used)[ch] = mu;
      (*var_used)[ch] = var;
      running.mean[ch] = static_cast<T>((1.0 - momentum) * running.mean[ch] + momentum * mu);
      running.var[ch] = static_cast<T>((1.0 - momentum) * running.var[ch] + momentum * var);
    }
  } else {
    *mean_used = running.mean;
    *var_used = running.var;
  }

  const int64_t plane_sz = h * w;
  parallel_for(b * c, std::max<int64_t>(1, 65536 / std::max<int64_t>(1, plane_sz)),
               [&](int64_t lo, int64_t hi) {
                 for (int64_t bc = lo; bc < hi; ++bc) {
                   const int64_t ch = bc % c;
                   const T inv = T(1) / std::sqrt((*var_used)[ch] + static_cast<T>(epsilon));
                   const T g = gamma.data()[ch], mu = (*mean_used)[ch], bt = beta.data()[ch];
                   const T* in_p = input.data() + bc * plane_sz;
                   T* out_p = out.data() + bc * plane_sz;
                   for (int64_t p = 0; p < plane_sz; ++p)
                     out_p[p] = g * (in_p[p] - mu) * inv + bt;
                 }
               });
  check_finite(out, "batch_norm");

  if (tape && rg) {
    const bool train = mode == Mode::train;
    tape->record([input = input, gamma = gamma, beta = beta, out, mean_used, var_used, epsilon,
                  train]() mutable {
      const int64_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
      const int64_t n = b * h * w;
      const T* dy = out.grad().data();
      std::span<T> dx = input.requires_grad() ? input.grad() : std::span<T>();
      std::span<T> dg = gamma.requires_grad() ? gamma.grad() : std::span<T>();
      std::span<T> db = beta.requires_grad() ? beta.grad() : std::span<T>();
      for (int64_t ch = 0; ch < c; ++ch) {
        const T mu = (*mean_used)[ch];
        const T inv = T(1) / std::sqrt((*var_used)[ch] + static_cast<T>(epsilon));
        const T g = gamma.data()[ch];
        T sum_dy = 0, sum_dy_xhat = 0, sum_xm = 0;
        for (int64_t i = 0; i < b; ++i) {
          const T* x_p = input.data() + (i * c + ch) * h * w;
          const T* dy_p = dy + (i * c + ch) * h * w;
          for (int64_t p = 0; p < h * w; ++p) {
            const T xm = x_p[p] - mu;
            sum_dy += dy_p[p];
            sum_dy_xhat += dy_p[p] * xm * inv;
            sum_xm += xm;
          }
        }
        if (!dg.empty()) dg[ch] += sum_dy_xhat;
        if (!db.empty()) db[ch] += sum_dy;
        if (dx.empty()) continue;
        if (!train) {
          const T scale = g * inv;
          for (int64_t i = 0; i < b; ++i) {
            const T* dy_p = dy + (i * c + ch) * h * w;
            T* dx_p = dx.data() + (i * c + ch) * h * w;
            for (int64_t p = 0; p < h * w; ++p) dx_p[p] += dy_p[p] * scale;
          }
          continue;
        }
        // dvar and dmu terms of the train-mode statistics
        const T dvar = sum_dy_xhat * g * (-T(0.5)) * inv * inv;
        const T dmu = -g * inv * sum_dy + dvar * (-T(2) / static_cast<T>(n)) * sum_xm;
        for (int64_t i = 0; i < b; ++i) {
          const T* x_p = input.data() + (i * c + ch) * h * w;
          const T* dy_p = dy + (i * c + ch) * h * w;
          T* dx_p = dx.data() + (i * c + ch) * h * w;
          for (int64_t p = 0; p < h * w; ++p) {
            const T xm = x_p[p] - mu;
            dx_p[p] += dy_p[p] * g * inv + dvar * T(2) * xm / static_cast<T>(n) +
                       dmu / static_cast<T>(n);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& input, TapeT<T>* tape) {
  const bool rg = input.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(input.shape(), rg);
  const T* in_p = input.data();
  T* out_p = out.data();
  const int64_t n = input.numel();
  for (int64_t i = 0; i < n; ++i) out_p[i] = in_p[i] > T(0) ? in_p[i] : T(0);
  if (g_relu_recorder) {
    for (int64_t i = 0; i < n; ++i) g_relu_recorder->bits.push_back(in_p[i] > T(0) ? 1 : 0);
  }
  if (tape && rg) {
    tape->record([input = input, out]() mutable {
      const T* x = input.data();
      const T* dy = out.grad().data();
      std::span<T> dx = input.grad();
      for (int64_t i = 0; i < input.numel(); ++i)
        if (x[i] > T(0)) dx[i] += dy[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> dropout(const TensorT<T>& input, double p, Mode mode, uint64_t rng_seed,
                   TapeT<T>* tape) {
  if (!(p >= 0.0 && p < 1.0))
    throw ConfigError("dropout: probability must be in [0,1), got " + std::to_string(p));
  if (mode == Mode::infer || p == 0.0) return input;  // pure pass-through

  const bool rg = input.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(input.shape(), rg);
  const int64_t n = input.numel();
  auto keep = std::make_shared<std::vector<uint8_t>>(n);
  Rng rng(rng_seed);
  const T scale = T(1) / static_cast<T>(1.0 - p);
  const T* in_p = input.data();
  T* out_p = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const bool k = rng.next_double() >= p;
    (*keep)[i] = k;
    out_p[i] = k ? in_p[i] * scale : T(0);
  }
  if (tape && rg) {
    tape->record([input = input, out, keep, scale]() mutable {
      const T* dy = out.grad().data();
      std::span<T> dx = input.grad();
      for (int64_t i = 0; i < input.numel(); ++i)
        if ((*keep)[i]) dx[i] += dy[i] * scale;
    });
  }
  return out;
}

template <typename T>
TensorT<T> softmax_channels(const TensorT<T>& input, TapeT<T>* tape) {
  require_4d(input, "softmax_channels");
  const int64_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (c < 2) throw ShapeError("softmax_channels: channel axis 1 must have >= 2 entries");

  const bool rg = input.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(input.shape(), rg);
  const int64_t plane = h * w;
  for (int64_t i = 0; i < b; ++i) {
    const T* in_b = input.data() + i * c * plane;
    T* out_b = out.data() + i * c * plane;
    for (int64_t p = 0; p < plane; ++p) {
      T m = in_b[p];
      for (int64_t ch = 1; ch < c; ++ch) m = std::max(m, in_b[ch * plane + p]);
      T sum = 0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const T e = std::exp(in_b[ch * plane + p] - m);
        out_b[ch * plane + p] = e;
        sum += e;
      }
      for (int64_t ch = 0; ch < c; ++ch) out_b[ch * plane + p] /= sum;
    }
  }
  check_finite(out, "softmax_channels");

  if (tape && rg) {
    tape->record([input = input, out]() mutable {
      const int64_t b = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
      const T* y = out.data();
      const T* dy = out.grad().data();
      std::span<T> dx = input.grad();
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t p = 0; p < plane; ++p) {
          const int64_t base = i * c * plane + p;
          T dot = 0;
          for (int64_t ch = 0; ch < c; ++ch) dot += dy[base + ch * plane] * y[base + ch * plane];
          for (int64_t ch = 0; ch < c; ++ch)
            dx[base + ch * plane] += y[base + ch * plane] * (dy[base + ch * plane] - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> elementwise_add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  require_same_shape(a, b, "elementwise_add");
  const bool rg = a.requires_grad() || b.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  check_finite(out, "elementwise_add");
  if (tape && rg) {
    tape->record([a = a, b = b, out]() mutable {
      const T* dy = out.grad().data();
      if (a.requires_grad()) {
        std::span<T> da = a.grad();
        for (int64_t i = 0; i < a.numel(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        std::span<T> db = b.grad();
        for (int64_t i = 0; i < b.numel(); ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& input, TapeT<T>* tape) {
  T s = 0;
  for (T v : input.values()) s += v;
  TensorT<T> out = TensorT<T>::scalar(s, input.requires_grad());
  check_finite(out, "reduce_sum");
  if (tape && input.requires_grad()) {
    tape->record([input = input, out]() mutable {
      const T g = out.grad()[0];
      std::span<T> dx = input.grad();
      for (int64_t i = 0; i < input.numel(); ++i) dx[i] += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& input, const TensorT<T>& bias, TapeT<T>* tape) {
  require_4d(input, "add_channel_bias");
  const int64_t b = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (bias.numel() != c)
    throw ShapeError("add_channel_bias: bias length " + std::to_string(bias.numel()) +
                     " != channel axis 1 (" + std::to_string(c) + ")");
  const bool rg = input.requires_grad() || bias.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(input.shape(), rg);
  for (int64_t bc = 0; bc < b * c; ++bc) {
    const T bv = bias.data()[bc % c];
    const T* in_p = input.data() + bc * plane;
    T* out_p = out.data() + bc * plane;
    for (int64_t p = 0; p < plane; ++p) out_p[p] = in_p[p] + bv;
  }
  check_finite(out, "add_channel_bias");
  if (tape && rg) {
    tape->record([input = input, bias = bias, out]() mutable {
      const int64_t b = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
      const T* dy = out.grad().data();
      if (input.requires_grad()) {
        std::span<T> dx = input.grad();
        for (int64_t i = 0; i < input.numel(); ++i) dx[i] += dy[i];
      }
      if (bias.requires_grad()) {
        std::span<T> db = bias.grad();
        for (int64_t bc = 0; bc < b * c; ++bc) {
          T s = 0;
          const T* dy_p = dy + bc * plane;
          for (int64_t p = 0; p < plane; ++p) s += dy_p[p];
          db[bc % c] += s;
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> weighted_cross_entropy(const TensorT<T>& probs, const std::vector<ByteMap>& target,
                                  const std::vector<double>& class_weights,
                                  const std::vector<const ByteMap*>* mask, TapeT<T>* tape) {
  validate_weights(class_weights, probs.dim(1), "weighted_cross_entropy");
  const int64_t c = probs.dim(1), plane = probs.dim(2) * probs.dim(3);

  double total = 0;
  const int64_t count = for_each_counted_pixel(
      probs, target, mask, "weighted_cross_entropy", [&](int64_t i, int64_t p, uint8_t y) {
        const double py = probs.data()[(i * c + y) * plane + p];
        total -= class_weights[y] * std::log(std::max(py, kLnClampProb));
      });
  TensorT<T> loss = TensorT<T>::scalar(static_cast<T>(total / count), probs.requires_grad());
  check_finite(loss, "weighted_cross_entropy");

  if (tape && probs.requires_grad()) {
    auto weights = class_weights;
    auto labels = target;
    auto masks = mask ? std::make_shared<std::vector<const ByteMap*>>(*mask) : nullptr;
    tape->record([probs = probs, labels, weights, masks, loss, count]() mutable {
      const int64_t c = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
      const T g = loss.grad()[0];
      std::span<T> dp = probs.grad();
      for_each_counted_pixel(probs, labels, masks ? masks.get() : nullptr,
                             "weighted_cross_entropy", [&](int64_t i, int64_t p, uint8_t y) {
                               const double py = probs.data()[(i * c + y) * plane + p];
                               if (py > kLnClampProb)  // ln is clamped (constant) below this
                                 dp[(i * c + y) * plane + p] -=
                                     g * static_cast<T>(weights[y] / py / count);
                             });
    });
  }
  return loss;
}

template <typename T>
TensorT<T> softmax_weighted_cross_entropy(const TensorT<T>& logits,
                                          const std::vector<ByteMap>& target,
                                          const std::vector<double>& class_weights,
                                          const std::vector<const ByteMap*>* mask,
                                          TapeT<T>* tape) {
  validate_weights(class_weights, logits.dim(1), "softmax_weighted_cross_entropy");
  const int64_t c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);

  double total = 0;
  const int64_t count = for_each_counted_pixel(
      logits, target, mask, "softmax_weighted_cross_entropy",
      [&](int64_t i, int64_t p, uint8_t y) {
        const T* base = logits.data() + i * c * plane + p;
        T m = base[0];
        for (int64_t ch = 1; ch < c; ++ch) m = std::max(m, base[ch * plane]);
        double sum = 0;
        for (int64_t ch = 0; ch < c; ++ch) sum += std::exp(double(base[ch * plane] - m));
        const double lse = double(m) + std::log(sum);
        total += class_weights[y] * (lse - double(base[y * plane]));
      });
  TensorT<T> loss = TensorT<T>::scalar(static_cast<T>(total / count), logits.requires_grad());
  check_finite(loss, "softmax_weighted_cross_entropy");

  if (tape && logits.requires_grad()) {
    auto weights = class_weights;
    auto labels = target;
    auto masks = mask ? std::make_shared<std::vector<const ByteMap*>>(*mask) : nullptr;
    tape->record([logits = logits, labels, weights, masks, loss, count]() mutable {
      const int64_t c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
      const T g = loss.grad()[0];
      std::span<T> dl = logits.grad();
      for_each_counted_pixel(
          logits, labels, masks ? masks.get() : nullptr, "softmax_weighted_cross_entropy",
          [&](int64_t i, int64_t p, uint8_t y) {
            const T* base = logits.data() + i * c * plane + p;
            T m = base[0];
            for (int64_t ch = 1; ch < c; ++ch) m = std::max(m, base[ch * plane]);
            double sum = 0;
            for (int64_t ch = 0; ch < c; ++ch) sum += std::exp(double(base[ch * plane] - m));
            const double scale = weights[y] / count * double(g);
            for (int64_t ch = 0; ch < c; ++ch) {
              const double soft = std::exp(double(base[ch * plane] - m)) / sum;
              dl[(i * c + ch) * plane + p] +=
                  static_cast<T>(scale * (soft - (ch == y ? 1.0 : 0.0)));
            }
          });
    });
  }
  return loss;
}

#define MKIS_INSTANTIATE_OPS(T)                                                                  \
  template TensorT<T> batch_norm(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,       \
                                 BatchNormStats<T>&, Mode, double, double, TapeT<T>*);          \
  template TensorT<T> relu(const TensorT<T>&, TapeT<T>*);                                       \
  template TensorT<T> dropout(const TensorT<T>&, double, Mode, uint64_t, TapeT<T>*);            \
  template TensorT<T> softmax_channels(const TensorT<T>&, TapeT<T>*);                           \
  template TensorT<T> elementwise_add(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);         \
  template TensorT<T> reduce_sum(const TensorT<T>&, TapeT<T>*);                                 \
  template TensorT<T> add_channel_bias(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);        \
  template TensorT<T> weighted_cross_entropy(const TensorT<T>&, const std::vector<ByteMap>&,    \
                                             const std::vector<double>&,                        \
                                             const std::vector<const ByteMap*>*, TapeT<T>*);    \
  template TensorT<T> softmax_weighted_cross_entropy(                                           \
      const TensorT<T>&, const std::vector<ByteMap>&, const std::vector<double>&,               \
      const std::vector<const ByteMap*>*, TapeT<T>*);

MKIS_INSTANTIATE_OPS(float)
MKIS_INSTANTIATE_OPS(double)

}  // namespace mkis
