#include <algorithm>
#include <cstdint>

#include "mkis/ops.hpp"
#include "mkis/parallel.hpp"

namespace mkis {

namespace {

// All three cores accumulate into a caller-zeroed (or gradient) buffer.
//
// Index conventions: a convolution output element (oh, ow) reads input at
// ih = oh*stride - padding + kh. The transposed core is its exact adjoint,
// so conv_core also computes conv_transpose2d's input gradient and
// transpose_core computes conv2d's input gradient.

// out[b,oc,oh,ow] += sum over (ic, kh, kw) of in[b,ic,ih,iw] * k[oc,ic,kh,kw].
// Contributions to one output element arrive in (ic, kh, kw) order.
template <typename T>
void conv_core(const T* in, int64_t batch, int64_t cin, int64_t h, int64_t w, const T* k,
               int64_t cout, int64_t kh, int64_t kw, int64_t stride, int64_t padding, T* out,
               int64_t oh_n, int64_t ow_n) {
  const int64_t work_per_map = cin * kh * kw * oh_n * ow_n;
  const int64_t grain = std::max<int64_t>(1, 200000 / std::max<int64_t>(1, work_per_map));
  parallel_for(batch * cout, grain, [=](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const int64_t b = bc / cout;
      const int64_t oc = bc % cout;
      T* out_map = out + bc * oh_n * ow_n;
      for (int64_t ic = 0; ic < cin; ++ic) {
        const T* in_map = in + (b * cin + ic) * h * w;
        const T* k_base = k + ((oc * cin + ic) * kh) * kw;
        for (int64_t r = 0; r < kh; ++r) {
          // rows with ih = oh*stride + r - padding inside [0, h)
          const int64_t oh_lo = r >= padding ? 0 : (padding - r + stride - 1) / stride;
          const int64_t hnum = h - 1 + padding - r;
          if (hnum < 0) continue;
          const int64_t oh_hi = std::min(oh_n - 1, hnum / stride);
          for (int64_t c = 0; c < kw; ++c) {
            const T kv = k_base[r * kw + c];
            const int64_t ow_lo = c >= padding ? 0 : (padding - c + stride - 1) / stride;
            const int64_t wnum = w - 1 + padding - c;
            if (wnum < 0) continue;
            const int64_t ow_hi = std::min(ow_n - 1, wnum / stride);
            const int64_t off = c - padding;
            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const int64_t ih = oh * stride + r - padding;
              const T* in_row = in_map + ih * w;
              T* out_row = out_map + oh * ow_n;
              if (stride == 1) {
                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) out_row[ow] += in_row[ow + off] * kv;
              } else {
                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                  out_row[ow] += in_row[ow * stride + off] * kv;
              }
            }
          }
        }
      }
    }
  });
}

// out[b,oc,oh,ow] += sum over (ic, kh, kw) with oh = ih*stride + kh - padding
// of in[b,ic,ih,iw] * k[ic,oc,kh,kw]. Adjoint of conv_core; contributions to
// one output element again arrive in (ic, kh, kw) order.
template <typename T>
void transpose_core(const T* in, int64_t batch, int64_t cin, int64_t h, int64_t w, const T* k,
                    int64_t cout, int64_t kh, int64_t kw, int64_t stride, int64_t padding, T* out,
                    int64_t oh_n, int64_t ow_n) {
  const int64_t work_per_map = cin * kh * kw * h * w;
  const int64_t grain = std::max<int64_t>(1, 200000 / std::max<int64_t>(1, work_per_map));
  parallel_for(batch * cout, grain, [=](int64_t lo, int64_t hi) {
    for (int64_t bc = lo; bc < hi; ++bc) {
      const int64_t b = bc / cout;
      const int64_t oc = bc % cout;
      T* out_map = out + bc * oh_n * ow_n;
      for (int64_t ic = 0; ic < cin; ++ic) {
        const T* in_map = in + (b * cin + ic) * h * w;
        const T* k_base = k + ((ic * cout + oc) * kh) * kw;
        for (int64_t r = 0; r < kh; ++r) {
          // input rows with oh = ih*stride + r - padding inside [0, oh_n)
          const int64_t ih_lo = padding > r ? (padding - r + stride - 1) / stride : 0;
          const int64_t hnum = oh_n - 1 + padding - r;
          if (hnum < 0) continue;
          const int64_t ih_hi = std::min(h - 1, hnum / stride);
          for (int64_t c = 0; c < kw; ++c) {
            const T kv = k_base[r * kw + c];
            const int64_t iw_lo = padding > c ? (padding - c + stride - 1) / stride : 0;
            const int64_t wnum = ow_n - 1 + padding - c;
            if (wnum < 0) continue;
            const int64_t iw_hi = std::min(w - 1, wnum / stride);
            const int64_t off = c - padding;
            for (int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
              const int64_t oh = ih * stride + r - padding;
              const T* in_row = in_map + ih * w;
              T* out_row = out_map + oh * ow_n;
              for (int64_t iw = iw_lo; iw <= iw_hi; ++iw)
                out_row[iw * stride + off] += in_row[iw] * kv;
            }
          }
        }
      }
    }
  });
}

// dk[gc,xc,kh,kw] += sum over (b, oh, ow) of g[b,gc,oh,ow] * x[b,xc,ih,iw],
// the kernel gradient of out = conv(x, k). Called with (x = conv input,
// g = output grad) for conv2d and (x = output grad, g = transpose input)
// for conv_transpose2d; both kernel layouts fall out of [gc][xc] ordering.
template <typename T>
void kernel_grad_core(const T* x, int64_t batch, int64_t xc_n, int64_t h, int64_t w, const T* g,
                      int64_t gc_n, int64_t oh_n, int64_t ow_n, int64_t kh, int64_t kw,
                      int64_t stride, int64_t padding, T* dk) {
  const int64_t work = batch * kh * kw * oh_n * ow_n;
  const int64_t grain = std::max<int64_t>(1, 200000 / std::max<int64_t>(1, work));
  parallel_for(gc_n * xc_n, grain, [=](int64_t lo, int64_t hi) {
    for (int64_t cc = lo; cc < hi; ++cc) {
      const int64_t gc = cc / xc_n;
      const int64_t xc = cc % xc_n;
      T* dk_base = dk + cc * kh * kw;
      for (int64_t r = 0; r < kh; ++r) {
        const int64_t oh_lo = r >= padding ? 0 : (padding - r + stride - 1) / stride;
        const int64_t hnum = h - 1 + padding - r;
        if (hnum < 0) continue;
        const int64_t oh_hi = std::min(oh_n - 1, hnum / stride);
        for (int64_t c = 0; c < kw; ++c) {
          const int64_t ow_lo = c >= padding ? 0 : (padding - c + stride - 1) / stride;
          const int64_t wnum = w - 1 + padding - c;
          if (wnum < 0) continue;
          const int64_t ow_hi = std::min(ow_n - 1, wnum / stride);
          if (ow_hi < ow_lo) continue;
          // four independent accumulation lanes keep the dot products
          // vectorizable without changing results between runs
          T l0 = 0, l1 = 0, l2 = 0, l3 = 0;
          const int64_t off = c - padding;
          for (int64_t b = 0; b < batch; ++b) {
            const T* x_map = x + (b * xc_n + xc) * h * w;
            const T* g_map = g + (b * gc_n + gc) * oh_n * ow_n;
            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const int64_t ih = oh * stride + r - padding;
              const T* x_row = x_map + ih * w;
              const T* g_row = g_map + oh * ow_n;
              int64_t ow = ow_lo;
              if (stride == 1) {
                for (; ow + 3 <= ow_hi; ow += 4) {
                  l0 += g_row[ow] * x_row[ow + off];
                  l1 += g_row[ow + 1] * x_row[ow + 1 + off];
                  l2 += g_row[ow + 2] * x_row[ow + 2 + off];
                  l3 += g_row[ow + 3] * x_row[ow + 3 + off];
                }
                for (; ow <= ow_hi; ++ow) l0 += g_row[ow] * x_row[ow + off];
              } else {
                for (; ow <= ow_hi; ++ow) l0 += g_row[ow] * x_row[ow * stride + off];
              }
            }
          }
          dk_base[r * kw + c] += (l0 + l1) + (l2 + l3);
        }
      }
    }
  });
}

template <typename T>
void validate_conv_args(const TensorT<T>& input, const TensorT<T>& kernel, int stride,
                        int padding, const char* op, int64_t kernel_in_axis) {
  if (input.ndim() != 4)
    throw ShapeError(std::string(op) + ": input must be 4-D (B,C,H,W), got " +
                     shape_str(input.shape()));
  if (kernel.ndim() != 4)
    throw ShapeError(std::string(op) + ": kernel must be 4-D, got " + shape_str(kernel.shape()));
  if (stride < 1) throw ConfigError(std::string(op) + ": stride must be >= 1");
  if (padding < 0) throw ConfigError(std::string(op) + ": padding must be >= 0");
  if (input.dim(1) != kernel.dim(kernel_in_axis))
    throw ShapeError(std::string(op) + ": input channel axis 1 (" + std::to_string(input.dim(1)) +
                     ") does not match kernel axis " + std::to_string(kernel_in_axis) + " (" +
                     std::to_string(kernel.dim(kernel_in_axis)) + ")");
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, int stride, int padding,
                  TapeT<T>* tape) {
  validate_conv_args(input, kernel, stride, padding, "conv2d", 1);
  const int64_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const int64_t ow = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw || oh < 1 || ow < 1)
    throw GeometryError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                        " with padding " + std::to_string(padding) +
                        " yields an empty output for input " + shape_str(input.shape()));

  const bool rg = input.requires_grad() || kernel.requires_grad();
  TensorT<T> out = TensorT<T>::zeros({b, cout, oh, ow}, rg);
  conv_core(input.data(), b, cin, h, w, kernel.data(), cout, kh, kw, stride, padding, out.data(),
            oh, ow);
  check_finite(out, "conv2d");

  if (tape && rg) {
    tape->record([input = input, kernel = kernel, out, stride, padding]() mutable {
      const int64_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
      const int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
      const int64_t oh = out.dim(2), ow = out.dim(3);
      if (input.requires_grad()) {
        transpose_core(out.grad().data(), b, cout, oh, ow, kernel.data(), cin, kh, kw, stride,
                       padding, input.grad().data(), h, w);
      }
      if (kernel.requires_grad()) {
        kernel_grad_core(input.data(), b, cin, h, w, out.grad().data(), cout, oh, ow, kh, kw,
                         stride, padding, kernel.grad().data());
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& input, const TensorT<T>& kernel, int stride,
                            int padding, TapeT<T>* tape) {
  validate_conv_args(input, kernel, stride, padding, "conv_transpose2d", 0);
  const int64_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t cout = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const int64_t oh = (h - 1) * stride - 2 * padding + kh;
  const int64_t ow = (w - 1) * stride - 2 * padding + kw;
  if (oh < 1 || ow < 1)
    throw GeometryError("conv_transpose2d: parameters yield an empty output for input " +
                        shape_str(input.shape()));

  const bool rg = input.requires_grad() || kernel.requires_grad();
  TensorT<T> out = TensorT<T>::zeros({b, cout, oh, ow}, rg);
  transpose_core(input.data(), b, cin, h, w, kernel.data(), cout, kh, kw, stride, padding,
                 out.data(), oh, ow);
  check_finite(out, "conv_transpose2d");

  if (tape && rg) {
    tape->record([input = input, kernel = kernel, out, stride, padding]() mutable {
      const int64_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
      const int64_t cout = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
      const int64_t oh = out.dim(2), ow = out.dim(3);
      if (input.requires_grad()) {
        conv_core(out.grad().data(), b, cout, oh, ow, kernel.data(), cin, kh, kw, stride, padding,
                  input.grad().data(), h, w);
      }
      if (kernel.requires_grad()) {
        kernel_grad_core(out.grad().data(), b, cout, oh, ow, input.data(), cin, h, w, kh, kw,
                         stride, padding, kernel.grad().data());
      }
    });
  }
  return out;
}

template TensorT<float> conv2d(const TensorT<float>&, const TensorT<float>&, int, int,
                               TapeT<float>*);
template TensorT<double> conv2d(const TensorT<double>&, const TensorT<double>&, int, int,
                                TapeT<double>*);
template TensorT<float> conv_transpose2d(const TensorT<float>&, const TensorT<float>&, int, int,
                                         TapeT<float>*);
template TensorT<double> conv_transpose2d(const TensorT<double>&, const TensorT<double>&, int,
                                          int, TapeT<double>*);

}  // namespace mkis
