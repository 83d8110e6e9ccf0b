#include "mkis/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mkis/error.hpp"
#include "mkis/ops.hpp"

namespace mkis {

template <typename T>
GradCheckResult grad_check(const std::function<TensorT<T>(TapeT<T>*)>& fn,
                           const std::vector<TensorT<T>>& params, double eps) {
  if (!(eps > 0)) throw ConfigError("grad_check: eps must be positive");
  // non-const handles onto the same storage; probing mutates values in place
  std::vector<TensorT<T>> ps(params.begin(), params.end());
  for (auto& p : ps)
    if (!p.requires_grad()) throw ConfigError("grad_check: all checked tensors need requires_grad");

  // analytic pass
  for (auto& p : ps) p.zero_grad();
  TapeT<T> tape;
  TensorT<T> loss = fn(&tape);
  tape.backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(ps.size());
  for (auto& p : ps) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckResult res;
  ReluSignRecorder rec_hi, rec_lo;
  for (size_t pi = 0; pi < ps.size(); ++pi) {
    std::span<T> v = ps[pi].values();
    for (int64_t i = 0; i < ps[pi].numel(); ++i) {
      const T saved = v[i];

      v[i] = saved + static_cast<T>(eps);
      rec_hi.bits.clear();
      set_relu_sign_recorder(&rec_hi);
      double loss_hi = NAN;
      try {
        loss_hi = static_cast<double>(fn(nullptr).item());
      } catch (...) {
        set_relu_sign_recorder(nullptr);
        v[i] = saved;
        throw;
      }

      v[i] = saved - static_cast<T>(eps);
      rec_lo.bits.clear();
      set_relu_sign_recorder(&rec_lo);
      double loss_lo = NAN;
      try {
        loss_lo = static_cast<double>(fn(nullptr).item());
      } catch (...) {
        set_relu_sign_recorder(nullptr);
        v[i] = saved;
        throw;
      }
      set_relu_sign_recorder(nullptr);
      v[i] = saved;

      if (rec_hi.bits != rec_lo.bits) {
        ++res.skipped;
        continue;
      }
      const double numeric = (loss_hi - loss_lo) / (2.0 * eps);
      const double a = static_cast<double>(analytic[pi][i]);
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  if (res.checked == 0)
    throw NumericError("grad_check: every coordinate was skipped (ReLU kinks everywhere?)");
  return res;
}

template GradCheckResult grad_check(const std::function<TensorT<float>(TapeT<float>*)>&,
                                    const std::vector<TensorT<float>>&, double);
template GradCheckResult grad_check(const std::function<TensorT<double>(TapeT<double>*)>&,
                                    const std::vector<TensorT<double>>&, double);

}  // namespace mkis
