#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mkis/error.hpp"

namespace mkis {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor. Value-semantic handle over shared storage: copies
// alias the same data, which is what lets tape closures accumulate gradients
// into the tensors the caller still holds.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->values.assign(shape_numel(t.s_->shape), T(0));
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static TensorT full(Shape shape, T value, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (T& v : t.s_->values) v = value;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->values = std::move(data);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  int64_t dim(size_t i) const { return s_->shape.at(i); }
  size_t ndim() const { return s_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(s_->values.size()); }

  std::span<T> values() { return {s_->values.data(), s_->values.size()}; }
  std::span<const T> values() const { return {s_->values.data(), s_->values.size()}; }
  T* data() { return s_->values.data(); }
  const T* data() const { return s_->values.data(); }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool rg) { s_->requires_grad = rg; }

  // Gradient accumulator, allocated (zero-filled) on first access.
  std::span<T> grad() {
    if (s_->grad.size() != s_->values.size()) s_->grad.assign(s_->values.size(), T(0));
    return {s_->grad.data(), s_->grad.size()};
  }
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad() {
    if (!s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(s_->shape));
    return s_->values[0];
  }

  // Deep copy (fresh storage, gradient not copied).
  TensorT clone() const {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->values = s_->values;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(s_->values.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(s_->values[i]);
    return TensorT<U>::from_data(s_->shape, std::move(out), s_->requires_grad);
  }

  bool same_storage(const TensorT& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

// Raises NumericError if any value is non-finite; op outputs are checked
// after every forward pass so NaN/Inf never propagates silently.
template <typename T>
void check_finite(const TensorT<T>& t, const char* op) {
  for (T v : t.values()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace mkis
