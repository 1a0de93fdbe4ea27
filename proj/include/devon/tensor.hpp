#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace devon {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Shape of a 4-D tensor: (batch, channels, height, width).
struct Shape4 {
  int nb = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  friend bool operator==(const Shape4& a, const Shape4& b) = default;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(nb) * c * h * w;
  }
  int hw() const { return h * w; }

  bool spatial_equal(const Shape4& o) const { return h == o.h && w == o.w; }

  std::string str() const {
    return "(" + std::to_string(nb) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

namespace detail {

// Value storage is shared between aliases; gradients are per-handle so that
// independent tapes (e.g. one per batch sample) can accumulate separately.
template <typename T>
struct TensorImpl {
  Shape4 shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;  // empty until first use
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(static_cast<std::size_t>(shape.numel()), T(0));
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
  }
};

}  // namespace detail

/// Handle to a 4-D tensor with optional gradient accumulator. Copies share
/// the underlying node (shallow); use clone() for a deep value copy.
template <typename T>
class Tensor4 {
 public:
  using Impl = detail::TensorImpl<T>;

  Tensor4() = default;

  static Tensor4 zeros(Shape4 s, bool requires_grad = false) {
    return filled(s, T(0), requires_grad);
  }

  static Tensor4 filled(Shape4 s, T value, bool requires_grad = false) {
    require(s.nb > 0 && s.c > 0 && s.h > 0 && s.w > 0,
            "tensor shape must be positive, got " + s.str());
    Tensor4 t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = s;
    t.impl_->data = std::make_shared<std::vector<T>>(
        static_cast<std::size_t>(s.numel()), value);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor4 from_data(Shape4 s, std::vector<T> values,
                           bool requires_grad = false) {
    require(static_cast<std::int64_t>(values.size()) == s.numel(),
            "data length " + std::to_string(values.size()) +
                " does not match shape " + s.str());
    Tensor4 t = zeros(s, requires_grad);
    *t.impl_->data = std::move(values);
    return t;
  }

  bool valid() const { return impl_ != nullptr; }
  const Shape4& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }

  std::vector<T>& data() { return *impl_->data; }
  const std::vector<T>& data() const { return *impl_->data; }

  T& at(int n, int ch, int y, int x) {
    return (*impl_->data)[index(n, ch, y, x)];
  }
  T at(int n, int ch, int y, int x) const {
    return (*impl_->data)[index(n, ch, y, x)];
  }

  T* plane(int n, int ch) {
    return impl_->data->data() +
           (static_cast<std::size_t>(n) * shape().c + ch) * shape().hw();
  }
  const T* plane(int n, int ch) const {
    return impl_->data->data() +
           (static_cast<std::size_t>(n) * shape().c + ch) * shape().hw();
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) {
    impl_->requires_grad = v;
    if (v) impl_->ensure_grad();
  }

  std::vector<T>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<T>& grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->zero_grad(); }

  /// Deep copy of the values; gradient state is not copied.
  Tensor4 clone() const {
    Tensor4 t = zeros(shape(), impl_->requires_grad);
    *t.impl_->data = *impl_->data;
    return t;
  }

  /// New handle sharing the value storage but with its own gradient
  /// accumulator. Used for per-worker parameter views in batch-parallel
  /// training.
  Tensor4 alias() const {
    Tensor4 t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::size_t index(int n, int ch, int y, int x) const {
    const Shape4& s = impl_->shape;
    return ((static_cast<std::size_t>(n) * s.c + ch) * s.h + y) * s.w + x;
  }

  std::shared_ptr<Impl> impl_;
};

/// Per-pixel displacement field: channel 0 is the horizontal component u
/// (positive rightward), channel 1 the vertical component v (positive
/// downward), both in pixels.
template <typename T>
using FlowField = Tensor4<T>;

template <typename T>
void require_flow_shaped(const Tensor4<T>& f, const char* where) {
  require(f.shape().c == 2, std::string(where) +
                                ": flow field must have 2 channels, got shape " +
                                f.shape().str());
}

}  // namespace devon
