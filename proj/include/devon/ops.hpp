#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "devon/tape.hpp"
#include "devon/tensor.hpp"

namespace devon {

namespace detail {

// exp with a cheap polynomial approximation on the float path. Softmin over
// k1^2+k2^2+k3^2 channels is exp-bound at training sizes; ~1e-7 relative
// error is far below the optimizer's noise floor. The double path stays on
// std::exp so 64-bit checks see the library function.
inline float fast_exp(float x) {
  if (x < -87.0f) return 0.0f;
  if (x > 88.0f) return std::exp(x);
  const float log2e = 1.442695040f;
  float t = x * log2e;
  float fi = std::floor(t);
  float f = t - fi;
  int i = static_cast<int>(fi);
  // 2^f on [0,1), minimax degree-5
  float p = 1.8775767e-3f;
  p = p * f + 8.9893397e-3f;
  p = p * f + 5.5826318e-2f;
  p = p * f + 2.4015361e-1f;
  p = p * f + 6.9315308e-1f;
  p = p * f + 9.9999994e-1f;
  union {
    float fl;
    int in;
  } u;
  u.in = (i + 127) << 23;
  return u.fl * p;
}
inline double fast_exp(double x) { return std::exp(x); }

template <typename T>
T sign_of(T x) {
  return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
}

}  // namespace detail

/// Elementwise sum. The adjoint passes the incoming gradient to both inputs.
template <typename T>
Tensor4<T> add(Tape<T>& tape, const Tensor4<T>& a, const Tensor4<T>& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor4<T> out = Tensor4<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::track_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      const std::vector<T>& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor4<T> sub(Tape<T>& tape, const Tensor4<T>& a, const Tensor4<T>& b) {
  require(a.shape() == b.shape(),
          "sub: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor4<T> out = Tensor4<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::track_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      const std::vector<T>& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor4<T> scale(Tape<T>& tape, const Tensor4<T>& a, T factor) {
  Tensor4<T> out = Tensor4<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = factor * a.data()[i];
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), oi = out.impl(), factor] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        ai->grad[i] += factor * oi->grad[i];
    });
  }
  return out;
}

/// |x| elementwise; subgradient 0 at x == 0.
template <typename T>
Tensor4<T> abs(Tape<T>& tape, const Tensor4<T>& a) {
  Tensor4<T> out = Tensor4<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::abs(a.data()[i]);
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), oi = out.impl()] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const std::vector<T>& x = *ai->data;
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        ai->grad[i] += detail::sign_of(x[i]) * oi->grad[i];
    });
  }
  return out;
}

/// y = x for x >= 0, 0.1*x otherwise; the subgradient at 0 is 1.
template <typename T>
Tensor4<T> leaky_relu(Tape<T>& tape, const Tensor4<T>& a, T slope = T(0.1)) {
  Tensor4<T> out = Tensor4<T>::zeros(a.shape());
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) {
    T x = a.data()[i];
    out.data()[i] = x >= T(0) ? x : slope * x;
  }
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), oi = out.impl(), slope] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const std::vector<T>& x = *ai->data;
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        ai->grad[i] += (x[i] >= T(0) ? T(1) : slope) * oi->grad[i];
    });
  }
  return out;
}

/// Channel concatenation; all parts must share batch and spatial size.
template <typename T>
Tensor4<T> concat_channels(Tape<T>& tape, const std::vector<Tensor4<T>>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const Shape4 s0 = parts[0].shape();
  int total_c = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    require(p.shape().nb == s0.nb && p.shape().spatial_equal(s0),
            "concat_channels: spatial shape mismatch " + p.shape().str() +
                " vs " + s0.str());
    total_c += p.shape().c;
    any_grad |= p.requires_grad();
  }
  Tensor4<T> out = Tensor4<T>::zeros({s0.nb, total_c, s0.h, s0.w});
  const int hw = s0.hw();
  for (int n = 0; n < s0.nb; ++n) {
    int co = 0;
    for (const auto& p : parts) {
      for (int ch = 0; ch < p.shape().c; ++ch, ++co) {
        const T* src = p.plane(n, ch);
        T* dst = out.plane(n, co);
        std::copy(src, src + hw, dst);
      }
    }
  }
  if (tape.grad_enabled() && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    tape.record(out.impl(), [impls, oi = out.impl(), hw, s0] {
      for (int n = 0; n < s0.nb; ++n) {
        int co = 0;
        for (const auto& pi : impls) {
          const int pc = pi->shape.c;
          if (!pi->requires_grad) {
            co += pc;
            continue;
          }
          pi->ensure_grad();
          for (int ch = 0; ch < pc; ++ch, ++co) {
            const T* g = oi->grad.data() +
                         (static_cast<std::size_t>(n) * oi->shape.c + co) * hw;
            T* dst = pi->grad.data() + (static_cast<std::size_t>(n) * pc + ch) * hw;
            for (int i = 0; i < hw; ++i) dst[i] += g[i];
          }
        }
      }
    });
  }
  return out;
}

/// Per-pixel softmin over channels: y_i = exp(-x_i) / sum_j exp(-x_j),
/// stabilized by shifting with the per-pixel channel minimum.
template <typename T>
Tensor4<T> softmin_channels(Tape<T>& tape, const Tensor4<T>& a) {
  const Shape4 s = a.shape();
  Tensor4<T> out = Tensor4<T>::zeros(s);
  const int hw = s.hw();
  for (int n = 0; n < s.nb; ++n) {
    const T* base = a.plane(n, 0);
    T* obase = out.plane(n, 0);
    for (int i = 0; i < hw; ++i) {
      T mn = base[i];
      for (int ch = 1; ch < s.c; ++ch) {
        T v = base[static_cast<std::size_t>(ch) * hw + i];
        if (v < mn) mn = v;
      }
      T sum = T(0);
      for (int ch = 0; ch < s.c; ++ch) {
        T e = detail::fast_exp(mn - base[static_cast<std::size_t>(ch) * hw + i]);
        obase[static_cast<std::size_t>(ch) * hw + i] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int ch = 0; ch < s.c; ++ch)
        obase[static_cast<std::size_t>(ch) * hw + i] *= inv;
    }
  }
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), oi = out.impl(), s, hw] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (int n = 0; n < s.nb; ++n) {
        const std::size_t off = static_cast<std::size_t>(n) * s.c * hw;
        const T* y = oi->data->data() + off;
        const T* g = oi->grad.data() + off;
        T* dx = ai->grad.data() + off;
        for (int i = 0; i < hw; ++i) {
          T dot = T(0);
          for (int ch = 0; ch < s.c; ++ch) {
            const std::size_t k = static_cast<std::size_t>(ch) * hw + i;
            dot += g[k] * y[k];
          }
          for (int ch = 0; ch < s.c; ++ch) {
            const std::size_t k = static_cast<std::size_t>(ch) * hw + i;
            dx[k] += y[k] * (dot - g[k]);
          }
        }
      }
    });
  }
  return out;
}

/// Softmax across channels, expressed through softmin of the negated input.
template <typename T>
Tensor4<T> softmax_channels(Tape<T>& tape, const Tensor4<T>& a) {
  return softmin_channels(tape, scale(tape, a, T(-1)));
}

/// Per-pixel l2 normalization across channels: y = x / max(||x||, eps).
template <typename T>
Tensor4<T> l2_normalize_channels(Tape<T>& tape, const Tensor4<T>& a,
                                 T eps = T(1e-8)) {
  const Shape4 s = a.shape();
  Tensor4<T> out = Tensor4<T>::zeros(s);
  const int hw = s.hw();
  for (int n = 0; n < s.nb; ++n) {
    const T* base = a.plane(n, 0);
    T* obase = out.plane(n, 0);
    for (int i = 0; i < hw; ++i) {
      T sq = T(0);
      for (int ch = 0; ch < s.c; ++ch) {
        T v = base[static_cast<std::size_t>(ch) * hw + i];
        sq += v * v;
      }
      T norm = std::sqrt(sq);
      T d = norm > eps ? norm : eps;
      for (int ch = 0; ch < s.c; ++ch) {
        const std::size_t k = static_cast<std::size_t>(ch) * hw + i;
        obase[k] = base[k] / d;
      }
    }
  }
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), oi = out.impl(), s, hw, eps] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (int n = 0; n < s.nb; ++n) {
        const std::size_t off = static_cast<std::size_t>(n) * s.c * hw;
        const T* x = ai->data->data() + off;
        const T* g = oi->grad.data() + off;
        T* dx = ai->grad.data() + off;
        for (int i = 0; i < hw; ++i) {
          T sq = T(0), dot = T(0);
          for (int ch = 0; ch < s.c; ++ch) {
            const std::size_t k = static_cast<std::size_t>(ch) * hw + i;
            sq += x[k] * x[k];
            dot += g[k] * x[k];
          }
          T norm = std::sqrt(sq);
          if (norm > eps) {
            const T inv = T(1) / norm;
            const T inv3 = inv * inv * inv;
            for (int ch = 0; ch < s.c; ++ch) {
              const std::size_t k = static_cast<std::size_t>(ch) * hw + i;
              dx[k] += g[k] * inv - x[k] * dot * inv3;
            }
          } else {
            for (int ch = 0; ch < s.c; ++ch) {
              const std::size_t k = static_cast<std::size_t>(ch) * hw + i;
              dx[k] += g[k] / eps;
            }
          }
        }
      }
    });
  }
  return out;
}

/// Per-channel scaling (channel i multiplied by factors[i]).
template <typename T>
Tensor4<T> scale_channels(Tape<T>& tape, const Tensor4<T>& a,
                          std::vector<T> factors) {
  require(static_cast<int>(factors.size()) == a.shape().c,
          "scale_channels: factor count must equal channel count");
  const Shape4 s = a.shape();
  Tensor4<T> out = Tensor4<T>::zeros(s);
  const int hw = s.hw();
  for (int n = 0; n < s.nb; ++n)
    for (int ch = 0; ch < s.c; ++ch) {
      const T f = factors[ch];
      const T* src = a.plane(n, ch);
      T* dst = out.plane(n, ch);
      for (int i = 0; i < hw; ++i) dst[i] = f * src[i];
    }
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(),
                [ai = a.impl(), oi = out.impl(), factors, s, hw] {
                  if (!ai->requires_grad) return;
                  ai->ensure_grad();
                  for (int n = 0; n < s.nb; ++n)
                    for (int ch = 0; ch < s.c; ++ch) {
                      const T f = factors[ch];
                      const std::size_t off =
                          (static_cast<std::size_t>(n) * s.c + ch) * hw;
                      for (int i = 0; i < hw; ++i)
                        ai->grad[off + i] += f * oi->grad[off + i];
                    }
                });
  }
  return out;
}

/// Sum of all elements, as a scalar-shaped tensor.
template <typename T>
Tensor4<T> sum_all(Tape<T>& tape, const Tensor4<T>& a) {
  Tensor4<T> out = Tensor4<T>::zeros({1, 1, 1, 1});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  out.data()[0] = acc;
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), oi = out.impl()] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T g = oi->grad[0];
      for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
    });
  }
  return out;
}

/// Mean of all elements, as a scalar-shaped tensor.
template <typename T>
Tensor4<T> mean_all(Tape<T>& tape, const Tensor4<T>& a) {
  Tensor4<T> s = sum_all(tape, a);
  return scale(tape, s, T(1) / static_cast<T>(a.numel()));
}

/// Mean over channels and pixels where mask (nb,1,h,w) is nonzero; masked
/// pixels are excluded from both the sum and the divisor.
template <typename T>
Tensor4<T> masked_mean(Tape<T>& tape, const Tensor4<T>& a,
                       const Tensor4<T>& mask) {
  const Shape4 s = a.shape();
  require(mask.shape().c == 1 && mask.shape().nb == s.nb &&
              mask.shape().spatial_equal(s),
          "masked_mean: mask must be (nb,1,h,w) matching input, got " +
              mask.shape().str() + " for " + s.str());
  const int hw = s.hw();
  T valid = T(0);
  for (T v : mask.data()) valid += (v != T(0)) ? T(1) : T(0);
  require(valid > T(0), "masked_mean: no valid pixels");
  const T denom = valid * static_cast<T>(s.c);
  Tensor4<T> out = Tensor4<T>::zeros({1, 1, 1, 1});
  T acc = T(0);
  for (int n = 0; n < s.nb; ++n) {
    const T* m = mask.plane(n, 0);
    for (int ch = 0; ch < s.c; ++ch) {
      const T* src = a.plane(n, ch);
      for (int i = 0; i < hw; ++i)
        if (m[i] != T(0)) acc += src[i];
    }
  }
  out.data()[0] = acc / denom;
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), mi = mask.impl(), oi = out.impl(),
                             s, hw, denom] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T g = oi->grad[0] / denom;
      for (int n = 0; n < s.nb; ++n) {
        const T* m = mi->data->data() + static_cast<std::size_t>(n) * hw;
        for (int ch = 0; ch < s.c; ++ch) {
          T* dst = ai->grad.data() +
                   (static_cast<std::size_t>(n) * s.c + ch) * hw;
          for (int i = 0; i < hw; ++i)
            if (m[i] != T(0)) dst[i] += g;
        }
      }
    });
  }
  return out;
}

/// Inner product with a fixed (non-differentiated) weight tensor; reduces a
/// tensor to a scalar for gradient checks.
template <typename T>
Tensor4<T> weighted_sum(Tape<T>& tape, const Tensor4<T>& a,
                        const Tensor4<T>& weights) {
  require(a.shape() == weights.shape(),
          "weighted_sum: shape mismatch " + a.shape().str() + " vs " +
              weights.shape().str());
  Tensor4<T> out = Tensor4<T>::zeros({1, 1, 1, 1});
  T acc = T(0);
  for (std::size_t i = 0; i < a.data().size(); ++i)
    acc += a.data()[i] * weights.data()[i];
  out.data()[0] = acc;
  if (detail::track_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [ai = a.impl(), wi = weights.impl(),
                             oi = out.impl()] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T g = oi->grad[0];
      const std::vector<T>& w = *wi->data;
      for (std::size_t i = 0; i < ai->grad.size(); ++i)
        ai->grad[i] += g * w[i];
    });
  }
  return out;
}

}  // namespace devon
