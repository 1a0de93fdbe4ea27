#pragma once

#include <algorithm>
#include <cstddef>

#include "devon/tape.hpp"
#include "devon/tensor.hpp"

namespace devon {

/// 2-D convolution (cross-correlation), stride 1, zero-padding
/// dilation*(k-1)/2 so the spatial size is preserved. Weights are
/// (c_out, c_in, k, k), bias is (1, c_out, 1, 1).
template <typename T>
Tensor4<T> conv2d(Tape<T>& tape, const Tensor4<T>& x, const Tensor4<T>& w,
                  const Tensor4<T>& b, int dilation = 1) {
  const Shape4 xs = x.shape();
  const Shape4 ws = w.shape();
  require(ws.h == ws.w && ws.h % 2 == 1,
          "conv2d: kernel must be square with odd size, got " + ws.str());
  require(ws.c == xs.c, "conv2d: input has " + std::to_string(xs.c) +
                            " channels but weights expect " +
                            std::to_string(ws.c));
  require(b.shape() == Shape4{1, ws.nb, 1, 1},
          "conv2d: bias must be (1,c_out,1,1), got " + b.shape().str());
  require(dilation >= 1, "conv2d: dilation must be >= 1");

  const int k = ws.h;
  const int half = (k - 1) / 2;
  const int cout = ws.nb, cin = ws.c;
  const int h = xs.h, wd = xs.w;
  Tensor4<T> out = Tensor4<T>::zeros({xs.nb, cout, h, wd});

  for (int n = 0; n < xs.nb; ++n) {
    for (int co = 0; co < cout; ++co) {
      T* op = out.plane(n, co);
      const T bias = b.data()[co];
      std::fill(op, op + static_cast<std::size_t>(h) * wd, bias);
      for (int ci = 0; ci < cin; ++ci) {
        const T* ip = x.plane(n, ci);
        const T* wp = w.plane(co, ci);
        for (int ky = 0; ky < k; ++ky) {
          const int dy = dilation * (ky - half);
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = dilation * (kx - half);
            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
            const T wv = wp[ky * k + kx];
            for (int oy = y0; oy < y1; ++oy) {
              const T* src = ip + static_cast<std::size_t>(oy + dy) * wd + dx;
              T* dst = op + static_cast<std::size_t>(oy) * wd;
              for (int ox = x0; ox < x1; ++ox) dst[ox] += wv * src[ox];
            }
          }
        }
      }
    }
  }

  if (detail::track_grad(tape, x, w, b)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [xi = x.impl(), wi = w.impl(), bi = b.impl(),
                             oi = out.impl(), k, half, cout, cin, h, wd,
                             dilation] {
      const int nb = xi->shape.nb;
      const std::size_t hw = static_cast<std::size_t>(h) * wd;
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int n = 0; n < nb; ++n)
          for (int co = 0; co < cout; ++co) {
            const T* g = oi->grad.data() +
                         (static_cast<std::size_t>(n) * cout + co) * hw;
            T acc = T(0);
            for (std::size_t i = 0; i < hw; ++i) acc += g[i];
            bi->grad[co] += acc;
          }
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        for (int n = 0; n < nb; ++n)
          for (int co = 0; co < cout; ++co) {
            const T* g = oi->grad.data() +
                         (static_cast<std::size_t>(n) * cout + co) * hw;
            for (int ci = 0; ci < cin; ++ci) {
              const T* ip = xi->data->data() +
                            (static_cast<std::size_t>(n) * cin + ci) * hw;
              T* wg = wi->grad.data() +
                      (static_cast<std::size_t>(co) * cin + ci) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                const int dy = dilation * (ky - half);
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                for (int kx = 0; kx < k; ++kx) {
                  const int dx = dilation * (kx - half);
                  const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                  T acc = T(0);
                  for (int oy = y0; oy < y1; ++oy) {
                    const T* src =
                        ip + static_cast<std::size_t>(oy + dy) * wd + dx;
                    const T* gr = g + static_cast<std::size_t>(oy) * wd;
                    for (int ox = x0; ox < x1; ++ox) acc += gr[ox] * src[ox];
                  }
                  wg[ky * k + kx] += acc;
                }
              }
            }
          }
      }
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (int n = 0; n < nb; ++n)
          for (int co = 0; co < cout; ++co) {
            const T* g = oi->grad.data() +
                         (static_cast<std::size_t>(n) * cout + co) * hw;
            for (int ci = 0; ci < cin; ++ci) {
              T* dxp = xi->grad.data() +
                       (static_cast<std::size_t>(n) * cin + ci) * hw;
              const T* wp = wi->data->data() +
                            (static_cast<std::size_t>(co) * cin + ci) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                const int dy = dilation * (ky - half);
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                for (int kx = 0; kx < k; ++kx) {
                  const int dx = dilation * (kx - half);
                  const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                  const T wv = wp[ky * k + kx];
                  for (int oy = y0; oy < y1; ++oy) {
                    T* dst = dxp + static_cast<std::size_t>(oy + dy) * wd + dx;
                    const T* gr = g + static_cast<std::size_t>(oy) * wd;
                    for (int ox = x0; ox < x1; ++ox) dst[ox] += wv * gr[ox];
                  }
                }
              }
            }
          }
      }
    });
  }
  return out;
}

}  // namespace devon
