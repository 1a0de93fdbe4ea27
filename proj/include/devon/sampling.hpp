#pragma once

#include <cmath>
#include <cstddef>

#include "devon/ops.hpp"
#include "devon/tape.hpp"
#include "devon/tensor.hpp"

namespace devon {

template <typename T>
void require_finite(const Tensor4<T>& t, const char* where) {
  for (T v : t.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string(where) +
                               ": non-finite value in flow field");
}

/// Absolute pixel coordinates of the identity mapping: channel 0 holds x
/// (column), channel 1 holds y (row).
template <typename T>
Tensor4<T> coordinate_grid(int nb, int h, int w) {
  Tensor4<T> g = Tensor4<T>::zeros({nb, 2, h, w});
  for (int n = 0; n < nb; ++n) {
    T* gx = g.plane(n, 0);
    T* gy = g.plane(n, 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        gx[static_cast<std::size_t>(y) * w + x] = static_cast<T>(x);
        gy[static_cast<std::size_t>(y) * w + x] = static_cast<T>(y);
      }
  }
  return g;
}

namespace detail {

// Zero-padded bilinear read of one channel plane; weights use the
// right-continuous convention (floor), so integer coordinates reproduce the
// grid value bit-exactly.
template <typename T>
struct BilinearTap {
  int x0, y0;
  T wx, wy;
  bool oob;  // coordinates too far out for any tap to land inside
};

template <typename T>
inline BilinearTap<T> bilinear_tap(T qx, T qy, int h, int w) {
  BilinearTap<T> t;
  t.oob = !(qx > T(-2) - w && qx < T(2) + 2 * w && qy > T(-2) - h &&
            qy < T(2) + 2 * h);
  if (t.oob) {
    t.x0 = t.y0 = 0;
    t.wx = t.wy = T(0);
    return t;
  }
  const T fx = std::floor(qx);
  const T fy = std::floor(qy);
  t.x0 = static_cast<int>(fx);
  t.y0 = static_cast<int>(fy);
  t.wx = qx - fx;
  t.wy = qy - fy;
  return t;
}

template <typename T>
inline T plane_at(const T* p, int h, int w, int y, int x) {
  return (y >= 0 && y < h && x >= 0 && x < w)
             ? p[static_cast<std::size_t>(y) * w + x]
             : T(0);
}

template <typename T>
inline T bilinear_read(const T* p, int h, int w, const BilinearTap<T>& t) {
  if (t.oob) return T(0);
  const T m00 = plane_at(p, h, w, t.y0, t.x0);
  const T m01 = plane_at(p, h, w, t.y0, t.x0 + 1);
  const T m10 = plane_at(p, h, w, t.y0 + 1, t.x0);
  const T m11 = plane_at(p, h, w, t.y0 + 1, t.x0 + 1);
  const T w00 = (T(1) - t.wy) * (T(1) - t.wx);
  const T w01 = (T(1) - t.wy) * t.wx;
  const T w10 = t.wy * (T(1) - t.wx);
  const T w11 = t.wy * t.wx;
  return w00 * m00 + w01 * m01 + w10 * m10 + w11 * m11;
}

// d(value)/dqx and d(value)/dqy of the zero-padded bilinear read.
template <typename T>
inline void bilinear_coord_grad(const T* p, int h, int w,
                                const BilinearTap<T>& t, T& dx, T& dy) {
  if (t.oob) {
    dx = dy = T(0);
    return;
  }
  const T m00 = plane_at(p, h, w, t.y0, t.x0);
  const T m01 = plane_at(p, h, w, t.y0, t.x0 + 1);
  const T m10 = plane_at(p, h, w, t.y0 + 1, t.x0);
  const T m11 = plane_at(p, h, w, t.y0 + 1, t.x0 + 1);
  dx = (T(1) - t.wy) * (m01 - m00) + t.wy * (m11 - m10);
  dy = (T(1) - t.wx) * (m10 - m00) + t.wx * (m11 - m01);
}

template <typename T>
inline void bilinear_scatter(T* gp, int h, int w, const BilinearTap<T>& t,
                             T g) {
  if (t.oob) return;
  const T w00 = (T(1) - t.wy) * (T(1) - t.wx);
  const T w01 = (T(1) - t.wy) * t.wx;
  const T w10 = t.wy * (T(1) - t.wx);
  const T w11 = t.wy * t.wx;
  auto acc = [&](int y, int x, T wv) {
    if (y >= 0 && y < h && x >= 0 && x < w)
      gp[static_cast<std::size_t>(y) * w + x] += wv * g;
  };
  acc(t.y0, t.x0, w00);
  acc(t.y0, t.x0 + 1, w01);
  acc(t.y0 + 1, t.x0, w10);
  acc(t.y0 + 1, t.x0 + 1, w11);
}

}  // namespace detail

/// Samples `map` at absolute coordinates given by `coords` (channel 0 = x,
/// channel 1 = y). Out-of-bounds taps contribute zero. Differentiable with
/// respect to both the map values and the coordinates.
template <typename T>
Tensor4<T> bilinear_sample(Tape<T>& tape, const Tensor4<T>& map,
                           const Tensor4<T>& coords) {
  require(coords.shape().c == 2,
          "bilinear_sample: coords must have 2 channels, got " +
              coords.shape().str());
  require(coords.shape().nb == map.shape().nb,
          "bilinear_sample: batch mismatch " + map.shape().str() + " vs " +
              coords.shape().str());
  const Shape4 ms = map.shape();
  const int oh = coords.shape().h, ow = coords.shape().w;
  Tensor4<T> out = Tensor4<T>::zeros({ms.nb, ms.c, oh, ow});

  for (int n = 0; n < ms.nb; ++n) {
    const T* cx = coords.plane(n, 0);
    const T* cy = coords.plane(n, 1);
    for (int i = 0; i < oh * ow; ++i) {
      const auto tap = detail::bilinear_tap(cx[i], cy[i], ms.h, ms.w);
      for (int ch = 0; ch < ms.c; ++ch)
        out.plane(n, ch)[i] =
            detail::bilinear_read(map.plane(n, ch), ms.h, ms.w, tap);
    }
  }

  if (detail::track_grad(tape, map, coords)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [mi = map.impl(), ci = coords.impl(),
                             oi = out.impl(), ms, oh, ow] {
      const bool need_map = mi->requires_grad;
      const bool need_coords = ci->requires_grad;
      if (need_map) mi->ensure_grad();
      if (need_coords) ci->ensure_grad();
      const std::size_t mhw = static_cast<std::size_t>(ms.h) * ms.w;
      const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
      for (int n = 0; n < ms.nb; ++n) {
        const T* cx = ci->data->data() + static_cast<std::size_t>(n) * 2 * ohw;
        const T* cy = cx + ohw;
        T* gcx = need_coords
                     ? ci->grad.data() + static_cast<std::size_t>(n) * 2 * ohw
                     : nullptr;
        T* gcy = need_coords ? gcx + ohw : nullptr;
        for (std::size_t i = 0; i < ohw; ++i) {
          const auto tap = detail::bilinear_tap(cx[i], cy[i], ms.h, ms.w);
          T dqx = T(0), dqy = T(0);
          for (int ch = 0; ch < ms.c; ++ch) {
            const T g =
                oi->grad[(static_cast<std::size_t>(n) * ms.c + ch) * ohw + i];
            if (g == T(0)) continue;
            const T* mp =
                mi->data->data() + (static_cast<std::size_t>(n) * ms.c + ch) * mhw;
            if (need_map)
              detail::bilinear_scatter(
                  mi->grad.data() + (static_cast<std::size_t>(n) * ms.c + ch) * mhw,
                  ms.h, ms.w, tap, g);
            if (need_coords) {
              T dx, dy;
              detail::bilinear_coord_grad(mp, ms.h, ms.w, tap, dx, dy);
              dqx += g * dx;
              dqy += g * dy;
            }
          }
          if (need_coords) {
            gcx[i] += dqx;
            gcy[i] += dqy;
          }
        }
      }
    });
  }
  return out;
}

/// Backward warping: output(p) = J(p + F(p)) with bilinear interpolation and
/// zero padding outside the image.
template <typename T>
Tensor4<T> warp(Tape<T>& tape, const Tensor4<T>& image, const FlowField<T>& flow) {
  require_flow_shaped(flow, "warp");
  require(image.shape().nb == flow.shape().nb &&
              image.shape().spatial_equal(flow.shape()),
          "warp: image " + image.shape().str() + " and flow " +
              flow.shape().str() + " must share batch and spatial size");
  require_finite(flow, "warp");
  Tensor4<T> grid =
      coordinate_grid<T>(flow.shape().nb, flow.shape().h, flow.shape().w);
  Tensor4<T> coords = add(tape, grid, flow);
  return bilinear_sample(tape, image, coords);
}

/// Bilinear resize with the align-corners-false convention; sample
/// coordinates are clamped to the source rectangle, so constant inputs stay
/// constant.
template <typename T>
Tensor4<T> resize_bilinear(Tape<T>& tape, const Tensor4<T>& x, int new_h,
                           int new_w) {
  require(new_h > 0 && new_w > 0, "resize_bilinear: target size must be positive");
  const Shape4 s = x.shape();
  Tensor4<T> out = Tensor4<T>::zeros({s.nb, s.c, new_h, new_w});

  const T sy = static_cast<T>(s.h) / static_cast<T>(new_h);
  const T sx = static_cast<T>(s.w) / static_cast<T>(new_w);
  auto src_coord = [](int o, T f, int limit) {
    T q = (static_cast<T>(o) + T(0.5)) * f - T(0.5);
    if (q < T(0)) q = T(0);
    const T mx = static_cast<T>(limit - 1);
    if (q > mx) q = mx;
    return q;
  };

  for (int n = 0; n < s.nb; ++n)
    for (int ch = 0; ch < s.c; ++ch) {
      const T* src = x.plane(n, ch);
      T* dst = out.plane(n, ch);
      for (int oy = 0; oy < new_h; ++oy) {
        const T qy = src_coord(oy, sy, s.h);
        const int y0 = static_cast<int>(qy);
        const int y1 = std::min(y0 + 1, s.h - 1);
        const T wy = qy - static_cast<T>(y0);
        for (int ox = 0; ox < new_w; ++ox) {
          const T qx = src_coord(ox, sx, s.w);
          const int x0 = static_cast<int>(qx);
          const int x1 = std::min(x0 + 1, s.w - 1);
          const T wx = qx - static_cast<T>(x0);
          const T top = (T(1) - wx) * src[static_cast<std::size_t>(y0) * s.w + x0] +
                        wx * src[static_cast<std::size_t>(y0) * s.w + x1];
          const T bot = (T(1) - wx) * src[static_cast<std::size_t>(y1) * s.w + x0] +
                        wx * src[static_cast<std::size_t>(y1) * s.w + x1];
          dst[static_cast<std::size_t>(oy) * new_w + ox] =
              (T(1) - wy) * top + wy * bot;
        }
      }
    }

  if (detail::track_grad(tape, x)) {
    out.set_requires_grad(true);
    tape.record(out.impl(), [xi = x.impl(), oi = out.impl(), s, new_h, new_w,
                             sy, sx, src_coord] {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int n = 0; n < s.nb; ++n)
        for (int ch = 0; ch < s.c; ++ch) {
          T* dg = xi->grad.data() +
                  (static_cast<std::size_t>(n) * s.c + ch) * s.h * s.w;
          const T* g = oi->grad.data() +
                       (static_cast<std::size_t>(n) * s.c + ch) * new_h * new_w;
          for (int oy = 0; oy < new_h; ++oy) {
            const T qy = src_coord(oy, sy, s.h);
            const int y0 = static_cast<int>(qy);
            const int y1 = std::min(y0 + 1, s.h - 1);
            const T wy = qy - static_cast<T>(y0);
            for (int ox = 0; ox < new_w; ++ox) {
              const T qx = src_coord(ox, sx, s.w);
              const int x0 = static_cast<int>(qx);
              const int x1 = std::min(x0 + 1, s.w - 1);
              const T wx = qx - static_cast<T>(x0);
              const T gv = g[static_cast<std::size_t>(oy) * new_w + ox];
              dg[static_cast<std::size_t>(y0) * s.w + x0] +=
                  (T(1) - wy) * (T(1) - wx) * gv;
              dg[static_cast<std::size_t>(y0) * s.w + x1] += (T(1) - wy) * wx * gv;
              dg[static_cast<std::size_t>(y1) * s.w + x0] += wy * (T(1) - wx) * gv;
              dg[static_cast<std::size_t>(y1) * s.w + x1] += wy * wx * gv;
            }
          }
        }
    });
  }
  return out;
}

/// Resizes a flow field and rescales the displacement components so they
/// stay in output-pixel units: u by new_w/w, v by new_h/h.
template <typename T>
FlowField<T> resize_flow(Tape<T>& tape, const FlowField<T>& flow, int new_h,
                         int new_w) {
  require_flow_shaped(flow, "resize_flow");
  Tensor4<T> resized = resize_bilinear(tape, flow, new_h, new_w);
  const T fu = static_cast<T>(new_w) / static_cast<T>(flow.shape().w);
  const T fv = static_cast<T>(new_h) / static_cast<T>(flow.shape().h);
  return scale_channels(tape, resized, std::vector<T>{fu, fv});
}

}  // namespace devon
