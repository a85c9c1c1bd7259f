#pragma once

#include <algorithm>
#include <array>

#include "miseg/tensor.hpp"

namespace miseg {

// Direct 3D cross-correlation kernels shared by the tape ops.
// Layouts: input (B,Cin,IZ,IY,IX), weight (Cout,Cin,KZ,KY,KX), bias (Cout),
// output (B,Cout,OZ,OY,OX) with O = floor((I + 2*pad - K)/stride) + 1.
//
// The hot loops keep the x axis innermost over contiguous memory with the
// kernel weight hoisted to a scalar, which the compiler turns into wide FMAs.

struct ConvGeom {
  int64_t batch, cin, cout;
  int64_t iz, iy, ix;
  int64_t kz, ky, kx;
  int64_t oz, oy, ox;
  std::array<int, 3> stride;
  std::array<int, 3> pad;
};

inline ConvGeom conv3d_geometry(const std::vector<int64_t>& in_shape,
                                const std::vector<int64_t>& w_shape,
                                const std::vector<int64_t>& b_shape,
                                std::array<int, 3> stride, std::array<int, 3> pad) {
  if (in_shape.size() != 5 || w_shape.size() != 5 || b_shape.size() != 1)
    throw ValidationError("conv3d: input/weight must be 5-D and bias 1-D");
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) throw ValidationError("conv3d: stride must be >= 1");
    if (pad[a] < 0) throw ValidationError("conv3d: padding must be >= 0");
  }
  ConvGeom g;
  g.batch = in_shape[0];
  g.cin = in_shape[1];
  g.iz = in_shape[2];
  g.iy = in_shape[3];
  g.ix = in_shape[4];
  g.cout = w_shape[0];
  g.kz = w_shape[2];
  g.ky = w_shape[3];
  g.kx = w_shape[4];
  g.stride = stride;
  g.pad = pad;
  if (w_shape[1] != g.cin)
    throw ValidationError("conv3d: weight channel count " + std::to_string(w_shape[1]) +
                          " does not match input channels " + std::to_string(g.cin));
  if (b_shape[0] != g.cout) throw ValidationError("conv3d: bias length must equal output channels");
  g.oz = (g.iz + 2 * pad[0] - g.kz) / stride[0] + 1;
  g.oy = (g.iy + 2 * pad[1] - g.ky) / stride[1] + 1;
  g.ox = (g.ix + 2 * pad[2] - g.kx) / stride[2] + 1;
  if (g.iz + 2 * pad[0] < g.kz || g.iy + 2 * pad[1] < g.ky || g.ix + 2 * pad[2] < g.kx ||
      g.oz < 1 || g.oy < 1 || g.ox < 1)
    throw ValidationError("conv3d: kernel larger than padded input");
  return g;
}

namespace conv_detail {

// Output index range [lo, hi] such that o*stride + k - pad lands in [0, in-1].
inline void valid_range(int64_t k, int64_t pad, int stride, int64_t in, int64_t out,
                        int64_t& lo, int64_t& hi) {
  int64_t num = pad - k;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  hi = std::min(out - 1, (in - 1 + pad - k) / stride);
}

}  // namespace conv_detail

namespace conv_detail {

// 3x3x3, stride 1, pad 1, output channels in blocks of 4: the dominant shape
// in the network. Keeps 12 weights in registers per (kz,ky) pass and fuses
// the three x taps so each source row is streamed once per 4 outputs.
template <class T>
void s1p1_forward(const TensorT<T>& in, const TensorT<T>& w, const TensorT<T>& b,
                  TensorT<T>& out) {
  const int64_t B = in.shape[0], CI = in.shape[1], CO = w.shape[0];
  const int64_t Z = in.shape[2], Y = in.shape[3], X = in.shape[4];
  const int64_t plane = Z * Y * X;
  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t co0 = 0; co0 < CO; co0 += 4) {
      T* __restrict d0 = out.data.data() + (bi * CO + co0 + 0) * plane;
      T* __restrict d1 = out.data.data() + (bi * CO + co0 + 1) * plane;
      T* __restrict d2 = out.data.data() + (bi * CO + co0 + 2) * plane;
      T* __restrict d3 = out.data.data() + (bi * CO + co0 + 3) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        d0[i] = b.data[size_t(co0 + 0)];
        d1[i] = b.data[size_t(co0 + 1)];
        d2[i] = b.data[size_t(co0 + 2)];
        d3[i] = b.data[size_t(co0 + 3)];
      }
      for (int64_t ci = 0; ci < CI; ++ci) {
        const T* __restrict src = in.data.data() + (bi * CI + ci) * plane;
        for (int kz = 0; kz < 3; ++kz) {
          const int64_t zlo = std::max<int64_t>(0, 1 - kz), zhi = std::min(Z - 1, Z - kz);
          for (int ky = 0; ky < 3; ++ky) {
            const int64_t ylo = std::max<int64_t>(0, 1 - ky), yhi = std::min(Y - 1, Y - ky);
            T wv[4][3];
            for (int r = 0; r < 4; ++r)
              for (int kx = 0; kx < 3; ++kx)
                wv[r][kx] = w.data[size_t((((co0 + r) * CI + ci) * 3 + kz) * 9 + ky * 3 + kx)];
            for (int64_t oz = zlo; oz <= zhi; ++oz) {
              const int64_t iz = oz + kz - 1;
              for (int64_t oy = ylo; oy <= yhi; ++oy) {
                const int64_t iy = oy + ky - 1;
                const T* __restrict s = src + (iz * Y + iy) * X;
                const int64_t row = (oz * Y + oy) * X;
                T* __restrict r0 = d0 + row;
                T* __restrict r1 = d1 + row;
                T* __restrict r2 = d2 + row;
                T* __restrict r3 = d3 + row;
                r0[0] += wv[0][1] * s[0] + wv[0][2] * s[1];
                r1[0] += wv[1][1] * s[0] + wv[1][2] * s[1];
                r2[0] += wv[2][1] * s[0] + wv[2][2] * s[1];
                r3[0] += wv[3][1] * s[0] + wv[3][2] * s[1];
                for (int64_t t = 1; t < X - 1; ++t) {
                  const T s0 = s[t - 1], s1 = s[t], s2 = s[t + 1];
                  r0[t] += wv[0][0] * s0 + wv[0][1] * s1 + wv[0][2] * s2;
                  r1[t] += wv[1][0] * s0 + wv[1][1] * s1 + wv[1][2] * s2;
                  r2[t] += wv[2][0] * s0 + wv[2][1] * s1 + wv[2][2] * s2;
                  r3[t] += wv[3][0] * s0 + wv[3][1] * s1 + wv[3][2] * s2;
                }
                const int64_t e = X - 1;
                r0[e] += wv[0][0] * s[e - 1] + wv[0][1] * s[e];
                r1[e] += wv[1][0] * s[e - 1] + wv[1][1] * s[e];
                r2[e] += wv[2][0] * s[e - 1] + wv[2][1] * s[e];
                r3[e] += wv[3][0] * s[e - 1] + wv[3][1] * s[e];
              }
            }
          }
        }
      }
    }
  }
}

// Fused input/weight gradient for the same shape. For each (kz,ky) pass the
// go rows of 4 output channels pair with one source/input-gradient row.
template <class T>
void s1p1_backward(const TensorT<T>& in, const TensorT<T>& w, const TensorT<T>& grad_out,
                   TensorT<T>& grad_in, TensorT<T>& grad_w, TensorT<T>& grad_b) {
  const int64_t B = in.shape[0], CI = in.shape[1], CO = w.shape[0];
  const int64_t Z = in.shape[2], Y = in.shape[3], X = in.shape[4];
  const int64_t plane = Z * Y * X;
  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t co0 = 0; co0 < CO; co0 += 4) {
      const T* __restrict g0 = grad_out.data.data() + (bi * CO + co0 + 0) * plane;
      const T* __restrict g1 = grad_out.data.data() + (bi * CO + co0 + 1) * plane;
      const T* __restrict g2 = grad_out.data.data() + (bi * CO + co0 + 2) * plane;
      const T* __restrict g3 = grad_out.data.data() + (bi * CO + co0 + 3) * plane;
      for (int r = 0; r < 4; ++r) {
        const T* g = grad_out.data.data() + (bi * CO + co0 + r) * plane;
        T acc = T(0);
        for (int64_t i = 0; i < plane; ++i) acc += g[i];
        grad_b.data[size_t(co0 + r)] += acc;
      }
      for (int64_t ci = 0; ci < CI; ++ci) {
        const T* __restrict src = in.data.data() + (bi * CI + ci) * plane;
        T* __restrict gin = grad_in.data.data() + (bi * CI + ci) * plane;
        for (int kz = 0; kz < 3; ++kz) {
          const int64_t zlo = std::max<int64_t>(0, 1 - kz), zhi = std::min(Z - 1, Z - kz);
          for (int ky = 0; ky < 3; ++ky) {
            const int64_t ylo = std::max<int64_t>(0, 1 - ky), yhi = std::min(Y - 1, Y - ky);
            T wv[4][3], gw[4][3];
            for (int r = 0; r < 4; ++r)
              for (int kx = 0; kx < 3; ++kx) {
                wv[r][kx] = w.data[size_t((((co0 + r) * CI + ci) * 3 + kz) * 9 + ky * 3 + kx)];
                gw[r][kx] = T(0);
              }
            for (int64_t oz = zlo; oz <= zhi; ++oz) {
              const int64_t iz = oz + kz - 1;
              for (int64_t oy = ylo; oy <= yhi; ++oy) {
                const int64_t iy = oy + ky - 1;
                const T* __restrict s = src + (iz * Y + iy) * X;
                T* __restrict gi = gin + (iz * Y + iy) * X;
                const int64_t row = (oz * Y + oy) * X;
                const T* __restrict q0 = g0 + row;
                const T* __restrict q1 = g1 + row;
                const T* __restrict q2 = g2 + row;
                const T* __restrict q3 = g3 + row;
                // weight gradient: gw[r][kx] += sum_t q_r[t] * s[t+kx-1]
                // input gradient:  gi[t]     += sum_r sum_kx wv[r][kx] * q_r[t-kx+1]
                gw[0][1] += q0[0] * s[0];
                gw[1][1] += q1[0] * s[0];
                gw[2][1] += q2[0] * s[0];
                gw[3][1] += q3[0] * s[0];
                if (X > 1) {
                  gw[0][2] += q0[0] * s[1];
                  gw[1][2] += q1[0] * s[1];
                  gw[2][2] += q2[0] * s[1];
                  gw[3][2] += q3[0] * s[1];
                }
                for (int64_t t = 1; t < X - 1; ++t) {
                  const T s0 = s[t - 1], s1 = s[t], s2 = s[t + 1];
                  const T a0 = q0[t], a1 = q1[t], a2 = q2[t], a3 = q3[t];
                  gw[0][0] += a0 * s0;
                  gw[0][1] += a0 * s1;
                  gw[0][2] += a0 * s2;
                  gw[1][0] += a1 * s0;
                  gw[1][1] += a1 * s1;
                  gw[1][2] += a1 * s2;
                  gw[2][0] += a2 * s0;
                  gw[2][1] += a2 * s1;
                  gw[2][2] += a2 * s2;
                  gw[3][0] += a3 * s0;
                  gw[3][1] += a3 * s1;
                  gw[3][2] += a3 * s2;
                }
                if (X > 1) {
                  const int64_t e = X - 1;
                  gw[0][0] += q0[e] * s[e - 1];
                  gw[0][1] += q0[e] * s[e];
                  gw[1][0] += q1[e] * s[e - 1];
                  gw[1][1] += q1[e] * s[e];
                  gw[2][0] += q2[e] * s[e - 1];
                  gw[2][1] += q2[e] * s[e];
                  gw[3][0] += q3[e] * s[e - 1];
                  gw[3][1] += q3[e] * s[e];
                }
                // input gradient rows
                gi[0] += wv[0][1] * q0[0] + wv[1][1] * q1[0] + wv[2][1] * q2[0] + wv[3][1] * q3[0];
                if (X > 1)
                  gi[0] += wv[0][0] * q0[1] + wv[1][0] * q1[1] + wv[2][0] * q2[1] + wv[3][0] * q3[1];
                for (int64_t t = 1; t < X - 1; ++t) {
                  // balanced grouping keeps four independent FMA chains
                  const T a0 = wv[0][0] * q0[t + 1] + wv[0][1] * q0[t] + wv[0][2] * q0[t - 1];
                  const T a1 = wv[1][0] * q1[t + 1] + wv[1][1] * q1[t] + wv[1][2] * q1[t - 1];
                  const T a2 = wv[2][0] * q2[t + 1] + wv[2][1] * q2[t] + wv[2][2] * q2[t - 1];
                  const T a3 = wv[3][0] * q3[t + 1] + wv[3][1] * q3[t] + wv[3][2] * q3[t - 1];
                  gi[t] += (a0 + a1) + (a2 + a3);
                }
                if (X > 1) {
                  const int64_t e = X - 1;
                  gi[e] += wv[0][1] * q0[e] + wv[0][2] * q0[e - 1] + wv[1][1] * q1[e] +
                           wv[1][2] * q1[e - 1] + wv[2][1] * q2[e] + wv[2][2] * q2[e - 1] +
                           wv[3][1] * q3[e] + wv[3][2] * q3[e - 1];
                }
              }
            }
            for (int r = 0; r < 4; ++r)
              for (int kx = 0; kx < 3; ++kx)
                grad_w.data[size_t((((co0 + r) * CI + ci) * 3 + kz) * 9 + ky * 3 + kx)] +=
                    gw[r][kx];
          }
        }
      }
    }
  }
}

template <class T>
bool s1p1_applicable(const ConvGeom& g) {
  return g.kz == 3 && g.ky == 3 && g.kx == 3 && g.stride == std::array<int, 3>{1, 1, 1} &&
         g.pad == std::array<int, 3>{1, 1, 1} && g.cout % 4 == 0 && g.ox >= 2;
}

}  // namespace conv_detail

template <class T>
TensorT<T> conv3d_forward(const TensorT<T>& in, const TensorT<T>& w, const TensorT<T>& b,
                          std::array<int, 3> stride, std::array<int, 3> pad) {
  const ConvGeom g = conv3d_geometry(in.shape, w.shape, b.shape, stride, pad);
  TensorT<T> out({g.batch, g.cout, g.oz, g.oy, g.ox});
  if (conv_detail::s1p1_applicable<T>(g)) {
    conv_detail::s1p1_forward(in, w, b, out);
    return out;
  }
  const int64_t in_plane = g.iz * g.iy * g.ix;
  const int64_t out_plane = g.oz * g.oy * g.ox;
  const int sz = stride[0], sy = stride[1], sx = stride[2];

  for (int64_t bi = 0; bi < g.batch; ++bi) {
    for (int64_t co = 0; co < g.cout; ++co) {
      T* __restrict dst0 = out.data.data() + (bi * g.cout + co) * out_plane;
      const T bias = b.data[size_t(co)];
      for (int64_t i = 0; i < out_plane; ++i) dst0[i] = bias;
      for (int64_t ci = 0; ci < g.cin; ++ci) {
        const T* __restrict src0 = in.data.data() + (bi * g.cin + ci) * in_plane;
        const T* wk = w.data.data() + ((co * g.cin + ci) * g.kz) * g.ky * g.kx;
        for (int64_t kz = 0; kz < g.kz; ++kz) {
          int64_t zlo, zhi;
          conv_detail::valid_range(kz, g.pad[0], sz, g.iz, g.oz, zlo, zhi);
          for (int64_t ky = 0; ky < g.ky; ++ky) {
            int64_t ylo, yhi;
            conv_detail::valid_range(ky, g.pad[1], sy, g.iy, g.oy, ylo, yhi);
            for (int64_t kx = 0; kx < g.kx; ++kx) {
              int64_t xlo, xhi;
              conv_detail::valid_range(kx, g.pad[2], sx, g.ix, g.ox, xlo, xhi);
              if (xlo > xhi) continue;
              const T wv = wk[(kz * g.ky + ky) * g.kx + kx];
              const int64_t n = xhi - xlo + 1;
              for (int64_t oz = zlo; oz <= zhi; ++oz) {
                const int64_t iz = oz * sz + kz - g.pad[0];
                for (int64_t oy = ylo; oy <= yhi; ++oy) {
                  const int64_t iy = oy * sy + ky - g.pad[1];
                  const T* __restrict src =
                      src0 + (iz * g.iy + iy) * g.ix + (xlo * sx + kx - g.pad[2]);
                  T* __restrict dst = dst0 + (oz * g.oy + oy) * g.ox + xlo;
                  if (sx == 1) {
                    for (int64_t t = 0; t < n; ++t) dst[t] += wv * src[t];
                  } else {
                    for (int64_t t = 0; t < n; ++t) dst[t] += wv * src[t * sx];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Accumulates into grad_in / grad_w / grad_b, which must be pre-sized and may
// carry prior contributions.
template <class T>
void conv3d_backward(const TensorT<T>& in, const TensorT<T>& w, const TensorT<T>& grad_out,
                     std::array<int, 3> stride, std::array<int, 3> pad, TensorT<T>& grad_in,
                     TensorT<T>& grad_w, TensorT<T>& grad_b) {
  TensorT<T> bias_shape({w.shape[0]});
  const ConvGeom g = conv3d_geometry(in.shape, w.shape, bias_shape.shape, stride, pad);
  if (conv_detail::s1p1_applicable<T>(g)) {
    conv_detail::s1p1_backward(in, w, grad_out, grad_in, grad_w, grad_b);
    return;
  }
  const int64_t in_plane = g.iz * g.iy * g.ix;
  const int64_t out_plane = g.oz * g.oy * g.ox;
  const int sz = stride[0], sy = stride[1], sx = stride[2];

  for (int64_t bi = 0; bi < g.batch; ++bi) {
    for (int64_t co = 0; co < g.cout; ++co) {
      const T* __restrict go0 = grad_out.data.data() + (bi * g.cout + co) * out_plane;
      T gb = T(0);
      for (int64_t i = 0; i < out_plane; ++i) gb += go0[i];
      grad_b.data[size_t(co)] += gb;
      for (int64_t ci = 0; ci < g.cin; ++ci) {
        const T* __restrict src0 = in.data.data() + (bi * g.cin + ci) * in_plane;
        T* __restrict gi0 = grad_in.data.data() + (bi * g.cin + ci) * in_plane;
        const int64_t wbase = ((co * g.cin + ci) * g.kz) * g.ky * g.kx;
        for (int64_t kz = 0; kz < g.kz; ++kz) {
          int64_t zlo, zhi;
          conv_detail::valid_range(kz, g.pad[0], sz, g.iz, g.oz, zlo, zhi);
          for (int64_t ky = 0; ky < g.ky; ++ky) {
            int64_t ylo, yhi;
            conv_detail::valid_range(ky, g.pad[1], sy, g.iy, g.oy, ylo, yhi);
            for (int64_t kx = 0; kx < g.kx; ++kx) {
              int64_t xlo, xhi;
              conv_detail::valid_range(kx, g.pad[2], sx, g.ix, g.ox, xlo, xhi);
              if (xlo > xhi) continue;
              const T wv = w.data[size_t(wbase + (kz * g.ky + ky) * g.kx + kx)];
              const int64_t n = xhi - xlo + 1;
              T gw = T(0);
              for (int64_t oz = zlo; oz <= zhi; ++oz) {
                const int64_t iz = oz * sz + kz - g.pad[0];
                for (int64_t oy = ylo; oy <= yhi; ++oy) {
                  const int64_t iy = oy * sy + ky - g.pad[1];
                  const int64_t src_off = (iz * g.iy + iy) * g.ix + (xlo * sx + kx - g.pad[2]);
                  const T* __restrict src = src0 + src_off;
                  T* __restrict gi = gi0 + src_off;
                  const T* __restrict go = go0 + (oz * g.oy + oy) * g.ox + xlo;
                  if (sx == 1) {
                    T acc = T(0);
                    for (int64_t t = 0; t < n; ++t) {
                      acc += go[t] * src[t];
                      gi[t] += wv * go[t];
                    }
                    gw += acc;
                  } else {
                    T acc = T(0);
                    for (int64_t t = 0; t < n; ++t) {
                      acc += go[t] * src[t * sx];
                      gi[t * sx] += wv * go[t];
                    }
                    gw += acc;
                  }
                }
              }
              grad_w.data[size_t(wbase + (kz * g.ky + ky) * g.kx + kx)] += gw;
            }
          }
        }
      }
    }
  }
}

}  // namespace miseg
