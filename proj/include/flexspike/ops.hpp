#pragma once

#include <cstddef>

#include "flexspike/runtime.hpp"
#include "flexspike/tensor.hpp"

namespace flexspike {

// Dense kernels shared by the eval path and the gradient tape. All of them
// are pure: inputs by const reference, fresh output tensor.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ConfigError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ConfigError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
  Tensor out({m, n});
  parallel_for(m, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* ai = a.data() + i * k;
      double* oi = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        if (av == 0.0) continue;
        const double* bp = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) oi[j] += av * bp[j];
      }
    }
  });
  return out;
}

inline Tensor transpose2(const Tensor& a) {
  if (a.ndim() != 2) throw ConfigError("transpose2: expected rank-2");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at2(j, i) = a.at2(i, j);
  return out;
}

// y[b,o] = sum_i x[b,i] * w[o,i]
inline Tensor dense_forward(const Tensor& x, const Tensor& w) {
  if (x.ndim() != 2 || w.ndim() != 2)
    throw ConfigError("dense: expected rank-2 input and weight");
  if (x.dim(1) != w.dim(1))
    throw ConfigError("dense: feature mismatch, input " + shape_str(x.shape()) +
                      " weight " + shape_str(w.shape()));
  const std::size_t b = x.dim(0), in = x.dim(1), out_n = w.dim(0);
  Tensor y({b, out_n});
  parallel_for(b, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t n = r0; n < r1; ++n) {
      const double* xn = x.data() + n * in;
      double* yn = y.data() + n * out_n;
      for (std::size_t o = 0; o < out_n; ++o) {
        const double* wo = w.data() + o * in;
        double acc = 0.0;
        for (std::size_t i = 0; i < in; ++i) acc += xn[i] * wo[i];
        yn[o] = acc;
      }
    }
  });
  return y;
}

inline void dense_backward(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx,
                           Tensor& gw) {
  const std::size_t b = x.dim(0), in = x.dim(1), out_n = w.dim(0);
  gx = Tensor({b, in});
  gw = Tensor(w.shape());
  for (std::size_t n = 0; n < b; ++n) {
    const double* xn = x.data() + n * in;
    const double* gyn = gy.data() + n * out_n;
    double* gxn = gx.data() + n * in;
    for (std::size_t o = 0; o < out_n; ++o) {
      const double g = gyn[o];
      if (g == 0.0) continue;
      const double* wo = w.data() + o * in;
      double* gwo = gw.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        gxn[i] += g * wo[i];
        gwo[i] += g * xn[i];
      }
    }
  }
}

struct Conv2dDims {
  std::size_t batch, in_c, in_h, in_w;
  std::size_t out_c, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;
};

inline Conv2dDims conv2d_dims(const Tensor& x, const Tensor& w, std::size_t stride,
                              std::size_t pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ConfigError("conv2d: expected x[N,C,H,W] and w[F,C,kh,kw], got " +
                      shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ConfigError("conv2d: channel mismatch, input has " + std::to_string(x.dim(1)) +
                      " channels, kernel expects " + std::to_string(w.dim(1)));
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  Conv2dDims d{};
  d.batch = x.dim(0);
  d.in_c = x.dim(1);
  d.in_h = x.dim(2);
  d.in_w = x.dim(3);
  d.out_c = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  const std::size_t ph = d.in_h + 2 * pad, pw = d.in_w + 2 * pad;
  if (d.kh > ph || d.kw > pw)
    throw ConfigError("conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                      " exceeds padded input " + std::to_string(ph) + "x" + std::to_string(pw));
  d.out_h = (ph - d.kh) / stride + 1;
  d.out_w = (pw - d.kw) / stride + 1;
  return d;
}

// Cross-correlation with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t pad = 0) {
  const Conv2dDims d = conv2d_dims(x, w, stride, pad);
  Tensor y({d.batch, d.out_c, d.out_h, d.out_w});
  parallel_for(d.batch, [&](std::size_t n0, std::size_t n1) {
    for (std::size_t n = n0; n < n1; ++n) {
      const double* xn = x.data() + n * d.in_c * d.in_h * d.in_w;
      double* yn = y.data() + n * d.out_c * d.out_h * d.out_w;
      for (std::size_t f = 0; f < d.out_c; ++f) {
        const double* wf = w.data() + f * d.in_c * d.kh * d.kw;
        double* yf = yn + f * d.out_h * d.out_w;
        for (std::size_t c = 0; c < d.in_c; ++c) {
          const double* xc = xn + c * d.in_h * d.in_w;
          const double* wc = wf + c * d.kh * d.kw;
          for (std::size_t i = 0; i < d.kh; ++i) {
            for (std::size_t j = 0; j < d.kw; ++j) {
              const double wv = wc[i * d.kw + j];
              if (wv == 0.0) continue;
              for (std::size_t oh = 0; oh < d.out_h; ++oh) {
                const std::ptrdiff_t ih =
                    static_cast<std::ptrdiff_t>(oh * d.stride + i) - static_cast<std::ptrdiff_t>(d.pad);
                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                const double* xrow = xc + static_cast<std::size_t>(ih) * d.in_w;
                double* yrow = yf + oh * d.out_w;
                for (std::size_t ow = 0; ow < d.out_w; ++ow) {
                  const std::ptrdiff_t iw =
                      static_cast<std::ptrdiff_t>(ow * d.stride + j) - static_cast<std::ptrdiff_t>(d.pad);
                  if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                  yrow[ow] += wv * xrow[static_cast<std::size_t>(iw)];
                }
              }
            }
          }
        }
      }
    }
  });
  return y;
}

inline void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gy,
                            std::size_t stride, std::size_t pad, Tensor& gx, Tensor& gw) {
  const Conv2dDims d = conv2d_dims(x, w, stride, pad);
  gx = Tensor(x.shape());
  gw = Tensor(w.shape());
  for (std::size_t n = 0; n < d.batch; ++n) {
    const double* xn = x.data() + n * d.in_c * d.in_h * d.in_w;
    double* gxn = gx.data() + n * d.in_c * d.in_h * d.in_w;
    const double* gyn = gy.data() + n * d.out_c * d.out_h * d.out_w;
    for (std::size_t f = 0; f < d.out_c; ++f) {
      const double* wf = w.data() + f * d.in_c * d.kh * d.kw;
      double* gwf = gw.data() + f * d.in_c * d.kh * d.kw;
      const double* gyf = gyn + f * d.out_h * d.out_w;
      for (std::size_t oh = 0; oh < d.out_h; ++oh) {
        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
          const double g = gyf[oh * d.out_w + ow];
          if (g == 0.0) continue;
          for (std::size_t c = 0; c < d.in_c; ++c) {
            const double* xc = xn + c * d.in_h * d.in_w;
            double* gxc = gxn + c * d.in_h * d.in_w;
            const double* wc = wf + c * d.kh * d.kw;
            double* gwc = gwf + c * d.kh * d.kw;
            for (std::size_t i = 0; i < d.kh; ++i) {
              const std::ptrdiff_t ih =
                  static_cast<std::ptrdiff_t>(oh * d.stride + i) - static_cast<std::ptrdiff_t>(d.pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
              for (std::size_t j = 0; j < d.kw; ++j) {
                const std::ptrdiff_t iw =
                    static_cast<std::ptrdiff_t>(ow * d.stride + j) - static_cast<std::ptrdiff_t>(d.pad);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                const std::size_t xi = static_cast<std::size_t>(ih) * d.in_w + static_cast<std::size_t>(iw);
                gxc[xi] += g * wc[i * d.kw + j];
                gwc[i * d.kw + j] += g * xc[xi];
              }
            }
          }
        }
      }
    }
  }
}

struct Pool2dDims {
  std::size_t batch, ch, in_h, in_w, k, stride, out_h, out_w;
};

inline Pool2dDims avg_pool2d_dims(const Tensor& x, std::size_t k, std::size_t stride) {
  if (x.ndim() != 4) throw ConfigError("avg_pool2d: expected x[N,C,H,W]");
  if (k == 0 || stride == 0) throw ConfigError("avg_pool2d: k and stride must be positive");
  Pool2dDims d{};
  d.batch = x.dim(0);
  d.ch = x.dim(1);
  d.in_h = x.dim(2);
  d.in_w = x.dim(3);
  d.k = k;
  d.stride = stride;
  if (k > d.in_h || k > d.in_w)
    throw ConfigError("avg_pool2d: window " + std::to_string(k) + " exceeds input " +
                      std::to_string(d.in_h) + "x" + std::to_string(d.in_w));
  d.out_h = (d.in_h - k) / stride + 1;
  d.out_w = (d.in_w - k) / stride + 1;
  return d;
}

inline Tensor avg_pool2d(const Tensor& x, std::size_t k, std::size_t stride) {
  const Pool2dDims d = avg_pool2d_dims(x, k, stride);
  Tensor y({d.batch, d.ch, d.out_h, d.out_w});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t nc = 0; nc < d.batch * d.ch; ++nc) {
    const double* xc = x.data() + nc * d.in_h * d.in_w;
    double* yc = y.data() + nc * d.out_h * d.out_w;
    for (std::size_t oh = 0; oh < d.out_h; ++oh)
      for (std::size_t ow = 0; ow < d.out_w; ++ow) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            acc += xc[(oh * stride + i) * d.in_w + (ow * stride + j)];
        yc[oh * d.out_w + ow] = acc * inv;
      }
  }
  return y;
}

inline Tensor avg_pool2d_backward(const Tensor& x, std::size_t k, std::size_t stride,
                                  const Tensor& gy) {
  const Pool2dDims d = avg_pool2d_dims(x, k, stride);
  Tensor gx(x.shape());
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t nc = 0; nc < d.batch * d.ch; ++nc) {
    double* gxc = gx.data() + nc * d.in_h * d.in_w;
    const double* gyc = gy.data() + nc * d.out_h * d.out_w;
    for (std::size_t oh = 0; oh < d.out_h; ++oh)
      for (std::size_t ow = 0; ow < d.out_w; ++ow) {
        const double g = gyc[oh * d.out_w + ow] * inv;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            gxc[(oh * stride + i) * d.in_w + (ow * stride + j)] += g;
      }
  }
  return gx;
}

// Collapses all trailing dims: [N, ...] -> [N, prod(...)].
inline Tensor flatten(const Tensor& x) {
  if (x.ndim() < 1) throw ConfigError("flatten: empty tensor");
  std::size_t n = x.dim(0);
  return x.reshaped({n, x.size() / (n ? n : 1)});
}

}  // namespace flexspike
