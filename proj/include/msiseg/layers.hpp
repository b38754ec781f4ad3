#pragma once

#include <algorithm>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "msiseg/tensor.hpp"

namespace msiseg {

// Layer primitives for the fixed graph vocabulary. Values are T (float in
// training, double under the gradient checker); every reduction accumulates
// in double. Backward functions accumulate (+=) into grad buffers.

namespace layers {

inline int conv_out_dim(int in, int k, int stride, int pad) {
  const int num = in + 2 * pad - k;
  if (num < 0) throw ShapeError("window larger than padded input");
  return num / stride + 1;
}

// bias may be empty (bias-free convolution, the usual choice when the output
// feeds a normalization layer).
template <typename T>
void conv2d_forward(const Tensor<T>& in, const Tensor<T>& w,
                    const std::type_identity_t<Tensor<T>>* bias, int stride, int pad,
                    Tensor<T>& out) {
  if (in.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d expects 4-d input and weights");
  const int N = in.n(), I = in.c(), H = in.h(), W = in.w();
  const int O = w.dim(0), KI = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (I != KI) throw ShapeError("conv2d channel mismatch: input " + std::to_string(I) +
                                " vs weights " + std::to_string(KI));
  if (bias && static_cast<int>(bias->numel()) != O) throw ShapeError("conv2d bias size mismatch");
  if (stride < 1) throw ArgumentError("conv2d stride must be >= 1");
  const int Ho = conv_out_dim(H, KH, stride, pad);
  const int Wo = conv_out_dim(W, KW, stride, pad);
  out.reset({N, O, Ho, Wo});

  std::vector<double> plane(static_cast<size_t>(Ho) * Wo);
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      std::fill(plane.begin(), plane.end(), bias ? static_cast<double>(bias->values[o]) : 0.0);
      for (int i = 0; i < I; ++i) {
        const T* in_base = &in.values[in.index(n, i, 0, 0)];
        const T* w_base = &w.values[((static_cast<size_t>(o) * I + i) * KH) * KW];
        for (int ky = 0; ky < KH; ++ky) {
          for (int kx = 0; kx < KW; ++kx) {
            const double wv = static_cast<double>(w_base[ky * KW + kx]);
            if (wv == 0.0) continue;
            // valid output range for this kernel offset
            const int oy_lo = std::max(0, (pad - ky + stride - 1) / stride);
            const int ox_lo = std::max(0, (pad - kx + stride - 1) / stride);
            for (int oy = oy_lo; oy < Ho; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy >= H) break;
              const T* in_row = in_base + static_cast<size_t>(iy) * W;
              double* out_row = plane.data() + static_cast<size_t>(oy) * Wo;
              for (int ox = ox_lo; ox < Wo; ++ox) {
                const int ix = ox * stride + kx - pad;
                if (ix >= W) break;
                out_row[ox] += static_cast<double>(in_row[ix]) * wv;
              }
            }
          }
        }
      }
      T* out_base = &out.values[out.index(n, o, 0, 0)];
      for (size_t k = 0; k < plane.size(); ++k) out_base[k] = static_cast<T>(plane[k]);
    }
  }
}

template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& grad_out,
                     int stride, int pad, Tensor<T>* grad_in, Tensor<T>& grad_w,
                     std::type_identity_t<Tensor<T>>* grad_bias) {
  const int N = in.n(), I = in.c(), H = in.h(), W = in.w();
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int Ho = grad_out.h(), Wo = grad_out.w();

  // grad bias: plain channel sums
  if (grad_bias) {
    for (int o = 0; o < O; ++o) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* g = &grad_out.values[grad_out.index(n, o, 0, 0)];
        for (int k = 0; k < Ho * Wo; ++k) acc += static_cast<double>(g[k]);
      }
      grad_bias->grad[o] += static_cast<T>(acc);
    }
  }

  // grad weights: correlation of input with grad_out
  for (int o = 0; o < O; ++o) {
    for (int i = 0; i < I; ++i) {
      for (int ky = 0; ky < KH; ++ky) {
        for (int kx = 0; kx < KW; ++kx) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n) {
            const T* g_base = &grad_out.values[grad_out.index(n, o, 0, 0)];
            const T* in_base = &in.values[in.index(n, i, 0, 0)];
            const int oy_lo = std::max(0, (pad - ky + stride - 1) / stride);
            const int ox_lo = std::max(0, (pad - kx + stride - 1) / stride);
            for (int oy = oy_lo; oy < Ho; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy >= H) break;
              const T* in_row = in_base + static_cast<size_t>(iy) * W;
              const T* g_row = g_base + static_cast<size_t>(oy) * Wo;
              for (int ox = ox_lo; ox < Wo; ++ox) {
                const int ix = ox * stride + kx - pad;
                if (ix >= W) break;
                acc += static_cast<double>(g_row[ox]) * static_cast<double>(in_row[ix]);
              }
            }
          }
          grad_w.grad[((static_cast<size_t>(o) * I + i) * KH + ky) * KW + kx] += static_cast<T>(acc);
        }
      }
    }
  }

  if (!grad_in) return;
  std::vector<double> plane(static_cast<size_t>(H) * W);
  for (int n = 0; n < N; ++n) {
    for (int i = 0; i < I; ++i) {
      std::fill(plane.begin(), plane.end(), 0.0);
      for (int o = 0; o < O; ++o) {
        const T* g_base = &grad_out.values[grad_out.index(n, o, 0, 0)];
        const T* w_base = &w.values[((static_cast<size_t>(o) * I + i) * KH) * KW];
        for (int ky = 0; ky < KH; ++ky) {
          for (int kx = 0; kx < KW; ++kx) {
            const double wv = static_cast<double>(w_base[ky * KW + kx]);
            if (wv == 0.0) continue;
            const int oy_lo = std::max(0, (pad - ky + stride - 1) / stride);
            const int ox_lo = std::max(0, (pad - kx + stride - 1) / stride);
            for (int oy = oy_lo; oy < Ho; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy >= H) break;
              double* p_row = plane.data() + static_cast<size_t>(iy) * W;
              const T* g_row = g_base + static_cast<size_t>(oy) * Wo;
              for (int ox = ox_lo; ox < Wo; ++ox) {
                const int ix = ox * stride + kx - pad;
                if (ix >= W) break;
                p_row[ix] += static_cast<double>(g_row[ox]) * wv;
              }
            }
          }
        }
      }
      T* gi = &grad_in->grad[grad_in->index(n, i, 0, 0)];
      for (size_t k = 0; k < plane.size(); ++k) gi[k] += static_cast<T>(plane[k]);
    }
  }
}

template <typename T>
struct BnCache {
  std::vector<T> xhat;
  std::vector<double> inv_std;  // per channel
  bool train = false;
};

// Spatial batch normalization over (N,H,W) per channel. Train mode uses batch
// statistics (population variance) and updates running stats with momentum;
// eval mode is a fixed affine map from the running stats.
template <typename T>
void batchnorm_forward(const Tensor<T>& in, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, double momentum,
                       double eps, bool train, bool update_running, Tensor<T>& out,
                       BnCache<T>& cache) {
  const int N = in.n(), C = in.c(), H = in.h(), W = in.w();
  if (static_cast<int>(gamma.numel()) != C || static_cast<int>(beta.numel()) != C)
    throw ShapeError("batchnorm affine params must have one entry per channel");
  const int64_t m = static_cast<int64_t>(N) * H * W;
  out.reset({N, C, H, W});
  cache.xhat.assign(in.numel(), T(0));
  cache.inv_std.assign(C, 0.0);
  cache.train = train;
  if (train && m < 2) throw DegenerateError("batchnorm: train mode needs >= 2 elements per channel");

  for (int c = 0; c < C; ++c) {
    double mean, var;
    if (train) {
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = &in.values[in.index(n, c, 0, 0)];
        for (int k = 0; k < H * W; ++k) sum += static_cast<double>(p[k]);
      }
      mean = sum / static_cast<double>(m);
      double ss = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = &in.values[in.index(n, c, 0, 0)];
        for (int k = 0; k < H * W; ++k) {
          const double d = static_cast<double>(p[k]) - mean;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(m);
      if (update_running) {
        running_mean.values[c] =
            static_cast<T>(momentum * static_cast<double>(running_mean.values[c]) + (1.0 - momentum) * mean);
        running_var.values[c] =
            static_cast<T>(momentum * static_cast<double>(running_var.values[c]) + (1.0 - momentum) * var);
      }
    } else {
      mean = static_cast<double>(running_mean.values[c]);
      var = static_cast<double>(running_var.values[c]);
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    cache.inv_std[c] = inv_std;
    const double g = static_cast<double>(gamma.values[c]);
    const double b = static_cast<double>(beta.values[c]);
    for (int n = 0; n < N; ++n) {
      const T* p = &in.values[in.index(n, c, 0, 0)];
      T* xh = &cache.xhat[in.index(n, c, 0, 0)];
      T* q = &out.values[out.index(n, c, 0, 0)];
      for (int k = 0; k < H * W; ++k) {
        const double z = (static_cast<double>(p[k]) - mean) * inv_std;
        xh[k] = static_cast<T>(z);
        q[k] = static_cast<T>(g * z + b);
      }
    }
  }
}

template <typename T>
void batchnorm_backward(const Tensor<T>& in, const Tensor<T>& gamma, const Tensor<T>& grad_out,
                        const BnCache<T>& cache, Tensor<T>* grad_in, Tensor<T>& grad_gamma,
                        Tensor<T>& grad_beta) {
  const int N = in.n(), C = in.c(), H = in.h(), W = in.w();
  const int64_t m = static_cast<int64_t>(N) * H * W;
  for (int c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* dy = &grad_out.values[grad_out.index(n, c, 0, 0)];
      const T* xh = &cache.xhat[in.index(n, c, 0, 0)];
      for (int k = 0; k < H * W; ++k) {
        sum_dy += static_cast<double>(dy[k]);
        sum_dy_xhat += static_cast<double>(dy[k]) * static_cast<double>(xh[k]);
      }
    }
    grad_beta.grad[c] += static_cast<T>(sum_dy);
    grad_gamma.grad[c] += static_cast<T>(sum_dy_xhat);
    if (!grad_in) continue;
    const double g = static_cast<double>(gamma.values[c]);
    const double inv_std = cache.inv_std[c];
    for (int n = 0; n < N; ++n) {
      const T* dy = &grad_out.values[grad_out.index(n, c, 0, 0)];
      const T* xh = &cache.xhat[in.index(n, c, 0, 0)];
      T* dx = &grad_in->grad[grad_in->index(n, c, 0, 0)];
      for (int k = 0; k < H * W; ++k) {
        double v;
        if (cache.train) {
          v = g * inv_std *
              (static_cast<double>(dy[k]) - sum_dy / static_cast<double>(m) -
               static_cast<double>(xh[k]) * sum_dy_xhat / static_cast<double>(m));
        } else {
          v = g * inv_std * static_cast<double>(dy[k]);
        }
        dx[k] += static_cast<T>(v);
      }
    }
  }
}

template <typename T>
void relu_forward(const Tensor<T>& in, Tensor<T>& out) {
  out.reset(in.shape);
  for (size_t i = 0; i < in.numel(); ++i) out.values[i] = in.values[i] > T(0) ? in.values[i] : T(0);
}

template <typename T>
void relu_backward(const Tensor<T>& in, const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  for (size_t i = 0; i < in.numel(); ++i)
    if (in.values[i] > T(0)) grad_in.grad[i] += grad_out.values[i];
}

// Resolves pooling geometry. pad >= 0 is symmetric; pad == -1 means "same":
// output dims equal input dims, stride must be 1, and the window is placed
// with (window-1)/2 cells before the anchor (asymmetric for even windows).
struct PoolGeom {
  int out_h, out_w, pad_before;
};

inline PoolGeom pool_geom(int h, int w, int window, int stride, int pad) {
  if (pad == -1) {
    if (stride != 1) throw ArgumentError("same-padded pooling requires stride 1");
    return {h, w, (window - 1) / 2};
  }
  if (pad < 0) throw ArgumentError("pool pad must be >= 0 or -1 for same");
  return {conv_out_dim(h, window, stride, pad), conv_out_dim(w, window, stride, pad), pad};
}

// Max pooling; out-of-bounds (padded) cells never win. argmax stores the flat
// input index chosen for each output cell so backward can route gradients.
template <typename T>
void maxpool_forward(const Tensor<T>& in, int window, int stride, int pad, Tensor<T>& out,
                     std::vector<int64_t>& argmax) {
  const int N = in.n(), C = in.c(), H = in.h(), W = in.w();
  const PoolGeom geom = pool_geom(H, W, window, stride, pad);
  const int Ho = geom.out_h, Wo = geom.out_w;
  out.reset({N, C, Ho, Wo});
  argmax.assign(out.numel(), -1);
  size_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t best_idx = -1;
          for (int ky = 0; ky < window; ++ky) {
            const int iy = oy * stride + ky - geom.pad_before;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < window; ++kx) {
              const int ix = ox * stride + kx - geom.pad_before;
              if (ix < 0 || ix >= W) continue;
              const double v = static_cast<double>(in.at(n, c, iy, ix));
              if (v > best) {
                best = v;
                best_idx = static_cast<int64_t>(in.index(n, c, iy, ix));
              }
            }
          }
          if (best_idx < 0) throw ShapeError("maxpool window has no in-bounds cells");
          out.values[oi] = static_cast<T>(best);
          argmax[oi] = best_idx;
        }
      }
    }
  }
}

template <typename T>
void maxpool_backward(const Tensor<T>& grad_out, const std::vector<int64_t>& argmax,
                      Tensor<T>& grad_in) {
  for (size_t i = 0; i < grad_out.numel(); ++i)
    grad_in.grad[static_cast<size_t>(argmax[i])] += grad_out.values[i];
}

// Mean pooling; padded cells are excluded from the divisor, so a constant
// image pools to the same constant at every border.
template <typename T>
void meanpool_forward(const Tensor<T>& in, int window, int stride, int pad, Tensor<T>& out) {
  const int N = in.n(), C = in.c(), H = in.h(), W = in.w();
  const PoolGeom geom = pool_geom(H, W, window, stride, pad);
  const int Ho = geom.out_h, Wo = geom.out_w;
  out.reset({N, C, Ho, Wo});
  size_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          double acc = 0.0;
          int count = 0;
          for (int ky = 0; ky < window; ++ky) {
            const int iy = oy * stride + ky - geom.pad_before;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < window; ++kx) {
              const int ix = ox * stride + kx - geom.pad_before;
              if (ix < 0 || ix >= W) continue;
              acc += static_cast<double>(in.at(n, c, iy, ix));
              ++count;
            }
          }
          if (count == 0) throw ShapeError("meanpool window has no in-bounds cells");
          out.values[oi] = static_cast<T>(acc / count);
        }
      }
    }
  }
}

template <typename T>
void meanpool_backward(const Tensor<T>& in, const Tensor<T>& grad_out, int window, int stride,
                       int pad, Tensor<T>& grad_in) {
  const int N = in.n(), C = in.c(), H = in.h(), W = in.w();
  const PoolGeom geom = pool_geom(H, W, window, stride, pad);
  const int Ho = grad_out.h(), Wo = grad_out.w();
  size_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++oi) {
          int count = 0;
          for (int ky = 0; ky < window; ++ky) {
            const int iy = oy * stride + ky - geom.pad_before;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < window; ++kx) {
              const int ix = ox * stride + kx - geom.pad_before;
              if (ix >= 0 && ix < W) ++count;
            }
          }
          const double share = static_cast<double>(grad_out.values[oi]) / count;
          for (int ky = 0; ky < window; ++ky) {
            const int iy = oy * stride + ky - geom.pad_before;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < window; ++kx) {
              const int ix = ox * stride + kx - geom.pad_before;
              if (ix < 0 || ix >= W) continue;
              grad_in.grad[grad_in.index(n, c, iy, ix)] += static_cast<T>(share);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void upsample2_forward(const Tensor<T>& in, Tensor<T>& out) {
  const int N = in.n(), C = in.c(), H = in.h(), W = in.w();
  out.reset({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y) {
        const T* src = &in.values[in.index(n, c, y / 2, 0)];
        T* dst = &out.values[out.index(n, c, y, 0)];
        for (int x = 0; x < 2 * W; ++x) dst[x] = src[x / 2];
      }
}

template <typename T>
void upsample2_backward(const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  const int N = grad_in.n(), C = grad_in.c(), H = grad_in.h(), W = grad_in.w();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              acc += static_cast<double>(grad_out.values[grad_out.index(n, c, 2 * y + dy, 2 * x + dx)]);
          grad_in.grad[grad_in.index(n, c, y, x)] += static_cast<T>(acc);
        }
}

template <typename T>
void add_forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  if (!a.same_shape(b))
    throw ShapeError("add shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  out.reset(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) out.values[i] = a.values[i] + b.values[i];
}

// Fully connected layer on flattened (N, C*H*W) features; output is (N,G,1,1).
template <typename T>
void dense_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& bias, Tensor<T>& out) {
  const int N = in.n();
  const int F = static_cast<int>(in.numel()) / N;
  const int G = w.dim(0);
  if (w.dim(1) != F)
    throw ShapeError("dense expects " + std::to_string(w.dim(1)) + " features, got " + std::to_string(F));
  out.reset({N, G, 1, 1});
  for (int n = 0; n < N; ++n) {
    const T* x = &in.values[static_cast<size_t>(n) * F];
    for (int g = 0; g < G; ++g) {
      const T* wr = &w.values[static_cast<size_t>(g) * F];
      double acc = static_cast<double>(bias.values[g]);
      for (int f = 0; f < F; ++f) acc += static_cast<double>(x[f]) * static_cast<double>(wr[f]);
      out.values[static_cast<size_t>(n) * G + g] = static_cast<T>(acc);
    }
  }
}

template <typename T>
void dense_backward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& grad_out,
                    Tensor<T>* grad_in, Tensor<T>& grad_w, Tensor<T>& grad_bias) {
  const int N = in.n();
  const int F = static_cast<int>(in.numel()) / N;
  const int G = w.dim(0);
  for (int g = 0; g < G; ++g) {
    double acc = 0.0;
    for (int n = 0; n < N; ++n) acc += static_cast<double>(grad_out.values[static_cast<size_t>(n) * G + g]);
    grad_bias.grad[g] += static_cast<T>(acc);
  }
  for (int g = 0; g < G; ++g) {
    for (int f = 0; f < F; ++f) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n)
        acc += static_cast<double>(grad_out.values[static_cast<size_t>(n) * G + g]) *
               static_cast<double>(in.values[static_cast<size_t>(n) * F + f]);
      grad_w.grad[static_cast<size_t>(g) * F + f] += static_cast<T>(acc);
    }
  }
  if (!grad_in) return;
  for (int n = 0; n < N; ++n) {
    for (int f = 0; f < F; ++f) {
      double acc = 0.0;
      for (int g = 0; g < G; ++g)
        acc += static_cast<double>(grad_out.values[static_cast<size_t>(n) * G + g]) *
               static_cast<double>(w.values[static_cast<size_t>(g) * F + f]);
      grad_in->grad[static_cast<size_t>(n) * F + f] += static_cast<T>(acc);
    }
  }
}

}  // namespace layers

// Per-pixel channel softmax.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const int N = logits.n(), C = logits.c(), H = logits.h(), W = logits.w();
  Tensor<T> out(logits.shape);
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(logits.at(n, c, y, x)));
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(logits.at(n, c, y, x)) - mx);
        for (int c = 0; c < C; ++c)
          out.at(n, c, y, x) = static_cast<T>(std::exp(static_cast<double>(logits.at(n, c, y, x)) - mx) / z);
      }
  return out;
}

// Weighted pixel-wise cross entropy. Logit channel j scores class j+1;
// class 0 is background and must carry weight 0. targets/pixel_weights are
// row-major over (n, y, x). Returns the weight-normalized loss and, when
// grad_out is given, fills it with d(loss)/d(logits).
template <typename T>
double weighted_softmax_ce(const Tensor<T>& logits, const std::vector<uint8_t>& targets,
                           const std::vector<double>& pixel_weights,
                           std::type_identity_t<Tensor<T>>* grad_out) {
  const int N = logits.n(), C = logits.c(), H = logits.h(), W = logits.w();
  const size_t P = static_cast<size_t>(N) * H * W;
  if (targets.size() != P || pixel_weights.size() != P)
    throw ShapeError("weighted_softmax_ce: target/weight count must equal pixel count");
  double wsum = 0.0;
  for (size_t p = 0; p < P; ++p) {
    if (targets[p] > C) throw ArgumentError("weighted_softmax_ce: target out of range");
    if (targets[p] == 0 && pixel_weights[p] != 0.0)
      throw ArgumentError("weighted_softmax_ce: background pixels must carry weight 0");
    wsum += pixel_weights[p];
  }
  if (wsum <= 0.0) throw DegenerateError("weighted_softmax_ce: all pixel weights are zero");
  if (grad_out) {
    grad_out->reset(logits.shape);
  }
  double loss = 0.0;
  std::vector<double> prob(C);
  size_t p = 0;
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x, ++p) {
        const double wp = pixel_weights[p];
        if (wp == 0.0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(logits.at(n, c, y, x)));
        double z = 0.0;
        for (int c = 0; c < C; ++c) {
          prob[c] = std::exp(static_cast<double>(logits.at(n, c, y, x)) - mx);
          z += prob[c];
        }
        const int tc = targets[p] - 1;
        loss += wp * (std::log(z) - (static_cast<double>(logits.at(n, tc, y, x)) - mx));
        if (grad_out) {
          for (int c = 0; c < C; ++c) {
            const double soft = prob[c] / z;
            grad_out->values[grad_out->index(n, c, y, x)] =
                static_cast<T>(wp * (soft - (c == tc ? 1.0 : 0.0)) / wsum);
          }
        }
      }
  loss /= wsum;
  check_finite(loss, "weighted_softmax_ce loss");
  return loss;
}

// Mean squared error over all elements; grad_out receives 2*(pred-target)/n.
template <typename T>
double mse_loss(const Tensor<T>& pred, const Tensor<T>& target,
                std::type_identity_t<Tensor<T>>* grad_out) {
  if (!pred.same_shape(target)) throw ShapeError("mse_loss shape mismatch");
  const double n = static_cast<double>(pred.numel());
  if (grad_out) grad_out->reset(pred.shape);
  double acc = 0.0;
  for (size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred.values[i]) - static_cast<double>(target.values[i]);
    acc += d * d;
    if (grad_out) grad_out->values[i] = static_cast<T>(2.0 * d / n);
  }
  const double loss = acc / n;
  check_finite(loss, "mse loss");
  return loss;
}

}  // namespace msiseg
