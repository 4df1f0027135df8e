#pragma once

#include <cmath>
#include <vector>

#include "mscd/tensor.hpp"

namespace mscd {

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

// col layout: [Cg*kh*kw, Ho*Wo], one image, one group.
template <typename T>
void im2col(const T* x, int64_t Cg, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* col) {
  for (int64_t c = 0; c < Cg; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          const int64_t hi = ho * stride - pad + ki;
          if (hi < 0 || hi >= H) {
            std::fill(dst + ho * Wo, dst + (ho + 1) * Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            const int64_t wi = wo * stride - pad + kj;
            dst[ho * Wo + wo] = (wi >= 0 && wi < W) ? src[wi] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int64_t Cg, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* x) {
  for (int64_t c = 0; c < Cg; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          const int64_t hi = ho * stride - pad + ki;
          if (hi < 0 || hi >= H) continue;
          T* dst = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            const int64_t wi = wo * stride - pad + kj;
            if (wi >= 0 && wi < W) dst[wi] += src[ho * Wo + wo];
          }
        }
      }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 int64_t stride, int64_t padding, int64_t groups = 1) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects rank-4 x and w");
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (groups < 1 || Cin % groups != 0 || Cout % groups != 0)
    throw ShapeError("conv2d: channels not divisible by groups");
  const int64_t Cg = Cin / groups, Cog = Cout / groups;
  if (w.dim(1) != Cg)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " vs input channels " +
                     std::to_string(Cin) + " groups " + std::to_string(groups));
  if (bias && (bias->rank() != 1 || bias->dim(0) != Cout))
    throw ShapeError("conv2d: bias shape mismatch");
  const int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  const int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: kernel exceeds padded input");

  auto xi = x.impl();
  auto wi = w.impl();
  auto bimpl = bias ? bias->impl() : nullptr;
  const int64_t K = Cg * kh * kw, P = Ho * Wo;
  std::vector<T> col(size_t(K * P));
  std::vector<T> y(size_t(N * Cout * P), T(0));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t g = 0; g < groups; ++g) {
      detail::im2col(xi->data.data() + (n * Cin + g * Cg) * H * W, Cg, H, W, kh, kw, stride,
                     padding, Ho, Wo, col.data());
      detail::gemm(Cog, P, K, wi->data.data() + g * Cog * K, false, col.data(), false,
                   y.data() + (n * Cout + g * Cog) * P, true);
    }
  if (bimpl)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < Cout; ++c) {
        const T b = bimpl->data[size_t(c)];
        T* row = y.data() + (n * Cout + c) * P;
        for (int64_t p = 0; p < P; ++p) row[p] += b;
      }

  std::vector<std::shared_ptr<TensorImpl<T>>> parents{xi, wi};
  if (bimpl) parents.push_back(bimpl);
  return detail::make_result<T>(
      {N, Cout, Ho, Wo}, std::move(y), std::move(parents),
      [xi, wi, bimpl, N, Cin, H, W, Cout, kh, kw, stride, padding, groups, Cg, Cog, Ho,
       Wo](TensorImpl<T>* self) {
        const int64_t K = Cg * kh * kw, P = Ho * Wo;
        const T* g = self->grad.data();
        std::vector<T> col(size_t(K * P));
        if (wi->requires_grad || xi->requires_grad) {
          if (wi->requires_grad) wi->ensure_grad();
          if (xi->requires_grad) xi->ensure_grad();
          std::vector<T> dcol(size_t(K * P));
          for (int64_t n = 0; n < N; ++n)
            for (int64_t gr = 0; gr < groups; ++gr) {
              const T* gy = g + (n * Cout + gr * Cog) * P;
              if (wi->requires_grad) {
                detail::im2col(xi->data.data() + (n * Cin + gr * Cg) * H * W, Cg, H, W, kh,
                               kw, stride, padding, Ho, Wo, col.data());
                // dW += dY * col^T
                detail::gemm(Cog, K, P, gy, false, col.data(), true,
                             wi->grad.data() + gr * Cog * K, true);
              }
              if (xi->requires_grad) {
                // dcol = W^T * dY
                detail::gemm(K, P, Cog, wi->data.data() + gr * Cog * K, true, gy, false,
                             dcol.data(), false);
                detail::col2im_add(dcol.data(), Cg, H, W, kh, kw, stride, padding, Ho, Wo,
                                   xi->grad.data() + (n * Cin + gr * Cg) * H * W);
              }
            }
        }
        if (bimpl && bimpl->requires_grad) {
          bimpl->ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < Cout; ++c) {
              T acc = 0;
              const T* row = g + (n * Cout + c) * P;
              for (int64_t p = 0; p < P; ++p) acc += row[p];
              bimpl->grad[size_t(c)] += acc;
            }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride, int64_t padding, int64_t groups = 1) {
  return conv2d(x, w, &bias, stride, padding, groups);
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolKind { max, avg };

template <typename T>
Tensor<T> pool2d(PoolKind kind, const Tensor<T>& x, int64_t window, int64_t stride) {
  if (x.rank() != 4) throw ShapeError("pool2d expects rank-4 input");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H || window > W)
    throw ShapeError("pool2d: window " + std::to_string(window) + " exceeds input " +
                     shape_str(x.shape()));
  const int64_t Ho = (H - window) / stride + 1;
  const int64_t Wo = (W - window) / stride + 1;
  auto xi = x.impl();
  std::vector<T> y(size_t(N * C * Ho * Wo));
  const T* px = xi->data.data();
  const T inv = T(1) / T(window * window);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = px + nc * H * W;
    T* out = y.data() + nc * Ho * Wo;
    for (int64_t ho = 0; ho < Ho; ++ho)
      for (int64_t wo = 0; wo < Wo; ++wo) {
        if (kind == PoolKind::max) {
          T best = plane[(ho * stride) * W + wo * stride];
          for (int64_t i = 0; i < window; ++i)
            for (int64_t j = 0; j < window; ++j)
              best = std::max(best, plane[(ho * stride + i) * W + wo * stride + j]);
          out[ho * Wo + wo] = best;
        } else {
          T acc = 0;
          for (int64_t i = 0; i < window; ++i)
            for (int64_t j = 0; j < window; ++j)
              acc += plane[(ho * stride + i) * W + wo * stride + j];
          out[ho * Wo + wo] = acc * inv;
        }
      }
  }
  return detail::make_result<T>(
      {N, C, Ho, Wo}, std::move(y), {xi},
      [xi, kind, N, C, H, W, Ho, Wo, window, stride, inv](TensorImpl<T>* self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        const T* g = self->grad.data();
        const T* px = xi->data.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const T* plane = px + nc * H * W;
          T* gx = xi->grad.data() + nc * H * W;
          const T* go = g + nc * Ho * Wo;
          for (int64_t ho = 0; ho < Ho; ++ho)
            for (int64_t wo = 0; wo < Wo; ++wo) {
              if (kind == PoolKind::max) {
                // route to the argmax, first occurrence on ties
                int64_t bi = 0, bj = 0;
                T best = plane[(ho * stride) * W + wo * stride];
                for (int64_t i = 0; i < window; ++i)
                  for (int64_t j = 0; j < window; ++j) {
                    const T v = plane[(ho * stride + i) * W + wo * stride + j];
                    if (v > best) {
                      best = v;
                      bi = i;
                      bj = j;
                    }
                  }
                gx[(ho * stride + bi) * W + wo * stride + bj] += go[ho * Wo + wo];
              } else {
                const T gv = go[ho * Wo + wo] * inv;
                for (int64_t i = 0; i < window; ++i)
                  for (int64_t j = 0; j < window; ++j)
                    gx[(ho * stride + i) * W + wo * stride + j] += gv;
              }
            }
        }
      });
}

// Adaptive pooling onto an out_h x out_w grid; cell (i,j) spans
// [floor(i*H/out_h), floor((i+1)*H/out_h)) and likewise for columns.
template <typename T>
Tensor<T> adaptive_pool2d(PoolKind kind, const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 4) throw ShapeError("adaptive_pool2d expects rank-4 input");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h > H || out_w > W)
    throw ShapeError("adaptive_pool2d: grid exceeds feature size " + shape_str(x.shape()));
  auto xi = x.impl();
  std::vector<T> y(size_t(N * C * out_h * out_w));
  const T* px = xi->data.data();
  auto lo = [](int64_t i, int64_t n, int64_t o) { return i * n / o; };
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = px + nc * H * W;
    T* out = y.data() + nc * out_h * out_w;
    for (int64_t i = 0; i < out_h; ++i)
      for (int64_t j = 0; j < out_w; ++j) {
        const int64_t h0 = lo(i, H, out_h), h1 = lo(i + 1, H, out_h);
        const int64_t w0 = lo(j, W, out_w), w1 = lo(j + 1, W, out_w);
        if (kind == PoolKind::max) {
          T best = plane[h0 * W + w0];
          for (int64_t hh = h0; hh < h1; ++hh)
            for (int64_t ww = w0; ww < w1; ++ww) best = std::max(best, plane[hh * W + ww]);
          out[i * out_w + j] = best;
        } else {
          T acc = 0;
          for (int64_t hh = h0; hh < h1; ++hh)
            for (int64_t ww = w0; ww < w1; ++ww) acc += plane[hh * W + ww];
          out[i * out_w + j] = acc / T((h1 - h0) * (w1 - w0));
        }
      }
  }
  return detail::make_result<T>(
      {N, C, out_h, out_w}, std::move(y), {xi},
      [xi, kind, N, C, H, W, out_h, out_w](TensorImpl<T>* self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        auto lo = [](int64_t i, int64_t n, int64_t o) { return i * n / o; };
        const T* g = self->grad.data();
        const T* px = xi->data.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const T* plane = px + nc * H * W;
          T* gx = xi->grad.data() + nc * H * W;
          const T* go = g + nc * out_h * out_w;
          for (int64_t i = 0; i < out_h; ++i)
            for (int64_t j = 0; j < out_w; ++j) {
              const int64_t h0 = lo(i, H, out_h), h1 = lo(i + 1, H, out_h);
              const int64_t w0 = lo(j, W, out_w), w1 = lo(j + 1, W, out_w);
              if (kind == PoolKind::max) {
                int64_t bh = h0, bw = w0;
                T best = plane[h0 * W + w0];
                for (int64_t hh = h0; hh < h1; ++hh)
                  for (int64_t ww = w0; ww < w1; ++ww)
                    if (plane[hh * W + ww] > best) {
                      best = plane[hh * W + ww];
                      bh = hh;
                      bw = ww;
                    }
                gx[bh * W + bw] += go[i * out_w + j];
              } else {
                const T gv = go[i * out_w + j] / T((h1 - h0) * (w1 - w0));
                for (int64_t hh = h0; hh < h1; ++hh)
                  for (int64_t ww = w0; ww < w1; ++ww) gx[hh * W + ww] += gv;
              }
            }
        }
      });
}

template <typename T>
Tensor<T> global_avg(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg expects rank-4 input");
  return mean_axes(x, {2, 3});
}

// ---------------------------------------------------------------------------
// Bilinear resize, half-pixel centers, no corner alignment
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 4) throw ShapeError("resize_bilinear expects rank-4 input");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output size must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == H && out_w == W) {
    // exact identity at equal sizes
    return unary_op(x, [](T v) { return v; }, [](T, T, T g) { return g; });
  }
  struct Tap {
    int64_t i0, i1;
    T w0, w1;
  };
  auto make_taps = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(size_t(out), Tap{});
    const double scale = double(in) / double(out);
    for (int64_t d = 0; d < out; ++d) {
      double src = (double(d) + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      if (src > double(in - 1)) src = double(in - 1);
      const int64_t i0 = int64_t(std::floor(src));
      const int64_t i1 = std::min(i0 + 1, in - 1);
      const T f = T(src - double(i0));
      taps[size_t(d)] = {i0, i1, T(1) - f, f};
    }
    return taps;
  };
  auto th = make_taps(H, out_h);
  auto tw = make_taps(W, out_w);
  auto xi = x.impl();
  std::vector<T> y(size_t(N * C * out_h * out_w));
  const T* px = xi->data.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = px + nc * H * W;
    T* out = y.data() + nc * out_h * out_w;
    for (int64_t i = 0; i < out_h; ++i) {
      const Tap& a = th[size_t(i)];
      for (int64_t j = 0; j < out_w; ++j) {
        const Tap& b = tw[size_t(j)];
        out[i * out_w + j] = a.w0 * (b.w0 * plane[a.i0 * W + b.i0] + b.w1 * plane[a.i0 * W + b.i1]) +
                             a.w1 * (b.w0 * plane[a.i1 * W + b.i0] + b.w1 * plane[a.i1 * W + b.i1]);
      }
    }
  }
  return detail::make_result<T>(
      {N, C, out_h, out_w}, std::move(y), {xi},
      [xi, th, tw, N, C, H, W, out_h, out_w](TensorImpl<T>* self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        const T* g = self->grad.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          T* gx = xi->grad.data() + nc * H * W;
          const T* go = g + nc * out_h * out_w;
          for (int64_t i = 0; i < out_h; ++i) {
            const Tap& a = th[size_t(i)];
            for (int64_t j = 0; j < out_w; ++j) {
              const Tap& b = tw[size_t(j)];
              const T gv = go[i * out_w + j];
              gx[a.i0 * W + b.i0] += a.w0 * b.w0 * gv;
              gx[a.i0 * W + b.i1] += a.w0 * b.w1 * gv;
              gx[a.i1 * W + b.i0] += a.w1 * b.w0 * gv;
              gx[a.i1 * W + b.i1] += a.w1 * b.w1 * gv;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// gamma/beta/running stats are length-C vectors. Train mode normalizes with
// batch statistics (population variance) and updates the running buffers in
// place; eval mode is a pure function of (input, parameters).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) throw ShapeError("batch_norm expects rank-4 input");
  const int64_t C = x.dim(1);
  for (const Tensor<T>* p : {&gamma, &beta, (const Tensor<T>*)&running_mean,
                             (const Tensor<T>*)&running_var})
    if (p->numel() != C)
      throw ShapeError("batch_norm: parameter length " + std::to_string(p->numel()) +
                       " vs channels " + std::to_string(C));
  Tensor<T> g4 = reshape(gamma, {1, C, 1, 1});
  Tensor<T> b4 = reshape(beta, {1, C, 1, 1});
  if (training) {
    Tensor<T> m = mean_axes(x, {0, 2, 3});
    Tensor<T> centered = sub(x, m);
    Tensor<T> v = mean_axes(mul(centered, centered), {0, 2, 3});
    // running-stat update is outside the recorded graph
    for (int64_t c = 0; c < C; ++c) {
      running_mean.mutable_data()[size_t(c)] =
          (T(1) - momentum) * running_mean.at(c) + momentum * m.at(c);
      running_var.mutable_data()[size_t(c)] =
          (T(1) - momentum) * running_var.at(c) + momentum * v.at(c);
    }
    Tensor<T> inv = div(Tensor<T>::scalar(T(1)), sqrt_t(add_scalar(v, eps)));
    return add(mul(mul(centered, inv), g4), b4);
  }
  Tensor<T> rm = reshape(running_mean.detach(), {1, C, 1, 1});
  Tensor<T> rv = reshape(running_var.detach(), {1, C, 1, 1});
  Tensor<T> inv = div(Tensor<T>::scalar(T(1)), sqrt_t(add_scalar(rv, eps)));
  return add(mul(mul(sub(x, rm), inv), g4), b4);
}

}  // namespace mscd
