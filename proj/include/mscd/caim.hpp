#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>

#include "mscd/backbone.hpp"
#include "mscd/params.hpp"

namespace mscd {

// Per-level |t1 - t2| difference features for one modality.
template <typename T>
FeaturePyramid<T> diff_features(const FeaturePyramid<T>& pyr_t1,
                                const FeaturePyramid<T>& pyr_t2) {
  FeaturePyramid<T> out;
  for (size_t i = 0; i < 4; ++i) {
    if (pyr_t1[i].shape() != pyr_t2[i].shape())
      throw ShapeError("diff_features: pyramid shape mismatch at level " + std::to_string(i + 1));
    out[i] = abs_val(sub(pyr_t1[i], pyr_t2[i]));
  }
  return out;
}

template <typename T>
struct CaimLevel {
  int64_t channels = 0;
  int64_t grid = 8;  // effective token grid for this level (clamped at build)
  // CCAF: one 1x1 conv (2C -> C) + ReLU before GAP
  Conv2dLayer<T> ccaf_conv;
  // AWP scalar mixing gate + learnable positional encodings [L, C]
  Tensor<T> lambda_raw;
  Tensor<T> pos_rgb, pos_nir;
  // one cross-attention direction: K/V from the attended stream, Q from the
  // other stream, FFN with expansion 2
  struct Direction {
    Linear<T> wq, wk, wv;
    Linear<T> ffn1, ffn2;
  };
  Direction to_rgb;  // Q from NIR tokens, K/V from RGB tokens
  Direction to_nir;
  Conv2dLayer<T> fuse;  // 1x1 (2C -> C)
};

template <typename T>
typename CaimLevel<T>::Direction make_caim_direction(ParamStore<T>& ps,
                                                     const std::string& prefix, Rng& rng,
                                                     int64_t c) {
  typename CaimLevel<T>::Direction d;
  d.wq = make_linear(ps, prefix + ".wq", rng, c, c, false);
  d.wk = make_linear(ps, prefix + ".wk", rng, c, c, false);
  d.wv = make_linear(ps, prefix + ".wv", rng, c, c, false);
  d.ffn1 = make_linear(ps, prefix + ".ffn1", rng, c, 2 * c);
  d.ffn2 = make_linear(ps, prefix + ".ffn2", rng, 2 * c, c);
  return d;
}

template <typename T>
CaimLevel<T> make_caim_level(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                             int64_t channels, int64_t grid) {
  CaimLevel<T> l;
  l.channels = channels;
  l.grid = grid;
  l.ccaf_conv = make_conv(ps, prefix + ".ccaf", rng, 2 * channels, channels, 1, 1, 0);
  l.lambda_raw = make_gate(ps, prefix + ".awp_lambda");
  const int64_t tokens = grid * grid;
  l.pos_rgb = ps.add_fanin_uniform(prefix + ".pos_rgb", ParamRole::weight, {tokens, channels},
                                   channels, rng);
  l.pos_nir = ps.add_fanin_uniform(prefix + ".pos_nir", ParamRole::weight, {tokens, channels},
                                   channels, rng);
  l.to_rgb = make_caim_direction<T>(ps, prefix + ".to_rgb", rng, channels);
  l.to_nir = make_caim_direction<T>(ps, prefix + ".to_nir", rng, channels);
  l.fuse = make_conv(ps, prefix + ".fuse", rng, 2 * channels, channels, 1, 1, 0);
  return l;
}

// Cross-modal channel alignment: a shared per-channel gate in (0,1) controls
// a symmetric residual exchange between the two difference streams.
template <typename T>
struct CcafResult {
  Tensor<T> d_rgb, d_nir, a1;
};

template <typename T>
CcafResult<T> ccaf_align(const Tensor<T>& d_rgb, const Tensor<T>& d_nir,
                         const CaimLevel<T>& params) {
  if (d_rgb.shape() != d_nir.shape())
    throw ShapeError("ccaf_align: difference shapes must match");
  Tensor<T> joint = relu(params.ccaf_conv.forward(concat<T>({d_rgb, d_nir}, 1)));
  Tensor<T> a1 = sigmoid(global_avg(joint));  // [N, C, 1, 1]
  return {add(d_rgb, mul(d_nir, a1)), add(d_nir, mul(d_rgb, a1)), a1};
}

// Adaptive weighted pooling to a g x g grid (lambda * avg + (1-lambda) * max
// per cell), flattened to g^2 tokens plus a learnable positional encoding.
template <typename T>
Tensor<T> awp_tokenize(const Tensor<T>& x, const CaimLevel<T>& params, const Tensor<T>& pos) {
  const int64_t g = params.grid;
  if (g > x.dim(2) || g > x.dim(3))
    throw ShapeError("awp_tokenize: grid " + std::to_string(g) + " larger than feature " +
                     shape_str(x.shape()));
  Tensor<T> lam = sigmoid(params.lambda_raw);
  Tensor<T> one_minus = sub(Tensor<T>::scalar(T(1)), lam);
  Tensor<T> pooled = add(mul(adaptive_pool2d(PoolKind::avg, x, g, g), lam),
                         mul(adaptive_pool2d(PoolKind::max, x, g, g), one_minus));
  const int64_t n = x.dim(0), c = x.dim(1);
  Tensor<T> tokens = transpose_last2(reshape(pooled, {n, c, g * g}));  // [N, L, C]
  return add(tokens, pos);
}

// Row-wise variance-weighted attention refinement: each softmax row is
// modulated by sigmoid((a - mu)^2 / (2 sigma^2 + eps) + 1/2) and
// re-normalized. Uniform rows are an exact fixed point.
template <typename T>
Tensor<T> variance_weight(const Tensor<T>& attn, T eps = T(1e-6)) {
  for (T v : attn.data())
    if (!std::isfinite(v)) throw NumericError("variance_weight: non-finite attention input");
  Tensor<T> mu = mean_axes(attn, {-1});
  Tensor<T> dev = sub(attn, mu);
  Tensor<T> dev2 = mul(dev, dev);
  Tensor<T> var = mean_axes(dev2, {-1});
  Tensor<T> mod = sigmoid(add_scalar(div(dev2, add_scalar(scale(var, T(2)), eps)), T(0.5)));
  return softmax_last(mul(attn, mod));
}

// One attention direction of BDCA. `t_kv` supplies keys/values and the
// residual, `t_q` supplies queries.
template <typename T>
Tensor<T> bdca_direction(const Tensor<T>& t_kv, const Tensor<T>& t_q,
                         const typename CaimLevel<T>::Direction& dir, bool use_variance_weight) {
  const int64_t c = t_kv.dim(-1);
  Tensor<T> q = dir.wq.forward(t_q);
  Tensor<T> k = dir.wk.forward(t_kv);
  Tensor<T> v = dir.wv.forward(t_kv);
  Tensor<T> attn = softmax_last(scale(matmul(q, k, false, true), T(1.0 / std::sqrt(double(c)))));
  if (use_variance_weight) attn = variance_weight(attn);
  Tensor<T> ctx = add(matmul(attn, v), t_kv);
  return dir.ffn2.forward(relu(dir.ffn1.forward(ctx)));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> bdca(const Tensor<T>& t_rgb, const Tensor<T>& t_nir,
                                     const CaimLevel<T>& params, bool use_variance_weight) {
  if (t_rgb.shape() != t_nir.shape()) throw ShapeError("bdca: token shapes must match");
  Tensor<T> z_rgb = bdca_direction<T>(t_rgb, t_nir, params.to_rgb, use_variance_weight);
  Tensor<T> z_nir = bdca_direction<T>(t_nir, t_rgb, params.to_nir, use_variance_weight);
  return {z_rgb, z_nir};
}

// Full per-level fusion: CCAF -> AWP tokens -> BDCA -> spatial restore ->
// residual onto the original differences -> concat + 1x1 conv.
template <typename T>
Tensor<T> caim_fuse(const Tensor<T>& d_rgb, const Tensor<T>& d_nir, const CaimLevel<T>& params,
                    bool use_ccaf, bool use_bdca, bool use_variance_weight = true) {
  if (d_rgb.shape() != d_nir.shape()) throw ShapeError("caim_fuse: difference shape mismatch");
  Tensor<T> dr = d_rgb, dn = d_nir;
  if (use_ccaf) {
    CcafResult<T> aligned = ccaf_align(d_rgb, d_nir, params);
    dr = aligned.d_rgb;
    dn = aligned.d_nir;
  }
  if (!use_bdca) return params.fuse.forward(concat<T>({dr, dn}, 1));

  const int64_t n = d_rgb.dim(0), c = d_rgb.dim(1), h = d_rgb.dim(2), w = d_rgb.dim(3);
  const int64_t g = params.grid;
  Tensor<T> t_rgb = awp_tokenize(dr, params, params.pos_rgb);
  Tensor<T> t_nir = awp_tokenize(dn, params, params.pos_nir);
  auto [z_rgb, z_nir] = bdca(t_rgb, t_nir, params, use_variance_weight);
  auto restore = [&](const Tensor<T>& z, const Tensor<T>& d_orig) {
    Tensor<T> sp = reshape(transpose_last2(z), {n, c, g, g});
    return add(resize_bilinear(sp, h, w), d_orig);
  };
  return params.fuse.forward(
      concat<T>({restore(z_rgb, d_rgb), restore(z_nir, d_nir)}, 1));
}

}  // namespace mscd
