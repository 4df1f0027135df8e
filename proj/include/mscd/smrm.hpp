#pragma once

#include <array>
#include <optional>
#include <string>

#include "mscd/backbone.hpp"
#include "mscd/params.hpp"

namespace mscd {

// Saliency-aware multisource refinement: mask injection at the deepest level
// followed by top-down refinement blocks with FMU channel modulation and a
// learnable gate between difference and cross-layer cues.
template <typename T>
struct SmrmLevel {
  ConvBnRelu<T> diff_fuse;  // 3x3 on d_rgb + d_nir
  ConvBnRelu<T> cross;      // 3x3 on the level-(i+1) feature, then upsample
  // FMU: 3x3 conv -> GAP -> FC (reduction 4) -> ReLU -> FC -> sigmoid
  ConvBnRelu<T> fmu_conv;
  Linear<T> fmu_fc1, fmu_fc2;
  Tensor<T> omega_raw;
  std::optional<T> omega_override;  // test hook: bypass the sigmoid mapping
  ConvBnRelu<T> out_conv;
};

template <typename T>
struct Smrm {
  Conv2dLayer<T> mask_fuse;          // 1x1 (C4 + 2) -> C4
  std::array<SmrmLevel<T>, 3> levels;  // indices 0..2 hold levels 1..3
};

template <typename T>
SmrmLevel<T> make_smrm_level(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                             int64_t c_cur, int64_t c_above) {
  SmrmLevel<T> l;
  l.diff_fuse = make_conv_bn_relu(ps, prefix + ".diff", rng, c_cur, c_cur, 3, 1, 1);
  l.cross = make_conv_bn_relu(ps, prefix + ".cross", rng, c_above, c_cur, 3, 1, 1);
  l.fmu_conv = make_conv_bn_relu(ps, prefix + ".fmu.conv", rng, c_cur, c_cur, 3, 1, 1);
  const int64_t hidden = std::max<int64_t>(c_cur / 4, 4);
  l.fmu_fc1 = make_linear(ps, prefix + ".fmu.fc1", rng, c_cur, hidden);
  l.fmu_fc2 = make_linear(ps, prefix + ".fmu.fc2", rng, hidden, c_cur);
  l.omega_raw = make_gate(ps, prefix + ".omega");
  l.out_conv = make_conv_bn_relu(ps, prefix + ".out", rng, c_cur, c_cur, 3, 1, 1);
  return l;
}

template <typename T>
Smrm<T> make_smrm(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                  const std::array<int64_t, 4>& widths) {
  Smrm<T> s;
  s.mask_fuse = make_conv(ps, prefix + ".mask_fuse", rng, widths[3] + 2, widths[3], 1, 1, 0);
  for (size_t i = 0; i < 3; ++i)
    s.levels[i] = make_smrm_level(ps, prefix + ".level" + std::to_string(i + 1), rng,
                                  widths[i], widths[i + 1]);
  return s;
}

// Masks are resized to the deepest level's resolution, concatenated on
// channels and fused back to C4.
template <typename T>
Tensor<T> inject_masks(const Tensor<T>& m4, const Tensor<T>& mask_t1, const Tensor<T>& mask_t2,
                       const Smrm<T>& params) {
  for (const Tensor<T>* m : {&mask_t1, &mask_t2}) {
    if (m->rank() != 4 || m->dim(1) != 1)
      throw DataError("inject_masks: masks must be [N,1,H,W]");
    if (m->dim(0) != m4.dim(0)) throw DataError("inject_masks: mask batch mismatch");
  }
  Tensor<T> r1 = resize_bilinear(mask_t1, m4.dim(2), m4.dim(3));
  Tensor<T> r2 = resize_bilinear(mask_t2, m4.dim(2), m4.dim(3));
  return params.mask_fuse.forward(concat<T>({m4, r1, r2}, 1));
}

// Channel modulation vector in (0,1), one scalar per channel.
template <typename T>
Tensor<T> fmu(const Tensor<T>& m_i, SmrmLevel<T>& params, bool training) {
  const int64_t n = m_i.dim(0), c = m_i.dim(1);
  Tensor<T> pooled = global_avg(params.fmu_conv.forward(m_i, training));  // [N,C,1,1]
  Tensor<T> vec = reshape(pooled, {n, 1, c});
  Tensor<T> gate = sigmoid(params.fmu_fc2.forward(relu(params.fmu_fc1.forward(vec))));
  return reshape(gate, {n, c, 1, 1});
}

// One refinement block; emits at the level-i resolution.
template <typename T>
Tensor<T> mrb(const Tensor<T>& m_i, const Tensor<T>& d_rgb, const Tensor<T>& d_nir,
              const Tensor<T>& m_above, SmrmLevel<T>& params, bool training) {
  if (d_rgb.shape() != m_i.shape() || d_nir.shape() != m_i.shape())
    throw ShapeError("mrb: difference features must match the level shape");
  if (m_above.dim(2) * 2 != m_i.dim(2) || m_above.dim(3) * 2 != m_i.dim(3))
    throw ShapeError("mrb: cross-layer feature is not at the level-(i+1) scale");
  Tensor<T> d1 = params.diff_fuse.forward(add(d_rgb, d_nir), training);
  Tensor<T> u = resize_bilinear(params.cross.forward(m_above, training), m_i.dim(2), m_i.dim(3));
  Tensor<T> fused = mul(m_i, fmu(m_i, params, training));
  Tensor<T> w, one_minus_w;
  if (params.omega_override) {
    w = Tensor<T>::scalar(*params.omega_override);
    one_minus_w = Tensor<T>::scalar(T(1) - *params.omega_override);
  } else {
    w = sigmoid(params.omega_raw);
    one_minus_w = sub(Tensor<T>::scalar(T(1)), w);
  }
  Tensor<T> mix = add(add(mul(d1, w), mul(u, one_minus_w)), fused);
  return params.out_conv.forward(mix, training);
}

// Top-down decode: mask injection at level 4, then MRBs for levels 3, 2, 1.
// Returns the refined level-1 feature at stride /4.
template <typename T>
Tensor<T> smrm_decode(const FeaturePyramid<T>& fused,
                      const FeaturePyramid<T>& diff_rgb, const FeaturePyramid<T>& diff_nir,
                      const Tensor<T>& mask_t1, const Tensor<T>& mask_t2, Smrm<T>& params,
                      bool training) {
  Tensor<T> above = inject_masks(fused[3], mask_t1, mask_t2, params);
  for (int i = 2; i >= 0; --i)
    above = mrb(fused[size_t(i)], diff_rgb[size_t(i)], diff_nir[size_t(i)], above,
                params.levels[size_t(i)], training);
  return above;
}

}  // namespace mscd
