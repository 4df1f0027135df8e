#pragma once

#include <array>
#include <string>

#include "mscd/backbone.hpp"
#include "mscd/params.hpp"

namespace mscd {

// Neighborhood context enhancement for one pyramid level. Branches whose
// neighbor is absent (level 1 has no low, level 4 has no high) are simply
// omitted from the concatenation, so boundary levels carry no dead
// parameters.
template <typename T>
struct NcemLevel {
  bool has_low = false, has_high = false;
  // low branch: MP -> 1x1 -> DSConv, residual MP -> 1x1, mixed by alpha
  ConvBnRelu<T> low_reduce;
  DsConvBnRelu<T> low_refine;
  ConvBnRelu<T> res_reduce;
  Tensor<T> alpha_raw;
  // current branch
  ConvBnRelu<T> main_conv;
  // high branch: 1x1 -> DSConv -> UP
  ConvBnRelu<T> high_reduce;
  DsConvBnRelu<T> high_refine;
  // fusion + linear residual projection (no BN, no activation)
  ConvBnRelu<T> fuse;
  Conv2dLayer<T> proj;
};

template <typename T>
NcemLevel<T> make_ncem_level(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                             int64_t c_low, int64_t c_cur, int64_t c_high) {
  NcemLevel<T> l;
  l.has_low = c_low > 0;
  l.has_high = c_high > 0;
  if (l.has_low) {
    l.low_reduce = make_conv_bn_relu(ps, prefix + ".low_reduce", rng, c_low, c_cur, 1, 1, 0);
    l.low_refine = make_dsconv(ps, prefix + ".low_refine", rng, c_cur, c_cur);
    l.res_reduce = make_conv_bn_relu(ps, prefix + ".res_reduce", rng, c_low, c_cur, 1, 1, 0);
    l.alpha_raw = make_gate(ps, prefix + ".alpha");
  }
  l.main_conv = make_conv_bn_relu(ps, prefix + ".main", rng, c_cur, c_cur, 3, 1, 1);
  if (l.has_high) {
    l.high_reduce = make_conv_bn_relu(ps, prefix + ".high_reduce", rng, c_high, c_cur, 1, 1, 0);
    l.high_refine = make_dsconv(ps, prefix + ".high_refine", rng, c_cur, c_cur);
  }
  const int64_t branches = 1 + (l.has_low ? 1 : 0) + (l.has_high ? 1 : 0);
  l.fuse = make_conv_bn_relu(ps, prefix + ".fuse", rng, branches * c_cur, c_cur, 3, 1, 1);
  l.proj = make_conv(ps, prefix + ".proj", rng, c_cur, c_cur, 1, 1, 0);
  return l;
}

template <typename T>
Tensor<T> ncem_level(const Tensor<T>* f_low, const Tensor<T>& f_cur, const Tensor<T>* f_high,
                     const Tensor<T>* f_low_enhanced, NcemLevel<T>& params, bool training) {
  std::vector<Tensor<T>> branches;
  if (params.has_low) {
    if (!f_low || !f_low_enhanced)
      throw ShapeError("ncem_level: low neighbor expected but missing");
    if (f_low->dim(2) != 2 * f_cur.dim(2) || f_low->dim(3) != 2 * f_cur.dim(3))
      throw ShapeError("ncem_level: f_low is not at 2x the current scale");
    if (f_low_enhanced->shape() != f_low->shape())
      throw ShapeError("ncem_level: f_low_enhanced shape mismatch");
    Tensor<T> a = sigmoid(params.alpha_raw);
    Tensor<T> one_minus_a = sub(Tensor<T>::scalar(T(1)), a);
    Tensor<T> main_low = params.low_refine.forward(
        params.low_reduce.forward(pool2d(PoolKind::max, *f_low, 2, 2), training), training);
    Tensor<T> res_low = params.res_reduce.forward(
        pool2d(PoolKind::max, *f_low_enhanced, 2, 2), training);
    branches.push_back(add(mul(main_low, one_minus_a), mul(res_low, a)));
  }
  branches.push_back(params.main_conv.forward(f_cur, training));
  if (params.has_high) {
    if (!f_high) throw ShapeError("ncem_level: high neighbor expected but missing");
    if (f_cur.dim(2) != 2 * f_high->dim(2) || f_cur.dim(3) != 2 * f_high->dim(3))
      throw ShapeError("ncem_level: f_high is not at half the current scale");
    Tensor<T> h = params.high_refine.forward(params.high_reduce.forward(*f_high, training),
                                             training);
    branches.push_back(resize_bilinear(h, f_cur.dim(2), f_cur.dim(3)));
  }
  Tensor<T> fused = params.fuse.forward(concat(branches, 1), training);
  return add(fused, params.proj.forward(f_cur));
}

// Sequential bottom-up application: level i consumes the already-enhanced
// level i-1 output as its residual input.
template <typename T>
FeaturePyramid<T> ncem_pyramid(const FeaturePyramid<T>& pyr,
                               std::array<NcemLevel<T>, 4>& params, bool training) {
  FeaturePyramid<T> out;
  out[0] = ncem_level<T>(nullptr, pyr[0], &pyr[1], nullptr, params[0], training);
  for (size_t i = 1; i < 4; ++i) {
    const Tensor<T>* high = i + 1 < 4 ? &pyr[i + 1] : nullptr;
    out[i] = ncem_level<T>(&pyr[i - 1], pyr[i], high, &out[i - 1], params[i], training);
  }
  return out;
}

template <typename T>
std::array<NcemLevel<T>, 4> make_ncem(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                                      const std::array<int64_t, 4>& widths) {
  std::array<NcemLevel<T>, 4> levels;
  for (size_t i = 0; i < 4; ++i) {
    const int64_t c_low = i > 0 ? widths[i - 1] : 0;
    const int64_t c_high = i + 1 < 4 ? widths[i + 1] : 0;
    levels[i] = make_ncem_level(ps, prefix + ".level" + std::to_string(i + 1), rng, c_low,
                                widths[i], c_high);
  }
  return levels;
}

}  // namespace mscd
