#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mscd/grad_check.hpp"
#include "mscd/model.hpp"
#include "mscd/nn.hpp"

namespace mscd {

// Finite-difference verification across every differentiable module, run in
// float64. Returns (module, worst relative error) pairs. eps stays small so
// ReLU/max kinks are crossed with negligible probability.

namespace detail {

inline Tensor<double> randn(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> data(size_t(shape_numel(shape)));
  for (auto& v : data) v = rng.normal() * scale;
  return Tensor<double>::from_data(std::move(shape), std::move(data));
}

}  // namespace detail

inline std::vector<std::pair<std::string, double>> run_grad_suite(uint64_t seed) {
  using TD = Tensor<double>;
  const double eps = 1e-5;
  std::vector<std::pair<std::string, double>> report;
  Rng rng(seed);

  {  // elementwise chain, softmax, matmul
    TD x0 = detail::randn({2, 6}, rng);
    TD w = detail::randn({6, 3}, rng);
    auto f = [&](const TD& x) {
      TD smooth = sum(mul(sigmoid(x), log_t(add_scalar(exp_t(x), 1.0))));
      TD attn = sum(matmul(softmax_last(x), w));
      return add(smooth, attn);
    };
    report.emplace_back("tensor_ops", grad_check(f, x0, eps));
  }
  {  // broadcasting binary ops
    TD x0 = detail::randn({2, 1, 3}, rng);
    TD c = detail::randn({4, 3}, rng);
    auto f = [&](const TD& x) {
      return sum(add(mul(x, c), div(c, add_scalar(mul(x, x), 1.0))));
    };
    report.emplace_back("broadcast", grad_check(f, x0, eps));
  }
  {  // convolution wrt input and weight, grouped included
    TD x0 = detail::randn({1, 4, 6, 6}, rng);
    TD w = detail::randn({3, 4, 3, 3}, rng, 0.5);
    TD b = detail::randn({3}, rng);
    TD wg = detail::randn({4, 1, 3, 3}, rng, 0.5);
    auto fx = [&](const TD& x) {
      TD y = conv2d<double>(x, w, &b, 2, 1, 1);
      return add(sum(y), sum(conv2d<double>(x, wg, nullptr, 1, 1, 4)));
    };
    auto fw = [&](const TD& wt) { return sum(conv2d<double>(x0, wt, &b, 1, 1, 1)); };
    report.emplace_back("conv2d", std::max(grad_check(fx, x0, eps), grad_check(fw, w, eps)));
  }
  {  // pooling and bilinear resize
    TD x0 = detail::randn({1, 2, 6, 6}, rng);
    auto f = [&](const TD& x) {
      TD m = pool2d(PoolKind::max, x, 2, 2);
      TD a = adaptive_pool2d(PoolKind::avg, x, 3, 3);
      TD r = resize_bilinear(x, 9, 5);
      return add(add(sum(m), sum(a)), sum(r));
    };
    report.emplace_back("pool_resize", grad_check(f, x0, eps));
  }
  {  // batch norm, training statistics path
    TD x0 = detail::randn({2, 3, 4, 4}, rng);
    TD gamma0 = detail::randn({3}, rng, 0.3);
    auto fx = [&](const TD& x) {
      TD gamma = gamma0.detach(), beta = TD({3}, 0.1);
      TD rm = TD({3}, 0.0), rv = TD({3}, 1.0);
      return sum(mul(batch_norm(x, gamma, beta, rm, rv, true), x));
    };
    auto fg = [&](const TD& g) {
      TD beta = TD({3}, 0.1), rm = TD({3}, 0.0), rv = TD({3}, 1.0);
      return sum(mul(batch_norm(x0, g, beta, rm, rv, true), x0));
    };
    report.emplace_back("batch_norm", std::max(grad_check(fx, x0, eps), grad_check(fg, gamma0, eps)));
  }
  {  // NCEM pyramid
    ParamStore<double> ps;
    std::array<int64_t, 4> widths{3, 4, 5, 6};
    auto levels = make_ncem(ps, "g", rng, widths);
    FeaturePyramid<double> pyr;
    const int64_t sizes[4] = {8, 4, 2, 1};
    for (size_t i = 0; i < 4; ++i) pyr[i] = detail::randn({1, widths[i], sizes[i], sizes[i]}, rng);
    TD x0 = pyr[1];
    auto f = [&](const TD& x) {
      FeaturePyramid<double> p = pyr;
      p[1] = x;
      FeaturePyramid<double> out = ncem_pyramid(p, levels, false);
      TD total = sum(out[0]);
      for (size_t i = 1; i < 4; ++i) total = add(total, sum(out[i]));
      return total;
    };
    report.emplace_back("ncem", grad_check(f, x0, eps));
  }
  {  // CAIM fusion, full path
    ParamStore<double> ps;
    auto level = make_caim_level(ps, "g", rng, int64_t(4), int64_t(2));
    TD d_rgb = detail::randn({1, 4, 4, 4}, rng);
    TD d_nir = detail::randn({1, 4, 4, 4}, rng);
    auto f = [&](const TD& x) { return sum(caim_fuse(x, d_nir, level, true, true, true)); };
    report.emplace_back("caim", grad_check(f, d_rgb, eps));
  }
  {  // SMRM decode
    ParamStore<double> ps;
    std::array<int64_t, 4> widths{3, 4, 5, 6};
    auto smrm = make_smrm(ps, "g", rng, widths);
    FeaturePyramid<double> fused, d_rgb, d_nir;
    const int64_t sizes[4] = {8, 4, 2, 1};
    for (size_t i = 0; i < 4; ++i) {
      fused[i] = detail::randn({1, widths[i], sizes[i], sizes[i]}, rng);
      d_rgb[i] = detail::randn({1, widths[i], sizes[i], sizes[i]}, rng);
      d_nir[i] = detail::randn({1, widths[i], sizes[i], sizes[i]}, rng);
    }
    TD m1 = TD({1, 1, 32, 32}, 0.0), m2 = TD({1, 1, 32, 32}, 0.0);
    for (auto* m : {&m1, &m2})
      for (auto& v : m->mutable_data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    TD x0 = fused[0];
    auto f = [&](const TD& x) {
      FeaturePyramid<double> p = fused;
      p[0] = x;
      return sum(smrm_decode(p, d_rgb, d_nir, m1, m2, smrm, false));
    };
    report.emplace_back("smrm", grad_check(f, x0, eps));
  }
  {  // full model with loss
    ModelConfig cfg;
    cfg.widths = {4, 6, 8, 8};
    cfg.input_size = 32;
    MSCNet<double> model(cfg, seed);
    ModelInput<double> in;
    in.rgb_t1 = detail::randn({1, 3, 32, 32}, rng, 0.25);
    in.rgb_t2 = detail::randn({1, 3, 32, 32}, rng, 0.25);
    in.nir_t1 = detail::randn({1, 1, 32, 32}, rng, 0.25);
    in.nir_t2 = detail::randn({1, 1, 32, 32}, rng, 0.25);
    in.mask_t1 = TD({1, 1, 32, 32}, 0.0);
    in.mask_t2 = TD({1, 1, 32, 32}, 0.0);
    TD label({1, 1, 32, 32}, 0.0);
    for (auto* t : {&in.mask_t1, &in.mask_t2, &label})
      for (auto& v : t->mutable_data()) v = rng.uniform() < 0.2 ? 1.0 : 0.0;
    TD x0 = in.nir_t1;
    auto f = [&](const TD& x) {
      ModelInput<double> local = in;
      local.nir_t1 = x;
      return bce_dice_loss(model.forward(local, false), label);
    };
    // directional check: per-coordinate FD cannot resolve the smallest
    // pixel gradients of a composition this deep against f64 roundoff
    report.emplace_back("model_loss", grad_check_directional(f, x0, rng, 8, 1e-4));
  }
  return report;
}

}  // namespace mscd
