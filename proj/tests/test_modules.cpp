#include <gtest/gtest.h>

#include <cmath>

#include "mscd/caim.hpp"
#include "mscd/grad_check.hpp"
#include "mscd/ncem.hpp"
#include "mscd/smrm.hpp"

using mscd::FeaturePyramid;
using mscd::ParamStore;
using mscd::Rng;
using mscd::Tensor;
using TD = Tensor<double>;

namespace {

TD randn(mscd::Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(size_t(mscd::shape_numel(shape)));
  for (auto& x : v) x = rng.normal() * scale;
  return TD::from_data(std::move(shape), std::move(v));
}

void fill(Tensor<double>& t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

}  // namespace

// --- NCEM ---

TEST(Ncem, ResidualIdentityConfiguration) {
  ParamStore<double> ps;
  Rng rng(1);
  std::array<int64_t, 4> widths{3, 4, 5, 6};
  auto levels = mscd::make_ncem(ps, "n", rng, widths);
  for (auto& p : ps.items())
    if (p.role == mscd::ParamRole::weight) fill(p.value, 0.0);
  for (size_t i = 0; i < 4; ++i) {
    auto& w = levels[i].proj.w;
    const int64_t c = w.dim(0);
    fill(w, 0.0);
    for (int64_t j = 0; j < c; ++j) w.mutable_data()[size_t(j * c + j)] = 1.0;
    fill(levels[i].proj.b, 0.0);
  }
  FeaturePyramid<double> pyr;
  const int64_t sizes[4] = {8, 4, 2, 1};
  for (size_t i = 0; i < 4; ++i) pyr[i] = randn({1, widths[i], sizes[i], sizes[i]}, rng);
  FeaturePyramid<double> out = mscd::ncem_pyramid(pyr, levels, false);
  for (size_t i = 0; i < 4; ++i) {
    ASSERT_EQ(out[i].shape(), pyr[i].shape());
    for (int64_t j = 0; j < pyr[i].numel(); ++j) EXPECT_NEAR(out[i].at(j), pyr[i].at(j), 1e-12);
  }
}

TEST(Ncem, BoundaryBranchCounts) {
  ParamStore<double> ps;
  Rng rng(2);
  std::array<int64_t, 4> widths{3, 4, 5, 6};
  auto levels = mscd::make_ncem(ps, "n", rng, widths);
  // level 1 has no low branch, level 4 no high branch; fusion widths expose it
  EXPECT_FALSE(levels[0].has_low);
  EXPECT_TRUE(levels[0].has_high);
  EXPECT_TRUE(levels[3].has_low);
  EXPECT_FALSE(levels[3].has_high);
  EXPECT_EQ(levels[0].fuse.conv.w.dim(1), 2 * widths[0]);
  EXPECT_EQ(levels[1].fuse.conv.w.dim(1), 3 * widths[1]);
  EXPECT_EQ(levels[3].fuse.conv.w.dim(1), 2 * widths[3]);
}

TEST(Ncem, AlphaHalfAtZeroRaw) {
  ParamStore<double> ps;
  Rng rng(3);
  auto level = mscd::make_ncem_level(ps, "n", rng, int64_t(3), int64_t(4), int64_t(0));
  EXPECT_EQ(sigmoid(level.alpha_raw).item(), 0.5);
}

TEST(Ncem, EnhancedLowFeedsNextLevel) {
  ParamStore<double> ps;
  Rng rng(4);
  std::array<int64_t, 4> widths{3, 4, 5, 6};
  auto levels = mscd::make_ncem(ps, "n", rng, widths);
  FeaturePyramid<double> pyr;
  const int64_t sizes[4] = {8, 4, 2, 1};
  for (size_t i = 0; i < 4; ++i) pyr[i] = randn({1, widths[i], sizes[i], sizes[i]}, rng);
  FeaturePyramid<double> base = mscd::ncem_pyramid(pyr, levels, false);
  levels[0].proj.b.mutable_data()[0] += 1.0;  // perturb a level-1 parameter
  FeaturePyramid<double> pert = mscd::ncem_pyramid(pyr, levels, false);
  double delta = 0;
  for (int64_t j = 0; j < base[1].numel(); ++j) delta += std::abs(pert[1].at(j) - base[1].at(j));
  EXPECT_GT(delta, 0.0);
}

TEST(Ncem, ScaleMismatchRejected) {
  ParamStore<double> ps;
  Rng rng(5);
  auto level = mscd::make_ncem_level(ps, "n", rng, int64_t(3), int64_t(4), int64_t(0));
  Rng r2(6);
  TD cur = randn({1, 4, 4, 4}, r2);
  TD low_bad = randn({1, 3, 6, 6}, r2);
  EXPECT_THROW(mscd::ncem_level<double>(&low_bad, cur, nullptr, &low_bad, level, false),
               mscd::ShapeError);
}

// --- CAIM ---

TEST(Caim, DiffFeatures) {
  Rng rng(7);
  FeaturePyramid<double> a, b;
  const int64_t sizes[4] = {8, 4, 2, 1};
  for (size_t i = 0; i < 4; ++i) {
    a[i] = randn({1, 3, sizes[i], sizes[i]}, rng);
    b[i] = randn({1, 3, sizes[i], sizes[i]}, rng);
  }
  FeaturePyramid<double> d1 = mscd::diff_features(a, b);
  FeaturePyramid<double> d2 = mscd::diff_features(b, a);
  FeaturePyramid<double> z = mscd::diff_features(a, a);
  for (size_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < d1[i].numel(); ++j) {
      EXPECT_EQ(d1[i].at(j), d2[i].at(j));
      EXPECT_GE(d1[i].at(j), 0.0);
      EXPECT_EQ(z[i].at(j), 0.0);
    }
  TD x = TD::from_data({2}, {2, -1});
  TD y = TD::from_data({2}, {0, 1});
  TD d = abs_val(sub(x, y));
  EXPECT_EQ(d.at(0), 2.0);
  EXPECT_EQ(d.at(1), 2.0);
}

TEST(Caim, CcafZeroConstructions) {
  ParamStore<double> ps;
  Rng rng(8);
  auto level = mscd::make_caim_level(ps, "c", rng, int64_t(3), int64_t(2));
  TD d_rgb = randn({1, 3, 4, 4}, rng);
  TD zero = TD({1, 3, 4, 4}, 0.0);
  auto r = mscd::ccaf_align(d_rgb, zero, level);
  for (int64_t j = 0; j < d_rgb.numel(); ++j) EXPECT_EQ(r.d_rgb.at(j), d_rgb.at(j));

  fill(level.ccaf_conv.w, 0.0);
  fill(level.ccaf_conv.b, 0.0);
  TD d_nir = randn({1, 3, 4, 4}, rng);
  auto r2 = mscd::ccaf_align(d_rgb, d_nir, level);
  for (int64_t j = 0; j < 3; ++j) EXPECT_EQ(r2.a1.at(j), 0.5);
  for (int64_t j = 0; j < d_rgb.numel(); ++j) {
    EXPECT_NEAR(r2.d_rgb.at(j), d_rgb.at(j) + 0.5 * d_nir.at(j), 1e-12);
    EXPECT_NEAR(r2.d_nir.at(j), d_nir.at(j) + 0.5 * d_rgb.at(j), 1e-12);
  }
}

TEST(Caim, CcafSharedGateSymmetry) {
  ParamStore<double> ps;
  Rng rng(9);
  auto level = mscd::make_caim_level(ps, "c", rng, int64_t(2), int64_t(2));
  TD d_rgb = randn({1, 2, 4, 4}, rng);
  TD d_nir = randn({1, 2, 4, 4}, rng);
  auto fwd = mscd::ccaf_align(d_rgb, d_nir, level);

  // swap the two input-channel halves of the gate conv, then swap inputs:
  // the shared gate is unchanged and the outputs swap exactly
  auto& w = level.ccaf_conv.w;  // [C, 2C, 1, 1]
  const int64_t cout = w.dim(0), cin = w.dim(1);
  TD swapped = w.detach();
  for (int64_t o = 0; o < cout; ++o)
    for (int64_t i = 0; i < cin; ++i)
      swapped.mutable_data()[size_t(o * cin + i)] = w.at(o * cin + (i + cin / 2) % cin);
  std::copy(swapped.data().begin(), swapped.data().end(), w.mutable_data().begin());
  auto rev = mscd::ccaf_align(d_nir, d_rgb, level);
  for (int64_t j = 0; j < d_rgb.numel(); ++j) {
    EXPECT_NEAR(rev.d_rgb.at(j), fwd.d_nir.at(j), 1e-12);
    EXPECT_NEAR(rev.d_nir.at(j), fwd.d_rgb.at(j), 1e-12);
  }
}

TEST(Caim, AwpOracles) {
  ParamStore<double> ps;
  Rng rng(10);
  auto level = mscd::make_caim_level(ps, "c", rng, int64_t(1), int64_t(2));
  TD pos0 = TD({4, 1}, 0.0);

  // singleton cells: avg == max, any lambda
  TD x = randn({1, 1, 2, 2}, rng);
  TD tok = mscd::awp_tokenize(x, level, pos0);
  for (int64_t j = 0; j < 4; ++j) EXPECT_NEAR(tok.at(j), x.at(j), 1e-12);

  // constant input tokenizes to the constant
  TD c = TD({1, 1, 6, 6}, 1.25);
  TD tokc = mscd::awp_tokenize(c, level, pos0);
  for (int64_t j = 0; j < 4; ++j) EXPECT_NEAR(tokc.at(j), 1.25, 1e-12);

  // lambda raw 0 on a {1,3} cell mixes to 2.5
  level.lambda_raw.mutable_data()[0] = 0.0;
  auto level1 = mscd::make_caim_level(ps, "c1", rng, int64_t(1), int64_t(1));
  TD pos1 = TD({1, 1}, 0.0);
  TD cell = TD::from_data({1, 1, 1, 2}, {1, 3});
  TD mixed = mscd::awp_tokenize(cell, level1, pos1);
  EXPECT_NEAR(mixed.at(0), 2.5, 1e-12);

  EXPECT_THROW(mscd::awp_tokenize(TD({1, 1, 1, 1}, 0.0), level, pos0), mscd::ShapeError);
}

TEST(Caim, VarianceWeightUniformFixedPoint) {
  TD u = TD({2, 3, 4}, 0.25);
  TD out = mscd::variance_weight(u);
  for (double v : out.data()) EXPECT_NEAR(v, 0.25, 1e-9);
}

TEST(Caim, VarianceWeightHandOracle) {
  TD a = TD::from_data({1, 1, 2}, {0.9, 0.1});
  TD out = mscd::variance_weight(a);
  EXPECT_NEAR(out.at(0), 0.642, 5e-4);
  EXPECT_NEAR(out.at(1), 0.358, 5e-4);
  EXPECT_THROW(mscd::variance_weight(TD::from_data({1, 1, 2}, {0.5, std::nan("")})),
               mscd::NumericError);
}

TEST(Caim, AttentionRowStochastic) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    TD logits = randn({2, 3, 5}, rng, 2.0);
    TD attn = softmax_last(logits);
    TD refined = mscd::variance_weight(attn);
    for (int64_t r = 0; r < 6; ++r) {
      double s0 = 0, s1 = 0;
      for (int64_t k = 0; k < 5; ++k) {
        s0 += attn.at(r * 5 + k);
        s1 += refined.at(r * 5 + k);
        EXPECT_GE(refined.at(r * 5 + k), 0.0);
      }
      EXPECT_NEAR(s0, 1.0, 1e-6);
      EXPECT_NEAR(s1, 1.0, 1e-6);
    }
  }
}

TEST(Caim, BdcaZeroProjections) {
  ParamStore<double> ps;
  Rng rng(12);
  auto level = mscd::make_caim_level(ps, "c", rng, int64_t(4), int64_t(2));
  fill(level.to_rgb.wq.w, 0.0);
  fill(level.to_rgb.wk.w, 0.0);
  TD t_rgb = randn({1, 4, 4}, rng);
  TD t_nir = randn({1, 4, 4}, rng);
  TD z = mscd::bdca_direction(t_rgb, t_nir, level.to_rgb, true);
  EXPECT_EQ(z.shape(), (mscd::Shape{1, 4, 4}));

  // uniform attention: context is the token mean of V, so the output equals
  // FFN(mean(V) + T) computed by hand
  TD v = level.to_rgb.wv.forward(t_rgb);
  std::vector<double> mean_v(4, 0.0);
  for (int64_t l = 0; l < 4; ++l)
    for (int64_t c = 0; c < 4; ++c) mean_v[size_t(c)] += v.at(l * 4 + c) / 4.0;
  TD ctx = add(t_rgb, TD::from_data({1, 1, 4}, mean_v));
  TD expect = level.to_rgb.ffn2.forward(relu(level.to_rgb.ffn1.forward(ctx)));
  for (int64_t j = 0; j < z.numel(); ++j) EXPECT_NEAR(z.at(j), expect.at(j), 1e-9);
}

TEST(Caim, FuseShapeAndDeterminism) {
  ParamStore<double> ps;
  Rng rng(13);
  auto level = mscd::make_caim_level(ps, "c", rng, int64_t(4), int64_t(2));
  TD d_rgb = randn({2, 4, 8, 8}, rng);
  TD d_nir = randn({2, 4, 8, 8}, rng);
  TD m1 = mscd::caim_fuse(d_rgb, d_nir, level, true, true, true);
  TD m2 = mscd::caim_fuse(d_rgb, d_nir, level, true, true, true);
  EXPECT_EQ(m1.shape(), (mscd::Shape{2, 4, 8, 8}));
  for (int64_t j = 0; j < m1.numel(); ++j) EXPECT_EQ(m1.at(j), m2.at(j));
}

// --- SMRM ---

TEST(Smrm, InjectMasks) {
  ParamStore<double> ps;
  Rng rng(14);
  std::array<int64_t, 4> widths{3, 4, 5, 6};
  auto smrm = mscd::make_smrm(ps, "s", rng, widths);
  TD m4 = randn({1, 6, 2, 2}, rng);
  TD zeros = TD({1, 1, 16, 16}, 0.0);
  TD ones = TD({1, 1, 16, 16}, 1.0);
  TD a = mscd::inject_masks(m4, zeros, zeros, smrm);
  EXPECT_EQ(a.shape(), (mscd::Shape{1, 6, 2, 2}));
  TD b = mscd::inject_masks(m4, ones, ones, smrm);
  double delta = 0;
  for (int64_t j = 0; j < a.numel(); ++j) delta += std::abs(a.at(j) - b.at(j));
  EXPECT_GT(delta, 0.0);

  // with the mask input channels zeroed, mask content cannot matter
  auto& w = smrm.mask_fuse.w;  // [C4, C4+2, 1, 1]
  for (int64_t o = 0; o < 6; ++o)
    for (int64_t i = 6; i < 8; ++i) w.mutable_data()[size_t(o * 8 + i)] = 0.0;
  TD cut_zero = mscd::inject_masks(m4, zeros, zeros, smrm);
  TD cut_ones = mscd::inject_masks(m4, ones, ones, smrm);
  for (int64_t j = 0; j < cut_zero.numel(); ++j) EXPECT_EQ(cut_zero.at(j), cut_ones.at(j));
  EXPECT_THROW(mscd::inject_masks(m4, TD({1, 2, 16, 16}, 0.0), zeros, smrm), mscd::DataError);
}

TEST(Smrm, FmuRangeAndZeroConstruction) {
  ParamStore<double> ps;
  Rng rng(15);
  auto level = mscd::make_smrm_level(ps, "s", rng, int64_t(8), int64_t(8));
  TD x = randn({2, 8, 4, 4}, rng);
  TD gate = mscd::fmu(x, level, false);
  EXPECT_EQ(gate.shape(), (mscd::Shape{2, 8, 1, 1}));
  for (double v : gate.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  fill(level.fmu_fc1.w, 0.0);
  fill(level.fmu_fc1.b, 0.0);
  fill(level.fmu_fc2.w, 0.0);
  fill(level.fmu_fc2.b, 0.0);
  TD half = mscd::fmu(x, level, false);
  for (double v : half.data()) EXPECT_EQ(v, 0.5);
}

TEST(Smrm, MrbGateLimits) {
  ParamStore<double> ps;
  Rng rng(16);
  auto level = mscd::make_smrm_level(ps, "s", rng, int64_t(4), int64_t(6));
  TD m_i = randn({1, 4, 8, 8}, rng);
  TD d_rgb = randn({1, 4, 8, 8}, rng);
  TD d_nir = randn({1, 4, 8, 8}, rng);
  TD above = randn({1, 6, 4, 4}, rng);

  level.omega_override = 1.0;  // cross-layer branch silenced
  TD base = mscd::mrb(m_i, d_rgb, d_nir, above, level, false);
  TD above2 = randn({1, 6, 4, 4}, rng);
  TD pert = mscd::mrb(m_i, d_rgb, d_nir, above2, level, false);
  for (int64_t j = 0; j < base.numel(); ++j) EXPECT_EQ(base.at(j), pert.at(j));

  level.omega_override = 0.0;  // diff branch silenced
  TD b0 = mscd::mrb(m_i, d_rgb, d_nir, above, level, false);
  TD b1 = mscd::mrb(m_i, randn({1, 4, 8, 8}, rng), d_nir, above, level, false);
  bool diff_matters = false;
  for (int64_t j = 0; j < b0.numel(); ++j)
    if (b0.at(j) != b1.at(j)) diff_matters = true;
  EXPECT_FALSE(diff_matters);
  level.omega_override.reset();

  EXPECT_THROW(mscd::mrb(m_i, d_rgb, d_nir, randn({1, 6, 3, 3}, rng), level, false),
               mscd::ShapeError);
}

TEST(Smrm, MrbModulatedBranchBounded) {
  ParamStore<double> ps;
  Rng rng(17);
  auto level = mscd::make_smrm_level(ps, "s", rng, int64_t(4), int64_t(4));
  TD m_i = randn({1, 4, 4, 4}, rng);
  TD gate = mscd::fmu(m_i, level, false);
  TD fusedb = mul(m_i, gate);
  for (int64_t j = 0; j < m_i.numel(); ++j)
    EXPECT_LE(std::abs(fusedb.at(j)), std::abs(m_i.at(j)));
}

TEST(Smrm, DecodeShapeAndDeterminism) {
  ParamStore<double> ps;
  Rng rng(18);
  std::array<int64_t, 4> widths{3, 4, 5, 6};
  auto smrm = mscd::make_smrm(ps, "s", rng, widths);
  FeaturePyramid<double> fused, dr, dn;
  const int64_t sizes[4] = {8, 4, 2, 1};
  for (size_t i = 0; i < 4; ++i) {
    fused[i] = randn({1, widths[i], sizes[i], sizes[i]}, rng);
    dr[i] = randn({1, widths[i], sizes[i], sizes[i]}, rng);
    dn[i] = randn({1, widths[i], sizes[i], sizes[i]}, rng);
  }
  TD zero_mask = TD({1, 1, 32, 32}, 0.0);
  TD gt_mask = TD({1, 1, 32, 32}, 0.0);
  for (int64_t j = 0; j < 200; ++j) gt_mask.mutable_data()[size_t(j * 3 % 1024)] = 1.0;
  TD m1a = mscd::smrm_decode(fused, dr, dn, zero_mask, zero_mask, smrm, false);
  TD m1b = mscd::smrm_decode(fused, dr, dn, zero_mask, zero_mask, smrm, false);
  TD m1c = mscd::smrm_decode(fused, dr, dn, gt_mask, gt_mask, smrm, false);
  EXPECT_EQ(m1a.shape(), (mscd::Shape{1, 3, 8, 8}));
  double delta = 0;
  for (int64_t j = 0; j < m1a.numel(); ++j) {
    EXPECT_EQ(m1a.at(j), m1b.at(j));
    delta += std::abs(m1a.at(j) - m1c.at(j));
  }
  EXPECT_GT(delta, 0.0);
}
