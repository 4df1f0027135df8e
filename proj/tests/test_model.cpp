#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mscd/model.hpp"
#include "mscd/train.hpp"

using mscd::ModelConfig;
using mscd::ModelInput;
using mscd::MSCNet;
using mscd::Tensor;
using TD = Tensor<double>;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.widths = {4, 6, 8, 8};
  cfg.input_size = 32;
  return cfg;
}

template <typename T>
ModelInput<T> random_input(mscd::Rng& rng, int64_t s, int64_t n = 1) {
  auto rnd = [&](mscd::Shape shape) {
    std::vector<T> v(size_t(mscd::shape_numel(shape)));
    for (auto& x : v) x = T(rng.uniform());
    return Tensor<T>::from_data(std::move(shape), std::move(v));
  };
  ModelInput<T> in;
  in.rgb_t1 = rnd({n, 3, s, s});
  in.rgb_t2 = rnd({n, 3, s, s});
  in.nir_t1 = rnd({n, 1, s, s});
  in.nir_t2 = rnd({n, 1, s, s});
  in.mask_t1 = Tensor<T>({n, 1, s, s}, T(0));
  in.mask_t2 = Tensor<T>({n, 1, s, s}, T(1));
  return in;
}

}  // namespace

TEST(Model, ForwardShapeRangeDeterminism) {
  MSCNet<double> model(tiny_config(), 42);
  mscd::Rng rng(1);
  ModelInput<double> in = random_input<double>(rng, 32);
  TD y1 = model.forward(in, false);
  TD y2 = model.forward(in, false);
  EXPECT_EQ(y1.shape(), (mscd::Shape{1, 1, 32, 32}));
  for (int64_t j = 0; j < y1.numel(); ++j) {
    EXPECT_GT(y1.at(j), 0.0);
    EXPECT_LT(y1.at(j), 1.0);
    EXPECT_EQ(y1.at(j), y2.at(j));
  }
}

TEST(Model, IdenticalTimesGiveZeroDifferences) {
  MSCNet<double> model(tiny_config(), 42);
  mscd::Rng rng(2);
  ModelInput<double> in = random_input<double>(rng, 32);
  in.rgb_t2 = in.rgb_t1;
  in.nir_t2 = in.nir_t1;
  auto pyr = model.encode(in.rgb_t1, mscd::Modality::RGB, false);
  auto diff = mscd::diff_features(pyr, model.encode(in.rgb_t2, mscd::Modality::RGB, false));
  for (size_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < diff[i].numel(); ++j) EXPECT_EQ(diff[i].at(j), 0.0);
}

TEST(Model, WeightSharingAccumulatesBothTimes) {
  MSCNet<double> model(tiny_config(), 42);
  mscd::Rng rng(3);
  ModelInput<double> in = random_input<double>(rng, 32);
  TD label({1, 1, 32, 32}, 0.0);
  label.mutable_data()[5] = 1.0;

  model.store.zero_grads();
  mscd::backward(mscd::bce_dice_loss(model.forward(in, false), label));
  ASSERT_TRUE(model.store.contains("rgb.backbone.stem.conv.w"));
  auto& stem = model.store.find("rgb.backbone.stem.conv.w");
  ASSERT_FALSE(stem.value.grad().empty());
  double g_both = 0;
  for (double g : stem.value.grad()) g_both += std::abs(g);
  EXPECT_GT(g_both, 0.0);
}

TEST(Model, SingleModalityLeavesOtherParamsUntouched) {
  ModelConfig cfg = tiny_config();
  cfg.input_mode = mscd::InputMode::rgb_only;
  MSCNet<double> model(cfg, 42);
  mscd::Rng rng(4);
  ModelInput<double> in = random_input<double>(rng, 32);
  TD label({1, 1, 32, 32}, 0.0);
  model.store.zero_grads();
  mscd::backward(mscd::bce_dice_loss(model.forward(in, false), label));
  for (auto& p : model.store.items()) {
    if (p.name.rfind("nir.", 0) != 0 || !p.trainable()) continue;
    double g = 0;
    if (!p.value.grad().empty())
      for (double v : p.value.grad()) g += std::abs(v);
    EXPECT_EQ(g, 0.0) << p.name;
  }
}

TEST(Model, MissingMasksRejected) {
  MSCNet<double> model(tiny_config(), 42);
  mscd::Rng rng(5);
  ModelInput<double> in = random_input<double>(rng, 32);
  in.mask_t1 = TD();
  EXPECT_THROW(model.forward(in, false), mscd::DataError);
}

TEST(Loss, ClosedForms) {
  TD label = TD({1, 4}, 0.0);
  TD p = TD({1, 4}, 0.5);
  TD bce_only = mscd::bce_dice_loss(p, label, 1.0, 0.0);
  EXPECT_NEAR(bce_only.item(), std::log(2.0), 1e-9);

  TD perfect_p = TD({1, 4}, 1.0);
  TD perfect_y = TD({1, 4}, 1.0);
  EXPECT_LT(mscd::bce_dice_loss(perfect_p, perfect_y).item(), 0.15);

  TD bad_label = TD({1, 4}, 0.25);
  EXPECT_THROW(mscd::bce_dice_loss(p, bad_label), mscd::DataError);
  EXPECT_THROW(mscd::bce_dice_loss(p, TD({1, 5}, 0.0)), mscd::ShapeError);
}

TEST(Counts, ParamsAndFlops) {
  {
    mscd::ParamStore<double> ps;
    mscd::Rng rng(7);
    (void)mscd::make_conv(ps, "c", rng, int64_t(4), int64_t(8), 3, 1, 1);
    EXPECT_EQ(ps.trainable_count(), 296);
  }
  MSCNet<double> a(tiny_config(), 1);
  MSCNet<double> b(tiny_config(), 999);
  EXPECT_EQ(mscd::count_params(a), mscd::count_params(b));
  EXPECT_GT(mscd::count_flops(a, 32), 0);
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "model_test.msck").string();
  MSCNet<float> model(tiny_config(), 7);
  mscd::save_model(path, model);
  MSCNet<float> back = mscd::load_model<float>(path);
  EXPECT_EQ(back.cfg.input_size, 32);
  EXPECT_EQ(back.cfg.widths, model.cfg.widths);
  for (size_t i = 0; i < model.store.items().size(); ++i) {
    const auto& pa = model.store.items()[i];
    const auto& pb = back.store.items()[i];
    ASSERT_EQ(pa.name, pb.name);
    EXPECT_EQ(pa.value.data(), pb.value.data());
  }
  std::remove(path.c_str());
}

TEST(Config, JsonRoundTripAndValidation) {
  ModelConfig cfg = tiny_config();
  cfg.use_bdca = false;
  cfg.input_mode = mscd::InputMode::nir_only;
  nlohmann::json j = cfg;
  ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(back.use_bdca, false);
  EXPECT_EQ(back.input_mode, mscd::InputMode::nir_only);

  ModelConfig bad = cfg;
  bad.input_size = 48;
  EXPECT_THROW(bad.validate(), mscd::ConfigError);
}

TEST(Model, ToggleVariantsRun) {
  mscd::Rng rng(9);
  for (int variant = 0; variant < 5; ++variant) {
    ModelConfig cfg = tiny_config();
    if (variant == 1) cfg.use_ncem = false;
    if (variant == 2) cfg.use_caim = false;
    if (variant == 3) cfg.use_smrm = false;
    if (variant == 4) cfg.use_masks = false;
    MSCNet<double> model(cfg, 42);
    ModelInput<double> in = random_input<double>(rng, 32);
    TD y = model.forward(in, false);
    EXPECT_EQ(y.shape(), (mscd::Shape{1, 1, 32, 32})) << variant;
  }
}
