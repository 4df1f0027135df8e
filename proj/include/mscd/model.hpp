#pragma once

#include <array>
#include <string>

#include <json.hpp>

#include "mscd/backbone.hpp"
#include "mscd/caim.hpp"
#include "mscd/ncem.hpp"
#include "mscd/smrm.hpp"

namespace mscd {

enum class InputMode { rgb_only, nir_only, rgb_nir };

inline std::string to_string(InputMode m) {
  switch (m) {
    case InputMode::rgb_only: return "rgb";
    case InputMode::nir_only: return "nir";
    case InputMode::rgb_nir: return "rgbnir";
  }
  return "rgbnir";
}

inline InputMode input_mode_from_string(const std::string& s) {
  if (s == "rgb" || s == "rgb_only") return InputMode::rgb_only;
  if (s == "nir" || s == "nir_only") return InputMode::nir_only;
  if (s == "rgbnir" || s == "rgb_nir") return InputMode::rgb_nir;
  throw ConfigError("unknown input mode: " + s);
}

struct ModelConfig {
  std::array<int64_t, 4> widths{16, 24, 48, 64};
  int64_t input_size = 256;  // square, divisible by 32
  int64_t awp_grid = 8;
  bool use_ncem = true;
  bool use_caim = true;
  bool use_smrm = true;
  bool use_masks = true;
  bool use_bdca = true;
  bool use_variance_weight = true;
  bool use_ccaf = true;
  InputMode input_mode = InputMode::rgb_nir;
  bool nir_replicate3 = false;
  double threshold = 0.5;
  // training
  double base_lr = 5e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double poly_power = 0.9;
  int64_t batch_size = 16;
  int64_t total_iters = 40000;
  int64_t warmup_iters = 200;
  int64_t eval_interval = 200;
  bool hflip_augment = false;
  double bce_weight = 1.0;
  double dice_weight = 1.0;

  void validate() const {
    for (int64_t w : widths)
      if (w <= 0) throw ConfigError("channel widths must be positive");
    if (input_size < 32 || input_size % 32 != 0)
      throw ConfigError("input_size must be a positive multiple of 32");
    if (awp_grid < 1) throw ConfigError("awp_grid must be >= 1");
    if (total_iters < 1 || warmup_iters < 0 || warmup_iters >= total_iters)
      throw ConfigError("invalid iteration schedule");
  }

  int64_t level_size(size_t level) const { return input_size >> (2 + level); }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"widths", c.widths},
                     {"input_size", c.input_size},
                     {"awp_grid", c.awp_grid},
                     {"use_ncem", c.use_ncem},
                     {"use_caim", c.use_caim},
                     {"use_smrm", c.use_smrm},
                     {"use_masks", c.use_masks},
                     {"use_bdca", c.use_bdca},
                     {"use_variance_weight", c.use_variance_weight},
                     {"use_ccaf", c.use_ccaf},
                     {"input_mode", to_string(c.input_mode)},
                     {"nir_replicate3", c.nir_replicate3},
                     {"threshold", c.threshold},
                     {"base_lr", c.base_lr},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"poly_power", c.poly_power},
                     {"batch_size", c.batch_size},
                     {"total_iters", c.total_iters},
                     {"warmup_iters", c.warmup_iters},
                     {"eval_interval", c.eval_interval},
                     {"hflip_augment", c.hflip_augment},
                     {"bce_weight", c.bce_weight},
                     {"dice_weight", c.dice_weight}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.widths = j.value("widths", d.widths);
  c.input_size = j.value("input_size", d.input_size);
  c.awp_grid = j.value("awp_grid", d.awp_grid);
  c.use_ncem = j.value("use_ncem", d.use_ncem);
  c.use_caim = j.value("use_caim", d.use_caim);
  c.use_smrm = j.value("use_smrm", d.use_smrm);
  c.use_masks = j.value("use_masks", d.use_masks);
  c.use_bdca = j.value("use_bdca", d.use_bdca);
  c.use_variance_weight = j.value("use_variance_weight", d.use_variance_weight);
  c.use_ccaf = j.value("use_ccaf", d.use_ccaf);
  c.input_mode = input_mode_from_string(j.value("input_mode", std::string("rgbnir")));
  c.nir_replicate3 = j.value("nir_replicate3", d.nir_replicate3);
  c.threshold = j.value("threshold", d.threshold);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.poly_power = j.value("poly_power", d.poly_power);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.total_iters = j.value("total_iters", d.total_iters);
  c.warmup_iters = j.value("warmup_iters", d.warmup_iters);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.hflip_augment = j.value("hflip_augment", d.hflip_augment);
  c.bce_weight = j.value("bce_weight", d.bce_weight);
  c.dice_weight = j.value("dice_weight", d.dice_weight);
}

// ---------------------------------------------------------------------------
// MSCNet
// ---------------------------------------------------------------------------

// One batch of model inputs; unused modalities may stay empty.
template <typename T>
struct ModelInput {
  Tensor<T> rgb_t1, rgb_t2;    // [N,3,H,W]
  Tensor<T> nir_t1, nir_t2;    // [N,1,H,W] (or [N,3,H,W] with nir_replicate3)
  Tensor<T> mask_t1, mask_t2;  // [N,1,H,W], optional when masks are off
};

template <typename T>
struct MSCNet {
  ModelConfig cfg;
  ParamStore<T> store;
  BackboneBranch<T> backbone_rgb, backbone_nir;
  std::array<NcemLevel<T>, 4> ncem_rgb, ncem_nir;
  std::array<CaimLevel<T>, 4> caim;
  Smrm<T> smrm;
  Conv2dLayer<T> head;

  MSCNet(const ModelConfig& config, uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    const int64_t nir_ch = cfg.nir_replicate3 ? 3 : 1;
    backbone_rgb = make_backbone(store, "rgb.backbone", rng, 3, cfg.widths);
    backbone_nir = make_backbone(store, "nir.backbone", rng, nir_ch, cfg.widths);
    ncem_rgb = make_ncem(store, "rgb.ncem", rng, cfg.widths);
    ncem_nir = make_ncem(store, "nir.ncem", rng, cfg.widths);
    for (size_t i = 0; i < 4; ++i) {
      const int64_t level = cfg.level_size(i);
      const int64_t grid = std::min<int64_t>(cfg.awp_grid, level);
      caim[i] = make_caim_level(store, "caim.level" + std::to_string(i + 1), rng,
                                cfg.widths[i], grid);
    }
    smrm = make_smrm(store, "smrm", rng, cfg.widths);
    head = make_conv(store, "head", rng, cfg.widths[0], int64_t(1), 1, 1, 0);
  }

  // Enhanced pyramid for one (modality, time) input; weight sharing across
  // time falls out of reusing the same branch parameters.
  FeaturePyramid<T> encode(const Tensor<T>& image, Modality m, bool training) {
    auto& branch = m == Modality::RGB ? backbone_rgb : backbone_nir;
    auto& enh = m == Modality::RGB ? ncem_rgb : ncem_nir;
    FeaturePyramid<T> pyr = branch.forward(image, training);
    return cfg.use_ncem ? ncem_pyramid(pyr, enh, training) : pyr;
  }

  Tensor<T> forward(const ModelInput<T>& in, bool training) {
    const bool want_rgb = cfg.input_mode != InputMode::nir_only;
    const bool want_nir = cfg.input_mode != InputMode::rgb_only;
    FeaturePyramid<T> d_rgb, d_nir;
    int64_t H = 0, W = 0;
    if (want_rgb) {
      H = in.rgb_t1.dim(2);
      W = in.rgb_t1.dim(3);
      d_rgb = diff_features(encode(in.rgb_t1, Modality::RGB, training),
                            encode(in.rgb_t2, Modality::RGB, training));
    }
    if (want_nir) {
      H = in.nir_t1.dim(2);
      W = in.nir_t1.dim(3);
      d_nir = diff_features(encode(in.nir_t1, Modality::NIR, training),
                            encode(in.nir_t2, Modality::NIR, training));
    }
    if (H != cfg.input_size || W != cfg.input_size)
      throw ShapeError("forward: input size " + std::to_string(H) + "x" + std::to_string(W) +
                       " does not match configured size " + std::to_string(cfg.input_size));
    // single-modality routing: the present modality's differences feed both
    // fusion inputs so the architecture is unchanged
    if (!want_nir) d_nir = d_rgb;
    if (!want_rgb) d_rgb = d_nir;

    const bool ccaf = cfg.use_caim && cfg.use_ccaf;
    const bool attn = cfg.use_caim && cfg.use_bdca;
    FeaturePyramid<T> fused;
    for (size_t i = 0; i < 4; ++i)
      fused[i] = caim_fuse(d_rgb[i], d_nir[i], caim[i], ccaf, attn, cfg.use_variance_weight);

    Tensor<T> m1;
    if (cfg.use_smrm) {
      const int64_t N = fused[0].dim(0);
      Tensor<T> mask_t1 = in.mask_t1;
      Tensor<T> mask_t2 = in.mask_t2;
      if (cfg.use_masks) {
        if (mask_t1.numel() == 0 || mask_t2.numel() == 0)
          throw DataError("forward: saliency masks required when use_masks is on");
      } else {
        mask_t1 = Tensor<T>({N, 1, H, W}, T(0));
        mask_t2 = Tensor<T>({N, 1, H, W}, T(0));
      }
      m1 = smrm_decode(fused, d_rgb, d_nir, mask_t1, mask_t2, smrm, training);
    } else {
      m1 = fused[0];
    }
    return sigmoid(resize_bilinear(head.forward(m1), H, W));
  }
};

// ---------------------------------------------------------------------------
// Loss: pixel-mean BCE + Dice
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bce_dice_loss(const Tensor<T>& prob, const Tensor<T>& label, T bce_weight = T(1),
                        T dice_weight = T(1)) {
  if (prob.shape() != label.shape()) throw ShapeError("loss: shape mismatch");
  for (T v : label.data())
    if (v != T(0) && v != T(1)) throw DataError("loss: label must be binary");
  Tensor<T> p = clamp(prob, T(1e-7), T(1) - T(1e-7));
  Tensor<T> one = Tensor<T>::scalar(T(1));
  Tensor<T> bce = neg(mean(add(mul(label, log_t(p)), mul(sub(one, label), log_t(sub(one, p))))));
  Tensor<T> inter = sum(mul(p, label));
  Tensor<T> denom = add(sum(p), sum(label));
  Tensor<T> dice = sub(one, div(add_scalar(scale(inter, T(2)), T(1)), add_scalar(denom, T(1))));
  return add(scale(bce, bce_weight), scale(dice, dice_weight));
}

// ---------------------------------------------------------------------------
// Parameter / FLOP accounting
// ---------------------------------------------------------------------------

template <typename T>
int64_t count_params(const MSCNet<T>& model) {
  return model.store.trainable_count();
}

// MAC count x2 over one forward pass at the given square input size.
template <typename T>
int64_t count_flops(MSCNet<T>& model, int64_t input_size) {
  NoGradGuard no_grad;
  const int64_t nir_ch = model.cfg.nir_replicate3 ? 3 : 1;
  ModelInput<T> in;
  in.rgb_t1 = Tensor<T>({1, 3, input_size, input_size}, T(0));
  in.rgb_t2 = Tensor<T>({1, 3, input_size, input_size}, T(0));
  in.nir_t1 = Tensor<T>({1, nir_ch, input_size, input_size}, T(0));
  in.nir_t2 = Tensor<T>({1, nir_ch, input_size, input_size}, T(0));
  in.mask_t1 = Tensor<T>({1, 1, input_size, input_size}, T(0));
  in.mask_t2 = Tensor<T>({1, 1, input_size, input_size}, T(0));
  mac_counter() = 0;
  (void)model.forward(in, false);
  return 2 * mac_counter();
}

}  // namespace mscd
