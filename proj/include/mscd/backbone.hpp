#pragma once

#include <array>
#include <string>

#include "mscd/params.hpp"

namespace mscd {

// 4-level pyramid at strides /4, /8, /16, /32 (levels 1..4).
template <typename T>
using FeaturePyramid = std::array<Tensor<T>, 4>;

enum class Modality { RGB, NIR };
enum class TimePhase { t1, t2 };

struct BranchTag {
  Modality modality;
  TimePhase time;
};

// Compact siamese encoder for one modality: stem 3x3 stride-2 conv-BN-ReLU,
// then four stages of (3x3 stride-2 conv-BN-ReLU, 3x3 depthwise-separable
// conv-BN-ReLU), with taps after each stage. The same parameters serve both
// temporal phases of the modality.
template <typename T>
struct BackboneBranch {
  int64_t in_channels = 3;
  int64_t stem_width = 8;
  std::array<int64_t, 4> widths{};
  ConvBnRelu<T> stem;
  struct Stage {
    ConvBnRelu<T> down;
    DsConvBnRelu<T> refine;
  };
  std::array<Stage, 4> stages;

  FeaturePyramid<T> forward(const Tensor<T>& image, bool training) {
    if (image.rank() != 4) throw ShapeError("backbone: expected NCHW input");
    if (image.dim(1) != in_channels)
      throw ShapeError("backbone: input channels " + std::to_string(image.dim(1)) +
                       " do not match modality channels " + std::to_string(in_channels));
    if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
      throw ShapeError("backbone: spatial size " + shape_str(image.shape()) +
                       " not divisible by 32");
    FeaturePyramid<T> pyr;
    Tensor<T> x = stem.forward(image, training);
    for (size_t i = 0; i < 4; ++i) {
      x = stages[i].down.forward(x, training);
      x = stages[i].refine.forward(x, training);
      pyr[i] = x;
    }
    return pyr;
  }
};

template <typename T>
BackboneBranch<T> make_backbone(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                                int64_t in_channels, const std::array<int64_t, 4>& widths) {
  for (int64_t w : widths)
    if (w <= 0) throw ConfigError("backbone widths must be positive");
  BackboneBranch<T> b;
  b.in_channels = in_channels;
  b.widths = widths;
  b.stem_width = std::max<int64_t>(widths[0] / 2, 4);
  b.stem = make_conv_bn_relu(ps, prefix + ".stem", rng, in_channels, b.stem_width, 3, 2, 1);
  int64_t cin = b.stem_width;
  for (size_t i = 0; i < 4; ++i) {
    const std::string sp = prefix + ".stage" + std::to_string(i + 1);
    b.stages[i].down = make_conv_bn_relu(ps, sp + ".down", rng, cin, widths[i], 3, 2, 1);
    b.stages[i].refine = make_dsconv(ps, sp + ".refine", rng, widths[i], widths[i]);
    cin = widths[i];
  }
  return b;
}

}  // namespace mscd
