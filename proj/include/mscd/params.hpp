#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mscd/nn.hpp"
#include "mscd/rng.hpp"
#include "mscd/tensor.hpp"

namespace mscd {

enum class ParamRole { weight, bias, bn_gamma, bn_beta, bn_running_mean, bn_running_var, gate };

inline bool role_trainable(ParamRole r) {
  return r != ParamRole::bn_running_mean && r != ParamRole::bn_running_var;
}

template <typename T>
struct Parameter {
  std::string name;
  ParamRole role;
  Tensor<T> value;

  bool trainable() const { return role_trainable(role); }
};

// Insertion-ordered registry; names are unique within a model and checkpoint
// entries follow insertion order so serialization is deterministic.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, ParamRole role, Shape shape, std::vector<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Tensor<T> t = Tensor<T>::from_data(std::move(shape), std::move(init));
    t.set_requires_grad(role_trainable(role));
    index_[name] = items_.size();
    items_.push_back({name, role, t});
    return t;
  }

  Tensor<T> add_fanin_uniform(const std::string& name, ParamRole role, Shape shape,
                              int64_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(std::max<int64_t>(fan_in, 1)));
    std::vector<T> init(size_t(shape_numel(shape)));
    for (auto& v : init) v = T(rng.uniform(-bound, bound));
    return add(name, role, std::move(shape), std::move(init));
  }

  Tensor<T> add_const(const std::string& name, ParamRole role, Shape shape, T value) {
    return add(name, role, std::move(shape), std::vector<T>(size_t(shape_numel(shape)), value));
  }

  const std::vector<Parameter<T>>& items() const { return items_; }
  std::vector<Parameter<T>>& items() { return items_; }

  Parameter<T>& find(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return items_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& p : items_)
      if (p.trainable()) n += p.value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : items_) p.value.zero_grad();
  }

 private:
  std::vector<Parameter<T>> items_;
  std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int64_t stride = 1, padding = 0, groups = 1;
  bool has_bias = true;

  Tensor<T> forward(const Tensor<T>& x) const {
    return has_bias ? conv2d(x, w, &b, stride, padding, groups)
                    : conv2d<T>(x, w, nullptr, stride, padding, groups);
  }
};

template <typename T>
Conv2dLayer<T> make_conv(ParamStore<T>& ps, const std::string& prefix, Rng& rng, int64_t cin,
                         int64_t cout, int64_t k, int64_t stride, int64_t padding,
                         int64_t groups = 1, bool bias = true) {
  Conv2dLayer<T> layer;
  const int64_t fan_in = (cin / groups) * k * k;
  layer.w = ps.add_fanin_uniform(prefix + ".w", ParamRole::weight, {cout, cin / groups, k, k},
                                 fan_in, rng);
  layer.has_bias = bias;
  if (bias)
    layer.b = ps.add_fanin_uniform(prefix + ".b", ParamRole::bias, {cout}, fan_in, rng);
  layer.stride = stride;
  layer.padding = padding;
  layer.groups = groups;
  return layer;
}

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta, running_mean, running_var;

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }
};

template <typename T>
BatchNorm2d<T> make_bn(ParamStore<T>& ps, const std::string& prefix, int64_t c) {
  BatchNorm2d<T> bn;
  bn.gamma = ps.add_const(prefix + ".gamma", ParamRole::bn_gamma, {c}, T(1));
  bn.beta = ps.add_const(prefix + ".beta", ParamRole::bn_beta, {c}, T(0));
  bn.running_mean = ps.add_const(prefix + ".running_mean", ParamRole::bn_running_mean, {c}, T(0));
  bn.running_var = ps.add_const(prefix + ".running_var", ParamRole::bn_running_var, {c}, T(1));
  return bn;
}

// conv (no bias) + BN + ReLU
template <typename T>
struct ConvBnRelu {
  Conv2dLayer<T> conv;
  BatchNorm2d<T> bn;

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return relu(bn.forward(conv.forward(x), training));
  }
};

template <typename T>
ConvBnRelu<T> make_conv_bn_relu(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                                int64_t cin, int64_t cout, int64_t k, int64_t stride,
                                int64_t padding, int64_t groups = 1) {
  ConvBnRelu<T> l;
  l.conv = make_conv(ps, prefix + ".conv", rng, cin, cout, k, stride, padding, groups, false);
  l.bn = make_bn(ps, prefix + ".bn", cout);
  return l;
}

// 3x3 depthwise + BN + ReLU, then 1x1 pointwise + BN + ReLU
template <typename T>
struct DsConvBnRelu {
  ConvBnRelu<T> depthwise;
  ConvBnRelu<T> pointwise;

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return pointwise.forward(depthwise.forward(x, training), training);
  }
};

template <typename T>
DsConvBnRelu<T> make_dsconv(ParamStore<T>& ps, const std::string& prefix, Rng& rng,
                            int64_t cin, int64_t cout, int64_t stride = 1) {
  DsConvBnRelu<T> l;
  l.depthwise = make_conv_bn_relu(ps, prefix + ".dw", rng, cin, cin, 3, stride, 1, cin);
  l.pointwise = make_conv_bn_relu(ps, prefix + ".pw", rng, cin, cout, 1, 1, 0);
  return l;
}

// Affine layer on the last axis of [N, L, Cin] token tensors.
template <typename T>
struct Linear {
  Tensor<T> w, b;
  bool has_bias = true;

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, w);
    return has_bias ? add(y, b) : y;
  }
};

template <typename T>
Linear<T> make_linear(ParamStore<T>& ps, const std::string& prefix, Rng& rng, int64_t cin,
                      int64_t cout, bool bias = true) {
  Linear<T> l;
  l.w = ps.add_fanin_uniform(prefix + ".w", ParamRole::weight, {cin, cout}, cin, rng);
  l.has_bias = bias;
  if (bias) l.b = ps.add_fanin_uniform(prefix + ".b", ParamRole::bias, {cout}, cin, rng);
  return l;
}

// Raw scalar gate mapped through sigmoid into (0,1).
template <typename T>
Tensor<T> make_gate(ParamStore<T>& ps, const std::string& name, T raw = T(0)) {
  return ps.add(name, ParamRole::gate, {1}, {raw});
}

}  // namespace mscd
