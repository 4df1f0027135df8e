#pragma once

#include <cmath>
#include <vector>

#include "mscd/params.hpp"

namespace mscd {

// Linear warmup to base over [0, warmup), then polynomial decay to 0 at
// `total`.
inline double lr_schedule(int64_t iter, int64_t total, int64_t warmup, double base,
                          double power = 0.9) {
  if (iter < 0 || iter > total) throw UsageError("lr_schedule: iteration out of range");
  if (iter < warmup) return base * double(iter) / double(warmup);
  return base * std::pow(1.0 - double(iter - warmup) / double(total - warmup), power);
}

// Adam with decoupled weight decay. Moments live in insertion order next to
// the store's parameters; BN running statistics are never touched.
template <typename T>
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // one slot per store item (empty if frozen)

  explicit AdamState(const ParamStore<T>& store) {
    m.resize(store.items().size());
    v.resize(store.items().size());
    for (size_t i = 0; i < store.items().size(); ++i)
      if (store.items()[i].trainable()) {
        m[i].assign(size_t(store.items()[i].value.numel()), T(0));
        v[i].assign(size_t(store.items()[i].value.numel()), T(0));
      }
  }
};

template <typename T>
void adam_step(ParamStore<T>& store, AdamState<T>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.99, double eps = 1e-8, double weight_decay = 1e-4) {
  state.step++;
  const double bc1 = 1.0 - std::pow(beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(beta2, double(state.step));
  for (size_t i = 0; i < store.items().size(); ++i) {
    auto& p = store.items()[i];
    if (!p.trainable()) continue;
    auto& value = p.value.mutable_data();
    const auto& grad = p.value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const T decay = T(1.0 - lr * weight_decay);
    for (size_t k = 0; k < value.size(); ++k) {
      const double g = grad.empty() ? 0.0 : double(grad[k]);
      value[k] *= decay;
      m[k] = T(beta1 * double(m[k]) + (1.0 - beta1) * g);
      v[k] = T(beta2 * double(v[k]) + (1.0 - beta2) * g * g);
      const double mhat = double(m[k]) / bc1;
      const double vhat = double(v[k]) / bc2;
      value[k] -= T(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

}  // namespace mscd
