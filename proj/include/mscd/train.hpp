#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscd/data_synth.hpp"
#include "mscd/metrics.hpp"
#include "mscd/model.hpp"
#include "mscd/optim.hpp"

namespace mscd {

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

// The model config rides along inside the checkpoint as a u8 JSON entry so a
// saved model is self-describing.
inline constexpr const char* kConfigEntry = "__config__";

template <typename T>
void save_model(const std::string& path, const MSCNet<T>& model) {
  NamedRawTensors entries;
  const std::string cfg = nlohmann::json(model.cfg).dump();
  RawTensor cfg_raw;
  cfg_raw.dtype = MmctDtype::u8;
  cfg_raw.shape = {int64_t(cfg.size())};
  cfg_raw.bytes.assign(cfg.begin(), cfg.end());
  entries.emplace_back(kConfigEntry, std::move(cfg_raw));
  for (const auto& p : model.store.items()) entries.emplace_back(p.name, to_raw(p.value));
  write_checkpoint(path, entries);
}

template <typename T>
void load_weights(MSCNet<T>& model, const NamedRawTensors& entries) {
  size_t applied = 0;
  for (const auto& [name, raw] : entries) {
    if (name == kConfigEntry) continue;
    if (!model.store.contains(name)) throw DataError("checkpoint entry has no target: " + name);
    Parameter<T>& p = model.store.find(name);
    Tensor<T> loaded = from_raw<T>(raw, name);
    if (loaded.shape() != p.value.shape())
      throw DataError("checkpoint shape mismatch for " + name);
    std::copy(loaded.data().begin(), loaded.data().end(), p.value.mutable_data().begin());
    ++applied;
  }
  if (applied != model.store.items().size())
    throw DataError("checkpoint is missing parameters: has " + std::to_string(applied) +
                    ", model needs " + std::to_string(model.store.items().size()));
}

template <typename T>
MSCNet<T> load_model(const std::string& path) {
  NamedRawTensors entries = read_checkpoint(path);
  const RawTensor* cfg_raw = nullptr;
  for (const auto& [name, raw] : entries)
    if (name == kConfigEntry) cfg_raw = &raw;
  if (!cfg_raw) throw DataError("checkpoint has no embedded config: " + path);
  ModelConfig cfg;
  try {
    const std::string text(cfg_raw->bytes.begin(), cfg_raw->bytes.end());
    cfg = nlohmann::json::parse(text).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed config in checkpoint " + path + ": " + e.what());
  }
  MSCNet<T> model(cfg, 0);
  load_weights(model, entries);
  return model;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> flip_w(const Tensor<T>& t) {
  const int64_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  std::vector<T> out(size_t(t.numel()));
  const auto& src = t.data();
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        out[size_t((c * H + y) * W + x)] = src[size_t((c * H + y) * W + (W - 1 - x))];
  return Tensor<T>::from_data(t.shape(), std::move(out));
}

template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& parts) {
  Shape shape = parts[0]->shape();
  shape.insert(shape.begin(), int64_t(parts.size()));
  std::vector<T> data;
  data.reserve(size_t(shape_numel(shape)));
  for (const Tensor<T>* p : parts) {
    if (p->shape() != parts[0]->shape()) throw ShapeError("stack: ragged batch");
    data.insert(data.end(), p->data().begin(), p->data().end());
  }
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

}  // namespace detail

template <typename T>
struct Batch {
  ModelInput<T> input;
  Tensor<T> label;  // [N,1,H,W]
};

template <typename T>
Batch<T> make_batch(const std::vector<const BiTemporalSample<T>*>& samples) {
  auto gather = [&](auto member) {
    std::vector<const Tensor<T>*> parts;
    for (const auto* s : samples) parts.push_back(&(s->*member));
    return detail::stack(parts);
  };
  Batch<T> b;
  b.input.rgb_t1 = gather(&BiTemporalSample<T>::rgb_t1);
  b.input.rgb_t2 = gather(&BiTemporalSample<T>::rgb_t2);
  b.input.nir_t1 = gather(&BiTemporalSample<T>::nir_t1);
  b.input.nir_t2 = gather(&BiTemporalSample<T>::nir_t2);
  b.input.mask_t1 = gather(&BiTemporalSample<T>::mask_t1);
  b.input.mask_t2 = gather(&BiTemporalSample<T>::mask_t2);
  b.label = gather(&BiTemporalSample<T>::label);
  return b;
}

template <typename T>
BiTemporalSample<T> hflip_sample(const BiTemporalSample<T>& s) {
  BiTemporalSample<T> out;
  out.id = s.id;
  out.split = s.split;
  out.rgb_t1 = detail::flip_w(s.rgb_t1);
  out.rgb_t2 = detail::flip_w(s.rgb_t2);
  out.nir_t1 = detail::flip_w(s.nir_t1);
  out.nir_t2 = detail::flip_w(s.nir_t2);
  out.label = detail::flip_w(s.label);
  out.mask_t1 = detail::flip_w(s.mask_t1);
  out.mask_t2 = detail::flip_w(s.mask_t2);
  return out;
}

template <typename T>
std::vector<BiTemporalSample<T>> load_split(const std::vector<ManifestEntry>& entries,
                                            const std::string& split) {
  std::vector<BiTemporalSample<T>> out;
  for (const auto& e : entries)
    if (split.empty() || e.split == split) out.push_back(load_sample<T>(e));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <typename T>
ConfusionCounts evaluate_model(MSCNet<T>& model, const std::vector<BiTemporalSample<T>>& samples) {
  NoGradGuard ng;
  ConfusionCounts total;
  for (const auto& s : samples) {
    Batch<T> b = make_batch<T>({&s});
    Tensor<T> prob = model.forward(b.input, false);
    std::vector<T> pred(size_t(prob.numel()));
    for (int64_t i = 0; i < prob.numel(); ++i)
      pred[size_t(i)] = prob.at(i) >= T(model.cfg.threshold) ? T(1) : T(0);
    total += confusion(Tensor<T>::from_data(prob.shape(), std::move(pred)), b.label);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string ckpt_path = "model.msck";
  uint64_t seed = 0;
  std::ostream* log = nullptr;  // one line per iteration when set
  int64_t log_every = 1;
};

struct TrainResult {
  double best_f1 = 0;
  int64_t best_iter = -1;
  double final_loss = 0;
  int64_t iters = 0;
};

template <typename T>
TrainResult train_model(MSCNet<T>& model, const std::vector<ManifestEntry>& entries,
                        const TrainOptions& opt) {
  const ModelConfig& cfg = model.cfg;
  std::vector<BiTemporalSample<T>> train_set = load_split<T>(entries, "train");
  std::vector<BiTemporalSample<T>> val_set = load_split<T>(entries, "val");
  if (train_set.empty()) throw DataError("train: no training samples in manifest");

  AdamState<T> state(model.store);
  Rng order_rng = Rng::derive(opt.seed, 0x51);
  Rng aug_rng = Rng::derive(opt.seed, 0xa9);
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // trigger reshuffle on first use

  TrainResult result;
  auto log_line = [&](const std::string& s) {
    if (opt.log) (*opt.log) << s << "\n";
  };

  auto run_val = [&](int64_t iter) {
    if (val_set.empty()) return;
    const MetricReport r = compute_metrics(evaluate_model(model, val_set));
    char buf[96];
    std::snprintf(buf, sizeof(buf), "iter %lld val_F1 %.4f", static_cast<long long>(iter), r.f1);
    log_line(buf);
    if (r.f1 > result.best_f1 || result.best_iter < 0) {
      result.best_f1 = r.f1;
      result.best_iter = iter;
      save_model(opt.ckpt_path, model);
    }
  };

  for (int64_t iter = 1; iter <= cfg.total_iters; ++iter) {
    std::vector<BiTemporalSample<T>> flipped;
    flipped.reserve(size_t(cfg.batch_size));
    std::vector<const BiTemporalSample<T>*> picks;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        for (size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[size_t(order_rng.below(i))]);
        cursor = 0;
      }
      const BiTemporalSample<T>* s = &train_set[order[cursor++]];
      if (cfg.hflip_augment && aug_rng.uniform() < 0.5) {
        flipped.push_back(hflip_sample(*s));
        s = &flipped.back();
      }
      picks.push_back(s);
    }

    Batch<T> batch = make_batch(picks);
    model.store.zero_grads();
    Tensor<T> prob = model.forward(batch.input, true);
    Tensor<T> loss = bce_dice_loss(prob, batch.label, T(cfg.bce_weight), T(cfg.dice_weight));
    const double loss_v = double(loss.item());
    if (!std::isfinite(loss_v))
      throw NumericError("non-finite loss at iteration " + std::to_string(iter));
    backward(loss);
    const double lr =
        lr_schedule(iter, cfg.total_iters, cfg.warmup_iters, cfg.base_lr, cfg.poly_power);
    adam_step(model.store, state, lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay);

    result.final_loss = loss_v;
    result.iters = iter;
    if (opt.log && (iter % std::max<int64_t>(opt.log_every, 1) == 0 || iter == cfg.total_iters)) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "iter %lld lr %.6g loss %.6g",
                    static_cast<long long>(iter), lr, loss_v);
      log_line(buf);
    }
    if (iter % cfg.eval_interval == 0 || iter == cfg.total_iters) run_val(iter);
  }
  if (result.best_iter < 0) save_model(opt.ckpt_path, model);
  return result;
}

}  // namespace mscd
