#pragma once

#include <cmath>
#include <cstdio>
#include <string>

#include "mscd/io.hpp"
#include "mscd/tensor.hpp"

namespace mscd {

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

template <typename T>
ConfusionCounts confusion(const Tensor<T>& pred_bin, const Tensor<T>& label) {
  if (pred_bin.shape() != label.shape())
    throw DataError("confusion: shape mismatch " + shape_str(pred_bin.shape()) + " vs " +
                    shape_str(label.shape()));
  ConfusionCounts c;
  const auto& p = pred_bin.data();
  const auto& y = label.data();
  for (size_t i = 0; i < p.size(); ++i) {
    if ((p[i] != T(0) && p[i] != T(1)) || (y[i] != T(0) && y[i] != T(1)))
      throw DataError("confusion: inputs must be binary");
    if (p[i] == T(1))
      y[i] == T(1) ? ++c.tp : ++c.fp;
    else
      y[i] == T(1) ? ++c.fn : ++c.tn;
  }
  return c;
}

struct MetricReport {
  double precision = 0, recall = 0, f1 = 0, iou = 0, kappa = 0;  // in [0,1] (kappa [-1,1])
};

// Zero-denominator conventions: a metric whose denominator vanishes is 1
// when prediction and label agree on emptiness and 0 otherwise; kappa with
// p_e = 1 is 1 iff p_o = 1.
inline MetricReport compute_metrics(const ConfusionCounts& c) {
  MetricReport r;
  const double tp = double(c.tp), fp = double(c.fp), fn = double(c.fn), tn = double(c.tn);
  const double total = tp + fp + fn + tn;
  const bool pred_empty = c.tp + c.fp == 0;
  const bool label_empty = c.tp + c.fn == 0;
  r.precision = pred_empty ? (label_empty ? 1.0 : 0.0) : tp / (tp + fp);
  r.recall = label_empty ? (pred_empty ? 1.0 : 0.0) : tp / (tp + fn);
  r.f1 = (r.precision + r.recall) == 0.0
             ? 0.0
             : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  if (pred_empty && label_empty) r.f1 = 1.0;
  r.iou = (c.tp + c.fp + c.fn) == 0 ? 1.0 : tp / (tp + fp + fn);
  if (total == 0) {
    r.kappa = 1.0;
    return r;
  }
  const double po = (tp + tn) / total;
  const double pe = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (total * total);
  r.kappa = pe >= 1.0 ? (po >= 1.0 ? 1.0 : 0.0) : (po - pe) / (1.0 - pe);
  return r;
}

// Percentages to 2 decimals, matching the usual table convention.
inline std::string metrics_json(const MetricReport& r, int64_t samples) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "{\"precision\":%.2f,\"recall\":%.2f,\"f1\":%.2f,\"iou\":%.2f,"
                "\"kappa\":%.2f,\"samples\":%lld}",
                100.0 * r.precision, 100.0 * r.recall, 100.0 * r.f1, 100.0 * r.iou,
                100.0 * r.kappa, static_cast<long long>(samples));
  return buf;
}

// TP white, FP red, TN black, FN blue.
template <typename T>
RgbImage render_diagnostic(const Tensor<T>& pred_bin, const Tensor<T>& label) {
  if (pred_bin.shape() != label.shape()) throw DataError("render_diagnostic: shape mismatch");
  if (pred_bin.rank() < 2) throw DataError("render_diagnostic: expected a 2D map");
  RgbImage img;
  img.height = pred_bin.dim(-2);
  img.width = pred_bin.dim(-1);
  if (img.height * img.width != pred_bin.numel())
    throw DataError("render_diagnostic: expected a single-channel map");
  img.pixels.resize(size_t(img.height * img.width * 3));
  const auto& p = pred_bin.data();
  const auto& y = label.data();
  for (size_t i = 0; i < p.size(); ++i) {
    uint8_t r = 0, g = 0, b = 0;
    const bool pp = p[i] == T(1), yy = y[i] == T(1);
    if (pp && yy) r = g = b = 255;        // TP
    else if (pp && !yy) r = 255;          // FP
    else if (!pp && yy) b = 255;          // FN
    img.pixels[3 * i] = r;
    img.pixels[3 * i + 1] = g;
    img.pixels[3 * i + 2] = b;
  }
  return img;
}

}  // namespace mscd
