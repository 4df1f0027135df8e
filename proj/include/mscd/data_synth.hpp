#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscd/io.hpp"
#include "mscd/rng.hpp"
#include "mscd/tensor.hpp"

namespace mscd {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RatioBucket {
  double lo = 0.0, hi = 0.02;  // change-ratio interval (fraction of pixels)
  double proportion = 1.0;     // share of changed images drawn from it
};

struct GenConfig {
  int64_t count = 100;
  int64_t size = 256;
  uint64_t seed = 0;
  // Default distribution leans hard on sub-2% changes.
  std::vector<RatioBucket> buckets{{0.002, 0.02, 0.65}, {0.02, 0.05, 0.25}, {0.05, 0.10, 0.10}};
  double unchanged_fraction = 0.1;
  double camouflage_fraction = 0.0;  // share of changed images hidden in RGB
  double illumination_jitter = 0.15;  // multiplicative amplitude on RGB t2
  double nir_noise = 0.0;  // per-pixel, per-time additive sensor noise on NIR
  double nir_vegetation_lo = 0.60, nir_vegetation_hi = 0.90;
  double nir_building_lo = 0.10, nir_building_hi = 0.30;
  int64_t mask_noise_radius = 0;  // optional dilation/erosion of saliency masks

  void validate() const {
    if (count < 1 || size < 32) throw ConfigError("gen: count/size too small");
    if (unchanged_fraction < 0 || unchanged_fraction >= 1)
      throw ConfigError("gen: unchanged_fraction must be in [0,1)");
    if (nir_noise < 0 || nir_noise > 0.5) throw ConfigError("gen: nir_noise must be in [0,0.5]");
    double total = 0;
    for (const auto& b : buckets) {
      if (b.hi > 0.5) throw ConfigError("gen: change ratio above 0.5 is unsatisfiable");
      if (b.lo <= 0 || b.hi <= b.lo || b.proportion < 0)
        throw ConfigError("gen: malformed ratio bucket");
      total += b.proportion;
    }
    if (total <= 0) throw ConfigError("gen: bucket proportions must sum to > 0");
  }
};

inline void from_json(const nlohmann::json& j, RatioBucket& b) {
  b.lo = j.value("lo", b.lo);
  b.hi = j.at("hi").get<double>();
  b.proportion = j.at("proportion").get<double>();
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  GenConfig d;
  c.count = j.value("count", d.count);
  c.size = j.value("size", d.size);
  if (j.contains("buckets")) c.buckets = j.at("buckets").get<std::vector<RatioBucket>>();
  c.unchanged_fraction = j.value("unchanged_fraction", d.unchanged_fraction);
  c.camouflage_fraction = j.value("camouflage_fraction", d.camouflage_fraction);
  c.illumination_jitter = j.value("illumination_jitter", d.illumination_jitter);
  c.nir_noise = j.value("nir_noise", d.nir_noise);
  c.nir_vegetation_lo = j.value("nir_vegetation_lo", d.nir_vegetation_lo);
  c.nir_vegetation_hi = j.value("nir_vegetation_hi", d.nir_vegetation_hi);
  c.nir_building_lo = j.value("nir_building_lo", d.nir_building_lo);
  c.nir_building_hi = j.value("nir_building_hi", d.nir_building_hi);
  c.mask_noise_radius = j.value("mask_noise_radius", d.mask_noise_radius);
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::string rgb_t1, nir_t1, rgb_t2, nir_t2, label, mask_t1, mask_t2;
  std::string split;  // train | val | test
};

inline std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  const std::string path = dir + "/manifest.jsonl";
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest: " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed manifest line in " + path + ": " + e.what());
    }
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    for (auto [key, field] : {std::pair{"rgb_t1", &e.rgb_t1}, {"nir_t1", &e.nir_t1},
                              {"rgb_t2", &e.rgb_t2}, {"nir_t2", &e.nir_t2},
                              {"label", &e.label}, {"mask_t1", &e.mask_t1},
                              {"mask_t2", &e.mask_t2}})
      *field = dir + "/" + j.at(key).get<std::string>();
    e.split = j.at("split").get<std::string>();
    entries.push_back(std::move(e));
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

// One loaded dataset item; image tensors are [C,H,W] in [0,1], label and
// masks are binary [1,H,W].
template <typename T>
struct BiTemporalSample {
  std::string id;
  std::string split;
  Tensor<T> rgb_t1, rgb_t2;
  Tensor<T> nir_t1, nir_t2;
  Tensor<T> label;
  Tensor<T> mask_t1, mask_t2;
};

namespace detail {

template <typename T>
Tensor<T> gray_to_tensor(const GrayImage& img, bool binarize) {
  std::vector<T> data(size_t(img.width * img.height));
  for (size_t i = 0; i < data.size(); ++i)
    data[i] = binarize ? (img.pixels[i] >= 128 ? T(1) : T(0)) : T(img.pixels[i]) / T(255);
  return Tensor<T>::from_data({1, img.height, img.width}, std::move(data));
}

template <typename T>
Tensor<T> rgb_to_tensor(const RgbImage& img) {
  const size_t plane = size_t(img.width * img.height);
  std::vector<T> data(3 * plane);
  for (size_t i = 0; i < plane; ++i)
    for (size_t c = 0; c < 3; ++c) data[c * plane + i] = T(img.pixels[3 * i + c]) / T(255);
  return Tensor<T>::from_data({3, img.height, img.width}, std::move(data));
}

}  // namespace detail

template <typename T>
BiTemporalSample<T> load_sample(const ManifestEntry& e) {
  BiTemporalSample<T> s;
  s.id = e.id;
  s.split = e.split;
  s.rgb_t1 = detail::rgb_to_tensor<T>(read_ppm(e.rgb_t1));
  s.rgb_t2 = detail::rgb_to_tensor<T>(read_ppm(e.rgb_t2));
  s.nir_t1 = detail::gray_to_tensor<T>(read_pgm(e.nir_t1), false);
  s.nir_t2 = detail::gray_to_tensor<T>(read_pgm(e.nir_t2), false);
  s.label = detail::gray_to_tensor<T>(read_pgm(e.label), true);
  s.mask_t1 = detail::gray_to_tensor<T>(read_pgm(e.mask_t1), true);
  s.mask_t2 = detail::gray_to_tensor<T>(read_pgm(e.mask_t2), true);
  const Shape& ref = s.label.shape();
  for (const Tensor<T>* t : {&s.nir_t1, &s.nir_t2, &s.mask_t1, &s.mask_t2})
    if (t->shape() != ref) throw DataError("size mismatch across files of sample " + e.id);
  if (s.rgb_t1.dim(1) != ref[1] || s.rgb_t1.dim(2) != ref[2] ||
      s.rgb_t2.dim(1) != ref[1] || s.rgb_t2.dim(2) != ref[2])
    throw DataError("size mismatch across files of sample " + e.id);
  return s;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

namespace detail {

// Low-frequency value noise: coarse random grid, bilinearly interpolated.
inline std::vector<double> smooth_field(Rng& rng, int64_t size, int64_t cell, double lo,
                                        double hi) {
  const int64_t g = size / cell + 2;
  std::vector<double> coarse(size_t(g * g));
  for (auto& v : coarse) v = rng.uniform(lo, hi);
  std::vector<double> field(size_t(size * size));
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      const double fy = double(y) / double(cell), fx = double(x) / double(cell);
      const int64_t y0 = int64_t(fy), x0 = int64_t(fx);
      const double wy = fy - double(y0), wx = fx - double(x0);
      const double a = coarse[size_t(y0 * g + x0)], b = coarse[size_t(y0 * g + x0 + 1)];
      const double c = coarse[size_t((y0 + 1) * g + x0)], d = coarse[size_t((y0 + 1) * g + x0 + 1)];
      field[size_t(y * size + x)] =
          (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d);
    }
  return field;
}

struct Rect {
  int64_t x, y, w, h;
  bool in_t1, in_t2;
  bool camouflaged;
  double r, g, b;   // RGB building color (unused when camouflaged)
  double nir;
};

inline bool rect_free(const std::vector<uint8_t>& occupied, int64_t size, int64_t x, int64_t y,
                      int64_t w, int64_t h) {
  for (int64_t yy = y; yy < y + h; ++yy)
    for (int64_t xx = x; xx < x + w; ++xx)
      if (occupied[size_t(yy * size + xx)]) return false;
  return true;
}

inline void mark(std::vector<uint8_t>& grid, int64_t size, const Rect& r) {
  for (int64_t yy = r.y; yy < r.y + r.h; ++yy)
    for (int64_t xx = r.x; xx < r.x + r.w; ++xx) grid[size_t(yy * size + xx)] = 1;
}

inline uint8_t quant(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return uint8_t(std::lround(v * 255.0));
}

// Morphological noise knob for imperfect saliency priors.
inline std::vector<uint8_t> morph(const std::vector<uint8_t>& grid, int64_t size, int64_t radius,
                                  bool dilate) {
  std::vector<uint8_t> out(grid.size(), 0);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      bool hit = dilate ? false : true;
      for (int64_t dy = -radius; dy <= radius && (dilate ? !hit : hit); ++dy)
        for (int64_t dx = -radius; dx <= radius; ++dx) {
          const int64_t yy = std::clamp<int64_t>(y + dy, 0, size - 1);
          const int64_t xx = std::clamp<int64_t>(x + dx, 0, size - 1);
          const bool v = grid[size_t(yy * size + xx)] != 0;
          if (dilate && v) hit = true;
          if (!dilate && !v) hit = false;
        }
      out[size_t(y * size + x)] = hit ? 1 : 0;
    }
  return out;
}

}  // namespace detail

// Deterministic bi-temporal scene synthesis. Background is textured
// vegetation with high NIR reflectance; buildings are low-NIR rectangles.
// t2 adds/removes building footprints until the sampled change ratio is met;
// the label is the exact symmetric difference of the footprint grids, and
// the saliency masks are the full per-time footprints.
inline std::vector<ManifestEntry> generate_dataset(const GenConfig& cfg,
                                                   const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output dir: " + out_dir);

  const int64_t S = cfg.size;
  const int64_t total_px = S * S;
  double prop_sum = 0;
  for (const auto& b : cfg.buckets) prop_sum += b.proportion;

  // even-spread assignment of the unchanged quota
  auto spread_hit = [](int64_t i, double frac) {
    return std::floor(double(i + 1) * frac) > std::floor(double(i) * frac);
  };

  std::vector<ManifestEntry> entries;
  std::ofstream mf(out_dir + "/manifest.jsonl");
  if (!mf) throw DataError("cannot write manifest in " + out_dir);

  int64_t changed_ordinal = 0;
  for (int64_t i = 0; i < cfg.count; ++i) {
    Rng rng = Rng::derive(cfg.seed, uint64_t(i));
    char idbuf[24];
    std::snprintf(idbuf, sizeof(idbuf), "s%05lld", static_cast<long long>(i));
    const std::string id = idbuf;
    const std::string split = (i % 10 < 7) ? "train" : (i % 10 == 7 ? "val" : "test");

    const bool unchanged = spread_hit(i, cfg.unchanged_fraction);
    bool camouflaged = false;
    double target_ratio = 0.0;
    if (!unchanged) {
      camouflaged = spread_hit(changed_ordinal, cfg.camouflage_fraction);
      double pick = rng.uniform() * prop_sum;
      const RatioBucket* bucket = &cfg.buckets.back();
      for (const auto& b : cfg.buckets) {
        if (pick < b.proportion) {
          bucket = &b;
          break;
        }
        pick -= b.proportion;
      }
      target_ratio = rng.uniform(bucket->lo, bucket->hi);
      ++changed_ordinal;
    }

    // --- background ---
    auto veg_nir = detail::smooth_field(rng, S, 16, cfg.nir_vegetation_lo, cfg.nir_vegetation_hi);
    auto green = detail::smooth_field(rng, S, 32, 0.35, 0.55);
    std::vector<double> bg_r(size_t(total_px), 0.0), bg_g(size_t(total_px), 0.0),
        bg_b(size_t(total_px), 0.0);
    for (int64_t p = 0; p < total_px; ++p) {
      const double n = rng.uniform(-0.03, 0.03);
      bg_g[size_t(p)] = green[size_t(p)] + n;
      bg_r[size_t(p)] = green[size_t(p)] * 0.6 + n;
      bg_b[size_t(p)] = green[size_t(p)] * 0.45 + n;
    }

    // --- footprints ---
    std::vector<uint8_t> b1(size_t(total_px), 0), b2(size_t(total_px), 0);
    std::vector<uint8_t> occupied(size_t(total_px), 0);
    std::vector<detail::Rect> rects;
    auto building_color = [&](detail::Rect& r) {
      const double base = rng.uniform(0.40, 0.70);
      const double tint = rng.uniform(-0.08, 0.08);
      r.r = base + tint;
      r.g = base;
      r.b = base - std::abs(tint);
      r.nir = rng.uniform(cfg.nir_building_lo, cfg.nir_building_hi);
    };
    auto place = [&](int64_t w, int64_t h, bool t1, bool t2, bool camo) -> bool {
      for (int attempt = 0; attempt < 100; ++attempt) {
        const int64_t x = int64_t(rng.below(uint64_t(S - w)));
        const int64_t y = int64_t(rng.below(uint64_t(S - h)));
        if (!detail::rect_free(occupied, S, x, y, w, h)) continue;
        detail::Rect r{x, y, w, h, t1, t2, camo, 0, 0, 0, 0};
        building_color(r);
        rects.push_back(r);
        detail::mark(occupied, S, r);
        if (t1) detail::mark(b1, S, r);
        if (t2) detail::mark(b2, S, r);
        return true;
      }
      return false;
    };

    // static distractors, present at both times
    const int64_t n_static = 1 + int64_t(rng.below(3));
    for (int64_t k = 0; k < n_static; ++k) {
      const int64_t w = 6 + int64_t(rng.below(uint64_t(std::max<int64_t>(S / 12, 2))));
      const int64_t h = 6 + int64_t(rng.below(uint64_t(std::max<int64_t>(S / 12, 2))));
      place(w, h, true, true, false);
    }

    // change rectangles until the target pixel budget is met within 10%
    if (!unchanged) {
      const int64_t target_px = std::max<int64_t>(1, int64_t(std::llround(target_ratio * double(total_px))));
      int64_t placed = 0;
      int stalls = 0;
      while (placed < int64_t(0.95 * double(target_px)) && stalls < 200) {
        const int64_t remaining = target_px - placed;
        int64_t side = std::max<int64_t>(1, int64_t(std::sqrt(double(remaining))));
        side = std::min(side, S / 4);
        int64_t w = side + int64_t(rng.below(uint64_t(side / 2 + 1))) - side / 4;
        w = std::clamp<int64_t>(w, 1, remaining);
        int64_t h = std::clamp<int64_t>(remaining / w, 1, S / 4);
        w = std::clamp<int64_t>(remaining / h, 1, S / 4);  // never overshoot the budget
        const bool construct = rng.uniform() < 0.5;
        if (place(w, h, !construct, construct, camouflaged))
          placed += w * h;
        else
          ++stalls;
      }
    }

    // --- render ---
    RgbImage rgb1{S, S, std::vector<uint8_t>(size_t(total_px * 3))};
    RgbImage rgb2{S, S, std::vector<uint8_t>(size_t(total_px * 3))};
    GrayImage nir1{S, S, std::vector<uint8_t>(size_t(total_px))};
    GrayImage nir2{S, S, std::vector<uint8_t>(size_t(total_px))};
    const double jitter = 1.0 + rng.uniform(-cfg.illumination_jitter, cfg.illumination_jitter);

    std::vector<const detail::Rect*> owner(size_t(total_px), nullptr);
    for (const auto& r : rects)
      for (int64_t yy = r.y; yy < r.y + r.h; ++yy)
        for (int64_t xx = r.x; xx < r.x + r.w; ++xx) owner[size_t(yy * S + xx)] = &r;

    for (int64_t p = 0; p < total_px; ++p) {
      const detail::Rect* r = owner[size_t(p)];
      double r1 = bg_r[size_t(p)], g1 = bg_g[size_t(p)], bb1 = bg_b[size_t(p)];
      double r2 = r1, g2 = g1, bb2 = bb1;
      double n1 = veg_nir[size_t(p)], n2 = veg_nir[size_t(p)];
      if (r) {
        if (r->in_t1) {
          if (!r->camouflaged) { r1 = r->r; g1 = r->g; bb1 = r->b; }
          n1 = r->nir;
        }
        if (r->in_t2) {
          if (!r->camouflaged) { r2 = r->r; g2 = r->g; bb2 = r->b; }
          n2 = r->nir;
        }
      }
      rgb1.pixels[size_t(3 * p)] = detail::quant(r1);
      rgb1.pixels[size_t(3 * p + 1)] = detail::quant(g1);
      rgb1.pixels[size_t(3 * p + 2)] = detail::quant(bb1);
      rgb2.pixels[size_t(3 * p)] = detail::quant(r2 * jitter);
      rgb2.pixels[size_t(3 * p + 1)] = detail::quant(g2 * jitter);
      rgb2.pixels[size_t(3 * p + 2)] = detail::quant(bb2 * jitter);
      if (cfg.nir_noise > 0) {
        n1 += rng.uniform(-cfg.nir_noise, cfg.nir_noise);
        n2 += rng.uniform(-cfg.nir_noise, cfg.nir_noise);
      }
      nir1.pixels[size_t(p)] = detail::quant(n1);
      nir2.pixels[size_t(p)] = detail::quant(n2);
    }

    auto mask1 = b1;
    auto mask2 = b2;
    if (cfg.mask_noise_radius > 0) {
      const bool dilate = rng.uniform() < 0.5;
      mask1 = detail::morph(mask1, S, cfg.mask_noise_radius, dilate);
      mask2 = detail::morph(mask2, S, cfg.mask_noise_radius, !dilate);
    }
    GrayImage label{S, S, std::vector<uint8_t>(size_t(total_px))};
    GrayImage m1{S, S, std::vector<uint8_t>(size_t(total_px))};
    GrayImage m2{S, S, std::vector<uint8_t>(size_t(total_px))};
    for (int64_t p = 0; p < total_px; ++p) {
      label.pixels[size_t(p)] = (b1[size_t(p)] != b2[size_t(p)]) ? 255 : 0;
      m1.pixels[size_t(p)] = mask1[size_t(p)] ? 255 : 0;
      m2.pixels[size_t(p)] = mask2[size_t(p)] ? 255 : 0;
    }

    ManifestEntry e;
    e.id = id;
    e.split = split;
    auto emit = [&](const std::string& suffix) { return id + "_" + suffix; };
    write_ppm(out_dir + "/" + emit("rgb_t1.ppm"), rgb1);
    write_ppm(out_dir + "/" + emit("rgb_t2.ppm"), rgb2);
    write_pgm(out_dir + "/" + emit("nir_t1.pgm"), nir1);
    write_pgm(out_dir + "/" + emit("nir_t2.pgm"), nir2);
    write_pgm(out_dir + "/" + emit("label.pgm"), label);
    write_pgm(out_dir + "/" + emit("mask_t1.pgm"), m1);
    write_pgm(out_dir + "/" + emit("mask_t2.pgm"), m2);
    nlohmann::json j{{"id", id},
                     {"rgb_t1", emit("rgb_t1.ppm")},
                     {"nir_t1", emit("nir_t1.pgm")},
                     {"rgb_t2", emit("rgb_t2.ppm")},
                     {"nir_t2", emit("nir_t2.pgm")},
                     {"label", emit("label.pgm")},
                     {"mask_t1", emit("mask_t1.pgm")},
                     {"mask_t2", emit("mask_t2.pgm")},
                     {"split", split}};
    mf << j.dump() << "\n";
    e.rgb_t1 = out_dir + "/" + emit("rgb_t1.ppm");
    e.nir_t1 = out_dir + "/" + emit("nir_t1.pgm");
    e.rgb_t2 = out_dir + "/" + emit("rgb_t2.ppm");
    e.nir_t2 = out_dir + "/" + emit("nir_t2.pgm");
    e.label = out_dir + "/" + emit("label.pgm");
    e.mask_t1 = out_dir + "/" + emit("mask_t1.pgm");
    e.mask_t2 = out_dir + "/" + emit("mask_t2.pgm");
    entries.push_back(std::move(e));
  }
  if (!mf) throw DataError("manifest write failed in " + out_dir);
  return entries;
}

// ---------------------------------------------------------------------------
// Change-ratio statistics (unchanged images excluded)
// ---------------------------------------------------------------------------

struct ChangeStats {
  double mean_ratio_pct = 0;
  std::vector<double> bucket_max_pct;     // e.g. 1..10
  std::vector<double> bucket_proportion;  // over changed images
  int64_t changed = 0, unchanged = 0;

  std::string to_json() const {
    nlohmann::json buckets = nlohmann::json::array();
    for (size_t i = 0; i < bucket_max_pct.size(); ++i)
      buckets.push_back({{"max_pct", bucket_max_pct[i]}, {"proportion", bucket_proportion[i]}});
    nlohmann::json j{{"mean_ratio_pct", mean_ratio_pct},
                     {"buckets", buckets},
                     {"changed", changed},
                     {"unchanged", unchanged}};
    return j.dump();
  }

  std::string to_table() const {
    std::string out;
    char line[128];
    std::snprintf(line, sizeof(line), "changed %lld  unchanged %lld  mean %.2f%%\n",
                  static_cast<long long>(changed), static_cast<long long>(unchanged),
                  mean_ratio_pct);
    out += line;
    for (size_t i = 0; i < bucket_max_pct.size(); ++i) {
      const int bars = int(std::lround(bucket_proportion[i] * 50));
      std::snprintf(line, sizeof(line), "<=%5.1f%% | %-50s %5.1f%%\n", bucket_max_pct[i],
                    std::string(size_t(bars), '#').c_str(), bucket_proportion[i] * 100);
      out += line;
    }
    return out;
  }
};

inline ChangeStats change_ratio_stats(const std::vector<ManifestEntry>& entries,
                                      std::vector<double> bucket_max_pct = {1, 2, 3, 4, 5, 6,
                                                                            7, 8, 9, 10}) {
  ChangeStats st;
  st.bucket_max_pct = bucket_max_pct;
  st.bucket_proportion.assign(bucket_max_pct.size(), 0.0);
  double ratio_sum = 0;
  for (const auto& e : entries) {
    GrayImage label = read_pgm(e.label);
    int64_t pos = 0;
    for (uint8_t v : label.pixels) pos += v >= 128 ? 1 : 0;
    if (pos == 0) {
      ++st.unchanged;
      continue;
    }
    ++st.changed;
    const double pct = 100.0 * double(pos) / double(label.pixels.size());
    ratio_sum += pct;
    double prev = 0;
    for (size_t b = 0; b < bucket_max_pct.size(); ++b) {
      if (pct > prev && pct <= bucket_max_pct[b]) {
        st.bucket_proportion[b] += 1;
        break;
      }
      prev = bucket_max_pct[b];
    }
  }
  if (st.changed > 0) {
    st.mean_ratio_pct = ratio_sum / double(st.changed);
    for (auto& p : st.bucket_proportion) p /= double(st.changed);
  }
  return st;
}

}  // namespace mscd
