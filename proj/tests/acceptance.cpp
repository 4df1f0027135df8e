// End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Scaled for a single desktop CPU.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mscd/caim.hpp"
#include "mscd/data_synth.hpp"
#include "mscd/gradsuite.hpp"
#include "mscd/metrics.hpp"
#include "mscd/model.hpp"
#include "mscd/optim.hpp"
#include "mscd/train.hpp"

namespace fs = std::filesystem;
using namespace mscd;

namespace {

int failures = 0;

void report(int n, const std::string& what, bool ok, const std::string& detail) {
  std::printf("%s: criterion %d %s (%s)\n", ok ? "PASS" : "FAIL", n, what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string work_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mscd_accept_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::vector<uint8_t> file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(is),
                              std::istreambuf_iterator<char>());
}

bool trees_equal(const std::string& a, const std::string& b) {
  std::vector<fs::path> fa;
  for (const auto& e : fs::directory_iterator(a)) fa.push_back(e.path().filename());
  for (const auto& f : fa)
    if (file_bytes(fs::path(a) / f) != file_bytes(fs::path(b) / f)) return false;
  return true;
}

ModelConfig desk_config(InputMode mode) {
  ModelConfig cfg;
  cfg.widths = {6, 8, 12, 12};
  cfg.input_size = 64;
  cfg.input_mode = mode;
  cfg.batch_size = 1;
  cfg.warmup_iters = 100;
  cfg.eval_interval = 1000;
  cfg.hflip_augment = false;
  return cfg;
}

double test_f1(MSCNet<float>& model, const std::vector<BiTemporalSample<float>>& set) {
  return compute_metrics(evaluate_model(model, set)).f1 * 100.0;
}

// --------------------------------------------------------------------------

void criterion1_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  auto results = run_grad_suite(1);
  const double elapsed = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  for (const auto& [name, err] : results)
    if (err > worst) worst = err, worst_name = name;
  std::ostringstream d;
  d << results.size() << " checks, max err " << worst << " (" << worst_name << "), "
    << elapsed << " s";
  report(1, "gradient suite", worst < 1e-3 && elapsed < 120.0, d.str());
}

void criterion2_attention() {
  Rng rng(42);
  double worst_row = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> logits(size_t(4 * 9 * 9));
    for (auto& v : logits) v = float(rng.normal() * 2.0);
    Tensor<float> attn = softmax_last(Tensor<float>::from_data({4, 9, 9}, std::move(logits)));
    Tensor<float> refined = variance_weight(attn);
    for (const Tensor<float>* m : {&attn, &refined})
      for (int64_t r = 0; r < 4 * 9; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 9; ++c) s += m->at(r * 9 + c);
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
  }
  Tensor<double> uniform = Tensor<double>::from_data({2, 3, 5}, std::vector<double>(30, 0.2));
  Tensor<double> fixed = variance_weight(uniform);
  double fp_err = 0;
  for (int64_t i = 0; i < 30; ++i) fp_err = std::max(fp_err, std::abs(fixed.at(i) - 0.2));
  std::ostringstream d;
  d << "row-sum dev " << worst_row << ", uniform fixed-point dev " << fp_err;
  report(2, "attention invariants", worst_row < 1e-6 && fp_err < 1e-9, d.str());
}

void criterion3_metrics() {
  Rng rng(7);
  bool ok = true;
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    const double pp = rng.uniform(), pl = rng.uniform();
    std::vector<double> pred(256), label(256);
    for (size_t i = 0; i < 256; ++i) {
      pred[i] = rng.uniform() < pp ? 1.0 : 0.0;
      label[i] = rng.uniform() < pl ? 1.0 : 0.0;
    }
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (size_t i = 0; i < 256; ++i) {
      if (pred[i] == 1.0)
        label[i] == 1.0 ? ++tp : ++fp;
      else
        label[i] == 1.0 ? ++fn : ++tn;
    }
    ConfusionCounts c = confusion(Tensor<double>::from_data({16, 16}, std::move(pred)),
                                  Tensor<double>::from_data({16, 16}, std::move(label)));
    ok = ok && c.tp == tp && c.fp == fp && c.fn == fn && c.tn == tn;
    MetricReport r = compute_metrics(c);
    // independent per-formula reference
    auto safe = [](double num, double den, double empty) {
      return den == 0.0 ? empty : num / den;
    };
    const bool pe = tp + fp == 0, le = tp + fn == 0;
    const double prec = safe(double(tp), double(tp + fp), le ? 1.0 : 0.0);
    const double rec = safe(double(tp), double(tp + fn), pe ? 1.0 : 0.0);
    const double iou = safe(double(tp), double(tp + fp + fn), 1.0);
    const double f1 = (pe && le) ? 1.0 : safe(2 * prec * rec, prec + rec, 0.0);
    const double total = 256.0;
    const double po = (tp + tn) / total;
    const double peh =
        (double(tp + fp) * double(tp + fn) + double(fn + tn) * double(fp + tn)) / (total * total);
    const double kap = peh >= 1.0 ? (po >= 1.0 ? 1.0 : 0.0) : (po - peh) / (1.0 - peh);
    ok = ok && std::abs(r.precision - prec) < 1e-10 && std::abs(r.recall - rec) < 1e-10 &&
         std::abs(r.f1 - f1) < 1e-10 && std::abs(r.iou - iou) < 1e-10 &&
         std::abs(r.kappa - kap) < 1e-10;
  }
  MetricReport w = compute_metrics(ConfusionCounts{50, 10, 10, 930});
  const bool kap_ok = std::abs(w.kappa - 0.8227) <= 1e-4;
  std::ostringstream d;
  d << "1000 brute-force cases, worked kappa " << w.kappa;
  report(3, "metric oracle", ok && kap_ok, d.str());
}

void criterion4_recipe() {
  bool ok = true;
  std::string detail = "lr(200)=5e-4, lr(total)=0, beta/wd defaults";
  try {
    ok = ok && lr_schedule(200, 40000, 200, 5e-4) == 5e-4;
    ok = ok && lr_schedule(40000, 40000, 200, 5e-4) == 0.0;
    ok = ok && std::abs(lr_schedule(100, 40000, 200, 5e-4) - 2.5e-4) < 1e-18;
    ModelConfig cfg;
    ok = ok && cfg.beta1 == 0.9 && cfg.beta2 == 0.99 && cfg.weight_decay == 1e-4 &&
         cfg.base_lr == 5e-4 && cfg.poly_power == 0.9 && cfg.warmup_iters == 200;
  } catch (const std::exception& e) {
    ok = false;
    detail = e.what();
  }
  report(4, "training recipe fidelity", ok, detail);
}

void criterion5_overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string dir = work_dir("overfit");
  GenConfig gen;
  gen.count = 8;
  gen.size = 64;
  gen.seed = 11;
  gen.unchanged_fraction = 0;
  gen.buckets = {{0.04, 0.10, 1.0}};
  auto entries = generate_dataset(gen, dir);

  ModelConfig cfg = desk_config(InputMode::rgb_nir);
  cfg.batch_size = 4;
  cfg.total_iters = 2000;
  cfg.base_lr = 1e-3;
  cfg.eval_interval = 2000;
  MSCNet<float> model(cfg, 5);
  TrainOptions opt;
  opt.ckpt_path = dir + "/model.msck";
  opt.seed = 5;
  train_model(model, entries, opt);
  auto train_set = load_split<float>(entries, "train");
  const double f1 = test_f1(model, train_set);
  const double elapsed = seconds_since(t0);
  std::ostringstream d;
  d << "train F1 " << f1 << " after 2000 iters, " << elapsed << " s";
  report(5, "overfit oracle", f1 >= 95.0 && elapsed < 600.0, d.str());
  fs::remove_all(dir);
}

// Shared benchmark for criteria 6-8: 200 samples at 96², 50% of changes
// camouflaged in RGB, mild per-time NIR sensor noise (so appearance
// differences alone are ambiguous and footprint priors carry real signal),
// default change-ratio profile (65% of changed images under 2%).
struct Benchmark {
  std::string dir;
  std::vector<ManifestEntry> entries;
  std::vector<BiTemporalSample<float>> test_set;
};

Benchmark make_benchmark() {
  Benchmark b;
  b.dir = work_dir("bench");
  GenConfig gen;
  gen.count = 200;
  gen.size = 96;
  gen.seed = 23;
  gen.camouflage_fraction = 0.5;
  gen.nir_noise = 0.08;
  b.entries = generate_dataset(gen, b.dir);
  b.test_set = load_split<float>(b.entries, "test");
  return b;
}

ModelConfig bench_config(InputMode mode) {
  ModelConfig cfg = desk_config(mode);
  cfg.input_size = 96;
  return cfg;
}

double train_variant(const Benchmark& b, ModelConfig cfg, int64_t iters, uint64_t seed) {
  cfg.total_iters = iters;
  MSCNet<float> model(cfg, seed);
  TrainOptions opt;
  opt.ckpt_path = b.dir + "/variant.msck";
  opt.seed = seed;
  train_model(model, b.entries, opt);
  MSCNet<float> best = load_model<float>(opt.ckpt_path);
  return test_f1(best, b.test_set);
}

void criterion6_complementarity(const Benchmark& b) {
  const double f1_both = train_variant(b, bench_config(InputMode::rgb_nir), 5000, 9);
  const double f1_rgb = train_variant(b, bench_config(InputMode::rgb_only), 5000, 9);
  std::ostringstream d;
  d << "rgb_nir F1 " << f1_both << " vs rgb_only F1 " << f1_rgb;
  report(6, "modality complementarity", f1_both - f1_rgb >= 10.0, d.str());
}

void criterion7_ablations(const Benchmark& b) {
  const int64_t iters = 3000;
  const uint64_t seed = 9;
  const double full = train_variant(b, bench_config(InputMode::rgb_nir), iters, seed);

  ModelConfig no_ncem = bench_config(InputMode::rgb_nir);
  no_ncem.use_ncem = false;
  ModelConfig no_caim = bench_config(InputMode::rgb_nir);
  no_caim.use_caim = false;
  ModelConfig no_smrm = bench_config(InputMode::rgb_nir);
  no_smrm.use_smrm = false;
  ModelConfig no_masks = bench_config(InputMode::rgb_nir);
  no_masks.use_masks = false;

  const double f_ncem = train_variant(b, no_ncem, iters, seed);
  const double f_caim = train_variant(b, no_caim, iters, seed);
  const double f_smrm = train_variant(b, no_smrm, iters, seed);
  const double f_masks = train_variant(b, no_masks, iters, seed);

  const bool mono = full >= f_ncem - 1.0 && full >= f_caim - 1.0 && full >= f_smrm - 1.0;
  const bool masks = full > f_masks;
  std::ostringstream d;
  d << "full " << full << ", -ncem " << f_ncem << ", -caim " << f_caim << ", -smrm " << f_smrm
    << ", -masks " << f_masks;
  report(7, "ablation monotonicity", mono && masks, d.str());
}

void criterion8_stats(const Benchmark& b) {
  ChangeStats st = change_ratio_stats(b.entries);
  double under2 = 0;
  for (size_t i = 0; i < st.bucket_max_pct.size(); ++i)
    if (st.bucket_max_pct[i] <= 2.0) under2 += st.bucket_proportion[i];
  int64_t train = 0, val = 0, test = 0;
  for (const auto& e : b.entries) {
    if (e.split == "train") ++train;
    if (e.split == "val") ++val;
    if (e.split == "test") ++test;
  }
  const bool ok = under2 * 100.0 >= 65.0 - 5.0 && train == 140 && val == 20 && test == 40;
  std::ostringstream d;
  d << under2 * 100.0 << "% of changed images under 2%, splits " << train << ":" << val << ":"
    << test;
  report(8, "dataset statistics", ok, d.str());
}

void criterion9_determinism() {
  const std::string ga = work_dir("det_a"), gb = work_dir("det_b");
  GenConfig gen;
  gen.count = 10;
  gen.size = 64;
  gen.seed = 31;
  generate_dataset(gen, ga);
  auto entries = generate_dataset(gen, gb);
  const bool gen_ok = trees_equal(ga, gb);

  ModelConfig cfg = desk_config(InputMode::rgb_nir);
  cfg.total_iters = 40;
  cfg.warmup_iters = 10;
  cfg.eval_interval = 40;
  auto run = [&](const std::string& out) {
    MSCNet<float> model(cfg, 3);
    TrainOptions opt;
    opt.ckpt_path = out;
    opt.seed = 3;
    train_model(model, entries, opt);
    MSCNet<float> loaded = load_model<float>(out);
    auto test_set = load_split<float>(entries, "test");
    return metrics_json(compute_metrics(evaluate_model(loaded, test_set)),
                        int64_t(test_set.size()));
  };
  const std::string e1 = run(gb + "/m1.msck");
  const std::string e2 = run(gb + "/m2.msck");
  const bool train_ok = file_bytes(gb + "/m1.msck") == file_bytes(gb + "/m2.msck");
  const bool eval_ok = e1 == e2;
  std::ostringstream d;
  d << "generate " << (gen_ok ? "ok" : "differs") << ", checkpoints "
    << (train_ok ? "ok" : "differ") << ", eval " << (eval_ok ? "ok" : "differs");
  report(9, "determinism", gen_ok && train_ok && eval_ok, d.str());
  fs::remove_all(ga);
  fs::remove_all(gb);
}

void criterion10_formats() {
  const std::string dir = work_dir("fmt");
  Rng rng(17);
  bool ok = true;

  std::vector<float> vf(60);
  for (auto& v : vf) v = float(rng.normal());
  Tensor<float> tf = Tensor<float>::from_data({3, 4, 5}, std::move(vf));
  {
    std::ofstream os(dir + "/a.mmct", std::ios::binary);
    write_mmct(os, to_raw(tf));
  }
  std::ifstream is(dir + "/a.mmct", std::ios::binary);
  Tensor<float> tf2 = from_raw<float>(read_mmct(is, "a.mmct"));
  ok = ok && tf2.shape() == tf.shape() && tf2.data() == tf.data();

  std::vector<double> vd(24);
  for (auto& v : vd) v = rng.normal();
  Tensor<double> td = Tensor<double>::from_data({2, 3, 4}, std::move(vd));
  std::stringstream ss;
  write_mmct(ss, to_raw(td));
  ok = ok && from_raw<double>(read_mmct(ss)).data() == td.data();

  ModelConfig cfg = desk_config(InputMode::rgb_nir);
  MSCNet<float> model(cfg, 8);
  save_model(dir + "/m.msck", model);
  MSCNet<float> loaded = load_model<float>(dir + "/m.msck");
  ok = ok && loaded.store.items().size() == model.store.items().size();
  for (size_t i = 0; i < model.store.items().size() && ok; ++i)
    ok = model.store.items()[i].value.data() == loaded.store.items()[i].value.data();

  GrayImage g{5, 3, {}};
  for (int i = 0; i < 15; ++i) g.pixels.push_back(uint8_t(rng.next_u64() & 0xff));
  write_pgm(dir + "/g.pgm", g);
  GrayImage g2 = read_pgm(dir + "/g.pgm");
  ok = ok && g2.width == 5 && g2.height == 3 && g2.pixels == g.pixels;

  RgbImage c{4, 2, {}};
  for (int i = 0; i < 24; ++i) c.pixels.push_back(uint8_t(rng.next_u64() & 0xff));
  write_ppm(dir + "/c.ppm", c);
  RgbImage c2 = read_ppm(dir + "/c.ppm");
  ok = ok && c2.pixels == c.pixels;

  report(10, "format round-trips", ok, "MMCT f32/f64, MSCK, PGM, PPM");
  fs::remove_all(dir);
}

}  // namespace

int main() {
  criterion1_gradients();
  criterion2_attention();
  criterion3_metrics();
  criterion4_recipe();
  criterion10_formats();
  criterion9_determinism();
  criterion5_overfit();
  Benchmark bench = make_benchmark();
  criterion8_stats(bench);
  criterion6_complementarity(bench);
  criterion7_ablations(bench);
  fs::remove_all(bench.dir);
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
