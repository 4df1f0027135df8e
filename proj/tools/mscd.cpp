#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mscd/data_synth.hpp"
#include "mscd/gradsuite.hpp"
#include "mscd/metrics.hpp"
#include "mscd/model.hpp"
#include "mscd/train.hpp"

namespace {

using TF = float;

enum class LogLevel { quiet, info, debug };

LogLevel log_level() {
  const char* env = std::getenv("MSCD_LOG");
  if (!env) return LogLevel::info;
  const std::string v = env;
  if (v == "quiet") return LogLevel::quiet;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

mscd::ModelConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream is(path);
  if (!is) throw mscd::DataError("cannot open config: " + path);
  try {
    return nlohmann::json::parse(is).get<mscd::ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw mscd::ConfigError("malformed config " + path + ": " + e.what());
  }
}

const mscd::ManifestEntry& find_entry(const std::vector<mscd::ManifestEntry>& entries,
                                      const std::string& id) {
  for (const auto& e : entries)
    if (e.id == id) return e;
  throw mscd::DataError("sample id not in manifest: " + id);
}

int run(int argc, char** argv) {
  CLI::App app{"multi-spectral change detection pipeline"};
  app.require_subcommand(1);
  const LogLevel level = log_level();

  // generate
  auto* gen = app.add_subcommand("generate", "synthesize a bi-temporal dataset");
  std::string gen_out, ratio_spec;
  mscd::GenConfig gcfg;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gcfg.count, "number of samples");
  gen->add_option("--size", gcfg.size, "square image size");
  gen->add_option("--seed", gcfg.seed, "master seed");
  gen->add_option("--ratio-spec", ratio_spec, "JSON file overriding generator settings");
  gen->add_option("--threads", "worker threads")->default_val(1);

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_config, tr_out = "model.msck", tr_mode;
  int64_t tr_iters = -1;
  uint64_t tr_seed = 0;
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--config", tr_config, "model config JSON");
  train->add_option("--out", tr_out, "checkpoint path");
  train->add_option("--iters", tr_iters, "override total iterations");
  train->add_option("--seed", tr_seed, "master seed");
  train->add_option("--mode", tr_mode, "input mode: rgb|nir|rgbnir");
  train->add_option("--threads", "worker threads")->default_val(1);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_data, ev_ckpt, ev_split = "test";
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  eval->add_option("--split", ev_split, "split to evaluate");
  eval->add_option("--threads", "worker threads")->default_val(1);

  // predict
  auto* predict = app.add_subcommand("predict", "write a probability map");
  std::string pr_ckpt, pr_data, pr_sample, pr_out, pr_raw;
  predict->add_option("--ckpt", pr_ckpt, "checkpoint path")->required();
  predict->add_option("--data", pr_data, "dataset directory")->required();
  predict->add_option("--sample", pr_sample, "sample id")->required();
  predict->add_option("--out", pr_out, "output PGM path")->required();
  predict->add_option("--raw", pr_raw, "also dump the float map as MMCT");
  predict->add_option("--threads", "worker threads")->default_val(1);

  // render
  auto* render = app.add_subcommand("render", "diagnostic TP/FP/TN/FN rendering");
  std::string rd_pred, rd_label, rd_out;
  render->add_option("--pred", rd_pred, "prediction PGM")->required();
  render->add_option("--label", rd_label, "label PGM")->required();
  render->add_option("--out", rd_out, "output PPM")->required();

  // stats
  auto* stats = app.add_subcommand("stats", "change-ratio statistics");
  std::string st_data;
  stats->add_option("--data", st_data, "dataset directory")->required();
  stats->add_option("--threads", "worker threads")->default_val(1);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference verification suite");
  uint64_t gc_seed = 0;
  gradcheck->add_option("--seed", gc_seed, "suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (*gen) {
    if (!ratio_spec.empty()) {
      std::ifstream is(ratio_spec);
      if (!is) throw mscd::DataError("cannot open ratio spec: " + ratio_spec);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(is);
      } catch (const nlohmann::json::exception& e) {
        throw mscd::ConfigError("malformed ratio spec: " + std::string(e.what()));
      }
      const mscd::GenConfig flags = gcfg;
      gcfg = j.get<mscd::GenConfig>();
      gcfg.count = gen->count("--count") ? flags.count : gcfg.count;
      gcfg.size = gen->count("--size") ? flags.size : gcfg.size;
      gcfg.seed = gen->count("--seed") ? flags.seed : gcfg.seed;
    }
    const auto entries = mscd::generate_dataset(gcfg, gen_out);
    if (level != LogLevel::quiet)
      std::cerr << "generated " << entries.size() << " samples in " << gen_out << "\n";
    return 0;
  }

  if (*train) {
    mscd::ModelConfig cfg = load_config(tr_config);
    if (tr_iters > 0) cfg.total_iters = tr_iters;
    if (!tr_mode.empty()) cfg.input_mode = mscd::input_mode_from_string(tr_mode);
    mscd::MSCNet<TF> model(cfg, tr_seed);
    mscd::TrainOptions opt;
    opt.ckpt_path = tr_out;
    opt.seed = tr_seed;
    if (level == LogLevel::debug) {
      opt.log = &std::cerr;
      opt.log_every = 1;
    } else if (level == LogLevel::info) {
      opt.log = &std::cerr;
      opt.log_every = cfg.eval_interval;
    }
    const auto entries = mscd::read_manifest(tr_data);
    const auto result = mscd::train_model(model, entries, opt);
    if (level != LogLevel::quiet)
      std::cerr << "done: best val_F1 " << result.best_f1 << " at iter " << result.best_iter
                << ", checkpoint " << tr_out << "\n";
    return 0;
  }

  if (*eval) {
    mscd::MSCNet<TF> model = mscd::load_model<TF>(ev_ckpt);
    auto entries = mscd::read_manifest(ev_data);
    const auto samples = mscd::load_split<TF>(entries, ev_split);
    if (samples.empty()) throw mscd::DataError("no samples in split: " + ev_split);
    const auto counts = mscd::evaluate_model(model, samples);
    std::cout << mscd::metrics_json(mscd::compute_metrics(counts), int64_t(samples.size()))
              << "\n";
    return 0;
  }

  if (*predict) {
    mscd::MSCNet<TF> model = mscd::load_model<TF>(pr_ckpt);
    const auto entries = mscd::read_manifest(pr_data);
    const auto sample = mscd::load_sample<TF>(find_entry(entries, pr_sample));
    mscd::NoGradGuard ng;
    mscd::Batch<TF> b = mscd::make_batch<TF>({&sample});
    mscd::Tensor<TF> prob = model.forward(b.input, false);
    const int64_t H = prob.dim(2), W = prob.dim(3);
    mscd::GrayImage img{W, H, std::vector<uint8_t>(size_t(H * W))};
    for (int64_t i = 0; i < H * W; ++i)
      img.pixels[size_t(i)] = uint8_t(std::lround(std::clamp(double(prob.at(i)), 0.0, 1.0) * 255));
    mscd::write_pgm(pr_out, img);
    if (!pr_raw.empty()) {
      std::ofstream os(pr_raw, std::ios::binary);
      if (!os) throw mscd::DataError("cannot write raw map: " + pr_raw);
      mscd::write_mmct(os, mscd::to_raw(prob));
    }
    return 0;
  }

  if (*render) {
    auto pred = mscd::detail::gray_to_tensor<TF>(mscd::read_pgm(rd_pred), true);
    auto label = mscd::detail::gray_to_tensor<TF>(mscd::read_pgm(rd_label), true);
    mscd::write_ppm(rd_out, mscd::render_diagnostic(pred, label));
    return 0;
  }

  if (*stats) {
    const auto st = mscd::change_ratio_stats(mscd::read_manifest(st_data));
    std::cout << st.to_json() << "\n";
    if (level != LogLevel::quiet) std::cerr << st.to_table();
    return 0;
  }

  if (*gradcheck) {
    const auto report = mscd::run_grad_suite(gc_seed);
    bool ok = true;
    for (const auto& [name, err] : report) {
      std::cout << name << " " << err << "\n";
      ok = ok && err < 1e-3;
    }
    if (!ok) {
      std::cerr << "gradient check failed\n";
      return 3;
    }
    return 0;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mscd::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const mscd::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const mscd::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const mscd::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
