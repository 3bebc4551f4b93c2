// evcseg command line: extract | train | refine | eval | synth.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "evcseg/error.hpp"
#include "evcseg/phantom.hpp"
#include "evcseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace evcseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitCompute = 4;

int exit_code_for(const std::string& kind) {
  if (kind == "config") return kExitUsage;
  if (kind == "training" || kind == "domain" || kind == "capacity") return kExitCompute;
  return kExitData;  // io, format, data, shape, size, geometry
}

/// Settings collected from flags, applied after the config file so that
/// flags win.
struct Overrides {
  std::optional<fs::path> config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;
  bool full_grid = false;
  bool no_cleanup = false;

  PipelineConfig build() const {
    PipelineConfig cfg;
    if (config_file) apply_config_file(cfg, *config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (full_grid) cfg.grid = GridConfig::full();
    for (const auto& [k, v] : flags) apply_setting(cfg, k, v);
    if (no_cleanup) cfg.cleanup = false;
    cfg.validate();
    return cfg;
  }
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_file, "key=value or JSON config file")->check(CLI::ExistingFile);
  app->add_option("--set", o.sets, "extra setting, key=value (repeatable)");
}

// Registers a flag that forwards its value to a dotted setting.
void add_setting(CLI::App* app, Overrides& o, const std::string& flag, const std::string& key,
                 const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&o, key](const std::string& v) { o.flags.emplace_back(key, v); }, help);
}

void add_crf(CLI::App* app, Overrides& o) {
  add_setting(app, o, "--crf-iters", "crf.iterations", "mean-field iterations (0 = argmax)");
  add_setting(app, o, "--w-app", "crf.w_app", "appearance kernel weight");
  add_setting(app, o, "--w-smooth", "crf.w_smooth", "smoothness kernel weight");
  add_setting(app, o, "--theta-alpha", "crf.theta_alpha", "appearance spatial bandwidth, mm");
  add_setting(app, o, "--theta-beta", "crf.theta_beta", "appearance intensity bandwidth");
  add_setting(app, o, "--theta-gamma", "crf.theta_gamma", "smoothness bandwidth, mm");
  add_setting(app, o, "--crf-backend", "crf.backend", "brute or filtered");
  add_setting(app, o, "--crf-order", "crf.update_order", "parallel or sequential");
  app->add_flag("--no-cleanup", o.no_cleanup, "skip hole filling and largest-component selection");
}

void add_grid(CLI::App* app, Overrides& o) {
  app->add_flag("--full-grid", o.full_grid, "pad to 256^3 and run the network on 128^3");
  add_setting(app, o, "--pad", "grid.pad", "padded grid, n or nx,ny,nz");
  add_setting(app, o, "--spacing", "grid.spacing_mm", "isotropic spacing in mm");
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EVC-Net brain extraction: network, dense CRF and post-processing"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "evcseg 0.1.0");

  Overrides o;

  // extract
  fs::path ex_in, ex_out, ex_ckpt;
  std::optional<fs::path> ex_netmask;
  CLI::App* extract_cmd = app.add_subcommand("extract", "segment one volume");
  extract_cmd->add_option("-i,--input", ex_in, "input NIfTI volume")->required();
  extract_cmd->add_option("-o,--output", ex_out, "output mask (.nii or .nii.gz)")->required();
  extract_cmd->add_option("-c,--checkpoint", ex_ckpt, "network checkpoint")->required();
  extract_cmd->add_option("--network-mask", ex_netmask, "also write the network-grid mask");
  add_common(extract_cmd, o);
  add_grid(extract_cmd, o);
  add_crf(extract_cmd, o);

  // train
  fs::path tr_data, tr_ckpt, tr_log;
  CLI::App* train_cmd = app.add_subcommand("train", "train a network on image/mask pairs");
  train_cmd->add_option("-d,--data", tr_data, "directory with images/ and masks/")->required();
  train_cmd->add_option("-c,--checkpoint", tr_ckpt, "checkpoint to write")->required();
  train_cmd->add_option("--log", tr_log, "per-epoch loss CSV (default: <checkpoint>.loss.csv)");
  add_common(train_cmd, o);
  add_grid(train_cmd, o);
  add_setting(train_cmd, o, "--epochs", "train.epochs", "epochs");
  add_setting(train_cmd, o, "--batch-size", "train.batch_size", "minibatch size");
  add_setting(train_cmd, o, "--lr", "train.lr", "learning rate");
  add_setting(train_cmd, o, "--momentum", "train.momentum", "momentum");
  add_setting(train_cmd, o, "--seed", "train.seed", "shuffle seed");
  add_setting(train_cmd, o, "--aug-seed", "aug.seed", "augmentation seed");
  add_setting(train_cmd, o, "--net-seed", "net.seed", "weight initialisation seed");
  add_setting(train_cmd, o, "--levels", "net.levels", "network levels");
  add_setting(train_cmd, o, "--base-channels", "net.base_channels", "channels at the first level");
  add_setting(train_cmd, o, "--kernel-size", "net.kernel_size", "convolution kernel size");
  add_setting(train_cmd, o, "--multiscale", "net.multiscale_inputs", "true for EV-Net, false for V-Net");
  bool no_augment = false;
  train_cmd->add_flag("--no-augment", no_augment, "disable augmentation");

  // refine
  fs::path rf_probs, rf_image, rf_out;
  CLI::App* refine_cmd = app.add_subcommand("refine", "CRF refinement of a stored probability map");
  refine_cmd->add_option("-p,--probs", rf_probs, "4D probability map, labels last")->required();
  refine_cmd->add_option("-i,--image", rf_image, "matching intensity volume")->required();
  refine_cmd->add_option("-o,--output", rf_out, "output mask")->required();
  add_common(refine_cmd, o);
  add_crf(refine_cmd, o);

  // eval
  fs::path ev_pred, ev_truth;
  std::optional<fs::path> ev_out;
  bool ev_mm = false;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score predicted masks against truth");
  eval_cmd->add_option("-p,--pred", ev_pred, "directory of predicted masks")->required();
  eval_cmd->add_option("-t,--truth", ev_truth, "directory of truth masks")->required();
  eval_cmd->add_option("-o,--out", ev_out, "write report.json and summary.csv here");
  eval_cmd->add_flag("--mm", ev_mm, "surface distances in mm instead of voxels");

  // synth
  int sy_n = 10, sy_size = 48;
  std::uint64_t sy_seed = 0;
  fs::path sy_out;
  PhantomOptions sy_opt;
  bool sy_ras = false;
  CLI::App* synth_cmd = app.add_subcommand("synth", "write synthetic head phantoms");
  synth_cmd->add_option("-n,--count", sy_n, "number of cases")->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--size", sy_size, "voxels per axis (>= 16)");
  synth_cmd->add_option("--seed", sy_seed, "seed");
  synth_cmd->add_option("-o,--out", sy_out, "output directory")->required();
  synth_cmd->add_option("--extent-mm", sy_opt.extent_mm, "cube edge in mm");
  synth_cmd->add_flag("--spherical", sy_opt.spherical, "spherical brains");
  synth_cmd->add_flag("--ras", sy_ras, "plain RAS affine instead of LPS");
  synth_cmd->add_option("--noise", sy_opt.noise_sigma, "noise standard deviation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (extract_cmd->parsed()) {
      extract(ex_in, ex_out, ex_ckpt, o.build(), ex_netmask);
      std::cerr << "wrote " << ex_out.string() << "\n";
    } else if (train_cmd->parsed()) {
      PipelineConfig cfg = o.build();
      if (no_augment) cfg.train.augment = false;
      if (tr_log.empty()) tr_log = fs::path(tr_ckpt.string() + ".loss.csv");
      const TrainResult r = train(tr_data, tr_ckpt, tr_log, cfg);
      std::cerr << "trained " << r.log.size() << " epochs";
      if (r.best_epoch >= 0) std::cerr << ", best epoch " << r.best_epoch << " loss " << fmt(r.best_loss);
      std::cerr << "\n";
    } else if (refine_cmd->parsed()) {
      refine_files(rf_probs, rf_image, rf_out, o.build());
    } else if (eval_cmd->parsed()) {
      const EvalReport r = evaluate(ev_pred, ev_truth, ev_mm, ev_out);
      for (const auto& c : r.cases) {
        std::cout << c.name << " dice=" << fmt(c.dice) << " jaccard=" << fmt(c.jaccard)
                  << " bahd=" << (std::isfinite(c.balanced_ahd) ? fmt(c.balanced_ahd) : "inf") << "\n";
      }
      for (const auto& [metric, s] : r.summary) {
        std::cout << metric << " " << fmt(s.mean) << " +- " << fmt(s.std) << " (n=" << s.n << ")\n";
      }
    } else if (synth_cmd->parsed()) {
      sy_opt.lps_affine = !sy_ras;
      synth(sy_n, sy_size, sy_seed, sy_out, sy_opt);
    }
  } catch (const Error& e) {
    std::cerr << "evcseg: " << e.kind() << " error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "evcseg: " << e.what() << "\n";
    return kExitCompute;
  }
  return kExitOk;
}
