#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "evcseg/checkpoint.hpp"
#include "evcseg/metrics.hpp"
#include "evcseg/nifti_io.hpp"
#include "evcseg/phantom.hpp"
#include "evcseg/pipeline.hpp"
#include "evcseg/postproc.hpp"
#include "json.hpp"
#include "instances.hpp"
#include "oracles.hpp"

using namespace evcseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// 16^3 padded grid at 2 mm, network on 8^3. Phantoms of size 16 with a 32 mm
// extent land on it without cropping.
PipelineConfig small_config() {
  PipelineConfig c;
  c.grid.pad = {16, 16, 16};
  c.grid.spacing_mm = 2.0;
  c.net.kernel_size = 3;
  c.net.seed = 9;
  c.train.epochs = 2;
  c.crf.iterations = 3;
  return c;
}

PhantomOptions small_phantom() {
  PhantomOptions o;
  o.extent_mm = 32.0;
  return o;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("settings and config files") {
  const fs::path dir = oracle::scratch_dir("pipeline_config");
  PipelineConfig c;
  CHECK_FALSE(c.net_explicit);
  spit(dir / "a.cfg",
       "# comment line\n"
       "crf.w_app = 3.5   # trailing comment\n"
       "crf.backend=brute\n"
       "aug.scale = 0.8, 1.2\n"
       "grid.pad = 32\n"
       "\n"
       "net.convs_per_block = 1,1,2\n"
       "net.levels = 3\n");
  apply_config_file(c, dir / "a.cfg");
  CHECK(c.crf.w_appearance == 3.5);
  CHECK(c.crf.backend == CrfBackend::kBrute);
  CHECK(c.train.aug.scale.lo == 0.8);
  CHECK(c.train.aug.scale.hi == 1.2);
  CHECK(c.grid.pad == Shape3{32, 32, 32});
  CHECK(c.net.convs_per_block == std::vector<int>{1, 1, 2});
  CHECK(c.net_explicit);
  CHECK_NOTHROW(c.validate());

  PipelineConfig j;
  spit(dir / "b.json",
       R"({"crf": {"iterations": 7, "update_order": "sequential", "backend": "brute"},
           "train": {"lr": 0.5, "augment": false}, "grid": {"pad": [16, 32, 48]}, "cleanup": false})");
  apply_config_file(j, dir / "b.json");
  CHECK(j.crf.iterations == 7);
  CHECK(j.crf.update_order == UpdateOrder::kSequential);
  CHECK(j.train.lr == 0.5);
  CHECK_FALSE(j.train.augment);
  CHECK(j.grid.pad == Shape3{16, 32, 48});
  CHECK_FALSE(j.cleanup);
  CHECK_FALSE(j.net_explicit);

  PipelineConfig e;
  CHECK_THROWS_AS(apply_setting(e, "crf.w_apperance", "1"), ConfigError);
  CHECK_THROWS_AS(apply_setting(e, "crf.w_app", "lots"), ConfigError);
  CHECK_THROWS_AS(apply_setting(e, "crf.backend", "fast"), ConfigError);
  CHECK_THROWS_AS(apply_setting(e, "cleanup", "maybe"), ConfigError);
  CHECK_THROWS_AS(apply_setting(e, "grid.pad", "1,2"), ConfigError);
  spit(dir / "c.cfg", "crf.w_app 3\n");
  CHECK_THROWS_AS(apply_config_file(e, dir / "c.cfg"), ConfigError);
  CHECK_THROWS_AS(apply_config_file(e, dir / "missing.cfg"), IoError);
}

TEST_CASE("config validation") {
  PipelineConfig c;
  CHECK_NOTHROW(c.validate());
  c.grid.pad = {64, 64, 66};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.net.levels = 3;
  c.net.convs_per_block = {1, 2, 2};
  c.grid.pad = {76, 76, 76};  // a multiple of 4 but not of 8
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.grid.pad = {80, 80, 80};
  CHECK_NOTHROW(c.validate());
  c = PipelineConfig{};
  c.train.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.grid.spacing_mm = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  const json summary = json::parse(config_summary_json(PipelineConfig{}));
  CHECK(summary.at("grid").at("pad") == json::array({64, 64, 64}));
  CHECK(summary.at("crf").at("backend") == "filtered");
}

TEST_CASE("intensity normalisation") {
  Volume v({101, 1, 1});
  for (int i = 0; i <= 100; ++i) v[i] = i;
  v[0] = -5.0;
  const Volume n = normalize_intensity(v);
  // Sorted values are -5, 1, 2, ..., 100; the 99th percentile sits exactly
  // on the order statistic at 99.
  CHECK(n[0] == 0.0);
  CHECK(n[50] == doctest::Approx(50.0 / 99.0));
  CHECK(n[99] == doctest::Approx(1.0));
  CHECK(n[100] == doctest::Approx(100.0 / 99.0));

  Volume big({4, 1, 1});
  big[0] = 0.0;
  big[1] = 0.0;
  big[2] = 0.0;
  big[3] = 100.0;
  // p99 = 97 on the segment [0, 100] between the last two order statistics.
  const Volume nb = normalize_intensity(big);
  CHECK(nb[3] == doctest::Approx(100.0 / 97.0));

  const Volume zeros({3, 3, 3});
  CHECK(normalize_intensity(zeros).vector() == zeros.vector());
  const Volume neg({2, 2, 2}, Affine::Identity(), -2.0);
  const Volume nn = normalize_intensity(neg);
  for (double x : nn.data()) CHECK(x == 0.0);
  const Volume hot = normalize_intensity(Volume({2, 2, 2}, Affine::Identity(), 40.0));
  for (double x : hot.data()) CHECK(x == doctest::Approx(1.0));
}

TEST_CASE("preprocessing record survives the sidecar") {
  const PhantomCase c = make_phantom(16, 4, small_phantom());
  const PipelineConfig cfg = small_config();
  const Preprocessed pre = preprocess(c.image, cfg.grid.pad, cfg.grid.spacing_mm);
  const PreprocessRecord back = record_from_json(record_to_json(pre.record));
  CHECK(back.native_shape == pre.record.native_shape);
  CHECK(back.network_shape == pre.record.network_shape);
  CHECK(back.pad_offsets == pre.record.pad_offsets);
  CHECK((back.native_affine - pre.record.native_affine).cwiseAbs().maxCoeff() == 0.0);
  const LabelMask net = preprocess_mask(c.mask, pre.record);
  CHECK(mask_to_native(net, back).vector() == mask_to_native(net, pre.record).vector());
  CHECK_THROWS_AS(record_from_json("{\"native_shape\": [1, 2]}"), FormatError);

  CHECK(sidecar_path("out/case_001.nii.gz") == fs::path("out/case_001.json"));
  CHECK(sidecar_path("x.nii") == fs::path("x.json"));
}

TEST_CASE("phantoms") {
  const PhantomOptions o = small_phantom();
  const PhantomCase a = make_phantom(24, 3, o);
  const PhantomCase b = make_phantom(24, 3, o);
  CHECK(a.image.vector() == b.image.vector());
  CHECK(a.mask.vector() == b.mask.vector());
  CHECK(make_phantom(24, 4, o).image.vector() != a.image.vector());
  CHECK(oracle::flood_fill_sizes(a.mask, 1, 26).size() == 1);
  CHECK(fill_background_holes(a.mask).vector() == a.mask.vector());

  double in = 0.0, out = 0.0;
  std::size_t n_in = 0;
  for (std::size_t i = 0; i < a.mask.size(); ++i) {
    if (a.mask[i]) {
      in += a.image[i];
      ++n_in;
    } else {
      out += a.image[i];
    }
  }
  CHECK(in / n_in - out / (a.mask.size() - n_in) >= 0.2);
  CHECK_THROWS_AS(make_phantom(8, 1), ConfigError);

  const fs::path d1 = oracle::scratch_dir("pipeline_synth1");
  const fs::path d2 = oracle::scratch_dir("pipeline_synth2");
  synth(2, 16, 7, d1, o);
  synth(2, 16, 7, d2, o);
  for (const char* sub : {"images", "masks"}) {
    for (int i = 0; i < 2; ++i) {
      const std::string name = case_name(i) + ".nii.gz";
      CHECK(slurp(d1 / sub / name) == slurp(d2 / sub / name));
    }
  }
  CHECK(case_name(7) == "case_007");
}

TEST_CASE("evaluation report") {
  const fs::path dir = oracle::scratch_dir("pipeline_eval");
  fs::create_directories(dir / "pred");
  fs::create_directories(dir / "truth");
  LabelMask t({4, 4, 1}), p({4, 4, 1});
  for (int x : {0, 1, 2, 3}) t(x, 0, 0) = 1;
  for (int x : {1, 2, 3}) p(x, 0, 0) = 1;
  for (int x : {0, 1, 2}) p(x, 1, 0) = 1;
  write_nifti(t, dir / "truth" / "a.nii.gz");
  write_nifti(t, dir / "pred" / "a.nii.gz");
  write_nifti(t, dir / "truth" / "b.nii.gz");
  write_nifti(p, dir / "pred" / "b.nii.gz");
  write_nifti(t, dir / "truth" / "c.nii.gz");
  write_nifti(LabelMask({4, 4, 1}), dir / "pred" / "c.nii.gz");

  const EvalReport r = evaluate(dir / "pred", dir / "truth", false, dir / "out");
  REQUIRE(r.cases.size() == 3);
  CHECK(r.cases[0].name == "a.nii.gz");
  CHECK(r.cases[0].dice == 1.0);
  CHECK(r.cases[0].balanced_ahd == 0.0);
  CHECK(r.cases[1].dice == 0.6);
  CHECK(r.cases[1].jaccard == 3.0 / 7.0);
  CHECK(r.cases[1].voxels_pred == 6);
  CHECK(r.cases[2].dice == 0.0);
  CHECK(std::isinf(r.cases[2].balanced_ahd));

  const MetricSummary& d = r.summary.at("dice");
  CHECK(d.n == 3);
  CHECK(d.mean == doctest::Approx(1.6 / 3.0));
  const double m = 1.6 / 3.0;
  const double var = ((1 - m) * (1 - m) + (0.6 - m) * (0.6 - m) + m * m) / 2.0;
  CHECK(d.std == doctest::Approx(std::sqrt(var)));
  CHECK(r.summary.at("balanced_ahd").n == 2);

  const json report = json::parse(slurp(dir / "out" / "report.json"));
  CHECK(report.at("cases").at(2).at("balanced_ahd").is_null());
  CHECK(report.at("cases").at(2).at("flags").size() == 2);
  CHECK_FALSE(report.at("cases").at(0).contains("flags"));
  CHECK(report.at("distance_units") == "voxels");
  const std::string csv = slurp(dir / "out" / "summary.csv");
  CHECK(csv.rfind("metric,mean,std,n\n", 0) == 0);
  CHECK(csv.find("balanced_ahd,") != std::string::npos);

  // A single identical pair: dice 1 with zero spread.
  fs::create_directories(dir / "one_pred");
  fs::create_directories(dir / "one_truth");
  write_nifti(t, dir / "one_pred" / "a.nii");
  write_nifti(t, dir / "one_truth" / "a.nii");
  const EvalReport one = evaluate(dir / "one_pred", dir / "one_truth");
  CHECK(one.summary.at("dice").mean == 1.0);
  CHECK(one.summary.at("dice").std == 0.0);

  write_nifti(t, dir / "pred" / "extra.nii.gz");
  try {
    evaluate(dir / "pred", dir / "truth");
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("extra.nii.gz") != std::string::npos);
  }
  CHECK_THROWS_AS(evaluate(dir / "nowhere", dir / "truth"), IoError);
}

TEST_CASE("training pairs and the loss log") {
  const fs::path dir = oracle::scratch_dir("pipeline_train");
  synth(3, 16, 11, dir / "data", small_phantom());
  PipelineConfig cfg = small_config();

  const auto samples = load_training_pairs(dir / "data", cfg.grid);
  REQUIRE(samples.size() == 3);
  CHECK(samples[0].image.shape() == Shape3{8, 8, 8});
  CHECK(samples[0].name == "case_000.nii.gz");

  cfg.train.epochs = 0;
  train(dir / "data", dir / "zero.ckpt", dir / "zero.csv", cfg);
  CHECK(slurp(dir / "zero.csv") == "epoch,train_loss\n");
  CHECK(fs::exists(dir / "zero.ckpt"));

  cfg.train.epochs = 2;
  const TrainResult r1 = train(dir / "data", dir / "a.ckpt", dir / "a.csv", cfg);
  const TrainResult r2 = train(dir / "data", dir / "b.ckpt", dir / "b.csv", cfg);
  CHECK(r1.log.size() == 2);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  for (const auto& e : r1.log) CHECK(std::isfinite(e.train_loss));
  CHECK(r1.best_loss == std::min(r1.log[0].train_loss, r1.log[1].train_loss));

  fs::remove(dir / "data" / "masks" / "case_001.nii.gz");
  spit(dir / "data" / "masks" / "stray.nii", "not nifti");
  try {
    load_training_pairs(dir / "data", cfg.grid);
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    const std::string what = e.what();
    CHECK(what.find("case_001.nii.gz") != std::string::npos);
    CHECK(what.find("stray.nii") != std::string::npos);
  }
}

TEST_CASE("extraction") {
  const fs::path dir = oracle::scratch_dir("pipeline_extract");
  PipelineConfig cfg = small_config();
  const EvNet net(cfg.net);
  const PhantomCase c = make_phantom(16, 5, small_phantom());

  SUBCASE("without refinement or cleanup it is the network argmax on the native grid") {
    cfg.crf.iterations = 0;
    cfg.cleanup = false;
    const ExtractResult r = extract_volume(c.image, net, cfg);
    CHECK(r.native_mask.shape() == c.image.shape());
    CHECK((r.native_mask.affine() - c.image.affine()).cwiseAbs().maxCoeff() < 1e-9);
    const Preprocessed pre = preprocess(normalize_intensity(c.image), cfg.grid.pad, cfg.grid.spacing_mm);
    const LabelMask expect = mask_to_native(argmax(network_probabilities(net, pre.volume)), pre.record);
    CHECK(r.native_mask.vector() == expect.vector());
    CHECK(r.free_energy_trace.empty());
  }
  SUBCASE("deterministic, and cleanup leaves at most one component") {
    const ExtractResult a = extract_volume(c.image, net, cfg);
    const ExtractResult b = extract_volume(c.image, net, cfg);
    CHECK(a.native_mask.vector() == b.native_mask.vector());
    CHECK(a.free_energy_trace == b.free_energy_trace);
    CHECK(oracle::flood_fill_sizes(a.network_mask, 1, 26).size() <= 1);
    CHECK(a.empty_foreground == (count_foreground(a.network_mask) == 0));
  }
  SUBCASE("stage failures carry the stage name") {
    const PhantomCase wide = make_phantom(40, 5);  // 60 mm does not fit in 32 mm
    try {
      extract_volume(wide.image, net, cfg);
      FAIL("expected a size error");
    } catch (const Error& e) {
      CHECK(e.kind() == "size");
      CHECK(std::string(e.what()).rfind("preprocess: ", 0) == 0);
    }
  }
  SUBCASE("file level") {
    save_checkpoint(net, dir / "net.ckpt");
    write_nifti(c.image, dir / "in.nii.gz");
    extract(dir / "in.nii.gz", dir / "out.nii.gz", dir / "net.ckpt", cfg, dir / "net_grid.nii.gz");
    const LabelMask m = read_nifti_mask(dir / "out.nii.gz");
    CHECK(m.shape() == c.image.shape());
    CHECK(read_nifti_mask(dir / "net_grid.nii.gz").shape() == Shape3{8, 8, 8});
    const json side = json::parse(slurp(dir / "out.json"));
    CHECK(side.at("network_config_hash") == config_hash(net.config()));
    CHECK(side.at("stages").size() == 9);
    CHECK(side.at("free_energy_trace").size() == 3);
    const PreprocessRecord rec = record_from_json(side.at("preprocess").dump());
    CHECK(rec.native_shape == c.image.shape());

    CHECK_THROWS_AS(extract(dir / "in.nii.gz", dir / "o2.nii", dir / "absent.ckpt", cfg), IoError);
    PipelineConfig other = cfg;
    apply_setting(other, "net.base_channels", "3");
    try {
      extract(dir / "in.nii.gz", dir / "o3.nii", dir / "net.ckpt", other);
      FAIL("expected a configuration mismatch");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).rfind("checkpoint: ", 0) == 0);
    }
  }
}

TEST_CASE("refinement from files") {
  const fs::path dir = oracle::scratch_dir("pipeline_refine");
  const auto inst = instances::noisy_sphere(32);
  const Volume& v = inst.image;
  const ProbMap& p = inst.unary;
  const LabelMask& truth = inst.truth;
  write_nifti(v, dir / "img.nii");
  write_nifti(p, dir / "probs.nii");
  PipelineConfig cfg;
  cfg.crf.backend = CrfBackend::kBrute;
  refine_files(dir / "probs.nii", dir / "img.nii", dir / "out.nii", cfg);
  const LabelMask m = read_nifti_mask(dir / "out.nii");
  CHECK(dice(m, truth) > dice(argmax(p), truth));

  write_nifti(Volume({12, 12, 11}), dir / "small.nii");
  CHECK_THROWS_AS(refine_files(dir / "probs.nii", dir / "small.nii", dir / "o.nii", cfg), ShapeError);
}

}  // TEST_SUITE
