#include "evcseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "evcseg/checkpoint.hpp"
#include "evcseg/metrics.hpp"
#include "evcseg/nifti_io.hpp"
#include "evcseg/parallel.hpp"
#include "evcseg/postproc.hpp"
#include "json.hpp"

namespace evcseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(trim(part));
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("setting '" + key + "' expects a number, got '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("setting '" + key + "' expects an integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("setting '" + key + "' expects a boolean, got '" + v + "'");
}

Range parse_range(const std::string& key, const std::string& v) {
  const auto parts = split(v, ',');
  if (parts.size() != 2) throw ConfigError("setting '" + key + "' expects 'lo,hi'");
  return {parse_double(key, parts[0]), parse_double(key, parts[1])};
}

Shape3 parse_shape(const std::string& key, const std::string& v) {
  const auto parts = split(v, ',');
  if (parts.size() == 1) {
    const int n = static_cast<int>(parse_int(key, parts[0]));
    return {n, n, n};
  }
  if (parts.size() != 3) throw ConfigError("setting '" + key + "' expects n or nx,ny,nz");
  return {static_cast<int>(parse_int(key, parts[0])), static_cast<int>(parse_int(key, parts[1])),
          static_cast<int>(parse_int(key, parts[2]))};
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    }
  } else if (j.is_array()) {
    std::string joined;
    for (std::size_t k = 0; k < j.size(); ++k) {
      if (k) joined += ",";
      joined += j[k].is_string() ? j[k].get<std::string>() : j[k].dump();
    }
    out.emplace_back(prefix, joined);
  } else if (j.is_string()) {
    out.emplace_back(prefix, j.get<std::string>());
  } else {
    out.emplace_back(prefix, j.dump());
  }
}

const char* backend_name(CrfBackend b) { return b == CrfBackend::kBrute ? "brute" : "filtered"; }
const char* order_name(UpdateOrder o) { return o == UpdateOrder::kParallel ? "parallel" : "sequential"; }

json affine_json(const Affine& a) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) {
    json row = json::array();
    for (int c = 0; c < 4; ++c) row.push_back(a(r, c));
    rows.push_back(row);
  }
  return rows;
}

Affine affine_from(const json& j) {
  Affine a;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) a(r, c) = j.at(r).at(c).get<double>();
  }
  return a;
}

json shape_json(Shape3 s) { return json::array({s.nx, s.ny, s.nz}); }
Shape3 shape_from(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }

json crf_json(const CrfConfig& c) {
  return json{{"w_app", c.w_appearance},       {"w_smooth", c.w_smoothness},
              {"theta_alpha", c.theta_alpha},  {"theta_beta", c.theta_beta},
              {"theta_gamma", c.theta_gamma},  {"iterations", c.iterations},
              {"backend", backend_name(c.backend)}, {"update_order", order_name(c.update_order)}};
}

// Runs one pipeline stage, prefixing any library error with its name.
template <typename F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(name) + ": " + e.what());
  }
}

bool is_nifti(const fs::path& p) {
  const std::string s = p.filename().string();
  auto ends = [&](const std::string& suf) {
    return s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  return ends(".nii") || ends(".nii.gz");
}

std::map<std::string, fs::path> list_nifti(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_nifti(entry.path())) {
      out[entry.path().filename().string()] = entry.path();
    }
  }
  return out;
}

std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
  return s;
}

Tensor5 mask_tensor(const std::vector<const LabelMask*>& masks) {
  const Shape3 s = masks.front()->shape();
  Tensor5 t(Shape5{static_cast<int>(masks.size()), 1, s.nz, s.ny, s.nx});
  for (std::size_t b = 0; b < masks.size(); ++b) {
    auto plane = t.plane(static_cast<int>(b), 0);
    const auto src = masks[b]->data();
    for (std::size_t i = 0; i < src.size(); ++i) plane[i] = src[i];
  }
  return t;
}

std::vector<std::vector<double>> snapshot(EvNet& net) {
  std::vector<std::vector<double>> out;
  for (auto& p : net.parameters()) out.push_back(p.tensor->values);
  return out;
}

void restore(EvNet& net, const std::vector<std::vector<double>>& saved) {
  auto params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) params[k].tensor->values = saved[k];
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  long double sum = 0.0L;
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    sum += v;
    ++s.n;
  }
  if (s.n == 0) {
    s.mean = std::numeric_limits<double>::quiet_NaN();
    s.std = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = static_cast<double>(sum / s.n);
  long double ss = 0.0L;
  for (double v : values) {
    if (std::isfinite(v)) ss += (v - s.mean) * (v - s.mean);
  }
  s.std = s.n > 1 ? std::sqrt(static_cast<double>(ss / (s.n - 1))) : 0.0;
  return s;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

}  // namespace

void PipelineConfig::validate() const {
  net.validate();
  crf.validate();
  train.aug.validate();
  if (train.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (train.batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(train.lr > 0.0) || !std::isfinite(train.lr)) throw ConfigError("learning rate must be positive");
  if (!(train.momentum >= 0.0 && train.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(grid.spacing_mm > 0.0) || !std::isfinite(grid.spacing_mm)) {
    throw ConfigError("grid spacing must be positive");
  }
  const int unit = 2 << (net.levels - 1);  // resize-half times the network's downsampling
  for (int a = 0; a < 3; ++a) {
    if (grid.pad[a] <= 0 || grid.pad[a] % unit != 0) {
      throw ConfigError("padded grid must be a positive multiple of " + std::to_string(unit) +
                        " per axis");
    }
  }
}

void apply_setting(PipelineConfig& cfg, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string v = trim(raw_value);
  auto i32 = [&] { return static_cast<int>(parse_int(key, v)); };
  auto f64 = [&] { return parse_double(key, v); };

  if (key.rfind("net.", 0) == 0) cfg.net_explicit = true;
  if (key == "net.levels") cfg.net.levels = i32();
  else if (key == "net.base_channels") cfg.net.base_channels = i32();
  else if (key == "net.convs_per_block") {
    cfg.net.convs_per_block.clear();
    for (const auto& p : split(v, ',')) cfg.net.convs_per_block.push_back(static_cast<int>(parse_int(key, p)));
  } else if (key == "net.multiscale_inputs") cfg.net.multiscale_inputs = parse_bool(key, v);
  else if (key == "net.multiscale_mode") {
    if (v == "concat") cfg.net.multiscale_mode = MultiscaleMode::kConcat;
    else if (v == "add") cfg.net.multiscale_mode = MultiscaleMode::kAdd;
    else throw ConfigError("net.multiscale_mode must be concat or add");
  } else if (key == "net.prelu_init") cfg.net.prelu_init = f64();
  else if (key == "net.seed") cfg.net.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "net.kernel_size") cfg.net.kernel_size = i32();
  else if (key == "crf.iterations") cfg.crf.iterations = i32();
  else if (key == "crf.w_app") cfg.crf.w_appearance = f64();
  else if (key == "crf.w_smooth") cfg.crf.w_smoothness = f64();
  else if (key == "crf.theta_alpha") cfg.crf.theta_alpha = f64();
  else if (key == "crf.theta_beta") cfg.crf.theta_beta = f64();
  else if (key == "crf.theta_gamma") cfg.crf.theta_gamma = f64();
  else if (key == "crf.backend") {
    if (v == "brute") cfg.crf.backend = CrfBackend::kBrute;
    else if (v == "filtered") cfg.crf.backend = CrfBackend::kFiltered;
    else throw ConfigError("crf.backend must be brute or filtered");
  } else if (key == "crf.update_order") {
    if (v == "parallel") cfg.crf.update_order = UpdateOrder::kParallel;
    else if (v == "sequential") cfg.crf.update_order = UpdateOrder::kSequential;
    else throw ConfigError("crf.update_order must be parallel or sequential");
  } else if (key == "train.epochs") cfg.train.epochs = i32();
  else if (key == "train.batch_size") cfg.train.batch_size = i32();
  else if (key == "train.lr") cfg.train.lr = f64();
  else if (key == "train.momentum") cfg.train.momentum = f64();
  else if (key == "train.seed") cfg.train.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "train.augment") cfg.train.augment = parse_bool(key, v);
  else if (key == "aug.scale") cfg.train.aug.scale = parse_range(key, v);
  else if (key == "aug.shift") cfg.train.aug.shift = parse_range(key, v);
  else if (key == "aug.rot_deg") cfg.train.aug.max_rot_deg = f64();
  else if (key == "aug.trans_vox") cfg.train.aug.max_trans_vox = f64();
  else if (key == "aug.seed") cfg.train.aug.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "grid.pad") cfg.grid.pad = parse_shape(key, v);
  else if (key == "grid.spacing_mm") cfg.grid.spacing_mm = f64();
  else if (key == "cleanup") cfg.cleanup = parse_bool(key, v);
  else if (key == "eval.mm") cfg.distances_mm = parse_bool(key, v);
  else throw ConfigError("unknown setting '" + key + "'");
}

void apply_config_file(PipelineConfig& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const std::string head = trim(text);
  if (!head.empty() && head.front() == '{') {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
    std::vector<std::pair<std::string, std::string>> pairs;
    flatten(j, "", pairs);
    for (const auto& [k, v] : pairs) apply_setting(cfg, k, v);
    return;
  }
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    apply_setting(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
}

std::string config_summary_json(const PipelineConfig& cfg) {
  const auto& a = cfg.train.aug;
  json j{{"network", json::parse(config_to_json(cfg.net))},
         {"crf", crf_json(cfg.crf)},
         {"train",
          {{"epochs", cfg.train.epochs},
           {"batch_size", cfg.train.batch_size},
           {"lr", cfg.train.lr},
           {"momentum", cfg.train.momentum},
           {"seed", cfg.train.seed},
           {"augment", cfg.train.augment}}},
         {"aug",
          {{"scale", {a.scale.lo, a.scale.hi}},
           {"shift", {a.shift.lo, a.shift.hi}},
           {"rot_deg", a.max_rot_deg},
           {"trans_vox", a.max_trans_vox},
           {"seed", a.seed}}},
         {"grid", {{"pad", shape_json(cfg.grid.pad)}, {"spacing_mm", cfg.grid.spacing_mm}}},
         {"cleanup", cfg.cleanup}};
  return j.dump();
}

Volume normalize_intensity(const Volume& v) {
  std::vector<double> sorted(v.data().begin(), v.data().end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = 0.99 * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double p99 = sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
  const double scale = (std::isfinite(p99) && p99 > 0.0) ? 1.0 / p99 : 1.0;
  Volume out = v;
  for (auto& x : out.data()) x = std::clamp(x * scale, 0.0, 1.5);
  return out;
}

Tensor5 volume_tensor(const std::vector<const Volume*>& volumes) {
  if (volumes.empty()) throw ShapeError("no volumes to stack");
  const Shape3 s = volumes.front()->shape();
  Tensor5 t(Shape5{static_cast<int>(volumes.size()), 1, s.nz, s.ny, s.nx});
  for (std::size_t b = 0; b < volumes.size(); ++b) {
    if (!(volumes[b]->shape() == s)) throw ShapeError("volumes in a batch differ in shape");
    const auto src = volumes[b]->data();
    std::copy(src.begin(), src.end(), t.plane(static_cast<int>(b), 0).begin());
  }
  return t;
}

ProbMap network_probabilities(const EvNet& net, const Volume& v) {
  const Tensor5 probs = net.forward(volume_tensor({&v}));
  return ProbMap(2, v.shape(), probs.values, v.affine());
}

ExtractResult extract_volume(const Volume& native, const EvNet& net, const PipelineConfig& cfg) {
  cfg.validate();
  ExtractResult r;
  const Volume normalized = stage("normalize", [&] { return normalize_intensity(native); });
  const Preprocessed pre =
      stage("preprocess", [&] { return preprocess(normalized, cfg.grid.pad, cfg.grid.spacing_mm); });
  r.record = pre.record;
  r.probabilities = stage("network", [&] { return network_probabilities(net, pre.volume); });
  RefineResult refined = stage("crf", [&] { return refine(r.probabilities, pre.volume, cfg.crf); });
  r.free_energy_trace = refined.state.free_energy_trace;
  r.network_mask = std::move(refined.labels);
  if (cfg.cleanup) {
    Cleaned c = stage("cleanup", [&] { return cleanup(r.network_mask); });
    r.network_mask = std::move(c.mask);
    r.empty_foreground = c.empty_foreground;
  } else {
    r.empty_foreground = count_foreground(r.network_mask) == 0;
  }
  r.native_mask = stage("mask_to_native", [&] { return mask_to_native(r.network_mask, r.record); });
  return r;
}

fs::path sidecar_path(const fs::path& mask_path) {
  std::string name = mask_path.filename().string();
  for (const std::string suf : {".nii.gz", ".nii"}) {
    if (name.size() > suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0) {
      name.resize(name.size() - suf.size());
      break;
    }
  }
  return mask_path.parent_path() / (name + ".json");
}

std::string record_to_json(const PreprocessRecord& r) {
  json j{{"native_shape", shape_json(r.native_shape)},
         {"native_affine", affine_json(r.native_affine)},
         {"spacing_mm", r.spacing_mm},
         {"resampled_shape", shape_json(r.resampled_shape)},
         {"resampled_affine", affine_json(r.resampled_affine)},
         {"pad_offsets", r.pad_offsets},
         {"padded_shape", shape_json(r.padded_shape)},
         {"network_shape", shape_json(r.network_shape)},
         {"network_affine", affine_json(r.network_affine)}};
  return j.dump();
}

PreprocessRecord record_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    PreprocessRecord r;
    r.native_shape = shape_from(j.at("native_shape"));
    r.native_affine = affine_from(j.at("native_affine"));
    r.spacing_mm = j.at("spacing_mm").get<double>();
    r.resampled_shape = shape_from(j.at("resampled_shape"));
    r.resampled_affine = affine_from(j.at("resampled_affine"));
    r.pad_offsets = j.at("pad_offsets").get<std::array<int, 3>>();
    r.padded_shape = shape_from(j.at("padded_shape"));
    r.network_shape = shape_from(j.at("network_shape"));
    r.network_affine = affine_from(j.at("network_affine"));
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad preprocessing record: ") + e.what());
  }
}

void extract(const fs::path& input, const fs::path& output, const fs::path& checkpoint,
             const PipelineConfig& cfg, const std::optional<fs::path>& network_mask_out) {
  cfg.validate();
  if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint.string());
  const EvNet net = stage("checkpoint", [&] {
    return cfg.net_explicit ? load_checkpoint(checkpoint, cfg.net) : load_checkpoint(checkpoint);
  });
  const Volume native = stage("read", [&] { return read_nifti(input); });
  const ExtractResult r = extract_volume(native, net, cfg);
  stage("write", [&] {
    ensure_parent(output);
    write_nifti(r.native_mask, output);
    if (network_mask_out) {
      ensure_parent(*network_mask_out);
      write_nifti(r.network_mask, *network_mask_out);
    }
    return 0;
  });

  PipelineConfig used = cfg;
  used.net = net.config();
  json side{{"input", input.string()},
            {"output", output.string()},
            {"checkpoint", checkpoint.string()},
            {"network_config_hash", config_hash(net.config())},
            {"config", json::parse(config_summary_json(used))},
            {"preprocess", json::parse(record_to_json(r.record))},
            {"stages", {"normalize_intensity", "reorient_ras", "resample_isotropic", "pad_to",
                        "resize_half", "network", "crf_refine",
                        cfg.cleanup ? "cleanup" : "cleanup_skipped", "mask_to_native"}},
            {"free_energy_trace", r.free_energy_trace},
            {"empty_foreground", r.empty_foreground}};
  if (network_mask_out) side["network_mask"] = network_mask_out->string();
  std::ofstream out(sidecar_path(output));
  if (!out) throw IoError("cannot write sidecar: " + sidecar_path(output).string());
  out << side.dump(2) << "\n";
}

std::vector<Sample> load_training_pairs(const fs::path& data_dir, const GridConfig& grid) {
  const auto images = list_nifti(data_dir / "images");
  const auto masks = list_nifti(data_dir / "masks");
  std::vector<std::string> problems;
  for (const auto& [name, _] : masks) {
    if (!images.count(name)) problems.push_back("masks/" + name + " (no image)");
  }
  std::vector<std::string> names;
  for (const auto& [name, _] : images) {
    if (!masks.count(name)) problems.push_back("images/" + name + " (no mask)");
    else names.push_back(name);
  }
  std::vector<Sample> out(names.size());
  std::vector<std::string> errors(names.size());
  parallel_for(names.size(), [&](std::size_t k) {
    try {
      const Volume img = read_nifti(images.at(names[k]));
      const LabelMask m = read_nifti_mask(masks.at(names[k]));
      if (!(img.shape() == m.shape())) throw ShapeError("image and mask shapes differ");
      const Preprocessed pre = preprocess(normalize_intensity(img), grid.pad, grid.spacing_mm);
      out[k] = Sample{pre.volume, preprocess_mask(m, pre.record), names[k]};
    } catch (const std::exception& e) {
      errors[k] = names[k] + " (" + e.what() + ")";
    }
  });
  for (const auto& e : errors) {
    if (!e.empty()) problems.push_back(e);
  }
  if (!problems.empty()) throw DataError("unusable training pairs: " + join_names(problems));
  if (out.empty()) throw DataError("no training pairs under " + data_dir.string());
  return out;
}

double mean_soft_dice_loss(const EvNet& net, const std::vector<Sample>& samples) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  long double sum = 0.0L;
  for (const auto& s : samples) {
    const Tensor5 probs = net.forward(volume_tensor({&s.image}));
    sum += soft_dice_loss(probs, mask_tensor({&s.mask})).value;
  }
  return static_cast<double>(sum / samples.size());
}

double mean_dice(const EvNet& net, const std::vector<Sample>& samples) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  long double sum = 0.0L;
  for (const auto& s : samples) sum += dice(argmax(network_probabilities(net, s.image)), s.mask);
  return static_cast<double>(sum / samples.size());
}

TrainResult train_network(EvNet& net, const std::vector<Sample>& train,
                          const std::vector<Sample>& val, const TrainConfig& cfg,
                          const std::function<void(const EpochRecord&)>& on_epoch) {
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("bad epoch count or batch size");
  cfg.aug.validate();
  if (train.empty()) throw DataError("no training samples");
  for (const auto& s : train) {
    if (!(s.image.shape() == train.front().image.shape()) || !(s.mask.shape() == s.image.shape())) {
      throw DataError("training sample '" + s.name + "' does not match the network grid");
    }
  }
  TrainResult result;
  std::vector<std::vector<double>> best;
  SgdMomentum opt(cfg.lr, cfg.momentum);
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch)}));
    for (std::size_t k = n; k > 1; --k) std::swap(order[k - 1], order[shuffle.below(k)]);

    long double total = 0.0L;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - start);
      std::vector<Volume> images(count);
      std::vector<LabelMask> masks(count);
      parallel_for(count, [&](std::size_t b) {
        const Sample& s = train[order[start + b]];
        if (cfg.augment) {
          auto [v, m] = augment_pair(s.image, s.mask, cfg.aug, static_cast<std::uint64_t>(epoch),
                                     order[start + b]);
          images[b] = std::move(v);
          masks[b] = std::move(m);
        } else {
          images[b] = s.image;
          masks[b] = s.mask;
        }
      });
      std::vector<const Volume*> vp;
      std::vector<const LabelMask*> mp;
      for (std::size_t b = 0; b < count; ++b) {
        vp.push_back(&images[b]);
        mp.push_back(&masks[b]);
      }
      net.zero_grad();
      EvNetActivations acts;
      const Tensor5 probs = net.forward(volume_tensor(vp), acts);
      Tensor5 grad;
      const LossReport loss = soft_dice_loss(probs, mask_tensor(mp), &grad);
      if (!std::isfinite(loss.value)) throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
      net.backward(acts, grad);
      opt.step(net);
      total += loss.value * static_cast<double>(count);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = static_cast<double>(total / n);
    if (!val.empty()) rec.val_loss = mean_soft_dice_loss(net, val);
    const double criterion = val.empty() ? rec.train_loss : rec.val_loss;
    if (criterion < result.best_loss) {
      result.best_loss = criterion;
      result.best_epoch = epoch;
      best = snapshot(net);
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (result.best_epoch >= 0) restore(net, best);
  return result;
}

TrainResult train(const fs::path& data_dir, const fs::path& checkpoint, const fs::path& log_path,
                  const PipelineConfig& cfg) {
  cfg.validate();
  const std::vector<Sample> samples = stage("load", [&] { return load_training_pairs(data_dir, cfg.grid); });
  EvNet net(cfg.net);
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write loss log: " + log_path.string());
  log << "epoch,train_loss\n";
  log.flush();
  const TrainResult r = train_network(net, samples, {}, cfg.train, [&](const EpochRecord& rec) {
    log << rec.epoch << "," << json(rec.train_loss).dump() << "\n";
    log.flush();
  });
  save_checkpoint(net, checkpoint);
  return r;
}

void refine_files(const fs::path& probs, const fs::path& image, const fs::path& output,
                  const PipelineConfig& cfg) {
  cfg.crf.validate();
  const ProbMap p = stage("read", [&] { return read_nifti_probmap(probs); });
  const Volume v = stage("read", [&] { return read_nifti(image); });
  if (!(p.shape() == v.shape())) throw ShapeError("probability map and image differ in shape");
  p.validate();
  LabelMask m = stage("crf", [&] { return refine(p, v, cfg.crf).labels; });
  if (cfg.cleanup) m = cleanup(m).mask;
  m.set_affine(v.affine());
  ensure_parent(output);
  write_nifti(m, output);
}

EvalReport evaluate(const fs::path& pred_dir, const fs::path& truth_dir, bool distances_mm,
                    const std::optional<fs::path>& out_dir) {
  const auto preds = list_nifti(pred_dir);
  const auto truths = list_nifti(truth_dir);
  std::vector<std::string> unmatched;
  std::vector<std::string> names;
  for (const auto& [name, _] : preds) {
    if (!truths.count(name)) unmatched.push_back(pred_dir.filename().string() + "/" + name);
    else names.push_back(name);
  }
  for (const auto& [name, _] : truths) {
    if (!preds.count(name)) unmatched.push_back(truth_dir.filename().string() + "/" + name);
  }
  if (!unmatched.empty()) throw DataError("unmatched files: " + join_names(unmatched));
  if (names.empty()) throw DataError("no cases to evaluate");

  EvalReport report;
  report.cases.resize(names.size());
  std::vector<std::string> errors(names.size());
  parallel_for(names.size(), [&](std::size_t k) {
    try {
      const LabelMask p = read_nifti_mask(preds.at(names[k]));
      const LabelMask t = read_nifti_mask(truths.at(names[k]));
      CaseMetrics& c = report.cases[k];
      c.name = names[k];
      c.dice = dice(p, t);
      c.jaccard = jaccard(p, t);
      c.balanced_ahd = balanced_ahd(t, p, distances_mm);
      c.voxels_truth = count_foreground(t);
      c.voxels_pred = count_foreground(p);
    } catch (const std::exception& e) {
      errors[k] = names[k] + ": " + e.what();
    }
  });
  for (const auto& e : errors) {
    if (!e.empty()) throw DataError("evaluation failed for " + e);
  }

  std::vector<double> d, j, h;
  for (const auto& c : report.cases) {
    d.push_back(c.dice);
    j.push_back(c.jaccard);
    h.push_back(c.balanced_ahd);
  }
  report.summary["dice"] = summarize(d);
  report.summary["jaccard"] = summarize(j);
  report.summary["balanced_ahd"] = summarize(h);

  if (out_dir) {
    fs::create_directories(*out_dir);
    json cases = json::array();
    for (const auto& c : report.cases) {
      json rec{{"case", c.name},
               {"dice", c.dice},
               {"jaccard", c.jaccard},
               {"balanced_ahd", number_or_null(c.balanced_ahd)},
               {"voxels_truth", c.voxels_truth},
               {"voxels_pred", c.voxels_pred}};
      if (!std::isfinite(c.balanced_ahd)) {
        rec["flags"] = json::array({"empty_prediction", "balanced_ahd_infinite"});
      }
      cases.push_back(rec);
    }
    json summary = json::object();
    for (const auto& [metric, s] : report.summary) {
      summary[metric] = {{"mean", number_or_null(s.mean)}, {"std", number_or_null(s.std)}, {"n", s.n}};
    }
    std::ofstream rj(*out_dir / "report.json");
    rj << json{{"cases", cases}, {"summary", summary}, {"distance_units", distances_mm ? "mm" : "voxels"}}.dump(2)
       << "\n";
    std::ofstream csv(*out_dir / "summary.csv");
    csv << "metric,mean,std,n\n";
    for (const char* metric : {"dice", "jaccard", "balanced_ahd"}) {
      const MetricSummary& s = report.summary[metric];
      csv << metric << "," << number_or_null(s.mean).dump() << "," << number_or_null(s.std).dump()
          << "," << s.n << "\n";
    }
    if (!rj || !csv) throw IoError("cannot write evaluation output under " + out_dir->string());
  }
  return report;
}

}  // namespace evcseg
