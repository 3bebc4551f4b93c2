#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evcseg/augment.hpp"
#include "evcseg/crf.hpp"
#include "evcseg/evnet.hpp"
#include "evcseg/volume.hpp"

namespace evcseg {

/// Padded grid and isotropic spacing of the preprocessing chain. The network
/// sees the padded grid after one resize-half.
struct GridConfig {
  Shape3 pad{64, 64, 64};
  double spacing_mm = 1.0;

  static GridConfig desk() { return {}; }
  static GridConfig full() { return {{256, 256, 256}, 1.0}; }
  Shape3 network_shape() const { return {pad.nx / 2, pad.ny / 2, pad.nz / 2}; }
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 2;
  double lr = 0.02;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig aug;
};

struct PipelineConfig {
  EvNetConfig net;
  /// Set once any network key was given explicitly; extract then insists
  /// the checkpoint was trained with exactly this configuration.
  bool net_explicit = false;
  CrfConfig crf;
  TrainConfig train;
  GridConfig grid;
  bool cleanup = true;
  bool distances_mm = false;

  /// Throws ConfigError when a component is invalid or the padded grid does
  /// not survive the resize and the network's downsampling.
  void validate() const;
};

/// Applies one dotted key (e.g. "crf.w_app", "aug.scale") to the config.
void apply_setting(PipelineConfig& cfg, const std::string& key, const std::string& value);
/// Flat `key = value` lines (# comments) or a JSON object whose nested
/// objects flatten to dotted keys.
void apply_config_file(PipelineConfig& cfg, const std::filesystem::path& path);
std::string config_summary_json(const PipelineConfig& cfg);

/// Divides by the 99th-percentile intensity (linear interpolation between
/// order statistics) and clamps to [0, 1.5]. A non-positive percentile
/// leaves the scale at 1.
Volume normalize_intensity(const Volume& v);

/// Volume <-> (1, 1, nz, ny, nx) tensor; the memory layouts coincide.
Tensor5 volume_tensor(const std::vector<const Volume*>& volumes);
/// Two-label probability map of the network on one network-grid volume.
ProbMap network_probabilities(const EvNet& net, const Volume& v);

struct ExtractResult {
  LabelMask native_mask;
  LabelMask network_mask;  // after CRF and cleanup, on the network grid
  ProbMap probabilities;   // network output on the network grid
  PreprocessRecord record;
  std::vector<double> free_energy_trace;
  bool empty_foreground = false;
};

/// normalize -> reorient -> resample -> pad -> resize-half -> network ->
/// CRF -> cleanup -> back to the native grid. Stage failures are rethrown
/// with the stage name prefixed.
ExtractResult extract_volume(const Volume& native, const EvNet& net, const PipelineConfig& cfg);

/// File-level extract: writes the mask, a JSON sidecar next to it and,
/// optionally, the network-grid mask.
void extract(const std::filesystem::path& input, const std::filesystem::path& output,
             const std::filesystem::path& checkpoint, const PipelineConfig& cfg,
             const std::optional<std::filesystem::path>& network_mask_out = std::nullopt);

/// "<stem>.json" next to a .nii / .nii.gz path.
std::filesystem::path sidecar_path(const std::filesystem::path& mask_path);
std::string record_to_json(const PreprocessRecord& r);
PreprocessRecord record_from_json(const std::string& text);

/// A training pair already on the network grid.
struct Sample {
  Volume image;
  LabelMask mask;
  std::string name;
};

/// Reads data_dir/images/* and data_dir/masks/* (matched by filename) and
/// maps both onto the network grid. All offending files are listed in one
/// DataError.
std::vector<Sample> load_training_pairs(const std::filesystem::path& data_dir,
                                        const GridConfig& grid);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochRecord> log;
  int best_epoch = -1;
  double best_loss = std::numeric_limits<double>::infinity();
};

/// Shuffled minibatches, optional augmentation, soft-Dice loss, momentum
/// SGD. The best epoch is chosen by validation loss when `val` is non-empty,
/// else by training loss, and its weights are left in `net`.
TrainResult train_network(EvNet& net, const std::vector<Sample>& train,
                          const std::vector<Sample>& val, const TrainConfig& cfg,
                          const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Mean soft-Dice loss of the network over the samples (no augmentation).
double mean_soft_dice_loss(const EvNet& net, const std::vector<Sample>& samples);
/// Mean hard Dice of the argmax labelling.
double mean_dice(const EvNet& net, const std::vector<Sample>& samples);

/// File-level train: writes the best checkpoint and a CSV loss log.
TrainResult train(const std::filesystem::path& data_dir, const std::filesystem::path& checkpoint,
                  const std::filesystem::path& log_path, const PipelineConfig& cfg);

/// CRF refinement of a stored probability map (4D NIfTI, labels last) with
/// the matching intensity image; optional cleanup.
void refine_files(const std::filesystem::path& probs, const std::filesystem::path& image,
                  const std::filesystem::path& output, const PipelineConfig& cfg);

struct CaseMetrics {
  std::string name;
  double dice = 0.0;
  double jaccard = 0.0;
  double balanced_ahd = 0.0;  // +inf for an empty prediction
  std::size_t voxels_truth = 0;
  std::size_t voxels_pred = 0;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;  // finite values used
};

struct EvalReport {
  std::vector<CaseMetrics> cases;
  std::map<std::string, MetricSummary> summary;
};

/// Pairs masks by filename, scores each pair, writes report.json and
/// summary.csv into out_dir when given. Unmatched files raise DataError.
EvalReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& truth_dir,
                    bool distances_mm = false,
                    const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace evcseg
