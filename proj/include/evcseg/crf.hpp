#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

#include "evcseg/volume.hpp"

namespace evcseg {

enum class CrfBackend { kBrute, kFiltered };
enum class UpdateOrder { kParallel, kSequential };

struct CrfConfig {
  double w_appearance = 5.0;
  double w_smoothness = 3.0;
  double theta_alpha = 4.0;  // mm
  double theta_beta = 0.1;   // normalised intensity
  double theta_gamma = 3.0;  // mm
  int iterations = 5;
  CrfBackend backend = CrfBackend::kFiltered;
  UpdateOrder update_order = UpdateOrder::kParallel;

  /// Throws ConfigError on negative weights, non-positive bandwidths or
  /// negative iteration counts, and on sequential updates with the filtered
  /// backend.
  void validate() const;
};

/// Probabilities are clamped to [kUnaryClamp, 1 - kUnaryClamp] before the log.
constexpr double kUnaryClamp = 1e-6;

/// psi_u(l) per voxel, label-major like ProbMap.
struct UnaryField {
  int labels = 0;
  Shape3 shape{};
  std::vector<double> neg_log_probs;

  std::size_t voxels() const { return shape.voxels(); }
  double at(int label, std::size_t voxel) const { return neg_log_probs[label * voxels() + voxel]; }
};

/// Position in mm (world coordinates) and intensity normalised to [0, 1].
struct CrfFeature {
  Eigen::Vector3d position;
  double intensity = 0.0;
};

struct MeanFieldState {
  ProbMap q;
  std::vector<double> free_energy_trace;
  /// Set once any entry of the trace came from filtered messages.
  bool trace_approximate = false;

  /// Messages of `q` left by the last step (computed for its trace), reused
  /// by the next step when the kernel configuration is unchanged.
  ProbMap messages;
  std::vector<double> degree;
  CrfConfig messages_config;
};

UnaryField unary_from_probmap(const ProbMap& p);
/// softmax(-psi) per voxel.
ProbMap softmax_unary(const UnaryField& u, const Affine& affine = Affine::Identity());

/// Intensity min-max normalised; a constant volume maps to 0.
std::vector<CrfFeature> crf_features(const Volume& vol);

double pairwise_kernel(const CrfFeature& fi, const CrfFeature& fj, const CrfConfig& cfg);

/// Potts energy of a labelling. O(N^2); refuses volumes above
/// kGibbsEnergyMaxVoxels with CapacityError.
constexpr std::size_t kGibbsEnergyMaxVoxels = 4096;
double gibbs_energy(const LabelMask& x, const UnaryField& u, const Volume& vol,
                    const CrfConfig& cfg);

/// Exact variational free energy
///   sum Q psi + sum_{i<j} k_ij (1 - sum_l Q_i(l) Q_j(l)) + sum Q log Q.
/// O(N^2).
double free_energy(const ProbMap& q, const UnaryField& u, const Volume& vol, const CrfConfig& cfg);

/// sum_{j != i} k(f_i, f_j) q_j(l) for every voxel and label, exactly.
ProbMap brute_message_pass(const ProbMap& q, const Volume& vol, const CrfConfig& cfg);
/// Fast approximation of brute_message_pass: separable Gaussian blur for the
/// smoothness term, bilateral grid for the appearance term.
ProbMap filtered_message_pass(const ProbMap& q, const Volume& vol, const CrfConfig& cfg);

/// Coordinate update of a single voxel's marginal against the current q.
void update_voxel(ProbMap& q, std::size_t voxel, const UnaryField& u,
                  std::span<const CrfFeature> features, const CrfConfig& cfg);

/// q = softmax(-psi), empty trace.
MeanFieldState initial_state(const UnaryField& u, const Affine& affine = Affine::Identity());

/// One sweep. Parallel order recomputes every marginal from the previous q;
/// sequential order updates voxels in scan order (brute backend only). The
/// free energy after the sweep is appended to the trace.
MeanFieldState mean_field_step(const MeanFieldState& state, const UnaryField& u, const Volume& vol,
                               const CrfConfig& cfg);

struct RefineResult {
  LabelMask labels;
  MeanFieldState state;
};

/// cfg.iterations sweeps from softmax(-psi_u), then argmax. Exact ties in q
/// fall back to the input probabilities.
RefineResult refine(const ProbMap& p, const Volume& vol, const CrfConfig& cfg);

}  // namespace evcseg
