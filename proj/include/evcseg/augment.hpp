#pragma once

#include <Eigen/Dense>

#include <utility>

#include "evcseg/rng.hpp"
#include "evcseg/volume.hpp"

namespace evcseg {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentConfig {
  Range scale{0.9, 1.1};
  Range shift{-0.05, 0.05};
  double max_rot_deg = 10.0;
  double max_trans_vox = 5.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError for non-finite or inverted ranges, a non-positive
  /// scale or negative bounds.
  void validate() const;
};

/// v' = s * v + t with s ~ U(scale), t ~ U(shift), drawn once.
Volume intensity_augment(const Volume& v, Rng& rng, Range scale, Range shift);

/// Rotation about the volume centre followed by a translation, in voxels:
/// p' = R (p - c) + c + t.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// Euler angles (x, then y, then z) uniform in +-max_rot_deg and a
/// translation uniform in +-max_trans_vox per axis.
RigidTransform random_rigid(Rng& rng, double max_rot_deg, double max_trans_vox);

/// Resamples by inverse mapping: trilinear for the image, nearest for the
/// mask; anything mapped from outside the field of view becomes 0.
std::pair<Volume, LabelMask> apply_rigid(const Volume& v, const LabelMask& m,
                                         const RigidTransform& t);

std::pair<Volume, LabelMask> rigid_augment(const Volume& v, const LabelMask& m, Rng& rng,
                                           double max_rot_deg, double max_trans_vox);

/// Intensity then rigid augmentation, using the stream for item `index`.
std::pair<Volume, LabelMask> augment_pair(const Volume& v, const LabelMask& m,
                                          const AugmentConfig& cfg, std::uint64_t epoch,
                                          std::uint64_t index);

}  // namespace evcseg
