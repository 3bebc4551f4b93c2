#pragma once

#include <cstdint>
#include <filesystem>

#include "evcseg/volume.hpp"

namespace evcseg {

struct PhantomCase {
  Volume image;
  LabelMask mask;
};

struct PhantomOptions {
  /// Physical extent of the cube in mm; spacing = extent / size.
  double extent_mm = 60.0;
  /// Equal radii instead of an ellipsoid.
  bool spherical = false;
  /// Flip x and y in the affine so reorientation has work to do.
  bool lps_affine = true;
  double brain_intensity = 0.7;
  double skull_intensity = 0.9;
  double noise_sigma = 0.05;
};

/// Head phantom: an ellipsoidal "brain" with a thin outer shell "skull"
/// separated by a dark gap, Gaussian noise on top. The mask is the brain.
/// Deterministic in (size, seed, options).
PhantomCase make_phantom(int size, std::uint64_t seed, const PhantomOptions& options = {});

/// Writes cases 0..n-1 as out_dir/images/case_XXX.nii.gz and
/// out_dir/masks/case_XXX.nii.gz. Throws ConfigError for size < 16.
void synth(int n, int size, std::uint64_t seed, const std::filesystem::path& out_dir,
           const PhantomOptions& options = {});

std::string case_name(int index);

}  // namespace evcseg
