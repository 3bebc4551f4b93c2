#include "evcseg/phantom.hpp"

#include <cstdio>

#include "evcseg/nifti_io.hpp"
#include "evcseg/rng.hpp"

namespace evcseg {

PhantomCase make_phantom(int size, std::uint64_t seed, const PhantomOptions& options) {
  if (size < 16) throw ConfigError("phantom size must be at least 16");
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(size)}));
  const double sp = options.extent_mm / size;

  // Geometry in mm relative to the cube centre.
  Eigen::Vector3d centre;
  for (int a = 0; a < 3; ++a) centre[a] = rng.uniform(-0.05, 0.05) * options.extent_mm;
  Eigen::Vector3d radii;
  const double r0 = rng.uniform(0.25, 0.32) * options.extent_mm;
  for (int a = 0; a < 3; ++a) {
    radii[a] = options.spherical ? r0 : rng.uniform(0.24, 0.32) * options.extent_mm;
  }
  const double gap = 0.05 * options.extent_mm;
  const double shell = 0.05 * options.extent_mm;

  Affine affine = Affine::Identity();
  const double sx = options.lps_affine ? -sp : sp;
  affine(0, 0) = sx;
  affine(1, 1) = sx;
  affine(2, 2) = sp;
  // World origin at the cube centre.
  affine(0, 3) = -sx * (size - 1) / 2.0;
  affine(1, 3) = -sx * (size - 1) / 2.0;
  affine(2, 3) = -sp * (size - 1) / 2.0;

  const Shape3 shape{size, size, size};
  PhantomCase out{Volume(shape, affine), LabelMask(shape, affine)};
  for (int z = 0; z < size; ++z) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const Eigen::Vector3d p((x - (size - 1) / 2.0) * sp, (y - (size - 1) / 2.0) * sp,
                                (z - (size - 1) / 2.0) * sp);
        const Eigen::Vector3d d = p - centre;
        // Scaled radius: 1 on the brain surface.
        const double rho = d.cwiseQuotient(radii).norm();
        // Approximate distance (mm) outside the brain surface.
        const double r_mean = radii.mean();
        const double outside = (rho - 1.0) * r_mean;
        double v = 0.0;
        if (rho <= 1.0) {
          v = options.brain_intensity;
          out.mask(x, y, z) = 1;
        } else if (outside > gap && outside <= gap + shell) {
          v = options.skull_intensity;
        }
        out.image(x, y, z) = v + options.noise_sigma * rng.normal();
      }
    }
  }
  return out;
}

std::string case_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%03d", index);
  return buf;
}

void synth(int n, int size, std::uint64_t seed, const std::filesystem::path& out_dir,
           const PhantomOptions& options) {
  if (n < 0) throw ConfigError("case count must be non-negative");
  if (size < 16) throw ConfigError("phantom size must be at least 16");
  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "masks");
  for (int i = 0; i < n; ++i) {
    const PhantomCase c = make_phantom(size, derive_seed(seed, {static_cast<std::uint64_t>(i)}), options);
    const std::string name = case_name(i) + ".nii.gz";
    write_nifti(c.image, out_dir / "images" / name);
    write_nifti(c.mask, out_dir / "masks" / name);
  }
}

}  // namespace evcseg
