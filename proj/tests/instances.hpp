#pragma once

#include <cmath>
#include <vector>

#include "evcseg/crf.hpp"
#include "evcseg/rng.hpp"
#include "evcseg/volume.hpp"

namespace instances {

using namespace evcseg;

struct CrfInstance {
  Volume image;
  ProbMap unary;      // network-like probabilities
  LabelMask truth;
};

/// 12^3 ball of radius 4 about the centre, intensity 0.8 inside and 0.2
/// outside plus N(0, 0.05) noise. The unary map is 0.9 confident in the
/// true label except on 5% of voxels, where the label is flipped.
inline CrfInstance noisy_sphere(std::uint64_t seed) {
  Rng rng(seed);
  const Shape3 s{12, 12, 12};
  CrfInstance inst{Volume(s), ProbMap(2, s), LabelMask(s)};
  for (int z = 0; z < 12; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) {
        const double dx = x - 5.5, dy = y - 5.5, dz = z - 5.5;
        const bool in = dx * dx + dy * dy + dz * dz <= 16.0;
        const std::size_t i = inst.image.index(x, y, z);
        inst.truth[i] = in;
        inst.image[i] = (in ? 0.8 : 0.2) + 0.05 * rng.normal();
        const bool flip = rng.uniform() < 0.05;
        const double fg = (in != flip) ? 0.9 : 0.1;
        inst.unary.at(1, i) = fg;
        inst.unary.at(0, i) = 1.0 - fg;
      }
  return inst;
}

/// Random structured instance: one to three bright spherical blobs
/// (radius U(1.5, 4) voxels, intensity U(0.3, 1)) on a 0.1 background with
/// N(0, 0.05) noise, at 1 or 2 mm spacing and up to 12^3. The unary map is
/// confident in the blob labelling by U(0.55, 0.95) with 10% of labels
/// flipped. `weight_scale` ~ U(0.1, 1) is the appearance weight; the
/// smoothness weight is 0.6 of it, the default 5:3 ratio.
struct StructuredInstance {
  Volume image;
  ProbMap unary;
  double weight_scale = 1.0;
};

inline StructuredInstance structured(std::uint64_t seed) {
  Rng rng(seed);
  const Shape3 s{6 + static_cast<int>(rng.below(7)), 6 + static_cast<int>(rng.below(7)),
                 6 + static_cast<int>(rng.below(7))};
  const double sp = rng.uniform() < 0.5 ? 1.0 : 2.0;
  Affine a = Affine::Identity();
  for (int k = 0; k < 3; ++k) a(k, k) = sp;
  StructuredInstance inst{Volume(s, a), ProbMap(2, s, a)};
  LabelMask label(s);
  struct Blob {
    double x, y, z, r, level;
  };
  std::vector<Blob> blobs(1 + rng.below(3));
  for (Blob& b : blobs) {
    b.x = rng.uniform(0, s.nx);
    b.y = rng.uniform(0, s.ny);
    b.z = rng.uniform(0, s.nz);
    b.r = rng.uniform(1.5, 4.0);
    b.level = rng.uniform(0.3, 1.0);
  }
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        double value = 0.1;
        for (const Blob& b : blobs) {
          if (std::hypot(x - b.x, y - b.y, z - b.z) < b.r) {
            value = b.level;
            label(x, y, z) = 1;
          }
        }
        inst.image(x, y, z) = value + 0.05 * rng.normal();
      }
  for (std::size_t i = 0; i < inst.image.size(); ++i) {
    const double conf = rng.uniform(0.55, 0.95);
    int l = label[i];
    if (rng.uniform() < 0.1) l = 1 - l;
    inst.unary.at(l, i) = conf;
    inst.unary.at(1 - l, i) = 1.0 - conf;
  }
  inst.weight_scale = rng.uniform(0.1, 1.0);
  return inst;
}

/// Unstructured instance: uniform random intensities and foreground
/// probabilities in [0.05, 0.95].
inline StructuredInstance white_noise(std::uint64_t seed, Shape3 s) {
  Rng rng(seed);
  StructuredInstance inst{Volume(s), ProbMap(2, s)};
  for (std::size_t i = 0; i < inst.image.size(); ++i) {
    inst.image[i] = rng.uniform();
    inst.unary.at(1, i) = rng.uniform(0.05, 0.95);
    inst.unary.at(0, i) = 1.0 - inst.unary.at(1, i);
  }
  return inst;
}

}  // namespace instances
