#include "evcseg/augment.hpp"

#include <cmath>
#include <numbers>

namespace evcseg {

void AugmentConfig::validate() const {
  auto ok = [](Range r) { return std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo <= r.hi; };
  if (!ok(scale) || !ok(shift)) throw ConfigError("augmentation ranges must be finite with lo <= hi");
  if (scale.lo <= 0.0) throw ConfigError("augmentation scale must be positive");
  if (!(max_rot_deg >= 0.0) || !(max_trans_vox >= 0.0) || !std::isfinite(max_rot_deg) ||
      !std::isfinite(max_trans_vox)) {
    throw ConfigError("augmentation bounds must be finite and non-negative");
  }
}

Volume intensity_augment(const Volume& v, Rng& rng, Range scale, Range shift) {
  const double s = rng.uniform(scale.lo, scale.hi);
  const double t = rng.uniform(shift.lo, shift.hi);
  Volume out = v;
  for (auto& x : out.data()) x = s * x + t;
  return out;
}

RigidTransform random_rigid(Rng& rng, double max_rot_deg, double max_trans_vox) {
  const double max_rad = max_rot_deg * std::numbers::pi / 180.0;
  double angle[3];
  for (double& a : angle) a = rng.uniform(-max_rad, max_rad);
  RigidTransform t;
  for (int a = 0; a < 3; ++a) t.translation[a] = rng.uniform(-max_trans_vox, max_trans_vox);
  t.rotation = (Eigen::AngleAxisd(angle[2], Eigen::Vector3d::UnitZ()) *
                Eigen::AngleAxisd(angle[1], Eigen::Vector3d::UnitY()) *
                Eigen::AngleAxisd(angle[0], Eigen::Vector3d::UnitX()))
                   .toRotationMatrix();
  return t;
}

std::pair<Volume, LabelMask> apply_rigid(const Volume& v, const LabelMask& m,
                                         const RigidTransform& t) {
  if (!(v.shape() == m.shape())) throw ShapeError("image and mask differ in shape");
  const Shape3 s = v.shape();
  const Eigen::Vector3d c((s.nx - 1) / 2.0, (s.ny - 1) / 2.0, (s.nz - 1) / 2.0);
  const Eigen::Matrix3d rt = t.rotation.transpose();
  Volume vo(s, v.affine());
  LabelMask mo(s, m.affine());
  for (int z = 0; z < s.nz; ++z) {
    for (int y = 0; y < s.ny; ++y) {
      for (int x = 0; x < s.nx; ++x) {
        const Eigen::Vector3d src = rt * (Eigen::Vector3d(x, y, z) - c - t.translation) + c;
        vo(x, y, z) = sample_trilinear(v, src);
        mo(x, y, z) = sample_nearest(m, src);
      }
    }
  }
  return {std::move(vo), std::move(mo)};
}

std::pair<Volume, LabelMask> rigid_augment(const Volume& v, const LabelMask& m, Rng& rng,
                                           double max_rot_deg, double max_trans_vox) {
  return apply_rigid(v, m, random_rigid(rng, max_rot_deg, max_trans_vox));
}

std::pair<Volume, LabelMask> augment_pair(const Volume& v, const LabelMask& m,
                                          const AugmentConfig& cfg, std::uint64_t epoch,
                                          std::uint64_t index) {
  Rng rng(derive_seed(cfg.seed, {epoch, index}));
  const Volume scaled = intensity_augment(v, rng, cfg.scale, cfg.shift);
  return rigid_augment(scaled, m, rng, cfg.max_rot_deg, cfg.max_trans_vox);
}

}  // namespace evcseg
