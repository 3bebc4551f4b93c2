#include "evcseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "evcseg/parallel.hpp"

namespace evcseg {

void check_binary(const LabelMask& m) {
  for (auto v : m.data()) {
    if (v > 1) throw ShapeError("label mask contains a value other than 0 or 1");
  }
}

ProbMap::ProbMap(int labels, Shape3 shape, const Affine& affine)
    : labels_(labels), shape_(shape), affine_(affine) {
  if (labels < 2) throw ShapeError("a probability map needs at least two labels");
  if (shape.nx <= 0 || shape.ny <= 0 || shape.nz <= 0) {
    throw ShapeError("probability map dimensions must be positive");
  }
  data_.assign(static_cast<std::size_t>(labels) * shape.voxels(), 0.0);
}

ProbMap::ProbMap(int labels, Shape3 shape, std::vector<double> data, const Affine& affine)
    : ProbMap(labels, shape, affine) {
  if (data.size() != data_.size()) throw ShapeError("probability map data length mismatch");
  data_ = std::move(data);
}

void ProbMap::validate(double tol) const {
  const std::size_t n = voxels();
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int l = 0; l < labels_; ++l) {
      const double p = at(l, i);
      if (!(p >= 0.0 && p <= 1.0)) throw DomainError("probability outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol) throw DomainError("label probabilities do not sum to 1");
  }
}

LabelMask argmax(const ProbMap& p) {
  LabelMask out(p.shape(), p.affine());
  const std::size_t n = p.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int l = 1; l < p.labels(); ++l) {
      if (p.at(l, i) > p.at(best, i)) best = l;
    }
    out[i] = best == 0 ? 0 : 1;
  }
  return out;
}

Eigen::Vector3d voxel_spacing(const Affine& a) {
  return {a.block<3, 1>(0, 0).norm(), a.block<3, 1>(0, 1).norm(), a.block<3, 1>(0, 2).norm()};
}

void check_invertible(const Affine& a) {
  if (!a.allFinite()) throw GeometryError("affine contains non-finite entries");
  const Eigen::Matrix3d r = a.block<3, 3>(0, 0);
  const double scale = std::max({r.col(0).norm(), r.col(1).norm(), r.col(2).norm()});
  if (scale == 0.0 || std::abs(r.determinant()) <= 1e-12 * scale * scale * scale) {
    throw GeometryError("affine 3x3 block is not invertible");
  }
}

Eigen::Vector3d voxel_to_world(const Affine& a, const Eigen::Vector3d& ijk) {
  return a.block<3, 3>(0, 0) * ijk + a.block<3, 1>(0, 3);
}

Eigen::Vector3d world_to_voxel(const Affine& a, const Eigen::Vector3d& xyz) {
  return a.block<3, 3>(0, 0).inverse() * (xyz - a.block<3, 1>(0, 3));
}

namespace {

// Clamps a continuous index into [0, n-1] when it lies inside the field of
// view [-0.5, n-0.5]; returns false when it lies outside.
bool fov_clamp(double c, int n, double& out) {
  if (!(c >= -0.5 && c <= n - 0.5)) return false;
  out = std::clamp(c, 0.0, static_cast<double>(n - 1));
  return true;
}

}  // namespace

double sample_trilinear(const Volume& v, const Eigen::Vector3d& ijk) {
  const Shape3& s = v.shape();
  double c[3];
  for (int k = 0; k < 3; ++k) {
    if (!fov_clamp(ijk[k], s[k], c[k])) return 0.0;
  }
  int i0[3], i1[3];
  double f[3];
  for (int k = 0; k < 3; ++k) {
    i0[k] = static_cast<int>(std::floor(c[k]));
    f[k] = c[k] - i0[k];
    i1[k] = std::min(i0[k] + 1, s[k] - 1);
  }
  auto at = [&](int x, int y, int z) { return v(x, y, z); };
  double result = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const double wz = dz ? f[2] : 1.0 - f[2];
    if (wz == 0.0) continue;
    const int z = dz ? i1[2] : i0[2];
    for (int dy = 0; dy < 2; ++dy) {
      const double wy = dy ? f[1] : 1.0 - f[1];
      if (wy == 0.0) continue;
      const int y = dy ? i1[1] : i0[1];
      for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? f[0] : 1.0 - f[0];
        if (wx == 0.0) continue;
        result += wx * wy * wz * at(dx ? i1[0] : i0[0], y, z);
      }
    }
  }
  return result;
}

std::uint8_t sample_nearest(const LabelMask& m, const Eigen::Vector3d& ijk) {
  const Shape3& s = m.shape();
  int idx[3];
  for (int k = 0; k < 3; ++k) {
    double c;
    if (!fov_clamp(ijk[k], s[k], c)) return 0;
    idx[k] = static_cast<int>(std::lround(c));
  }
  return m(idx[0], idx[1], idx[2]);
}

namespace {

struct AxisMap {
  int source[3];
  bool flip[3];
};

AxisMap ras_axis_map(const Affine& a) {
  check_invertible(a);
  Eigen::Matrix3d cosines = a.block<3, 3>(0, 0);
  for (int j = 0; j < 3; ++j) cosines.col(j) /= cosines.col(j).norm();

  AxisMap map{};
  bool row_used[3] = {false, false, false};
  bool col_used[3] = {false, false, false};
  for (int step = 0; step < 3; ++step) {
    int best_i = -1, best_j = -1;
    double best = -1.0;
    for (int i = 0; i < 3; ++i) {
      if (row_used[i]) continue;
      for (int j = 0; j < 3; ++j) {
        if (col_used[j]) continue;
        if (std::abs(cosines(i, j)) > best) {
          best = std::abs(cosines(i, j));
          best_i = i;
          best_j = j;
        }
      }
    }
    row_used[best_i] = col_used[best_j] = true;
    map.source[best_i] = best_j;
    map.flip[best_i] = cosines(best_i, best_j) < 0.0;
  }
  return map;
}

template <typename T>
Grid3<T> reorient_impl(const Grid3<T>& in) {
  const AxisMap map = ras_axis_map(in.affine());
  const auto old_dims = in.shape().as_array();
  bool identity = true;
  for (int i = 0; i < 3; ++i) identity = identity && map.source[i] == i && !map.flip[i];
  if (identity) return in;

  const Shape3 shape{old_dims[map.source[0]], old_dims[map.source[1]], old_dims[map.source[2]]};
  const auto new_dims = shape.as_array();

  // new index -> old index
  Affine t = Affine::Zero();
  t(3, 3) = 1.0;
  for (int i = 0; i < 3; ++i) {
    const int j = map.source[i];
    t(j, i) = map.flip[i] ? -1.0 : 1.0;
    t(j, 3) = map.flip[i] ? new_dims[i] - 1 : 0.0;
  }
  Grid3<T> out(shape, Affine(in.affine() * t));
  for (int z = 0; z < shape.nz; ++z) {
    for (int y = 0; y < shape.ny; ++y) {
      for (int x = 0; x < shape.nx; ++x) {
        const int n[3] = {x, y, z};
        int o[3];
        for (int i = 0; i < 3; ++i) {
          o[map.source[i]] = map.flip[i] ? new_dims[i] - 1 - n[i] : n[i];
        }
        out(x, y, z) = in(o[0], o[1], o[2]);
      }
    }
  }
  return out;
}

Affine translation(double tx, double ty, double tz) {
  Affine t = Affine::Identity();
  t(0, 3) = tx;
  t(1, 3) = ty;
  t(2, 3) = tz;
  return t;
}

template <typename T>
Padded<T> pad_impl(const Grid3<T>& in, Shape3 target) {
  const Shape3& s = in.shape();
  Padded<T> result;
  for (int k = 0; k < 3; ++k) {
    if (s[k] > target[k]) {
      throw SizeError("input axis " + std::to_string(k) + " (" + std::to_string(s[k]) +
                      ") exceeds pad target " + std::to_string(target[k]));
    }
    result.offsets[k] = (target[k] - s[k]) / 2;
  }
  const auto& off = result.offsets;
  result.grid = Grid3<T>(target, Affine(in.affine() * translation(-off[0], -off[1], -off[2])));
  for (int z = 0; z < s.nz; ++z) {
    for (int y = 0; y < s.ny; ++y) {
      for (int x = 0; x < s.nx; ++x) {
        result.grid(x + off[0], y + off[1], z + off[2]) = in(x, y, z);
      }
    }
  }
  return result;
}

template <typename T>
Grid3<T> crop_impl(const Grid3<T>& in, std::array<int, 3> off, Shape3 shape) {
  for (int k = 0; k < 3; ++k) {
    if (off[k] < 0 || off[k] + shape[k] > in.shape()[k]) {
      throw GeometryError("crop window exceeds the source grid");
    }
  }
  Grid3<T> out(shape, Affine(in.affine() * translation(off[0], off[1], off[2])));
  for (int z = 0; z < shape.nz; ++z) {
    for (int y = 0; y < shape.ny; ++y) {
      for (int x = 0; x < shape.nx; ++x) out(x, y, z) = in(x + off[0], y + off[1], z + off[2]);
    }
  }
  return out;
}

Affine half_affine(const Affine& a) {
  Affine t = Affine::Identity();
  for (int k = 0; k < 3; ++k) {
    t(k, k) = 2.0;
    t(k, 3) = 0.5;
  }
  return a * t;
}

void require_even(const Shape3& s) {
  for (int k = 0; k < 3; ++k) {
    if (s[k] % 2 != 0) throw SizeError("resize_half needs even dimensions");
  }
}

}  // namespace

Volume reorient_ras(const Volume& v) { return reorient_impl(v); }
LabelMask reorient_ras(const LabelMask& m) { return reorient_impl(m); }

Volume resample_isotropic(const Volume& v, double spacing_mm) {
  if (!(spacing_mm > 0.0) || !std::isfinite(spacing_mm)) {
    throw GeometryError("resample spacing must be positive and finite");
  }
  check_invertible(v.affine());
  const Eigen::Vector3d spacing = voxel_spacing(v.affine());
  const Shape3& s = v.shape();

  int dims[3];
  Eigen::Vector3d ratio, start;
  for (int k = 0; k < 3; ++k) {
    const double extent = s[k] * spacing[k];
    if (!(extent > 0.0)) throw GeometryError("degenerate physical extent");
    dims[k] = static_cast<int>(std::ceil(extent / spacing_mm - 1e-9));
    ratio[k] = spacing_mm / spacing[k];
    start[k] = (s[k] - 1) / 2.0 - (dims[k] - 1) / 2.0 * ratio[k];
  }
  Affine out_affine = Affine::Identity();
  for (int k = 0; k < 3; ++k) {
    out_affine.block<3, 1>(0, k) = v.affine().block<3, 1>(0, k) * ratio[k];
  }
  out_affine.block<3, 1>(0, 3) = voxel_to_world(v.affine(), start);

  Volume out(Shape3{dims[0], dims[1], dims[2]}, out_affine);
  parallel_for(static_cast<std::size_t>(dims[2]), [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    for (int y = 0; y < dims[1]; ++y) {
      for (int x = 0; x < dims[0]; ++x) {
        const Eigen::Vector3d src(start[0] + x * ratio[0], start[1] + y * ratio[1],
                                  start[2] + z * ratio[2]);
        out(x, y, z) = sample_trilinear(v, src);
      }
    }
  });
  return out;
}

Padded<double> pad_to(const Volume& v, Shape3 target) { return pad_impl(v, target); }
Padded<std::uint8_t> pad_to(const LabelMask& m, Shape3 target) { return pad_impl(m, target); }

Volume crop(const Volume& v, std::array<int, 3> offsets, Shape3 shape) {
  return crop_impl(v, offsets, shape);
}
LabelMask crop(const LabelMask& m, std::array<int, 3> offsets, Shape3 shape) {
  return crop_impl(m, offsets, shape);
}

Volume resize_half(const Volume& v) {
  const Shape3& s = v.shape();
  require_even(s);
  const Shape3 h{s.nx / 2, s.ny / 2, s.nz / 2};
  Volume out(h, half_affine(v.affine()));
  for (int z = 0; z < h.nz; ++z) {
    for (int y = 0; y < h.ny; ++y) {
      for (int x = 0; x < h.nx; ++x) {
        double sum = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) sum += v(2 * x + dx, 2 * y + dy, 2 * z + dz);
        out(x, y, z) = sum / 8.0;
      }
    }
  }
  return out;
}

LabelMask resize_half(const LabelMask& m) {
  const Shape3& s = m.shape();
  require_even(s);
  const Shape3 h{s.nx / 2, s.ny / 2, s.nz / 2};
  LabelMask out(h, half_affine(m.affine()));
  for (int z = 0; z < h.nz; ++z) {
    for (int y = 0; y < h.ny; ++y) {
      for (int x = 0; x < h.nx; ++x) {
        int count = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) count += m(2 * x + dx, 2 * y + dy, 2 * z + dz);
        out(x, y, z) = count >= 4 ? 1 : 0;
      }
    }
  }
  return out;
}

LabelMask upsample_double(const LabelMask& m) {
  const Shape3& s = m.shape();
  const Shape3 d{s.nx * 2, s.ny * 2, s.nz * 2};
  Affine t = Affine::Identity();
  for (int k = 0; k < 3; ++k) {
    t(k, k) = 0.5;
    t(k, 3) = -0.25;
  }
  LabelMask out(d, Affine(m.affine() * t));
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) out(x, y, z) = m(x / 2, y / 2, z / 2);
    }
  }
  return out;
}

LabelMask reslice_nearest(const LabelMask& m, Shape3 shape, const Affine& affine) {
  check_invertible(m.affine());
  const Affine to_src = m.affine().inverse() * affine;
  LabelMask out(shape, affine);
  parallel_for(static_cast<std::size_t>(shape.nz), [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    for (int y = 0; y < shape.ny; ++y) {
      for (int x = 0; x < shape.nx; ++x) {
        const Eigen::Vector4d p = to_src * Eigen::Vector4d(x, y, z, 1.0);
        out(x, y, z) = sample_nearest(m, p.head<3>());
      }
    }
  });
  return out;
}

Volume reslice_trilinear(const Volume& v, Shape3 shape, const Affine& affine) {
  check_invertible(v.affine());
  const Affine to_src = v.affine().inverse() * affine;
  Volume out(shape, affine);
  parallel_for(static_cast<std::size_t>(shape.nz), [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    for (int y = 0; y < shape.ny; ++y) {
      for (int x = 0; x < shape.nx; ++x) {
        const Eigen::Vector4d p = to_src * Eigen::Vector4d(x, y, z, 1.0);
        out(x, y, z) = sample_trilinear(v, p.head<3>());
      }
    }
  });
  return out;
}

Preprocessed preprocess(const Volume& native, Shape3 pad_shape, double spacing_mm) {
  check_invertible(native.affine());
  Preprocessed result;
  PreprocessRecord& rec = result.record;
  rec.native_shape = native.shape();
  rec.native_affine = native.affine();
  rec.spacing_mm = spacing_mm;

  const Volume resampled = resample_isotropic(reorient_ras(native), spacing_mm);
  rec.resampled_shape = resampled.shape();
  rec.resampled_affine = resampled.affine();

  auto padded = pad_to(resampled, pad_shape);
  rec.pad_offsets = padded.offsets;
  rec.padded_shape = padded.grid.shape();

  result.volume = resize_half(padded.grid);
  rec.network_shape = result.volume.shape();
  rec.network_affine = result.volume.affine();
  return result;
}

LabelMask preprocess_mask(const LabelMask& native, const PreprocessRecord& rec) {
  if (!(native.shape() == rec.native_shape)) {
    throw GeometryError("mask shape does not match the recorded native grid");
  }
  const LabelMask resampled = reslice_nearest(native, rec.resampled_shape, rec.resampled_affine);
  auto padded = pad_to(resampled, rec.padded_shape);
  LabelMask out = resize_half(padded.grid);
  out.set_affine(rec.network_affine);
  return out;
}

LabelMask mask_to_native(const LabelMask& m, const PreprocessRecord& rec) {
  const Shape3& net = rec.network_shape;
  if (!(m.shape() == net)) throw GeometryError("mask is not on the recorded network grid");
  for (int k = 0; k < 3; ++k) {
    if (rec.padded_shape[k] != 2 * net[k]) {
      throw GeometryError("padded shape is not twice the network shape");
    }
    if (rec.pad_offsets[k] < 0 ||
        rec.pad_offsets[k] + rec.resampled_shape[k] > rec.padded_shape[k]) {
      throw GeometryError("pad offsets inconsistent with resampled shape");
    }
  }
  LabelMask up = upsample_double(m);
  LabelMask cropped = crop(up, rec.pad_offsets, rec.resampled_shape);
  cropped.set_affine(rec.resampled_affine);
  return reslice_nearest(cropped, rec.native_shape, rec.native_affine);
}

}  // namespace evcseg
