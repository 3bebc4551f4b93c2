#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "evcseg/error.hpp"

namespace evcseg {

/// Voxel-index to world-millimetre transform.
using Affine = Eigen::Matrix4d;

struct Shape3 {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  int operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  std::array<int, 3> as_array() const { return {nx, ny, nz}; }
  bool operator==(const Shape3&) const = default;
};

/// Dense 3D grid stored x-fastest (the NIfTI on-disk order) with an affine.
template <typename T>
class Grid3 {
 public:
  using value_type = T;

  Grid3() = default;
  explicit Grid3(Shape3 shape, const Affine& affine = Affine::Identity(), T fill = T{})
      : shape_(shape), affine_(affine), data_(checked_voxels(shape), fill) {}
  Grid3(Shape3 shape, std::vector<T> data, const Affine& affine = Affine::Identity())
      : shape_(shape), affine_(affine), data_(std::move(data)) {
    if (data_.size() != checked_voxels(shape)) {
      throw ShapeError("grid data length does not match its shape");
    }
  }

  const Shape3& shape() const { return shape_; }
  const Affine& affine() const { return affine_; }
  void set_affine(const Affine& a) { affine_ = a; }

  std::size_t size() const { return data_.size(); }
  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& vector() const { return data_; }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(shape_.nx) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(shape_.ny) * static_cast<std::size_t>(z));
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < shape_.nx && y < shape_.ny && z < shape_.nz;
  }
  T& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool operator==(const Grid3& o) const {
    return shape_ == o.shape_ && affine_ == o.affine_ && data_ == o.data_;
  }

 private:
  static std::size_t checked_voxels(Shape3 s) {
    if (s.nx <= 0 || s.ny <= 0 || s.nz <= 0) throw ShapeError("grid dimensions must be positive");
    return s.voxels();
  }

  Shape3 shape_{};
  Affine affine_ = Affine::Identity();
  std::vector<T> data_;
};

/// Intensity image I_i.
using Volume = Grid3<double>;
/// Binary labelling; every element is 0 or 1.
using LabelMask = Grid3<std::uint8_t>;

/// Throws ShapeError unless every element of the mask is 0 or 1.
void check_binary(const LabelMask& m);

/// Per-voxel label distribution stored label-major: (label, x, y, z) with
/// label slowest, so each label plane is a contiguous x-fastest grid.
class ProbMap {
 public:
  ProbMap() = default;
  ProbMap(int labels, Shape3 shape, const Affine& affine = Affine::Identity());
  ProbMap(int labels, Shape3 shape, std::vector<double> data,
          const Affine& affine = Affine::Identity());

  int labels() const { return labels_; }
  const Shape3& shape() const { return shape_; }
  const Affine& affine() const { return affine_; }
  std::size_t voxels() const { return shape_.voxels(); }

  double& at(int label, std::size_t voxel) { return data_[label * voxels() + voxel]; }
  double at(int label, std::size_t voxel) const { return data_[label * voxels() + voxel]; }
  std::span<double> plane(int label) {
    return std::span<double>(data_).subspan(label * voxels(), voxels());
  }
  std::span<const double> plane(int label) const {
    return std::span<const double>(data_).subspan(label * voxels(), voxels());
  }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  /// Max deviation of any voxel's label sum from 1, and range check.
  /// Throws DomainError when a value leaves [0,1] or a sum is off by > tol.
  void validate(double tol = 1e-6) const;

 private:
  int labels_ = 0;
  Shape3 shape_{};
  Affine affine_ = Affine::Identity();
  std::vector<double> data_;
};

/// Argmax labelling of a two-label map (ties go to label 0).
LabelMask argmax(const ProbMap& p);

// ---- geometry helpers ----

/// Column norms of the upper-left 3x3 block (voxel spacing in mm).
Eigen::Vector3d voxel_spacing(const Affine& a);
/// Throws GeometryError if the 3x3 block is singular or non-finite.
void check_invertible(const Affine& a);
Eigen::Vector3d voxel_to_world(const Affine& a, const Eigen::Vector3d& ijk);
Eigen::Vector3d world_to_voxel(const Affine& a, const Eigen::Vector3d& xyz);

/// Trilinear sample at a continuous voxel index. Points inside the field of
/// view (within half a voxel of the outermost centres) are clamped to the
/// edge; points outside it read as 0.
double sample_trilinear(const Volume& v, const Eigen::Vector3d& ijk);
/// Nearest-neighbour sample with the same field-of-view convention.
std::uint8_t sample_nearest(const LabelMask& m, const Eigen::Vector3d& ijk);

// ---- preprocessing chain ----

/// Permutes/flips voxel axes so the affine's dominant directions point to
/// +x (right), +y (anterior), +z (superior). World positions are unchanged.
Volume reorient_ras(const Volume& v);
LabelMask reorient_ras(const LabelMask& m);

/// Trilinear resampling onto an isotropic grid of `spacing_mm` sharing the
/// input's axis directions; the new grid is centred on the input field of
/// view and has ceil(extent / spacing_mm) voxels per axis.
Volume resample_isotropic(const Volume& v, double spacing_mm);

template <typename T>
struct Padded {
  Grid3<T> grid;
  std::array<int, 3> offsets{};
};

/// Centres the input inside a zero-filled grid of the target shape.
/// offsets = floor((target - shape) / 2); the affine origin is shifted so
/// world coordinates are preserved.
Padded<double> pad_to(const Volume& v, Shape3 target);
Padded<std::uint8_t> pad_to(const LabelMask& m, Shape3 target);

/// Inverse of pad_to: extracts `shape` voxels starting at `offsets`.
Volume crop(const Volume& v, std::array<int, 3> offsets, Shape3 shape);
LabelMask crop(const LabelMask& m, std::array<int, 3> offsets, Shape3 shape);

/// Halves every axis by 2x2x2 averaging and doubles the voxel spacing.
Volume resize_half(const Volume& v);
/// Mask counterpart of resize_half: a coarse voxel is foreground when at
/// least four of its eight fine voxels are.
LabelMask resize_half(const LabelMask& m);
/// Nearest-neighbour 2x upsampling (each voxel becomes a 2x2x2 block).
LabelMask upsample_double(const LabelMask& m);

/// Nearest-neighbour reslice of `m` onto the grid (shape, affine).
LabelMask reslice_nearest(const LabelMask& m, Shape3 shape, const Affine& affine);
/// Trilinear reslice of `v` onto the grid (shape, affine).
Volume reslice_trilinear(const Volume& v, Shape3 shape, const Affine& affine);

/// Everything needed to map a network-grid mask back onto the native grid.
struct PreprocessRecord {
  Shape3 native_shape{};
  Affine native_affine = Affine::Identity();
  double spacing_mm = 1.0;
  Shape3 resampled_shape{};
  Affine resampled_affine = Affine::Identity();
  std::array<int, 3> pad_offsets{};
  Shape3 padded_shape{};
  Shape3 network_shape{};
  Affine network_affine = Affine::Identity();
};

struct Preprocessed {
  Volume volume;  // on the network grid
  PreprocessRecord record;
};

/// reorient -> resample -> pad -> resize-half.
Preprocessed preprocess(const Volume& native, Shape3 pad_shape, double spacing_mm = 1.0);
/// Applies a recorded chain to a mask living on the native grid (nearest
/// neighbour throughout) so training labels land on the network grid.
LabelMask preprocess_mask(const LabelMask& native, const PreprocessRecord& record);

/// Inverse chain: nearest upsample to the padded grid, crop by the pad
/// offsets, nearest reslice onto the native grid.
LabelMask mask_to_native(const LabelMask& m, const PreprocessRecord& record);

}  // namespace evcseg
