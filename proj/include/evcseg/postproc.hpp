#pragma once

#include <cstdint>
#include <vector>

#include "evcseg/volume.hpp"

namespace evcseg {

struct Components {
  /// 0 for voxels outside the target label, otherwise 1-based component id.
  /// Ids follow the scan order of each component's first voxel.
  std::vector<std::uint32_t> ids;
  /// sizes[id - 1] = voxel count.
  std::vector<std::size_t> sizes;
};

/// Connected components of the voxels equal to `target_label` under 6- or
/// 26-connectivity (ConfigError otherwise).
Components label_components(const LabelMask& m, std::uint8_t target_label, int connectivity);

/// Relabels every 6-connected background component except the largest as
/// foreground. Ties keep the component with the smallest id.
LabelMask fill_background_holes(const LabelMask& m);

struct Cleaned {
  LabelMask mask;
  /// Set when there was no foreground to keep.
  bool empty_foreground = false;
};

/// Keeps only the largest 26-connected foreground component (smallest id
/// wins ties).
Cleaned largest_foreground(const LabelMask& m);

/// fill_background_holes followed by largest_foreground.
Cleaned cleanup(const LabelMask& m);

}  // namespace evcseg
