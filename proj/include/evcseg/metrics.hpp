#pragma once

#include <cstddef>

#include "evcseg/volume.hpp"

namespace evcseg {

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dice(const LabelMask& a, const LabelMask& b);
/// |A n B| / |A u B|; 1 when both masks are empty.
double jaccard(const LabelMask& a, const LabelMask& b);

/// Squared Euclidean distance from every voxel to the nearest foreground
/// voxel, exact (separable lower-envelope method). With `use_spacing` the
/// distances are in mm along the affine's column norms. Throws DomainError
/// on an empty mask.
Volume edt_squared(const LabelMask& m, bool use_spacing = false);
Volume edt(const LabelMask& m, bool use_spacing = false);

/// Foreground voxels with at least one 6-neighbour in the background;
/// neighbours beyond the volume edge count as background.
LabelMask boundary(const LabelMask& m);

/// (sum_{g in dG} d(g, dP) + sum_{p in dP} d(p, dG)) / (2 |dG|) over the
/// boundary sets dG, dP. Throws DomainError for an empty truth; returns
/// +infinity for an empty prediction.
double balanced_ahd(const LabelMask& truth, const LabelMask& pred, bool use_spacing = false);

std::size_t count_foreground(const LabelMask& m);

}  // namespace evcseg
