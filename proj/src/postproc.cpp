#include "evcseg/postproc.hpp"

#include <array>
#include <cstdlib>

namespace evcseg {

namespace {

class DisjointSet {
 public:
  std::uint32_t make() {
    parent_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return parent_.back();
  }
  std::uint32_t find(std::uint32_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  // The smaller root survives, so a root is always its set's first label.
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent_[b] = a;
    else parent_[a] = b;
  }

 private:
  std::vector<std::uint32_t> parent_;
};

// Index of the largest component; the first one wins ties.
std::size_t largest(const std::vector<std::size_t>& sizes) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < sizes.size(); ++k) {
    if (sizes[k] > sizes[best]) best = k;
  }
  return best;
}

}  // namespace

Components label_components(const LabelMask& m, std::uint8_t target_label, int connectivity) {
  if (connectivity != 6 && connectivity != 26) {
    throw ConfigError("connectivity must be 6 or 26");
  }
  const Shape3 s = m.shape();
  // Already-visited neighbours in scan order.
  std::vector<std::array<int, 3>> back;
  for (int dz = -1; dz <= 0; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (connectivity == 6 && manhattan != 1) continue;
        back.push_back({dx, dy, dz});
      }
    }
  }

  std::vector<std::uint32_t> provisional(m.size(), 0);
  DisjointSet sets;
  sets.make();  // slot 0 = unlabeled
  for (int z = 0; z < s.nz; ++z) {
    for (int y = 0; y < s.ny; ++y) {
      for (int x = 0; x < s.nx; ++x) {
        const std::size_t i = m.index(x, y, z);
        if (m[i] != target_label) continue;
        std::uint32_t label = 0;
        for (const auto& d : back) {
          const int nx = x + d[0], ny = y + d[1], nz = z + d[2];
          if (!m.contains(nx, ny, nz)) continue;
          const std::uint32_t other = provisional[m.index(nx, ny, nz)];
          if (other == 0) continue;
          if (label == 0) label = other;
          else sets.unite(label, other);
        }
        provisional[i] = label == 0 ? sets.make() : label;
      }
    }
  }

  Components out;
  out.ids.assign(m.size(), 0);
  std::vector<std::uint32_t> dense;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (provisional[i] == 0) continue;
    const std::uint32_t root = sets.find(provisional[i]);
    if (root >= dense.size()) dense.resize(root + 1, 0);
    if (dense[root] == 0) {
      out.sizes.push_back(0);
      dense[root] = static_cast<std::uint32_t>(out.sizes.size());
    }
    out.ids[i] = dense[root];
    ++out.sizes[dense[root] - 1];
  }
  return out;
}

LabelMask fill_background_holes(const LabelMask& m) {
  check_binary(m);
  const Components bg = label_components(m, 0, 6);
  LabelMask out = m;
  if (bg.sizes.empty()) return out;
  const std::uint32_t keep = static_cast<std::uint32_t>(largest(bg.sizes)) + 1;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (bg.ids[i] != 0 && bg.ids[i] != keep) out[i] = 1;
  }
  return out;
}

Cleaned largest_foreground(const LabelMask& m) {
  check_binary(m);
  const Components fg = label_components(m, 1, 26);
  Cleaned out{LabelMask(m.shape(), m.affine()), fg.sizes.empty()};
  if (out.empty_foreground) return out;
  const std::uint32_t keep = static_cast<std::uint32_t>(largest(fg.sizes)) + 1;
  for (std::size_t i = 0; i < m.size(); ++i) out.mask[i] = fg.ids[i] == keep ? 1 : 0;
  return out;
}

Cleaned cleanup(const LabelMask& m) { return largest_foreground(fill_background_holes(m)); }

}  // namespace evcseg
