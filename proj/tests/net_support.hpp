#pragma once

#include <algorithm>
#include <stdexcept>

#include "evcseg/evnet.hpp"

namespace support {

using evcseg::EvNet;
using evcseg::Tensor5;

/// Copies every weight of the plain network into the concat-mode
/// multiscale network. The extra input channel of each level's first
/// encoder convolution (the raw image, last in channel order) gets zero
/// weights.
inline void share_weights(const EvNet& plain, EvNet& multi) {
  const auto src = plain.parameters();
  auto dst = multi.parameters();
  if (src.size() != dst.size()) throw std::logic_error("parameter lists differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Tensor5& s = *src[i];
    Tensor5& d = *dst[i].tensor;
    if (s.shape == d.shape) {
      d.values = s.values;
      continue;
    }
    if (s.shape.n != d.shape.n || d.shape.c != s.shape.c + 1 || !s.shape.same_spatial(d.shape)) {
      throw std::logic_error("unexpected shape difference in " + dst[i].name);
    }
    for (int o = 0; o < d.shape.n; ++o) {
      for (int c = 0; c < d.shape.c; ++c) {
        auto out = d.plane(o, c);
        if (c == d.shape.c - 1) {
          std::fill(out.begin(), out.end(), 0.0);
        } else {
          const auto in = s.plane(o, c);
          std::copy(in.begin(), in.end(), out.begin());
        }
      }
    }
  }
}

}  // namespace support
