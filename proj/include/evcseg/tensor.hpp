#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace evcseg {

/// (batch, channels, depth, height, width). Width is the fastest axis, so a
/// Tensor5 channel plane has the same layout as an x-fastest Volume with
/// (w, h, d) = (x, y, z).
struct Shape5 {
  int n = 0, c = 0, d = 0, h = 0, w = 0;

  std::size_t spatial() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * spatial();
  }
  bool same_spatial(const Shape5& o) const { return d == o.d && h == o.h && w == o.w; }
  bool operator==(const Shape5&) const = default;
  std::string str() const;
};

/// Dense value buffer plus an optional same-shape gradient buffer. Network
/// parameters carry `grad`; activations leave it empty.
struct Tensor5 {
  Shape5 shape{};
  std::vector<double> values;
  std::vector<double> grad;

  Tensor5() = default;
  explicit Tensor5(Shape5 s, double fill = 0.0);
  Tensor5(Shape5 s, std::vector<double> v);

  std::size_t numel() const { return values.size(); }
  std::size_t offset(int n, int c, int z, int y, int x) const {
    return ((((static_cast<std::size_t>(n) * shape.c + c) * shape.d + z) * shape.h + y) * shape.w) + x;
  }
  double& at(int n, int c, int z, int y, int x) { return values[offset(n, c, z, y, x)]; }
  double at(int n, int c, int z, int y, int x) const { return values[offset(n, c, z, y, x)]; }

  /// Contiguous spatial plane of one (batch, channel) pair.
  std::span<double> plane(int n, int c) {
    return std::span<double>(values).subspan(offset(n, c, 0, 0, 0), shape.spatial());
  }
  std::span<const double> plane(int n, int c) const {
    return std::span<const double>(values).subspan(offset(n, c, 0, 0, 0), shape.spatial());
  }

  void zero_grad() { grad.assign(values.size(), 0.0); }
  bool all_finite() const;
};

/// Non-owning handle used to enumerate network parameters.
struct NamedTensor {
  std::string name;
  Tensor5* tensor;
};

}  // namespace evcseg
