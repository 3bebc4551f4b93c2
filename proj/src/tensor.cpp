#include "evcseg/tensor.hpp"

#include <cmath>

#include "evcseg/error.hpp"

namespace evcseg {

std::string Shape5::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(d) + "," +
         std::to_string(h) + "," + std::to_string(w) + ")";
}

Tensor5::Tensor5(Shape5 s, double fill) : shape(s) {
  if (s.n < 0 || s.c < 0 || s.d < 0 || s.h < 0 || s.w < 0) {
    throw ShapeError("negative tensor dimension " + s.str());
  }
  values.assign(s.numel(), fill);
}

Tensor5::Tensor5(Shape5 s, std::vector<double> v) : shape(s), values(std::move(v)) {
  if (values.size() != s.numel()) throw ShapeError("tensor data length mismatch for " + s.str());
}

bool Tensor5::all_finite() const {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace evcseg
