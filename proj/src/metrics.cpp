#include "evcseg/metrics.hpp"

#include <cmath>
#include <limits>

#include "evcseg/parallel.hpp"

namespace evcseg {

namespace {

void check_same_shape(const LabelMask& a, const LabelMask& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("masks differ in shape");
  check_binary(a);
  check_binary(b);
}

struct Overlap {
  std::size_t a = 0, b = 0, both = 0;
};

Overlap overlap(const LabelMask& a, const LabelMask& b) {
  check_same_shape(a, b);
  Overlap o;
  for (std::size_t i = 0; i < a.size(); ++i) {
    o.a += a[i];
    o.b += b[i];
    o.both += a[i] & b[i];
  }
  return o;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas f(p) + w (q - p)^2 along one line, in place.
// Sites with infinite f are skipped.
void envelope_1d(double* f, std::size_t stride, int n, double w, std::vector<double>& buf,
                 std::vector<int>& v, std::vector<double>& z) {
  buf.resize(n);
  v.resize(n);
  z.resize(n + 1);
  for (int i = 0; i < n; ++i) buf[i] = f[i * stride];
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (buf[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    // z[0] = -inf stops the scan at the first envelope piece.
    while (true) {
      const int p = v[k];
      s = ((buf[q] + w * q * q) - (buf[p] + w * p * p)) / (2.0 * w * (q - p));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) return;  // every site infinite
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = q - v[j];
    f[q * stride] = buf[v[j]] + w * d * d;
  }
}

}  // namespace

double dice(const LabelMask& a, const LabelMask& b) {
  const Overlap o = overlap(a, b);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

double jaccard(const LabelMask& a, const LabelMask& b) {
  const Overlap o = overlap(a, b);
  const std::size_t uni = o.a + o.b - o.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.both) / static_cast<double>(uni);
}

std::size_t count_foreground(const LabelMask& m) {
  std::size_t n = 0;
  for (auto v : m.data()) n += v != 0;
  return n;
}

Volume edt_squared(const LabelMask& m, bool use_spacing) {
  if (count_foreground(m) == 0) throw DomainError("distance transform of an empty mask");
  const Shape3 s = m.shape();
  Volume d(s, m.affine());
  for (std::size_t i = 0; i < m.size(); ++i) d[i] = m[i] ? 0.0 : kInf;
  Eigen::Vector3d w(1.0, 1.0, 1.0);
  if (use_spacing) w = voxel_spacing(m.affine()).cwiseAbs2();
  const int dims[3] = {s.nx, s.ny, s.nz};
  const std::size_t strides[3] = {1, static_cast<std::size_t>(s.nx),
                                  static_cast<std::size_t>(s.nx) * s.ny};
  for (int axis = 0; axis < 3; ++axis) {
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    const std::size_t lines = static_cast<std::size_t>(dims[a1]) * dims[a2];
    parallel_for(lines, [&](std::size_t line) {
      thread_local std::vector<double> buf, z;
      thread_local std::vector<int> v;
      const std::size_t i1 = line % dims[a1], i2 = line / dims[a1];
      double* base = d.data().data() + i1 * strides[a1] + i2 * strides[a2];
      envelope_1d(base, strides[axis], dims[axis], w[axis], buf, v, z);
    });
  }
  return d;
}

Volume edt(const LabelMask& m, bool use_spacing) {
  Volume d = edt_squared(m, use_spacing);
  for (auto& v : d.data()) v = std::sqrt(v);
  return d;
}

LabelMask boundary(const LabelMask& m) {
  check_binary(m);
  const Shape3 s = m.shape();
  LabelMask out(s, m.affine());
  static constexpr int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                   {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < s.nz; ++z) {
    for (int y = 0; y < s.ny; ++y) {
      for (int x = 0; x < s.nx; ++x) {
        if (!m(x, y, z)) continue;
        for (const auto& d : nb) {
          const int px = x + d[0], py = y + d[1], pz = z + d[2];
          if (!m.contains(px, py, pz) || !m(px, py, pz)) {
            out(x, y, z) = 1;
            break;
          }
        }
      }
    }
  }
  return out;
}

double balanced_ahd(const LabelMask& truth, const LabelMask& pred, bool use_spacing) {
  check_same_shape(truth, pred);
  if (count_foreground(truth) == 0) throw DomainError("balanced AHD needs a non-empty truth");
  if (count_foreground(pred) == 0) return kInf;
  const LabelMask g = boundary(truth);
  const LabelMask p = boundary(pred);
  const Volume to_p = edt(p, use_spacing);
  const Volume to_g = edt(g, use_spacing);
  long double sum = 0.0L;
  std::size_t ng = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i]) {
      sum += to_p[i];
      ++ng;
    }
    if (p[i]) sum += to_g[i];
  }
  return static_cast<double>(sum / (2.0L * static_cast<long double>(ng)));
}

}  // namespace evcseg
