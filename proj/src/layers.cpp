#include "evcseg/layers.hpp"

#include <algorithm>
#include <cmath>

#include "evcseg/error.hpp"
#include "evcseg/parallel.hpp"

namespace evcseg {

namespace {

int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

struct Range {
  int lo = 0;
  int hi = 0;
};

// Output positions o with o*s + k - p inside [0, in).
Range valid_range(int k, int in, int out, int s, int p) {
  const int lo = std::max(0, ceil_div(p - k, s));
  const int hi = std::min(out, floor_div(in - 1 + p - k, s) + 1);
  return {lo, std::max(lo, hi)};
}

struct Window {
  int kd, kh, kw, stride, pad;
};

int out_extent(int in, int k, int s, int p) {
  if (in + 2 * p < k) throw ShapeError("kernel larger than padded input");
  return (in + 2 * p - k) / s + 1;
}

// y_plane += corr(x_plane, kernel)
void corr_plane(const double* x, const Shape5& xs, double* y, const Shape5& ys, const double* kern,
                const Window& win) {
  const int s = win.stride, p = win.pad;
  Range rx[16];
  for (int kx = 0; kx < win.kw; ++kx) rx[kx] = valid_range(kx, xs.w, ys.w, s, p);
  for (int oz = 0; oz < ys.d; ++oz) {
    for (int kz = 0; kz < win.kd; ++kz) {
      const int iz = oz * s + kz - p;
      if (iz < 0 || iz >= xs.d) continue;
      for (int oy = 0; oy < ys.h; ++oy) {
        double* yr = y + (static_cast<std::size_t>(oz) * ys.h + oy) * ys.w;
        for (int ky = 0; ky < win.kh; ++ky) {
          const int iy = oy * s + ky - p;
          if (iy < 0 || iy >= xs.h) continue;
          const double* xr = x + (static_cast<std::size_t>(iz) * xs.h + iy) * xs.w;
          const double* kr = kern + (kz * win.kh + ky) * win.kw;
          for (int kx = 0; kx < win.kw; ++kx) {
            const double w = kr[kx];
            const Range r = rx[kx];
            if (s == 1) {
              const double* xs1 = xr + kx - p;
              for (int ox = r.lo; ox < r.hi; ++ox) yr[ox] += w * xs1[ox];
            } else {
              for (int ox = r.lo; ox < r.hi; ++ox) yr[ox] += w * xr[ox * s + kx - p];
            }
          }
        }
      }
    }
  }
}

// gx_plane += corr^T(gy_plane, kernel)
void corr_plane_adjoint(const double* gy, const Shape5& ys, double* gx, const Shape5& xs,
                        const double* kern, const Window& win) {
  const int s = win.stride, p = win.pad;
  Range rx[16];
  for (int kx = 0; kx < win.kw; ++kx) rx[kx] = valid_range(kx, xs.w, ys.w, s, p);
  for (int oz = 0; oz < ys.d; ++oz) {
    for (int kz = 0; kz < win.kd; ++kz) {
      const int iz = oz * s + kz - p;
      if (iz < 0 || iz >= xs.d) continue;
      for (int oy = 0; oy < ys.h; ++oy) {
        const double* gyr = gy + (static_cast<std::size_t>(oz) * ys.h + oy) * ys.w;
        for (int ky = 0; ky < win.kh; ++ky) {
          const int iy = oy * s + ky - p;
          if (iy < 0 || iy >= xs.h) continue;
          double* gxr = gx + (static_cast<std::size_t>(iz) * xs.h + iy) * xs.w;
          const double* kr = kern + (kz * win.kh + ky) * win.kw;
          for (int kx = 0; kx < win.kw; ++kx) {
            const double w = kr[kx];
            const Range r = rx[kx];
            if (s == 1) {
              double* gx1 = gxr + kx - p;
              for (int ox = r.lo; ox < r.hi; ++ox) gx1[ox] += w * gyr[ox];
            } else {
              for (int ox = r.lo; ox < r.hi; ++ox) gxr[ox * s + kx - p] += w * gyr[ox];
            }
          }
        }
      }
    }
  }
}

// gk += sum_o gy[o] * x[o*s + k - p]
void corr_plane_weight(const double* x, const Shape5& xs, const double* gy, const Shape5& ys,
                       double* gk, const Window& win) {
  const int s = win.stride, p = win.pad;
  Range rx[16];
  for (int kx = 0; kx < win.kw; ++kx) rx[kx] = valid_range(kx, xs.w, ys.w, s, p);
  for (int oz = 0; oz < ys.d; ++oz) {
    for (int kz = 0; kz < win.kd; ++kz) {
      const int iz = oz * s + kz - p;
      if (iz < 0 || iz >= xs.d) continue;
      for (int oy = 0; oy < ys.h; ++oy) {
        const double* gyr = gy + (static_cast<std::size_t>(oz) * ys.h + oy) * ys.w;
        for (int ky = 0; ky < win.kh; ++ky) {
          const int iy = oy * s + ky - p;
          if (iy < 0 || iy >= xs.h) continue;
          const double* xr = x + (static_cast<std::size_t>(iz) * xs.h + iy) * xs.w;
          double* kr = gk + (kz * win.kh + ky) * win.kw;
          for (int kx = 0; kx < win.kw; ++kx) {
            const Range r = rx[kx];
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            int ox = r.lo;
            if (s == 1) {
              const double* xs1 = xr + kx - p;
              for (; ox + 4 <= r.hi; ox += 4) {
                a0 += gyr[ox] * xs1[ox];
                a1 += gyr[ox + 1] * xs1[ox + 1];
                a2 += gyr[ox + 2] * xs1[ox + 2];
                a3 += gyr[ox + 3] * xs1[ox + 3];
              }
              for (; ox < r.hi; ++ox) a0 += gyr[ox] * xs1[ox];
            } else {
              for (; ox < r.hi; ++ox) a0 += gyr[ox] * xr[ox * s + kx - p];
            }
            kr[kx] += (a0 + a1) + (a2 + a3);
          }
        }
      }
    }
  }
}

Window window_of(const ConvParams& p) {
  if (p.stride < 1) throw ShapeError("stride must be >= 1");
  if (p.padding < 0) throw ShapeError("padding must be >= 0");
  const Shape5& k = p.kernel.shape;
  if (k.d < 1 || k.h < 1 || k.w < 1 || k.w > 16) throw ShapeError("unsupported kernel extent");
  return {k.d, k.h, k.w, p.stride, p.padding};
}

std::size_t kernel_block(const Shape5& k) { return k.spatial(); }

// Plain correlation with kernel layout (Co, Ci, ...). No bias.
Tensor5 corr_forward(const Tensor5& x, const Tensor5& kernel, const Window& win, const Shape5& out_shape) {
  Tensor5 y(out_shape);
  const int co_count = out_shape.c, ci_count = x.shape.c;
  const std::size_t kb = kernel_block(kernel.shape);
  parallel_for(static_cast<std::size_t>(out_shape.n) * co_count, [&](std::size_t task) {
    const int n = static_cast<int>(task / co_count), co = static_cast<int>(task % co_count);
    double* yp = y.values.data() + y.offset(n, co, 0, 0, 0);
    for (int ci = 0; ci < ci_count; ++ci) {
      const double* kern = kernel.values.data() + (static_cast<std::size_t>(co) * ci_count + ci) * kb;
      corr_plane(x.values.data() + x.offset(n, ci, 0, 0, 0), x.shape, yp, out_shape, kern, win);
    }
  });
  return y;
}

// Adjoint of corr_forward with respect to x.
Tensor5 corr_backward_data(const Tensor5& gy, const Tensor5& kernel, const Window& win, const Shape5& x_shape) {
  Tensor5 gx(x_shape);
  const int co_count = gy.shape.c, ci_count = x_shape.c;
  const std::size_t kb = kernel_block(kernel.shape);
  parallel_for(static_cast<std::size_t>(x_shape.n) * ci_count, [&](std::size_t task) {
    const int n = static_cast<int>(task / ci_count), ci = static_cast<int>(task % ci_count);
    double* gxp = gx.values.data() + gx.offset(n, ci, 0, 0, 0);
    for (int co = 0; co < co_count; ++co) {
      const double* kern = kernel.values.data() + (static_cast<std::size_t>(co) * ci_count + ci) * kb;
      corr_plane_adjoint(gy.values.data() + gy.offset(n, co, 0, 0, 0), gy.shape, gxp, x_shape, kern, win);
    }
  });
  return gx;
}

Tensor5 corr_backward_weight(const Tensor5& x, const Tensor5& gy, const Shape5& kernel_shape, const Window& win) {
  Tensor5 gk(kernel_shape);
  const int co_count = gy.shape.c, ci_count = x.shape.c;
  const std::size_t kb = kernel_block(kernel_shape);
  parallel_for(static_cast<std::size_t>(co_count), [&](std::size_t task) {
    const int co = static_cast<int>(task);
    for (int ci = 0; ci < ci_count; ++ci) {
      double* gkp = gk.values.data() + (static_cast<std::size_t>(co) * ci_count + ci) * kb;
      for (int n = 0; n < x.shape.n; ++n) {
        corr_plane_weight(x.values.data() + x.offset(n, ci, 0, 0, 0), x.shape,
                          gy.values.data() + gy.offset(n, co, 0, 0, 0), gy.shape, gkp, win);
      }
    }
  });
  return gk;
}

void add_bias(Tensor5& y, const Tensor5& bias) {
  for (int n = 0; n < y.shape.n; ++n) {
    for (int c = 0; c < y.shape.c; ++c) {
      const double b = bias.values[c];
      for (double& v : y.plane(n, c)) v += b;
    }
  }
}

Tensor5 bias_grad(const Tensor5& g) {
  Tensor5 gb(Shape5{g.shape.c, 1, 1, 1, 1});
  for (int c = 0; c < g.shape.c; ++c) {
    double acc = 0.0;
    for (int n = 0; n < g.shape.n; ++n) {
      for (double v : g.plane(n, c)) acc += v;
    }
    gb.values[c] = acc;
  }
  return gb;
}

void check_bias(const ConvParams& p, int channels) {
  if (p.bias.numel() != static_cast<std::size_t>(channels)) {
    throw ShapeError("bias length does not match output channels");
  }
}

Shape5 conv_out_shape(const Tensor5& x, const ConvParams& p, const Window& win) {
  if (x.shape.c != p.kernel_in()) {
    throw ShapeError("conv input has " + std::to_string(x.shape.c) + " channels, kernel expects " +
                     std::to_string(p.kernel_in()));
  }
  return Shape5{x.shape.n, p.kernel_out(), out_extent(x.shape.d, win.kd, win.stride, win.pad),
                out_extent(x.shape.h, win.kh, win.stride, win.pad),
                out_extent(x.shape.w, win.kw, win.stride, win.pad)};
}

Shape5 upconv_out_shape(const Tensor5& x, const ConvParams& p, const Window& win) {
  if (x.shape.c != p.kernel.shape.n) {
    throw ShapeError("upconv input has " + std::to_string(x.shape.c) + " channels, kernel expects " +
                     std::to_string(p.kernel.shape.n));
  }
  auto ext = [&](int i, int k) {
    const int e = (i - 1) * win.stride + k - 2 * win.pad;
    if (e < 1) throw ShapeError("upconv output extent would be empty");
    return e;
  };
  return Shape5{x.shape.n, p.kernel.shape.c, ext(x.shape.d, win.kd), ext(x.shape.h, win.kh),
                ext(x.shape.w, win.kw)};
}

void check_same_shape(const Tensor5& a, const Tensor5& b, const char* what) {
  if (!(a.shape == b.shape)) {
    throw ShapeError(std::string(what) + ": shape " + a.shape.str() + " vs " + b.shape.str());
  }
}

void check_down_params(const ConvParams& p) {
  const Shape5& k = p.kernel.shape;
  if (p.stride != 2 || p.padding != 0 || k.d != 2 || k.h != 2 || k.w != 2) {
    throw ShapeError("down/up convolutions use a 2^3 kernel with stride 2 and no padding");
  }
}

}  // namespace

Tensor5 conv3d_forward(const Tensor5& x, const ConvParams& p) {
  const Window win = window_of(p);
  const Shape5 out = conv_out_shape(x, p, win);
  check_bias(p, out.c);
  Tensor5 y = corr_forward(x, p.kernel, win, out);
  add_bias(y, p.bias);
  return y;
}

ConvGrads conv3d_backward(const Tensor5& x, const ConvParams& p, const Tensor5& grad_out) {
  const Window win = window_of(p);
  const Shape5 out = conv_out_shape(x, p, win);
  if (!(grad_out.shape == out)) throw ShapeError("conv grad_out shape mismatch");
  ConvGrads g;
  g.grad_x = corr_backward_data(grad_out, p.kernel, win, x.shape);
  g.grad_kernel = corr_backward_weight(x, grad_out, p.kernel.shape, win);
  g.grad_bias = bias_grad(grad_out);
  return g;
}

Tensor5 downconv(const Tensor5& x, const ConvParams& p) {
  check_down_params(p);
  if (x.shape.d % 2 || x.shape.h % 2 || x.shape.w % 2) {
    throw ShapeError("downconv needs even spatial dims, got " + x.shape.str());
  }
  return conv3d_forward(x, p);
}

ConvGrads downconv_backward(const Tensor5& x, const ConvParams& p, const Tensor5& grad_out) {
  check_down_params(p);
  return conv3d_backward(x, p, grad_out);
}

Tensor5 upconv(const Tensor5& x, const ConvParams& p) {
  check_down_params(p);
  const Window win = window_of(p);
  const Shape5 out = upconv_out_shape(x, p, win);
  check_bias(p, out.c);
  Tensor5 y = corr_backward_data(x, p.kernel, win, out);
  add_bias(y, p.bias);
  return y;
}

ConvGrads upconv_backward(const Tensor5& x, const ConvParams& p, const Tensor5& grad_out) {
  check_down_params(p);
  const Window win = window_of(p);
  const Shape5 out = upconv_out_shape(x, p, win);
  if (!(grad_out.shape == out)) throw ShapeError("upconv grad_out shape mismatch");
  ConvGrads g;
  g.grad_x = corr_forward(grad_out, p.kernel, win, x.shape);
  g.grad_kernel = corr_backward_weight(grad_out, x, p.kernel.shape, win);
  g.grad_bias = bias_grad(grad_out);
  return g;
}

Tensor5 prelu(const Tensor5& x, const Tensor5& slopes) {
  if (slopes.numel() != static_cast<std::size_t>(x.shape.c)) throw ShapeError("prelu slope count mismatch");
  Tensor5 y(x.shape);
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const double a = slopes.values[c];
      auto in = x.plane(n, c);
      auto out = y.plane(n, c);
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : a * in[i];
    }
  }
  return y;
}

PreluGrads prelu_backward(const Tensor5& x, const Tensor5& slopes, const Tensor5& grad_out) {
  check_same_shape(x, grad_out, "prelu_backward");
  if (slopes.numel() != static_cast<std::size_t>(x.shape.c)) throw ShapeError("prelu slope count mismatch");
  PreluGrads g{Tensor5(x.shape), Tensor5(slopes.shape)};
  for (int c = 0; c < x.shape.c; ++c) {
    const double a = slopes.values[c];
    double ga = 0.0;
    for (int n = 0; n < x.shape.n; ++n) {
      auto in = x.plane(n, c);
      auto go = grad_out.plane(n, c);
      auto gx = g.grad_x.plane(n, c);
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] > 0.0) {
          gx[i] = go[i];
        } else {
          gx[i] = a * go[i];
          ga += in[i] * go[i];
        }
      }
    }
    g.grad_slopes.values[c] = ga;
  }
  return g;
}

Tensor5 concat_channels(const Tensor5& a, const Tensor5& b) {
  if (a.shape.n != b.shape.n || !a.shape.same_spatial(b.shape)) {
    throw ShapeError("concat needs equal batch and spatial dims: " + a.shape.str() + " vs " + b.shape.str());
  }
  Shape5 s = a.shape;
  s.c = a.shape.c + b.shape.c;
  Tensor5 out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < a.shape.c; ++c) std::ranges::copy(a.plane(n, c), out.plane(n, c).begin());
    for (int c = 0; c < b.shape.c; ++c) std::ranges::copy(b.plane(n, c), out.plane(n, a.shape.c + c).begin());
  }
  return out;
}

std::pair<Tensor5, Tensor5> split_channels(const Tensor5& grad, int channels_a) {
  if (channels_a < 0 || channels_a > grad.shape.c) throw ShapeError("split point outside channel range");
  Shape5 sa = grad.shape, sb = grad.shape;
  sa.c = channels_a;
  sb.c = grad.shape.c - channels_a;
  std::pair<Tensor5, Tensor5> out{Tensor5(sa), Tensor5(sb)};
  for (int n = 0; n < grad.shape.n; ++n) {
    for (int c = 0; c < sa.c; ++c) std::ranges::copy(grad.plane(n, c), out.first.plane(n, c).begin());
    for (int c = 0; c < sb.c; ++c) std::ranges::copy(grad.plane(n, sa.c + c), out.second.plane(n, c).begin());
  }
  return out;
}

Tensor5 tile_channels(const Tensor5& x, int channels) {
  if (x.shape.c < 1 || channels < x.shape.c) throw ShapeError("cannot tile to fewer channels");
  Shape5 s = x.shape;
  s.c = channels;
  Tensor5 out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < channels; ++c) std::ranges::copy(x.plane(n, c % x.shape.c), out.plane(n, c).begin());
  }
  return out;
}

Tensor5 tile_channels_backward(const Tensor5& grad, int in_channels) {
  if (in_channels < 1 || in_channels > grad.shape.c) throw ShapeError("bad tile source channel count");
  Shape5 s = grad.shape;
  s.c = in_channels;
  Tensor5 out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < grad.shape.c; ++c) {
      auto src = grad.plane(n, c);
      auto dst = out.plane(n, c % in_channels);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }
  }
  return out;
}

Tensor5 add(const Tensor5& a, const Tensor5& b) {
  Tensor5 out = a;
  add_inplace(out, b);
  return out;
}

void add_inplace(Tensor5& a, const Tensor5& b) {
  check_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] += b.values[i];
}

Tensor5 softmax_channels(const Tensor5& logits) {
  Tensor5 out(logits.shape);
  const std::size_t sp = logits.shape.spatial();
  const int C = logits.shape.c;
  for (int n = 0; n < logits.shape.n; ++n) {
    for (std::size_t i = 0; i < sp; ++i) {
      double m = -INFINITY;
      for (int c = 0; c < C; ++c) m = std::max(m, logits.values[logits.offset(n, c, 0, 0, 0) + i]);
      double sum = 0.0;
      for (int c = 0; c < C; ++c) {
        const double e = std::exp(logits.values[logits.offset(n, c, 0, 0, 0) + i] - m);
        out.values[out.offset(n, c, 0, 0, 0) + i] = e;
        sum += e;
      }
      for (int c = 0; c < C; ++c) out.values[out.offset(n, c, 0, 0, 0) + i] /= sum;
    }
  }
  return out;
}

Tensor5 softmax_backward(const Tensor5& probs, const Tensor5& grad_out) {
  check_same_shape(probs, grad_out, "softmax_backward");
  Tensor5 gx(probs.shape);
  const std::size_t sp = probs.shape.spatial();
  const int C = probs.shape.c;
  for (int n = 0; n < probs.shape.n; ++n) {
    for (std::size_t i = 0; i < sp; ++i) {
      double dot = 0.0;
      for (int c = 0; c < C; ++c) {
        const std::size_t o = probs.offset(n, c, 0, 0, 0) + i;
        dot += probs.values[o] * grad_out.values[o];
      }
      for (int c = 0; c < C; ++c) {
        const std::size_t o = probs.offset(n, c, 0, 0, 0) + i;
        gx.values[o] = probs.values[o] * (grad_out.values[o] - dot);
      }
    }
  }
  return gx;
}

Tensor5 raw_input_at_level(const Tensor5& input, int level) {
  if (level < 0) throw ShapeError("level must be >= 0");
  const int f = 1 << level;
  if (input.shape.d % f || input.shape.h % f || input.shape.w % f) {
    throw ShapeError("input " + input.shape.str() + " not divisible by 2^" + std::to_string(level));
  }
  Tensor5 cur = input;
  for (int l = 0; l < level; ++l) {
    Shape5 s = cur.shape;
    s.d /= 2;
    s.h /= 2;
    s.w /= 2;
    Tensor5 next(s);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        for (int z = 0; z < s.d; ++z) {
          for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
              double sum = 0.0;
              for (int dz = 0; dz < 2; ++dz)
                for (int dy = 0; dy < 2; ++dy)
                  for (int dx = 0; dx < 2; ++dx) sum += cur.at(n, c, 2 * z + dz, 2 * y + dy, 2 * x + dx);
              next.at(n, c, z, y, x) = sum / 8.0;
            }
          }
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace evcseg
