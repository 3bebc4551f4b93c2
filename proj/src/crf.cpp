#include "evcseg/crf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "evcseg/parallel.hpp"

namespace evcseg {

void CrfConfig::validate() const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  auto finite_pos = [](double v) { return std::isfinite(v) && v > 0.0; };
  if (!finite_nonneg(w_appearance) || !finite_nonneg(w_smoothness)) {
    throw ConfigError("CRF kernel weights must be finite and non-negative");
  }
  if (!finite_pos(theta_alpha) || !finite_pos(theta_beta) || !finite_pos(theta_gamma)) {
    throw ConfigError("CRF bandwidths must be finite and positive");
  }
  if (iterations < 0) throw ConfigError("CRF iteration count must be non-negative");
  if (backend == CrfBackend::kFiltered && update_order == UpdateOrder::kSequential) {
    throw ConfigError("sequential CRF updates need the brute backend");
  }
}

UnaryField unary_from_probmap(const ProbMap& p) {
  UnaryField u;
  u.labels = p.labels();
  u.shape = p.shape();
  u.neg_log_probs.resize(p.data().size());
  for (std::size_t k = 0; k < u.neg_log_probs.size(); ++k) {
    const double v = std::clamp(p.data()[k], kUnaryClamp, 1.0 - kUnaryClamp);
    u.neg_log_probs[k] = -std::log(v);
  }
  return u;
}

namespace {

// q_i(l) proportional to exp(-psi_i(l) + m_i(l)), stable under large logits.
void normalised_update(ProbMap& q, std::size_t i, const UnaryField& u, const double* msg,
                       std::size_t msg_stride) {
  const int L = u.labels;
  double logits[16];
  std::vector<double> heap;
  double* z = logits;
  if (L > 16) {
    heap.resize(L);
    z = heap.data();
  }
  double top = -std::numeric_limits<double>::infinity();
  for (int l = 0; l < L; ++l) {
    z[l] = -u.at(l, i) + (msg ? msg[l * msg_stride] : 0.0);
    top = std::max(top, z[l]);
  }
  double sum = 0.0;
  for (int l = 0; l < L; ++l) {
    z[l] = std::exp(z[l] - top);
    sum += z[l];
  }
  for (int l = 0; l < L; ++l) q.at(l, i) = z[l] / sum;
}

struct Messages {
  ProbMap m;                  // sum_{j != i} k_ij q_j(l)
  std::vector<double> degree; // sum_{j != i} k_ij
};

Messages brute_messages(const ProbMap& q, std::span<const CrfFeature> f, const CrfConfig& cfg) {
  const std::size_t n = q.voxels();
  const int L = q.labels();
  Messages out{ProbMap(L, q.shape(), q.affine()), std::vector<double>(n, 0.0)};
  if (cfg.w_appearance == 0.0 && cfg.w_smoothness == 0.0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double k = pairwise_kernel(f[i], f[j], cfg);
      out.degree[i] += k;
      out.degree[j] += k;
      for (int l = 0; l < L; ++l) {
        out.m.at(l, i) += k * q.at(l, j);
        out.m.at(l, j) += k * q.at(l, i);
      }
    }
  }
  return out;
}

// F from messages: sum Q psi + 1/2 sum_i (K_i - sum_l Q_i m_i) + sum Q log Q.
double free_energy_from(const ProbMap& q, const UnaryField& u, const ProbMap& m,
                        std::span<const double> degree) {
  long double unary = 0.0L, pair = 0.0L, entropy = 0.0L;
  for (std::size_t i = 0; i < q.voxels(); ++i) {
    long double overlap = 0.0L;
    for (int l = 0; l < q.labels(); ++l) {
      const double qi = q.at(l, i);
      unary += static_cast<long double>(qi) * u.at(l, i);
      if (qi > 0.0) entropy += static_cast<long double>(qi) * std::log(qi);
      overlap += static_cast<long double>(qi) * m.at(l, i);
    }
    pair += degree[i] - overlap;
  }
  return static_cast<double>(unary + 0.5L * pair + entropy);
}

void check_crf_shapes(const ProbMap& q, const Volume& vol) {
  if (!(q.shape() == vol.shape())) throw ShapeError("CRF marginals and volume differ in shape");
}

// ---- filtered backend ----

std::vector<double> gaussian_taps(double sigma, double step, double cutoff) {
  const int r = static_cast<int>(std::ceil(cutoff / step - 1e-9));
  std::vector<double> taps(2 * r + 1);
  for (int d = -r; d <= r; ++d) {
    const double t = d * step;
    taps[d + r] = std::exp(-t * t / (2.0 * sigma * sigma));
  }
  return taps;
}

// In-place 1D convolution along one axis of a dense row-major grid with
// zero boundary. `dims` fastest first; `comps` interleaved values per cell.
void blur_axis(std::vector<double>& g, const std::vector<int>& dims, int comps, int axis,
               const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size() / 2);
  if (r == 0) return;
  std::size_t inner = comps;
  for (int a = 0; a < axis; ++a) inner *= dims[a];
  const int len = dims[axis];
  std::size_t outer = 1;
  for (std::size_t a = axis + 1; a < dims.size(); ++a) outer *= dims[a];
  const std::size_t stride = inner;
  parallel_for(outer, [&](std::size_t o) {
    std::vector<double> line(len);
    const std::size_t base = o * inner * len;
    for (std::size_t in = 0; in < inner; ++in) {
      double* p = g.data() + base + in;
      for (int t = 0; t < len; ++t) line[t] = p[t * stride];
      for (int t = 0; t < len; ++t) {
        const int lo = std::max(-r, -t), hi = std::min(r, len - 1 - t);
        double acc = 0.0;
        for (int d = lo; d <= hi; ++d) acc += taps[d + r] * line[t + d];
        p[t * stride] = acc;
      }
    }
  });
}

// Grid cells per bandwidth in the bilateral grid.
// Intensity-axis grid cells per theta_beta.
constexpr double kCellsPerSigma = 8.0;
// Gaussian blurs are cut at this many standard deviations.
constexpr double kTruncateSigmas = 4.0;

}  // namespace

ProbMap softmax_unary(const UnaryField& u, const Affine& affine) {
  ProbMap q(u.labels, u.shape, affine);
  for (std::size_t i = 0; i < u.voxels(); ++i) normalised_update(q, i, u, nullptr, 0);
  return q;
}

std::vector<CrfFeature> crf_features(const Volume& vol) {
  const auto data = vol.data();
  double lo = data.empty() ? 0.0 : data[0], hi = lo;
  for (double v : data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo;
  const Shape3 s = vol.shape();
  std::vector<CrfFeature> f(vol.size());
  for (int z = 0; z < s.nz; ++z) {
    for (int y = 0; y < s.ny; ++y) {
      for (int x = 0; x < s.nx; ++x) {
        const std::size_t i = vol.index(x, y, z);
        f[i].position = voxel_to_world(vol.affine(), Eigen::Vector3d(x, y, z));
        f[i].intensity = range > 0.0 ? (data[i] - lo) / range : 0.0;
      }
    }
  }
  return f;
}

double pairwise_kernel(const CrfFeature& fi, const CrfFeature& fj, const CrfConfig& cfg) {
  const double dp2 = (fi.position - fj.position).squaredNorm();
  double k = 0.0;
  if (cfg.w_appearance != 0.0) {
    const double di = fi.intensity - fj.intensity;
    k += cfg.w_appearance * std::exp(-dp2 / (2.0 * cfg.theta_alpha * cfg.theta_alpha) -
                                     di * di / (2.0 * cfg.theta_beta * cfg.theta_beta));
  }
  if (cfg.w_smoothness != 0.0) {
    k += cfg.w_smoothness * std::exp(-dp2 / (2.0 * cfg.theta_gamma * cfg.theta_gamma));
  }
  return k;
}

double gibbs_energy(const LabelMask& x, const UnaryField& u, const Volume& vol,
                    const CrfConfig& cfg) {
  const std::size_t n = x.size();
  if (n > kGibbsEnergyMaxVoxels) {
    throw CapacityError("exact Gibbs energy is limited to " +
                        std::to_string(kGibbsEnergyMaxVoxels) + " voxels");
  }
  if (!(x.shape() == vol.shape()) || !(u.shape == vol.shape())) {
    throw ShapeError("labelling, unary field and volume differ in shape");
  }
  const auto f = crf_features(vol);
  long double e = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] >= u.labels) throw DomainError("label outside the unary field's label range");
    e += u.at(x[i], i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (x[i] != x[j]) e += pairwise_kernel(f[i], f[j], cfg);
    }
  }
  return static_cast<double>(e);
}

double free_energy(const ProbMap& q, const UnaryField& u, const Volume& vol, const CrfConfig& cfg) {
  check_crf_shapes(q, vol);
  const auto f = crf_features(vol);
  const Messages msg = brute_messages(q, f, cfg);
  return free_energy_from(q, u, msg.m, msg.degree);
}

ProbMap brute_message_pass(const ProbMap& q, const Volume& vol, const CrfConfig& cfg) {
  check_crf_shapes(q, vol);
  return brute_messages(q, crf_features(vol), cfg).m;
}

ProbMap filtered_message_pass(const ProbMap& q, const Volume& vol, const CrfConfig& cfg) {
  check_crf_shapes(q, vol);
  const Shape3 s = vol.shape();
  const std::size_t n = q.voxels();
  const int L = q.labels();
  ProbMap out(L, s, q.affine());
  const Eigen::Vector3d sp = voxel_spacing(vol.affine());
  const std::vector<int> vdims{s.nx, s.ny, s.nz};

  if (cfg.w_smoothness != 0.0) {
    std::vector<double> field(n);
    for (int l = 0; l < L; ++l) {
      std::copy(q.plane(l).begin(), q.plane(l).end(), field.begin());
      for (int a = 0; a < 3; ++a) {
        blur_axis(field, vdims, 1, a,
                  gaussian_taps(cfg.theta_gamma, sp[a], kTruncateSigmas * cfg.theta_gamma));
      }
      auto o = out.plane(l);
      auto src = q.plane(l);
      for (std::size_t i = 0; i < n; ++i) o[i] = cfg.w_smoothness * (field[i] - src[i]);
    }
  }

  if (cfg.w_appearance != 0.0) {
    const auto f = crf_features(vol);
    // Intensity axis sampled at theta_beta / kCellsPerSigma; spatial axes
    // stay at voxel resolution, where the Gaussian separates exactly. One
    // intensity cell is processed at a time, so memory stays O(N L).
    const double scale = kCellsPerSigma / cfg.theta_beta;
    const int cells = static_cast<int>(std::floor(scale)) + 2;
    std::vector<int> cell(n);
    std::vector<double> frac(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double c = f[i].intensity * scale;
      cell[i] = std::min(static_cast<int>(std::floor(c)), cells - 2);
      frac[i] = c - cell[i];
    }
    // Splat and slice each add a tent of variance 1/6 cell^2, so the blur
    // itself is narrowed to keep the overall variance on target.
    const double sigma_b = std::sqrt(kCellsPerSigma * kCellsPerSigma - 1.0 / 3.0);
    const auto itaps = gaussian_taps(sigma_b, 1.0, kTruncateSigmas * sigma_b);
    const int ir = static_cast<int>(itaps.size() / 2);
    double tap_sum = 0.0;
    for (double t : itaps) tap_sum += t;
    const double gain = std::sqrt(2.0 * std::numbers::pi) * kCellsPerSigma / tap_sum;
    auto itap = [&](int d) { return std::abs(d) <= ir ? itaps[d + ir] : 0.0; };
    std::vector<std::vector<double>> staps(3);
    for (int a = 0; a < 3; ++a) staps[a] = gaussian_taps(cfg.theta_alpha, sp[a], kTruncateSigmas * cfg.theta_alpha);

    std::vector<double> slab(n * L);
    std::vector<double> acc(n * L, 0.0);
    for (int k = 0; k < cells; ++k) {
      bool any = false;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = itap(k - cell[i]) * (1.0 - frac[i]) + itap(k - cell[i] - 1) * frac[i];
        any = any || w != 0.0;
        for (int l = 0; l < L; ++l) slab[i * L + l] = w * q.at(l, i);
      }
      if (!any) continue;
      for (int a = 0; a < 3; ++a) blur_axis(slab, vdims, L, a, staps[a]);
      for (std::size_t i = 0; i < n; ++i) {
        double w = 0.0;
        if (cell[i] == k) w = 1.0 - frac[i];
        else if (cell[i] + 1 == k) w = frac[i];
        else continue;
        for (int l = 0; l < L; ++l) acc[i * L + l] += w * slab[i * L + l];
      }
    }
    // The grid's own response of a voxel to itself, removed exactly.
    const double t1 = itap(1);
    for (std::size_t i = 0; i < n; ++i) {
      const double fr = frac[i];
      const double self = (1.0 - fr) * (1.0 - fr) + fr * fr + 2.0 * fr * (1.0 - fr) * t1;
      for (int l = 0; l < L; ++l) {
        out.at(l, i) += cfg.w_appearance * gain * (acc[i * L + l] - self * q.at(l, i));
      }
    }
  }
  return out;
}

void update_voxel(ProbMap& q, std::size_t voxel, const UnaryField& u,
                  std::span<const CrfFeature> features, const CrfConfig& cfg) {
  const int L = q.labels();
  std::vector<double> m(L, 0.0);
  if (cfg.w_appearance != 0.0 || cfg.w_smoothness != 0.0) {
    for (std::size_t j = 0; j < q.voxels(); ++j) {
      if (j == voxel) continue;
      const double k = pairwise_kernel(features[voxel], features[j], cfg);
      for (int l = 0; l < L; ++l) m[l] += k * q.at(l, j);
    }
  }
  normalised_update(q, voxel, u, m.data(), 1);
}

MeanFieldState initial_state(const UnaryField& u, const Affine& affine) {
  MeanFieldState st;
  st.q = softmax_unary(u, affine);
  return st;
}

namespace {

bool same_kernels(const CrfConfig& a, const CrfConfig& b) {
  return a.backend == b.backend && a.w_appearance == b.w_appearance &&
         a.w_smoothness == b.w_smoothness && a.theta_alpha == b.theta_alpha &&
         a.theta_beta == b.theta_beta && a.theta_gamma == b.theta_gamma;
}

Messages messages_for(const ProbMap& q, const Volume& vol, std::span<const CrfFeature> f,
                      const CrfConfig& cfg) {
  if (cfg.backend == CrfBackend::kBrute) return brute_messages(q, f, cfg);
  Messages m{filtered_message_pass(q, vol, cfg), std::vector<double>(q.voxels(), 0.0)};
  // With normalised q, sum_l m_i(l) is the (approximate) kernel degree.
  for (std::size_t i = 0; i < q.voxels(); ++i) {
    for (int l = 0; l < q.labels(); ++l) m.degree[i] += m.m.at(l, i);
  }
  return m;
}

}  // namespace

MeanFieldState mean_field_step(const MeanFieldState& state, const UnaryField& u, const Volume& vol,
                               const CrfConfig& cfg) {
  cfg.validate();
  check_crf_shapes(state.q, vol);
  if (!(u.shape == vol.shape()) || u.labels != state.q.labels()) {
    throw ShapeError("unary field does not match the CRF marginals");
  }
  MeanFieldState next;
  next.q = state.q;
  next.free_energy_trace = state.free_energy_trace;
  next.trace_approximate = state.trace_approximate;
  const std::size_t n = next.q.voxels();
  const auto f = crf_features(vol);

  if (cfg.update_order == UpdateOrder::kSequential) {
    for (std::size_t i = 0; i < n; ++i) update_voxel(next.q, i, u, f, cfg);
  } else {
    const bool cached = state.messages.labels() == state.q.labels() &&
                        state.messages.shape() == state.q.shape() &&
                        same_kernels(state.messages_config, cfg);
    const Messages fresh = cached ? Messages{} : messages_for(state.q, vol, f, cfg);
    const ProbMap& msg = cached ? state.messages : fresh.m;
    parallel_for(n, [&](std::size_t i) { normalised_update(next.q, i, u, msg.data().data() + i, n); });
  }
  Messages after = messages_for(next.q, vol, f, cfg);
  next.free_energy_trace.push_back(free_energy_from(next.q, u, after.m, after.degree));
  next.trace_approximate = next.trace_approximate || cfg.backend == CrfBackend::kFiltered;
  next.messages = std::move(after.m);
  next.degree = std::move(after.degree);
  next.messages_config = cfg;
  return next;
}

RefineResult refine(const ProbMap& p, const Volume& vol, const CrfConfig& cfg) {
  cfg.validate();
  check_crf_shapes(p, vol);
  if (p.labels() != 2) throw ShapeError("refinement expects a two-label probability map");
  const UnaryField u = unary_from_probmap(p);
  RefineResult r{LabelMask(), initial_state(u, p.affine())};
  if (cfg.iterations == 0) {
    r.labels = argmax(p);
    return r;
  }
  for (int it = 0; it < cfg.iterations; ++it) r.state = mean_field_step(r.state, u, vol, cfg);
  r.labels = LabelMask(p.shape(), p.affine());
  const ProbMap& q = r.state.q;
  for (std::size_t i = 0; i < p.voxels(); ++i) {
    const double a = q.at(0, i), b = q.at(1, i);
    const bool fg = a != b ? b > a : p.at(1, i) > p.at(0, i);
    r.labels[i] = fg ? 1 : 0;
  }
  return r;
}

}  // namespace evcseg
