#include "evcseg/evnet.hpp"

#include <cmath>

#include "evcseg/error.hpp"
#include "evcseg/rng.hpp"

namespace evcseg {

void EvNetConfig::validate() const {
  if (levels < 2 || levels > 5) throw ConfigError("levels must be in 2..5");
  if (base_channels < 2) throw ConfigError("base_channels must be >= 2");
  if (static_cast<int>(convs_per_block.size()) != levels) {
    throw ConfigError("convs_per_block needs one entry per level");
  }
  for (int c : convs_per_block) {
    if (c < 1) throw ConfigError("every block needs at least one convolution");
  }
  if (kernel_size < 1 || kernel_size % 2 == 0 || kernel_size > 15) {
    throw ConfigError("kernel_size must be odd and <= 15");
  }
  if (!std::isfinite(prelu_init)) throw ConfigError("prelu_init must be finite");
}

namespace {

ConvParams make_conv(Rng& rng, int out_ch, int in_ch, int k, int stride, int pad, double slope) {
  ConvParams p;
  p.kernel = Tensor5(Shape5{out_ch, in_ch, k, k, k});
  p.bias = Tensor5(Shape5{out_ch, 1, 1, 1, 1});
  p.stride = stride;
  p.padding = pad;
  const double fan_in = static_cast<double>(in_ch) * k * k * k;
  const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
  for (double& w : p.kernel.values) w = rng.uniform(-bound, bound);
  return p;
}

ConvParams make_upconv(Rng& rng, int in_ch, int out_ch, double slope) {
  ConvParams p;
  p.kernel = Tensor5(Shape5{in_ch, out_ch, 2, 2, 2});
  p.bias = Tensor5(Shape5{out_ch, 1, 1, 1, 1});
  p.stride = 2;
  p.padding = 0;
  // Each output voxel receives exactly one tap per input channel.
  const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * in_ch));
  for (double& w : p.kernel.values) w = rng.uniform(-bound, bound);
  return p;
}

Tensor5 make_slopes(int channels, double init) { return Tensor5(Shape5{channels, 1, 1, 1, 1}, init); }

enum class UnitKind { kConv, kDown, kUp };

Tensor5 unit_forward(const ConvUnit& u, UnitKind kind, const Tensor5& x, UnitCache& cache) {
  cache.input = x;
  switch (kind) {
    case UnitKind::kConv: cache.pre = conv3d_forward(x, u.conv); break;
    case UnitKind::kDown: cache.pre = downconv(x, u.conv); break;
    case UnitKind::kUp: cache.pre = upconv(x, u.conv); break;
  }
  return prelu(cache.pre, u.slopes);
}

void accumulate(Tensor5& param, const Tensor5& g) {
  if (param.grad.size() != param.values.size()) param.zero_grad();
  for (std::size_t i = 0; i < g.values.size(); ++i) param.grad[i] += g.values[i];
}

// Returns the gradient with respect to the unit's input.
Tensor5 unit_backward(ConvUnit& u, UnitKind kind, const UnitCache& cache, const Tensor5& grad_out) {
  PreluGrads pg = prelu_backward(cache.pre, u.slopes, grad_out);
  accumulate(u.slopes, pg.grad_slopes);
  ConvGrads cg;
  switch (kind) {
    case UnitKind::kConv: cg = conv3d_backward(cache.input, u.conv, pg.grad_x); break;
    case UnitKind::kDown: cg = downconv_backward(cache.input, u.conv, pg.grad_x); break;
    case UnitKind::kUp: cg = upconv_backward(cache.input, u.conv, pg.grad_x); break;
  }
  accumulate(u.conv.kernel, cg.grad_kernel);
  accumulate(u.conv.bias, cg.grad_bias);
  return std::move(cg.grad_x);
}

// Adjoint of raw_input_at_level: spreads each coarse value evenly over its
// 2^level block.
Tensor5 raw_input_adjoint(const Tensor5& g, const Shape5& input_shape, int level) {
  Tensor5 out(input_shape);
  const int f = 1 << level;
  const double scale = 1.0 / (static_cast<double>(f) * f * f);
  for (int n = 0; n < input_shape.n; ++n)
    for (int c = 0; c < input_shape.c; ++c)
      for (int z = 0; z < input_shape.d; ++z)
        for (int y = 0; y < input_shape.h; ++y)
          for (int x = 0; x < input_shape.w; ++x)
            out.at(n, c, z, y, x) = g.at(n, c, z / f, y / f, x / f) * scale;
  return out;
}

}  // namespace

EvNet::EvNet(EvNetConfig config) : config_(std::move(config)) {
  config_.validate();
  const int L = config_.levels;
  const int k = config_.kernel_size;
  const int pad = k / 2;
  const double a = config_.prelu_init;
  Rng rng(derive_seed(config_.seed, {0x65766e6574ULL}));

  down_.resize(L);
  enc_.resize(L);
  up_.resize(L - 1);
  dec_.resize(L - 1);

  for (int l = 0; l < L; ++l) {
    const int ch = config_.channels_at(l);
    int block_in = 1;
    if (l > 0) {
      down_[l] = ConvUnit{make_conv(rng, ch, config_.channels_at(l - 1), 2, 2, 0, a), make_slopes(ch, a)};
      block_in = ch;
      if (config_.multiscale_inputs && config_.multiscale_mode == MultiscaleMode::kConcat) block_in += 1;
    }
    for (int j = 0; j < config_.convs_per_block[l]; ++j) {
      enc_[l].push_back(ConvUnit{make_conv(rng, ch, j == 0 ? block_in : ch, k, 1, pad, a), make_slopes(ch, a)});
    }
  }
  for (int l = L - 2; l >= 0; --l) {
    const int ch = config_.channels_at(l);
    up_[l] = ConvUnit{make_upconv(rng, config_.channels_at(l + 1), ch, a), make_slopes(ch, a)};
    for (int j = 0; j < config_.convs_per_block[l]; ++j) {
      dec_[l].push_back(ConvUnit{make_conv(rng, ch, j == 0 ? 2 * ch : ch, k, 1, pad, a), make_slopes(ch, a)});
    }
  }
  head_ = make_conv(rng, 2, config_.channels_at(0), 1, 1, 0, 1.0);
}

Tensor5 EvNet::forward(const Tensor5& input) const {
  EvNetActivations acts;
  return forward(input, acts);
}

Tensor5 EvNet::forward(const Tensor5& input, EvNetActivations& acts) const {
  const int L = config_.levels;
  if (input.shape.c != 1) throw ShapeError("network input must have a single channel");
  const int f = 1 << (L - 1);
  if (input.shape.n < 1 || input.shape.d % f || input.shape.h % f || input.shape.w % f ||
      input.shape.d == 0 || input.shape.h == 0 || input.shape.w == 0) {
    throw ShapeError("input " + input.shape.str() + " not divisible by 2^" + std::to_string(L - 1));
  }

  acts = EvNetActivations{};
  acts.input = input;
  acts.down.resize(L);
  acts.enc.resize(L);
  acts.enc_out.resize(L);
  acts.up.resize(L - 1);
  acts.dec.resize(L - 1);
  acts.dec_out.resize(L - 1);

  for (int l = 0; l < L; ++l) {
    const int ch = config_.channels_at(l);
    Tensor5 block_in;
    Tensor5 residual;
    if (l == 0) {
      block_in = input;
      residual = tile_channels(input, ch);
    } else {
      Tensor5 d = unit_forward(down_[l], UnitKind::kDown, acts.enc_out[l - 1], acts.down[l]);
      if (config_.multiscale_inputs) {
        Tensor5 raw = raw_input_at_level(input, l);
        if (config_.multiscale_mode == MultiscaleMode::kConcat) {
          block_in = concat_channels(d, raw);
          residual = std::move(d);
        } else {
          block_in = add(d, tile_channels(raw, ch));
          residual = block_in;
        }
      } else {
        block_in = d;
        residual = std::move(d);
      }
    }
    Tensor5 h = std::move(block_in);
    acts.enc[l].resize(enc_[l].size());
    for (std::size_t j = 0; j < enc_[l].size(); ++j) {
      h = unit_forward(enc_[l][j], UnitKind::kConv, h, acts.enc[l][j]);
    }
    add_inplace(h, residual);
    acts.enc_out[l] = std::move(h);
  }

  const Tensor5* prev = &acts.enc_out[L - 1];
  for (int l = L - 2; l >= 0; --l) {
    Tensor5 u = unit_forward(up_[l], UnitKind::kUp, *prev, acts.up[l]);
    Tensor5 h = concat_channels(u, acts.enc_out[l]);
    acts.dec[l].resize(dec_[l].size());
    for (std::size_t j = 0; j < dec_[l].size(); ++j) {
      h = unit_forward(dec_[l][j], UnitKind::kConv, h, acts.dec[l][j]);
    }
    add_inplace(h, u);
    acts.dec_out[l] = std::move(h);
    prev = &acts.dec_out[l];
  }

  acts.probs = softmax_channels(conv3d_forward(acts.dec_out[0], head_));
  return acts.probs;
}

void EvNet::backward(const EvNetActivations& acts, const Tensor5& grad_probs) {
  run_backward(acts, grad_probs, false);
}

Tensor5 EvNet::backward_input(const EvNetActivations& acts, const Tensor5& grad_probs) {
  return run_backward(acts, grad_probs, true);
}

Tensor5 EvNet::run_backward(const EvNetActivations& acts, const Tensor5& grad_probs, bool want_input) {
  const int L = config_.levels;
  if (!(grad_probs.shape == acts.probs.shape)) throw ShapeError("grad_probs shape mismatch");

  Tensor5 grad_input;
  if (want_input) grad_input = Tensor5(acts.input.shape);

  const Tensor5 g_logits = softmax_backward(acts.probs, grad_probs);
  ConvGrads hg = conv3d_backward(acts.dec_out[0], head_, g_logits);
  accumulate(head_.kernel, hg.grad_kernel);
  accumulate(head_.bias, hg.grad_bias);

  std::vector<Tensor5> g_enc(L);
  for (int l = 0; l < L; ++l) g_enc[l] = Tensor5(acts.enc_out[l].shape);

  Tensor5 g_prev = std::move(hg.grad_x);
  for (int l = 0; l <= L - 2; ++l) {
    Tensor5 g_h = g_prev;
    Tensor5 g_u = std::move(g_prev);  // residual branch
    for (int j = static_cast<int>(dec_[l].size()) - 1; j >= 0; --j) {
      g_h = unit_backward(dec_[l][j], UnitKind::kConv, acts.dec[l][j], g_h);
    }
    auto [g_u_cat, g_skip] = split_channels(g_h, config_.channels_at(l));
    add_inplace(g_u, g_u_cat);
    add_inplace(g_enc[l], g_skip);
    g_prev = unit_backward(up_[l], UnitKind::kUp, acts.up[l], g_u);
  }
  add_inplace(g_enc[L - 1], g_prev);

  for (int l = L - 1; l >= 0; --l) {
    Tensor5 g_h = g_enc[l];
    const Tensor5& g_residual = g_enc[l];
    for (int j = static_cast<int>(enc_[l].size()) - 1; j >= 0; --j) {
      g_h = unit_backward(enc_[l][j], UnitKind::kConv, acts.enc[l][j], g_h);
    }
    if (l == 0) {
      if (want_input) {
        add_inplace(grad_input, g_h);
        add_inplace(grad_input, tile_channels_backward(g_residual, 1));
      }
      break;
    }
    const int ch = config_.channels_at(l);
    Tensor5 g_d;
    Tensor5 g_raw;
    if (config_.multiscale_inputs && config_.multiscale_mode == MultiscaleMode::kConcat) {
      auto [gd, gr] = split_channels(g_h, ch);
      g_d = std::move(gd);
      add_inplace(g_d, g_residual);
      g_raw = std::move(gr);
    } else if (config_.multiscale_inputs) {
      g_d = std::move(g_h);
      add_inplace(g_d, g_residual);
      g_raw = tile_channels_backward(g_d, 1);
    } else {
      g_d = std::move(g_h);
      add_inplace(g_d, g_residual);
    }
    if (want_input && config_.multiscale_inputs) {
      add_inplace(grad_input, raw_input_adjoint(g_raw, acts.input.shape, l));
    }
    add_inplace(g_enc[l - 1], unit_backward(down_[l], UnitKind::kDown, acts.down[l], g_d));
  }
  return grad_input;
}

std::vector<NamedTensor> EvNet::parameters() {
  std::vector<NamedTensor> out;
  auto unit = [&](const std::string& prefix, ConvUnit& u) {
    out.push_back({prefix + ".weight", &u.conv.kernel});
    out.push_back({prefix + ".bias", &u.conv.bias});
    out.push_back({prefix + ".prelu", &u.slopes});
  };
  const int L = config_.levels;
  for (int l = 0; l < L; ++l) {
    if (l > 0) unit("enc" + std::to_string(l) + ".down", down_[l]);
    for (std::size_t j = 0; j < enc_[l].size(); ++j) {
      unit("enc" + std::to_string(l) + ".conv" + std::to_string(j), enc_[l][j]);
    }
  }
  for (int l = L - 2; l >= 0; --l) {
    unit("dec" + std::to_string(l) + ".up", up_[l]);
    for (std::size_t j = 0; j < dec_[l].size(); ++j) {
      unit("dec" + std::to_string(l) + ".conv" + std::to_string(j), dec_[l][j]);
    }
  }
  out.push_back({"head.weight", &head_.kernel});
  out.push_back({"head.bias", &head_.bias});
  return out;
}

std::vector<const Tensor5*> EvNet::parameters() const {
  std::vector<const Tensor5*> out;
  for (const NamedTensor& p : const_cast<EvNet*>(this)->parameters()) out.push_back(p.tensor);
  return out;
}

std::vector<std::string> EvNet::parameter_names() const {
  std::vector<std::string> out;
  for (const NamedTensor& p : const_cast<EvNet*>(this)->parameters()) out.push_back(p.name);
  return out;
}

void EvNet::zero_grad() {
  for (NamedTensor& p : parameters()) p.tensor->zero_grad();
}

std::size_t EvNet::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor5* t : parameters()) n += t->numel();
  return n;
}

LossReport soft_dice_loss(const Tensor5& pred, const Tensor5& truth, Tensor5* grad_pred) {
  if (pred.shape.c != 2) throw ShapeError("soft dice expects a two-channel prediction");
  if (truth.shape.c != 1 || truth.shape.n != pred.shape.n || !truth.shape.same_spatial(pred.shape)) {
    throw ShapeError("truth " + truth.shape.str() + " does not match prediction " + pred.shape.str());
  }
  const int B = pred.shape.n;
  LossReport report;
  report.per_example.resize(B);
  if (grad_pred) *grad_pred = Tensor5(pred.shape);
  for (int b = 0; b < B; ++b) {
    auto p = pred.plane(b, 1);
    auto g = truth.plane(b, 0);
    double inter = 0.0, pp = 0.0, gg = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      inter += p[i] * g[i];
      pp += p[i] * p[i];
      gg += g[i] * g[i];
    }
    const double denom = pp + gg + kSoftDiceEpsilon;
    report.per_example[b] = 1.0 - 2.0 * inter / denom;
    if (grad_pred) {
      auto gp = grad_pred->plane(b, 1);
      const double scale = 1.0 / B;
      for (std::size_t i = 0; i < p.size(); ++i) {
        gp[i] = scale * (-2.0 * g[i] / denom + 4.0 * inter * p[i] / (denom * denom));
      }
    }
  }
  double sum = 0.0;
  for (double v : report.per_example) sum += v;
  report.value = sum / B;
  return report;
}

void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step buffers differ in length");
  }
  if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
    throw TrainingError("sgd_step needs lr >= 0 and momentum in [0,1)");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) throw TrainingError("non-finite gradient; step aborted");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] - lr * grads[i];
    params[i] += velocity[i];
  }
}

SgdMomentum::SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
}

void SgdMomentum::step(EvNet& net) {
  auto params = net.parameters();
  if (velocity_.empty()) {
    for (const NamedTensor& p : params) velocity_.emplace_back(p.tensor->numel(), 0.0);
  }
  for (const NamedTensor& p : params) {
    if (p.tensor->grad.size() != p.tensor->values.size()) p.tensor->zero_grad();
    for (double g : p.tensor->grad) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in " + p.name + "; step aborted");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor5& t = *params[i].tensor;
    sgd_step(t.values, t.grad, velocity_[i], lr_, momentum_);
  }
}

}  // namespace evcseg
