#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evcseg/layers.hpp"
#include "evcseg/tensor.hpp"

namespace evcseg {

/// How the downsampled raw input joins a level's features.
enum class MultiscaleMode { kConcat, kAdd };

struct EvNetConfig {
  int levels = 2;
  int base_channels = 2;
  /// Convolutions per encoder block; the decoder block at the same level
  /// uses the same count.
  std::vector<int> convs_per_block{1, 2};
  /// true: EV-Net (raw input joined at every level below the top);
  /// false: plain V-Net.
  bool multiscale_inputs = true;
  MultiscaleMode multiscale_mode = MultiscaleMode::kConcat;
  double prelu_init = 0.25;
  std::uint64_t seed = 0;
  /// In-block kernel extent (odd). Down/up convolutions are always 2^3.
  int kernel_size = 5;

  int channels_at(int level) const { return base_channels << level; }
  /// Throws ConfigError on any violated constraint.
  void validate() const;
  bool operator==(const EvNetConfig&) const = default;
};

/// Convolution followed by PReLU.
struct ConvUnit {
  ConvParams conv;
  Tensor5 slopes;
};

/// Intermediate tensors kept by a training forward pass.
struct UnitCache {
  Tensor5 input;
  Tensor5 pre;  // pre-activation
};

struct EvNetActivations {
  Tensor5 input;
  std::vector<UnitCache> down;                // index = level (0 unused)
  std::vector<std::vector<UnitCache>> enc;    // per level, per conv
  std::vector<Tensor5> enc_out;
  std::vector<UnitCache> up;                  // index = decoder level
  std::vector<std::vector<UnitCache>> dec;
  std::vector<Tensor5> dec_out;
  Tensor5 probs;
};

/// Multi-scale-input V-Net with hand-written backward pass.
///
/// Level l works at resolution 2^-l with base_channels * 2^l features.
/// Below the top level each encoder block starts from a 2^3 stride-2
/// downconv + PReLU; with multiscale inputs the raw image, block-mean
/// downsampled to the level, is concatenated (or broadcast-added) onto that
/// output before the block's 5^3 convolutions. Every block ends in a
/// residual add of its entry features. The decoder mirrors the encoder with
/// transposed convolutions and skip concatenation, and a 1^3 head maps to
/// two channels followed by a per-voxel softmax.
class EvNet {
 public:
  explicit EvNet(EvNetConfig config);

  const EvNetConfig& config() const { return config_; }

  /// (batch, 1, d, h, w) -> (batch, 2, d, h, w) probabilities.
  Tensor5 forward(const Tensor5& input) const;
  Tensor5 forward(const Tensor5& input, EvNetActivations& acts) const;

  /// Accumulates parameter gradients (into each parameter's `grad`) from the
  /// gradient of the loss with respect to the output probabilities.
  void backward(const EvNetActivations& acts, const Tensor5& grad_probs);

  /// Gradient of the loss with respect to the network input; used by tests.
  Tensor5 backward_input(const EvNetActivations& acts, const Tensor5& grad_probs);

  std::vector<NamedTensor> parameters();
  std::vector<const Tensor5*> parameters() const;
  std::vector<std::string> parameter_names() const;
  void zero_grad();
  std::size_t parameter_count() const;

  // Direct access for tests and checkpoint loading.
  std::vector<ConvUnit>& down_units() { return down_; }
  std::vector<std::vector<ConvUnit>>& encoder_units() { return enc_; }
  std::vector<ConvUnit>& up_units() { return up_; }
  std::vector<std::vector<ConvUnit>>& decoder_units() { return dec_; }
  ConvParams& head() { return head_; }

 private:
  Tensor5 run_backward(const EvNetActivations& acts, const Tensor5& grad_probs, bool want_input);

  EvNetConfig config_;
  std::vector<ConvUnit> down_;             // index = level, [0] unused
  std::vector<std::vector<ConvUnit>> enc_;
  std::vector<ConvUnit> up_;               // index = decoder level 0..levels-2
  std::vector<std::vector<ConvUnit>> dec_;
  ConvParams head_;
};

struct LossReport {
  double value = 0.0;
  std::vector<double> per_example;
};

constexpr double kSoftDiceEpsilon = 1e-7;

/// Soft Dice on the foreground channel (channel 1) of `pred`:
/// 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps) per example, averaged over
/// the batch. `truth` is (batch, 1, d, h, w) with values in {0, 1}. When
/// `grad_pred` is given it receives d(value)/d(pred) (channel 0 is zero).
LossReport soft_dice_loss(const Tensor5& pred, const Tensor5& truth, Tensor5* grad_pred = nullptr);

/// Classic momentum update, in place:
///   velocity = momentum * velocity - lr * grad;  param += velocity.
/// Throws TrainingError (leaving everything untouched) on non-finite grads.
void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              double lr, double momentum);

/// Momentum SGD over every parameter of a network.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum);
  void step(EvNet& net);
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace evcseg
