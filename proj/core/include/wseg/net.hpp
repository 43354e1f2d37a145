#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wseg/tensor.hpp"
#include "wseg/util.hpp"

namespace wseg {

struct LightweightNonBt1DConfig {
  int channels = 64;
  int dilation = 1;
  double dropout_p = 0.0;
  bool use_prelu = true;
  bool use_bias = false;
  // Closing 1x1 after the asymmetric pair (as drawn); false moves it directly
  // behind the opening 1x1 for the ablation harness. Same cost either way.
  bool tail_1x1 = true;
};

struct EncoderConfig {
  int in_channels = 3;
  std::vector<int> stage_channels{16, 64, 128};
  std::vector<int> stage_modules{0, 4, 6};
  std::vector<std::vector<int>> stage_dilations{{}, {1, 1, 2, 4}, {2, 4, 8, 16, 2, 4}};
  int classes = 4;
  int factor = 8;  // must equal 2^(number of stages)
  double dropout_first = 0.03;
  double dropout_rest = 0.3;
  int dropout_first_count = 5;
  bool use_prelu = true;
  bool use_bias = false;
  bool tail_1x1 = true;
};

// Raw head outputs at encoder resolution N x M = input / f. Offsets are
// unbounded; bound_offsets is the caller's job.
struct NetworkOutput {
  Tensor logits;        // (B, C, N, M)
  Tensor sem_offsets;   // (B, 2, N, M)
  Tensor inst_offsets;  // (B, 2, N, M)
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace layers {

struct Conv {
  Tensor weight;
  std::optional<Tensor> bias;
  Conv2dOpts opts;

  Tensor operator()(const Tensor& x, Tape* tape) const {
    return conv2d(x, weight, bias, opts, tape);
  }
};

struct BatchNorm {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  bool folded = false;  // absorbed into the neighbouring conv; apply() passes through

  void init(std::int64_t channels);
  Tensor apply(const Tensor& x, Mode mode, Tape* tape);
};

struct Activation {
  bool use_prelu = true;
  Tensor slopes;  // (1, C, 1, 1), defined iff use_prelu

  void init(std::int64_t channels, bool prelu);
  Tensor operator()(const Tensor& x, Tape* tape) const;
};

// Residual block of two 1x1 channelwise convolutions around a (3x1, 1x3)
// asymmetric pair, bias-free by default, BN behind every conv.
struct LightweightBlock {
  LightweightNonBt1DConfig cfg;
  Conv conv_in, conv_ver, conv_hor, conv_out;
  BatchNorm bn_in, bn_ver, bn_hor, bn_out;
  Activation act0, act1, act2, act_final;  // first three in execution order
  int block_index = 0;                     // seeds the per-block dropout stream

  void init(const LightweightNonBt1DConfig& c, int index, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode, Tape* tape, std::uint64_t dropout_seed);
};

// Halves the spatial dims by concatenating a strided 3x3 conv with a 2x2
// max-pool of the same input, then BN + activation over the concatenation.
struct Downsampler {
  std::int64_t c_in = 0, c_out = 0;
  Conv conv;  // (c_out - c_in) filters, stride 2, pad 1
  BatchNorm bn;
  Activation act;
  // After folding the pool half of the BN survives as a 1x1 conv that is the
  // identity on the conv channels (max-pool has no weights to absorb into).
  std::optional<Conv> folded_affine;

  void init(std::int64_t cin, std::int64_t cout, bool prelu, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode, Tape* tape);
};

}  // namespace layers

class Network {
 public:
  Network(const EncoderConfig& cfg, std::uint64_t seed);

  // dropout_seed varies the dropout masks between training steps; ignored in
  // eval mode. Folded networks run in eval mode only.
  NetworkOutput forward(const Tensor& image, Mode mode, Tape* tape,
                        std::uint64_t dropout_seed = 0);

  std::vector<NamedTensor> parameters();  // trainable, in checkpoint order
  std::vector<NamedTensor> buffers();     // running statistics
  std::int64_t parameter_count();

  const EncoderConfig& config() const { return cfg_; }
  bool folded() const { return folded_; }

  std::vector<layers::Downsampler>& downsamplers() { return downs_; }
  std::vector<std::vector<layers::LightweightBlock>>& stage_blocks() { return stages_; }
  layers::Conv& head_logits() { return head_logits_; }
  layers::Conv& head_sem_offsets() { return head_sem_; }
  layers::Conv& head_inst_offsets() { return head_inst_; }

 private:
  friend Network fold_batchnorm(const Network& net);

  EncoderConfig cfg_;
  std::vector<layers::Downsampler> downs_;
  std::vector<std::vector<layers::LightweightBlock>> stages_;
  layers::Conv head_logits_, head_sem_, head_inst_;
  bool folded_ = false;
};

// Returns a deep copy whose convolutions absorb their batch norms
// (w' = w * gamma / sqrt(var + eps), bias shifted accordingly); eval outputs
// match the unfolded network. Folding a folded network is the identity.
Network fold_batchnorm(const Network& net);

}  // namespace wseg
