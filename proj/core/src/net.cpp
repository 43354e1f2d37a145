#include "wseg/net.hpp"

#include <cmath>
#include <functional>
#include <string>

namespace wseg {
namespace layers {

namespace {

Tensor he_weight(std::int64_t oc, std::int64_t ic, std::int64_t kh, std::int64_t kw, Rng& rng) {
  Tensor w(Shape{oc, ic, kh, kw}, 0.0, true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(ic * kh * kw));
  for (double& v : w.values()) v = rng.normal() * stddev;
  return w;
}

std::optional<Tensor> zero_bias(std::int64_t c, bool enabled) {
  if (!enabled) return std::nullopt;
  return Tensor(Shape{1, c, 1, 1}, 0.0, true);
}

}  // namespace

void BatchNorm::init(std::int64_t channels) {
  gamma = Tensor(Shape{1, channels, 1, 1}, 1.0, true);
  beta = Tensor(Shape{1, channels, 1, 1}, 0.0, true);
  running_mean = Tensor(Shape{1, channels, 1, 1});
  running_var = Tensor(Shape{1, channels, 1, 1}, 1.0);
}

Tensor BatchNorm::apply(const Tensor& x, Mode mode, Tape* tape) {
  if (folded) return x;
  return batchnorm2d(x, gamma, beta, running_mean, running_var, mode, BnOpts{}, tape);
}

void Activation::init(std::int64_t channels, bool prelu_) {
  use_prelu = prelu_;
  if (use_prelu) slopes = Tensor(Shape{1, channels, 1, 1}, 0.25, true);
}

Tensor Activation::operator()(const Tensor& x, Tape* tape) const {
  return use_prelu ? prelu(x, slopes, tape) : relu(x, tape);
}

void LightweightBlock::init(const LightweightNonBt1DConfig& c, int index, Rng& rng) {
  if (c.channels < 1 || c.dilation < 1) {
    throw ConfigError("block needs channels >= 1 and dilation >= 1");
  }
  if (c.dropout_p < 0.0 || c.dropout_p >= 1.0) {
    throw ConfigError("block dropout probability must lie in [0, 1)");
  }
  cfg = c;
  block_index = index;
  const std::int64_t w = c.channels;
  const int d = c.dilation;
  conv_in.weight = he_weight(w, w, 1, 1, rng);
  conv_in.bias = zero_bias(w, c.use_bias);
  conv_ver.weight = he_weight(w, w, 3, 1, rng);
  conv_ver.bias = zero_bias(w, c.use_bias);
  conv_ver.opts.pad_h = d;
  conv_ver.opts.dil_h = d;
  conv_hor.weight = he_weight(w, w, 1, 3, rng);
  conv_hor.bias = zero_bias(w, c.use_bias);
  conv_hor.opts.pad_w = d;
  conv_hor.opts.dil_w = d;
  conv_out.weight = he_weight(w, w, 1, 1, rng);
  conv_out.bias = zero_bias(w, c.use_bias);
  bn_in.init(w);
  bn_ver.init(w);
  bn_hor.init(w);
  bn_out.init(w);
  act0.init(w, c.use_prelu);
  act1.init(w, c.use_prelu);
  act2.init(w, c.use_prelu);
  act_final.init(w, c.use_prelu);
}

Tensor LightweightBlock::forward(const Tensor& x, Mode mode, Tape* tape,
                                 std::uint64_t dropout_seed) {
  if (x.shape().c != cfg.channels) {
    throw ShapeError("block expects " + std::to_string(cfg.channels) + " channels, got " +
                     x.shape().str());
  }
  const std::uint64_t seed = mix_seed(dropout_seed, static_cast<std::uint64_t>(block_index) + 1);
  Tensor h;
  if (cfg.tail_1x1) {
    h = act0(bn_in.apply(conv_in(x, tape), mode, tape), tape);
    h = act1(bn_ver.apply(conv_ver(h, tape), mode, tape), tape);
    h = act2(bn_hor.apply(conv_hor(h, tape), mode, tape), tape);
    h = bn_out.apply(conv_out(h, tape), mode, tape);
  } else {
    h = act0(bn_in.apply(conv_in(x, tape), mode, tape), tape);
    h = act1(bn_out.apply(conv_out(h, tape), mode, tape), tape);
    h = act2(bn_ver.apply(conv_ver(h, tape), mode, tape), tape);
    h = bn_hor.apply(conv_hor(h, tape), mode, tape);
  }
  h = dropout(h, cfg.dropout_p, mode, seed, tape);
  h = residual_add(h, x, tape);
  return act_final(h, tape);
}

void Downsampler::init(std::int64_t cin, std::int64_t cout, bool prelu_, Rng& rng) {
  if (cin < 1) throw ConfigError("downsampler input channels must be >= 1");
  if (cout <= cin) {
    throw ConfigError("downsampler output channels (" + std::to_string(cout) +
                      ") must exceed input channels (" + std::to_string(cin) + ")");
  }
  c_in = cin;
  c_out = cout;
  conv.weight = he_weight(cout - cin, cin, 3, 3, rng);
  conv.opts.stride = 2;
  conv.opts.pad_h = 1;
  conv.opts.pad_w = 1;
  bn.init(cout);
  act.init(cout, prelu_);
}

Tensor Downsampler::forward(const Tensor& x, Mode mode, Tape* tape) {
  if (x.shape().c != c_in) {
    throw ShapeError("downsampler expects " + std::to_string(c_in) + " channels, got " +
                     x.shape().str());
  }
  Tensor a = conv(x, tape);
  Tensor p = maxpool2x2(x, tape);
  Tensor y = concat_channels(a, p, tape);
  y = bn.apply(y, mode, tape);
  if (folded_affine) y = (*folded_affine)(y, tape);
  return act(y, tape);
}

}  // namespace layers

Network::Network(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  const std::size_t nstages = cfg.stage_channels.size();
  if (nstages == 0) throw ConfigError("encoder needs at least one stage");
  if (cfg.stage_modules.size() != nstages || cfg.stage_dilations.size() != nstages) {
    throw ConfigError("stage_modules and stage_dilations must match stage_channels in length");
  }
  if (cfg.factor != (1 << nstages)) {
    throw ConfigError("upsample factor " + std::to_string(cfg.factor) + " must equal 2^" +
                      std::to_string(nstages) + " for " + std::to_string(nstages) + " stages");
  }
  if (cfg.in_channels < 1 || cfg.classes < 1) {
    throw ConfigError("in_channels and classes must be >= 1");
  }
  for (std::size_t s = 0; s < nstages; ++s) {
    if (cfg.stage_dilations[s].size() != static_cast<std::size_t>(cfg.stage_modules[s])) {
      throw ConfigError("stage " + std::to_string(s) + " dilation schedule does not match its module count");
    }
  }
  Rng rng(mix_seed(seed, 0x6e6574));
  int block_index = 0;
  std::int64_t prev = cfg.in_channels;
  for (std::size_t s = 0; s < nstages; ++s) {
    downs_.emplace_back();
    downs_.back().init(prev, cfg.stage_channels[s], cfg.use_prelu, rng);
    prev = cfg.stage_channels[s];
    stages_.emplace_back();
    for (int k = 0; k < cfg.stage_modules[s]; ++k) {
      LightweightNonBt1DConfig bc;
      bc.channels = static_cast<int>(prev);
      bc.dilation = cfg.stage_dilations[s][static_cast<std::size_t>(k)];
      bc.dropout_p = block_index < cfg.dropout_first_count ? cfg.dropout_first : cfg.dropout_rest;
      bc.use_prelu = cfg.use_prelu;
      bc.use_bias = cfg.use_bias;
      bc.tail_1x1 = cfg.tail_1x1;
      stages_.back().emplace_back();
      stages_.back().back().init(bc, block_index, rng);
      ++block_index;
    }
  }
  auto make_head = [&](std::int64_t out_c, bool zero_init) {
    layers::Conv head;
    head.weight = zero_init ? Tensor(Shape{out_c, prev, 3, 3}, 0.0, true)
                            : layers::he_weight(out_c, prev, 3, 3, rng);
    head.bias = Tensor(Shape{1, out_c, 1, 1}, 0.0, true);
    head.opts.pad_h = 1;
    head.opts.pad_w = 1;
    return head;
  };
  head_logits_ = make_head(cfg.classes, false);
  // Offset heads start at zero: upsampling begins as the identity and the
  // tanh bound stays in its linear region while guidance develops.
  head_sem_ = make_head(2, true);
  head_inst_ = make_head(2, true);
}

NetworkOutput Network::forward(const Tensor& image, Mode mode, Tape* tape,
                               std::uint64_t dropout_seed) {
  if (folded_ && mode == Mode::kTrain) {
    throw UsageError("folded network runs in eval mode only");
  }
  const Shape& s = image.shape();
  if (s.c != cfg_.in_channels) {
    throw ShapeError("network expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                     s.str());
  }
  if (s.h % cfg_.factor != 0 || s.w % cfg_.factor != 0) {
    throw ConfigError("input dims " + s.str() + " must be divisible by the upsample factor " +
                      std::to_string(cfg_.factor));
  }
  Tensor x = image;
  for (std::size_t i = 0; i < downs_.size(); ++i) {
    x = downs_[i].forward(x, mode, tape);
    for (auto& block : stages_[i]) x = block.forward(x, mode, tape, dropout_seed);
  }
  NetworkOutput out;
  out.logits = head_logits_(x, tape);
  out.sem_offsets = head_sem_(x, tape);
  out.inst_offsets = head_inst_(x, tape);
  return out;
}

namespace {

using Visitor = std::function<void(const std::string&, Tensor&)>;

void visit_conv(const std::string& prefix, layers::Conv& c, const Visitor& fn) {
  fn(prefix + ".weight", c.weight);
  if (c.bias) fn(prefix + ".bias", *c.bias);
}

void visit_act(const std::string& prefix, layers::Activation& a, const Visitor& fn) {
  if (a.use_prelu) fn(prefix + ".slopes", a.slopes);
}

void visit_network(Network& net, bool buffers, const Visitor& fn) {
  auto& downs = net.downsamplers();
  auto& stages = net.stage_blocks();
  for (std::size_t i = 0; i < downs.size(); ++i) {
    const std::string p = "down" + std::to_string(i);
    auto& d = downs[i];
    if (buffers) {
      if (!d.bn.folded) {
        fn(p + ".bn.running_mean", d.bn.running_mean);
        fn(p + ".bn.running_var", d.bn.running_var);
      }
    } else {
      visit_conv(p + ".conv", d.conv, fn);
      if (!d.bn.folded) {
        fn(p + ".bn.gamma", d.bn.gamma);
        fn(p + ".bn.beta", d.bn.beta);
      }
      if (d.folded_affine) visit_conv(p + ".affine", *d.folded_affine, fn);
      visit_act(p + ".act", d.act, fn);
    }
    for (std::size_t k = 0; k < stages[i].size(); ++k) {
      const std::string bp = "stage" + std::to_string(i) + ".block" + std::to_string(k);
      auto& b = stages[i][k];
      const std::pair<const char*, layers::BatchNorm*> bns[] = {
          {".bn_in", &b.bn_in}, {".bn_ver", &b.bn_ver}, {".bn_hor", &b.bn_hor}, {".bn_out", &b.bn_out}};
      if (buffers) {
        for (auto& [name, bn] : bns) {
          if (bn->folded) continue;
          fn(bp + name + ".running_mean", bn->running_mean);
          fn(bp + name + ".running_var", bn->running_var);
        }
      } else {
        visit_conv(bp + ".conv_in", b.conv_in, fn);
        visit_conv(bp + ".conv_ver", b.conv_ver, fn);
        visit_conv(bp + ".conv_hor", b.conv_hor, fn);
        visit_conv(bp + ".conv_out", b.conv_out, fn);
        for (auto& [name, bn] : bns) {
          if (bn->folded) continue;
          fn(bp + name + ".gamma", bn->gamma);
          fn(bp + name + ".beta", bn->beta);
        }
        visit_act(bp + ".act0", b.act0, fn);
        visit_act(bp + ".act1", b.act1, fn);
        visit_act(bp + ".act2", b.act2, fn);
        visit_act(bp + ".act_final", b.act_final, fn);
      }
    }
  }
  if (!buffers) {
    visit_conv("head_logits", net.head_logits(), fn);
    visit_conv("head_sem_offsets", net.head_sem_offsets(), fn);
    visit_conv("head_inst_offsets", net.head_inst_offsets(), fn);
  }
}

}  // namespace

std::vector<NamedTensor> Network::parameters() {
  std::vector<NamedTensor> out;
  visit_network(*this, false, [&](const std::string& n, Tensor& t) { out.push_back({n, t}); });
  return out;
}

std::vector<NamedTensor> Network::buffers() {
  std::vector<NamedTensor> out;
  visit_network(*this, true, [&](const std::string& n, Tensor& t) { out.push_back({n, t}); });
  return out;
}

std::int64_t Network::parameter_count() {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

namespace {

layers::Conv clone_conv(const layers::Conv& c) {
  layers::Conv o = c;
  o.weight = c.weight.clone();
  if (c.bias) o.bias = c.bias->clone();
  return o;
}

layers::BatchNorm clone_bn(const layers::BatchNorm& b) {
  layers::BatchNorm o = b;
  o.gamma = b.gamma.clone();
  o.beta = b.beta.clone();
  o.running_mean = b.running_mean.clone();
  o.running_var = b.running_var.clone();
  return o;
}

layers::Activation clone_act(const layers::Activation& a) {
  layers::Activation o = a;
  if (a.use_prelu) o.slopes = a.slopes.clone();
  return o;
}

// Scale conv output row o by the BN statistics of channel c0 + o and fold the
// shift into the conv bias, creating one if the conv had none.
void absorb_bn_rows(layers::Conv& conv, const layers::BatchNorm& bn, std::int64_t c0,
                    std::int64_t rows) {
  const BnOpts opts{};
  const Shape& ws = conv.weight.shape();
  if (!conv.bias) conv.bias = Tensor(Shape{1, ws.b, 1, 1}, 0.0, true);
  const std::int64_t per_row = ws.c * ws.h * ws.w;
  for (std::int64_t o = 0; o < rows; ++o) {
    const double scale =
        bn.gamma.data()[c0 + o] / std::sqrt(bn.running_var.data()[c0 + o] + opts.eps);
    double* w = conv.weight.data() + o * per_row;
    for (std::int64_t j = 0; j < per_row; ++j) w[j] *= scale;
    double& b = conv.bias->data()[o];
    b = (b - bn.running_mean.data()[c0 + o]) * scale + bn.beta.data()[c0 + o];
  }
}

void fold_block(layers::LightweightBlock& b) {
  const std::int64_t w = b.cfg.channels;
  absorb_bn_rows(b.conv_in, b.bn_in, 0, w);
  absorb_bn_rows(b.conv_ver, b.bn_ver, 0, w);
  absorb_bn_rows(b.conv_hor, b.bn_hor, 0, w);
  absorb_bn_rows(b.conv_out, b.bn_out, 0, w);
  b.bn_in.folded = b.bn_ver.folded = b.bn_hor.folded = b.bn_out.folded = true;
}

// The conv half of the BN folds into the strided conv; the pool half has no
// weights behind it, so it survives as a diagonal 1x1 conv that is the
// identity on the conv channels.
void fold_downsampler(layers::Downsampler& d) {
  const BnOpts opts{};
  const std::int64_t cc = d.c_out - d.c_in;
  absorb_bn_rows(d.conv, d.bn, 0, cc);
  layers::Conv aff;
  aff.weight = Tensor(Shape{d.c_out, d.c_out, 1, 1});
  aff.bias = Tensor(Shape{1, d.c_out, 1, 1});
  for (std::int64_t c = 0; c < d.c_out; ++c) {
    if (c < cc) {
      aff.weight.at(c, c, 0, 0) = 1.0;
    } else {
      const double scale = d.bn.gamma.data()[c] / std::sqrt(d.bn.running_var.data()[c] + opts.eps);
      aff.weight.at(c, c, 0, 0) = scale;
      aff.bias->data()[c] = d.bn.beta.data()[c] - d.bn.running_mean.data()[c] * scale;
    }
  }
  d.folded_affine = aff;
  d.bn.folded = true;
}

}  // namespace

Network fold_batchnorm(const Network& net) {
  Network out = net;
  for (auto& d : out.downs_) {
    d.conv = clone_conv(d.conv);
    d.bn = clone_bn(d.bn);
    d.act = clone_act(d.act);
    if (d.folded_affine) d.folded_affine = clone_conv(*d.folded_affine);
  }
  for (auto& stage : out.stages_) {
    for (auto& b : stage) {
      b.conv_in = clone_conv(b.conv_in);
      b.conv_ver = clone_conv(b.conv_ver);
      b.conv_hor = clone_conv(b.conv_hor);
      b.conv_out = clone_conv(b.conv_out);
      b.bn_in = clone_bn(b.bn_in);
      b.bn_ver = clone_bn(b.bn_ver);
      b.bn_hor = clone_bn(b.bn_hor);
      b.bn_out = clone_bn(b.bn_out);
      b.act0 = clone_act(b.act0);
      b.act1 = clone_act(b.act1);
      b.act2 = clone_act(b.act2);
      b.act_final = clone_act(b.act_final);
    }
  }
  out.head_logits_ = clone_conv(out.head_logits_);
  out.head_sem_ = clone_conv(out.head_sem_);
  out.head_inst_ = clone_conv(out.head_inst_);
  if (out.folded_) return out;
  for (auto& d : out.downs_) fold_downsampler(d);
  for (auto& stage : out.stages_) {
    for (auto& b : stage) fold_block(b);
  }
  out.folded_ = true;
  return out;
}

}  // namespace wseg
