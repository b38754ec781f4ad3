#pragma once

#include <string>
#include <vector>

#include "msiseg/graph.hpp"

namespace msiseg {

// ---------------------------------------------------------------------------
// Architecture specs
// ---------------------------------------------------------------------------

// Pre-activation residual encoder. Macro-layer i is a run of residual blocks
// whose first block downsamples by 2, so features after macro-layer i sit at
// input/2^i with channels[i] channels.
struct EncoderSpec {
  int bands = 6;
  std::vector<int> channels = {16, 32, 64, 128};
  std::vector<int> blocks = {};  // residual blocks per macro-layer; empty -> 1 each

  int macro_layers() const { return static_cast<int>(channels.size()); }

  void validate() const {
    if (bands < 1) throw ArgumentError("encoder needs >= 1 input band");
    if (channels.empty()) throw ArgumentError("encoder needs >= 1 macro-layer");
    for (int c : channels)
      if (c < 1) throw ArgumentError("encoder channel widths must be positive");
    if (!blocks.empty() && blocks.size() != channels.size())
      throw ArgumentError("blocks list must match macro-layer count");
    for (int b : blocks)
      if (b < 1) throw ArgumentError("blocks per macro-layer must be >= 1");
  }

  int blocks_at(int layer) const { return blocks.empty() ? 1 : blocks[static_cast<size_t>(layer)]; }
};

// Mask-refinement head: one refinement module per macro-layer, module i using
// width base/2^(i-1), fed top-down from a 1x1 bridge of width bridge_width.
struct SharpMaskSpec {
  int base_width = 128;
  int bridge_width = 512;
};

// Per-module refinement widths: module i (1-based) gets base/2^(i-1).
inline std::vector<int> sharpmask_widths(int base, int modules = 4) {
  if (modules < 1) throw ArgumentError("need >= 1 refinement module");
  std::vector<int> widths;
  int w = base;
  for (int i = 0; i < modules; ++i) {
    if (w < 1 || base % (1 << i) != 0)
      throw ArgumentError("base width must be divisible by 2^(modules-1)");
    widths.push_back(w);
    w /= 2;
  }
  return widths;
}

// Cascaded-refinement head: per block two residual conv units on each input,
// two-scale fusion, chained same-padded max pooling over four windows, and an
// output residual unit.
struct RefineNetSpec {
  int rcu_per_input = 2;
  std::vector<int> crp_windows = {2, 4, 8, 16};
};

// Convolutional autoencoder: conv blocks with 2x pooling, a 1x1 bottleneck,
// mirrored refinement blocks with equal-resolution skips, a full-resolution
// hidden feature map, and a 1x1 reconstruction conv back to the input bands.
struct CaeSpec {
  int bands = 6;
  std::vector<int> widths = {32, 64, 128};
  int bottleneck = 256;
  int hidden = 32;

  void validate() const {
    if (bands < 1) throw ArgumentError("cae needs >= 1 band");
    if (widths.empty()) throw ArgumentError("cae needs >= 1 conv block");
    for (int w : widths)
      if (w < 1) throw ArgumentError("cae widths must be positive");
    if (bottleneck < 1 || hidden < 1) throw ArgumentError("cae widths must be positive");
  }
};

// ---------------------------------------------------------------------------
// Built model wrapper
// ---------------------------------------------------------------------------

struct BuiltModel {
  Graph<float> graph;
  int bands = 0;
  int classes = 0;     // 0 for reconstruction models
  int downsample = 1;  // input dims must be divisible by this
  int input_size = 0;  // classifiers pin an exact square input; 0 = any divisible size
  std::vector<int> taps;  // node ids of encoder macro-layer outputs
  int hidden_node = -1;   // autoencoder: exposed hidden feature map

  const Tensor<float>& forward(const Tensor<float>& x, bool train) {
    if (x.ndim() != 4 || x.c() != bands)
      throw ShapeError("model expects " + std::to_string(bands) + "-band 4-d input, got " +
                       shape_str(x.shape));
    if (x.h() % downsample != 0 || x.w() % downsample != 0)
      throw ShapeError("input dims " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                       " not divisible by " + std::to_string(downsample));
    if (input_size > 0 && (x.h() != input_size || x.w() != input_size))
      throw ShapeError("model expects " + std::to_string(input_size) + "x" +
                       std::to_string(input_size) + " input, got " + shape_str(x.shape));
    return graph.forward(x, train);
  }

  size_t trainable_params() const { return graph.params().count_trainable(); }
};

// ---------------------------------------------------------------------------
// Builder helpers
// ---------------------------------------------------------------------------

namespace detail {

class NetBuilder {
 public:
  NetBuilder(Graph<float>& g, Rng& rng) : g_(g), rng_(rng) {}

  // Convs are bias-free by default: every interior conv in these graphs is
  // followed (possibly through adds/pools) by a batch norm that would cancel
  // a constant shift anyway. Only final output convs carry a bias.
  int conv(int in, const std::string& name, int in_ch, int out_ch, int k, int stride, int pad,
           bool with_bias = false) {
    Tensor<float>& w = g_.params().create(name + ".w", {out_ch, in_ch, k, k}, true);
    const double scale = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    for (auto& v : w.values) v = static_cast<float>(rng_.normal() * scale);
    NodeSpec s;
    s.kind = OpKind::Conv2d;
    s.in0 = in;
    s.window = k;
    s.stride = stride;
    s.pad = pad;
    s.w = name + ".w";
    if (with_bias) {
      g_.params().create(name + ".b", {out_ch}, true);
      s.b = name + ".b";
    }
    return g_.add(s);
  }

  int bn(int in, const std::string& name, int ch) {
    Tensor<float>& gamma = g_.params().create(name + ".gamma", {ch}, true);
    for (auto& v : gamma.values) v = 1.0f;
    g_.params().create(name + ".beta", {ch}, true);
    g_.params().create(name + ".rmean", {ch}, false);
    Tensor<float>& rvar = g_.params().create(name + ".rvar", {ch}, false);
    for (auto& v : rvar.values) v = 1.0f;
    NodeSpec s;
    s.kind = OpKind::BatchNorm;
    s.in0 = in;
    s.gamma = name + ".gamma";
    s.beta = name + ".beta";
    s.rmean = name + ".rmean";
    s.rvar = name + ".rvar";
    return g_.add(s);
  }

  int relu(int in) {
    NodeSpec s;
    s.kind = OpKind::Relu;
    s.in0 = in;
    return g_.add(s);
  }

  // batch-norm -> relu -> conv, the pre-activation ordering used throughout
  int preact_conv(int in, const std::string& name, int in_ch, int out_ch, int k, int stride,
                  int pad, bool with_bias = false) {
    const int a = relu(bn(in, name + ".bn", in_ch));
    return conv(a, name, in_ch, out_ch, k, stride, pad, with_bias);
  }

  int maxpool(int in, int window, int stride, int pad) {
    NodeSpec s;
    s.kind = OpKind::MaxPool;
    s.in0 = in;
    s.window = window;
    s.stride = stride;
    s.pad = pad;
    return g_.add(s);
  }

  int upsample(int in) {
    NodeSpec s;
    s.kind = OpKind::Upsample2;
    s.in0 = in;
    return g_.add(s);
  }

  int add(int a, int b) {
    NodeSpec s;
    s.kind = OpKind::Add;
    s.in0 = a;
    s.in1 = b;
    return g_.add(s);
  }

  // pre-activation residual block; identity shortcut when geometry allows,
  // otherwise a 1x1 projection applied to the pre-activated features
  int residual_block(int in, const std::string& name, int in_ch, int out_ch, int stride) {
    const int act = relu(bn(in, name + ".bn1", in_ch));
    int shortcut;
    if (stride == 1 && in_ch == out_ch) {
      shortcut = in;
    } else {
      shortcut = conv(act, name + ".proj", in_ch, out_ch, 1, stride, 0);
    }
    int h = conv(act, name + ".conv1", in_ch, out_ch, 3, stride, 1);
    h = preact_conv(h, name + ".conv2", out_ch, out_ch, 3, 1, 1);
    return add(shortcut, h);
  }

  // two stacked pre-activation convs plus identity: zero-init convs -> identity
  int rcu(int in, const std::string& name, int ch) {
    int h = preact_conv(in, name + ".conv1", ch, ch, 3, 1, 1);
    h = preact_conv(h, name + ".conv2", ch, ch, 3, 1, 1);
    return add(in, h);
  }

  // chained residual pooling: relu, then a chain of same-padded max pools,
  // each followed by a conv whose output is accumulated onto the running sum
  int crp(int in, const std::string& name, int ch, const std::vector<int>& windows) {
    int acc = relu(in);
    int cur = acc;
    for (size_t k = 0; k < windows.size(); ++k) {
      cur = maxpool(cur, windows[k], 1, -1);
      const int c = conv(cur, name + ".conv" + std::to_string(k + 1), ch, ch, 3, 1, 1);
      acc = add(acc, c);
    }
    return acc;
  }

 private:
  Graph<float>& g_;
  Rng& rng_;
};

// Builds the shared encoder trunk; fills model.taps with macro-layer outputs.
inline int build_encoder_trunk(const EncoderSpec& spec, BuiltModel& model, NetBuilder& nb) {
  spec.validate();
  const int input = model.graph.add_input();
  int cur = nb.conv(input, "encoder.stem", spec.bands, spec.channels[0], 3, 1, 1);
  int ch = spec.channels[0];
  for (int layer = 0; layer < spec.macro_layers(); ++layer) {
    const int out_ch = spec.channels[static_cast<size_t>(layer)];
    for (int blk = 0; blk < spec.blocks_at(layer); ++blk) {
      const std::string name =
          "encoder.m" + std::to_string(layer + 1) + ".b" + std::to_string(blk + 1);
      const int stride = blk == 0 ? 2 : 1;  // halve exactly once per macro-layer
      cur = nb.residual_block(cur, name, ch, out_ch, stride);
      ch = out_ch;
    }
    model.taps.push_back(cur);
  }
  model.bands = spec.bands;
  model.downsample = 1 << spec.macro_layers();
  return cur;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

inline BuiltModel build_encoder(const EncoderSpec& spec, uint64_t seed) {
  BuiltModel model;
  Rng rng(hash_combine(seed, 0x656e63));
  detail::NetBuilder nb(model.graph, rng);
  detail::build_encoder_trunk(spec, model, nb);
  return model;
}

// Encoder + image-classification top: batch norm and relu on the deepest
// features, a global mean pool, then a dense layer producing class scores.
// input_size fixes the pooling window, so the classifier accepts inputs of
// exactly that (square) size.
inline BuiltModel build_classifier(const EncoderSpec& spec, int classes, int input_size,
                                   uint64_t seed) {
  if (classes < 2) throw ArgumentError("need >= 2 classes");
  BuiltModel model;
  model.classes = classes;
  Rng rng(hash_combine(seed, 0x636c7366ull));
  detail::NetBuilder nb(model.graph, rng);
  int cur = detail::build_encoder_trunk(spec, model, nb);
  if (input_size < model.downsample || input_size % model.downsample != 0)
    throw ArgumentError("classifier input size must be a positive multiple of " +
                        std::to_string(model.downsample));
  model.input_size = input_size;
  const int top_ch = spec.channels.back();
  cur = nb.relu(nb.bn(cur, "head.top.bn", top_ch));

  NodeSpec pool;
  pool.kind = OpKind::MeanPool;
  pool.in0 = cur;
  pool.window = input_size / model.downsample;
  pool.stride = pool.window;
  pool.pad = 0;
  cur = model.graph.add(pool);

  Tensor<float>& w = model.graph.params().create("head.fc.w", {classes, top_ch}, true);
  const double scale = std::sqrt(2.0 / top_ch);
  for (auto& v : w.values) v = static_cast<float>(rng.normal() * scale);
  model.graph.params().create("head.fc.b", {classes}, true);
  NodeSpec fc;
  fc.kind = OpKind::Dense;
  fc.in0 = cur;
  fc.w = "head.fc.w";
  fc.b = "head.fc.b";
  model.graph.add(fc);
  return model;
}

// Encoder + top-down mask refinement. The deepest features pass through a 1x1
// bridge of width bridge_width into refinement module L (the deepest); module
// i merges the encoder features at its scale with the mask features from
// module i+1 (conv on each branch, elementwise sum, 2x nearest upsample), and
// a final pre-activation conv produces per-class logits at input resolution.
inline BuiltModel build_sharpmask(const EncoderSpec& enc, const SharpMaskSpec& head, int classes,
                                  uint64_t seed) {
  if (classes < 2) throw ArgumentError("need >= 2 classes");
  if (enc.macro_layers() < 2) throw ArgumentError("mask refinement needs >= 2 macro-layers");
  if (head.bridge_width < 1) throw ArgumentError("bridge width must be positive");
  BuiltModel model;
  model.classes = classes;
  Rng rng(hash_combine(seed, 0x736d61736b));
  detail::NetBuilder nb(model.graph, rng);
  detail::build_encoder_trunk(enc, model, nb);

  const int L = enc.macro_layers();
  const std::vector<int> widths = sharpmask_widths(head.base_width, L);

  // bridge: 1x1 conv on the deepest encoder features
  const int deep_ch = enc.channels.back();
  int mask = nb.preact_conv(model.taps.back(), "head.bridge", deep_ch, head.bridge_width, 1, 1, 0);
  int mask_ch = head.bridge_width;

  for (int i = L; i >= 1; --i) {
    const std::string name = "head.ref" + std::to_string(i);
    const int k = widths[static_cast<size_t>(i - 1)];
    const int f_ch = enc.channels[static_cast<size_t>(i - 1)];
    const int fs = nb.preact_conv(model.taps[static_cast<size_t>(i - 1)], name + ".skip", f_ch, k, 3, 1, 1);
    const int ms = nb.preact_conv(mask, name + ".mask", mask_ch, k, 3, 1, 1);
    mask = nb.upsample(nb.add(fs, ms));
    mask_ch = k;
  }
  nb.preact_conv(mask, "head.logits", mask_ch, classes, 3, 1, 1, /*with_bias=*/true);
  return model;
}

// Encoder + cascaded refinement. The deepest block runs RCUs, a single fusion
// conv, chained pooling and an output RCU; each finer block fuses the coarser
// block's output (conv + 2x upsample) with its encoder features (conv), then
// chained pooling and an output RCU. A final upsample + pre-activation conv
// produces logits at input resolution.
inline BuiltModel build_refinenet(const EncoderSpec& enc, const RefineNetSpec& head, int classes,
                                  uint64_t seed) {
  if (classes < 2) throw ArgumentError("need >= 2 classes");
  if (enc.macro_layers() < 2) throw ArgumentError("cascaded refinement needs >= 2 macro-layers");
  if (head.crp_windows.empty()) throw ArgumentError("need >= 1 chained pooling window");
  if (head.rcu_per_input < 1) throw ArgumentError("need >= 1 residual conv unit per input");
  BuiltModel model;
  model.classes = classes;
  Rng rng(hash_combine(seed, 0x7266696e65));
  detail::NetBuilder nb(model.graph, rng);
  detail::build_encoder_trunk(enc, model, nb);

  const int L = enc.macro_layers();
  auto run_rcus = [&](int node, const std::string& stem, int ch) {
    for (int r = 0; r < head.rcu_per_input; ++r)
      node = nb.rcu(node, stem + ".rcu" + std::to_string(r + 1), ch);
    return node;
  };

  // deepest block: single-input, so fusion degenerates to one conv
  const int deep_ch = enc.channels.back();
  std::string name = "head.blk" + std::to_string(L);
  int p = run_rcus(model.taps.back(), name + ".in", deep_ch);
  p = nb.conv(p, name + ".fuse", deep_ch, deep_ch, 3, 1, 1);
  p = nb.crp(p, name + ".crp", deep_ch, head.crp_windows);
  p = nb.rcu(p, name + ".out", deep_ch);
  int p_ch = deep_ch;

  for (int i = L - 1; i >= 1; --i) {
    name = "head.blk" + std::to_string(i);
    const int ch = enc.channels[static_cast<size_t>(i - 1)];
    // coarse path: RCUs at the coarse width, fusion conv to this width, upsample
    int coarse = run_rcus(p, name + ".coarse", p_ch);
    coarse = nb.upsample(nb.conv(coarse, name + ".fuse_coarse", p_ch, ch, 3, 1, 1));
    // fine path: RCUs on the encoder features, fusion conv at equal width
    int fine = run_rcus(model.taps[static_cast<size_t>(i - 1)], name + ".fine", ch);
    fine = nb.conv(fine, name + ".fuse_fine", ch, ch, 3, 1, 1);
    p = nb.add(coarse, fine);
    p = nb.crp(p, name + ".crp", ch, head.crp_windows);
    p = nb.rcu(p, name + ".out", ch);
    p_ch = ch;
  }

  nb.preact_conv(nb.upsample(p), "head.logits", p_ch, classes, 3, 1, 1, /*with_bias=*/true);
  return model;
}

// Convolutional autoencoder for reconstruction pretraining. Returns a model
// whose graph output is the reconstruction; hidden_node exposes the
// full-resolution hidden feature map consumed by downstream feature stacks.
inline BuiltModel build_cae(const CaeSpec& spec, uint64_t seed) {
  spec.validate();
  BuiltModel model;
  model.bands = spec.bands;
  Rng rng(hash_combine(seed, 0x636165));
  detail::NetBuilder nb(model.graph, rng);
  const int input = model.graph.add_input();

  const int depth = static_cast<int>(spec.widths.size());
  model.downsample = 1 << depth;

  // encoder: conv blocks with skips captured before each 2x pool
  std::vector<int> skips;
  std::vector<int> skip_ch;
  int cur = nb.conv(input, "enc.blk1", spec.bands, spec.widths[0], 3, 1, 1);
  skips.push_back(cur);
  skip_ch.push_back(spec.widths[0]);
  cur = nb.maxpool(cur, 2, 2, 0);
  int ch = spec.widths[0];
  for (int i = 1; i < depth; ++i) {
    cur = nb.preact_conv(cur, "enc.blk" + std::to_string(i + 1), ch, spec.widths[static_cast<size_t>(i)],
                         3, 1, 1);
    ch = spec.widths[static_cast<size_t>(i)];
    skips.push_back(cur);
    skip_ch.push_back(ch);
    cur = nb.maxpool(cur, 2, 2, 0);
  }
  cur = nb.preact_conv(cur, "enc.bottleneck", ch, spec.bottleneck, 1, 1, 0);
  ch = spec.bottleneck;

  // decoder: refinement blocks mirroring the conv blocks, skip-added at equal
  // resolution
  for (int i = depth - 1; i >= 0; --i) {
    const int w = spec.widths[static_cast<size_t>(i)];
    cur = nb.upsample(cur);
    cur = nb.preact_conv(cur, "dec.blk" + std::to_string(i + 1), ch, w, 3, 1, 1);
    cur = nb.add(cur, skips[static_cast<size_t>(i)]);
    ch = w;
  }
  cur = nb.preact_conv(cur, "dec.hidden", ch, spec.hidden, 3, 1, 1);
  model.hidden_node = cur;
  nb.preact_conv(cur, "dec.recon", spec.hidden, spec.bands, 1, 1, 0, /*with_bias=*/true);
  return model;
}

}  // namespace msiseg
