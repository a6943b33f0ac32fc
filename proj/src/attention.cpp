#include "ehdk/attention.hpp"

namespace ehdk {

AttentionGroupParams AttentionGroupParams::make(int channels, int h, Rng& rng) {
  if (h < 1 || channels % h != 0) {
    throw ConfigError("cascaded attention: h=" + std::to_string(h) +
                      " must divide channels=" + std::to_string(channels));
  }
  int dim = channels / h;
  if (dim < 1) throw ConfigError("cascaded attention: key dimension is 0");
  AttentionGroupParams p;
  p.group_dim = dim;
  p.groups.resize(h);
  for (Group& g : p.groups) {
    g.wq = ConvParams::make(dim, dim, 1, 1, 0, 1, false);
    g.wk = ConvParams::make(dim, dim, 1, 1, 0, 1, false);
    g.wv = ConvParams::make(dim, dim, 1, 1, 0, 1, false);
    g.token_interaction = ConvParams::make(dim, dim, 3, 1, 1, dim, false);
    init_conv(g.wq, rng);
    init_conv(g.wk, rng);
    init_conv(g.wv, rng);
    init_conv(g.token_interaction, rng);
  }
  p.mix = ConvParams::make(channels, channels, 1, 1, 0, 1, true);
  init_conv(p.mix, rng);
  return p;
}

Tensor group_self_attention(const Tensor& x_g, AttentionGroupParams::Group& g,
                            Tape* tape, Tensor* weights_out) {
  Tensor q = conv2d(x_g, g.wq, tape);
  q = conv2d(q, g.token_interaction, tape);
  Tensor k = conv2d(x_g, g.wk, tape);
  Tensor v = conv2d(x_g, g.wv, tape);
  return attention(q, k, v, tape, weights_out);
}

Tensor cascaded_group_attention(const Tensor& x, AttentionGroupParams& p,
                                Tape* tape, std::vector<Tensor>* premix_out) {
  if (x.c() != p.channels()) {
    throw ConfigError("cascaded attention: input " + x.shape().str() +
                      " does not split into " + std::to_string(p.head_count()) +
                      " groups of " + std::to_string(p.group_dim));
  }
  int h = p.head_count(), dim = p.group_dim;
  std::vector<Tensor> outputs;
  outputs.reserve(h);
  Tensor prev;
  for (int g = 0; g < h; ++g) {
    Tensor slice = slice_channels(x, g * dim, (g + 1) * dim, tape);
    Tensor input_g = g == 0 ? slice : add(slice, prev, tape);
    prev = group_self_attention(input_g, p.groups[g], tape);
    outputs.push_back(prev);
  }
  if (premix_out) *premix_out = outputs;
  Tensor cat = concat_channels(outputs, tape);
  return conv2d(cat, p.mix, tape);
}

C2PSACGABlock C2PSACGABlock::make(int channels, int h, Rng& rng) {
  C2PSACGABlock b;
  b.expand = ConvParams::make(channels, 2 * channels, 1, 1, 0, 1, true);
  b.attn = AttentionGroupParams::make(2 * channels, h, rng);
  b.compress = ConvParams::make(2 * channels, channels, 1, 1, 0, 1, true);
  init_conv(b.expand, rng);
  init_conv(b.compress, rng);
  return b;
}

Tensor C2PSACGABlock::forward(const Tensor& x, Tape* tape) {
  Tensor t = conv2d(x, expand, tape);
  t = cascaded_group_attention(t, attn, tape);
  t = conv2d(t, compress, tape);
  return add(t, x, tape);
}

}  // namespace ehdk
