#include "ehdk/flops.hpp"

namespace ehdk {

Extent conv_output_extent(const ConvParams& p, Extent in) {
  return {(in.h + 2 * p.padding - p.kh()) / p.stride + 1,
          (in.w + 2 * p.padding - p.kw()) / p.stride + 1};
}

Cost conv_cost(const ConvParams& p, Extent in) {
  Extent out = conv_output_extent(p, in);
  Cost c;
  c.params = p.weight.numel() + (p.bias.defined() ? p.bias.numel() : 0);
  c.macs = std::int64_t(out.h) * out.w * p.out_channels() * p.weight.c() *
           p.kh() * p.kw();
  return c;
}

Cost bn_cost(const BatchNormParams& p, Extent at) {
  Cost c;
  c.params = p.gamma.numel() + p.beta.numel();
  c.macs = std::int64_t(p.channels()) * at.h * at.w;
  return c;
}

Cost repconv_cost(const RepConvParams& p, Extent in) {
  Cost c;
  if (p.deployed) {
    return conv_cost(p.fused, in);
  }
  Extent out = conv_output_extent(p.conv3, in);
  c += conv_cost(p.conv3, in);
  c += bn_cost(p.bn3, out);
  c += conv_cost(p.conv1, in);
  c += bn_cost(p.bn1, out);
  if (p.has_identity) c += bn_cost(p.bn_id, out);
  return c;
}

Cost gsconv_cost(const GSConvParams& p, Extent in) {
  Cost c;
  if (p.has_pre) c += conv_cost(p.pre, in);
  c += conv_cost(p.dw, in);
  c += conv_cost(p.std_conv, in);
  return c;
}

Cost lateral_cost(const LateralConv& l, Extent in) {
  return l.slim ? gsconv_cost(l.gs, in) : conv_cost(l.std_conv, in);
}

Cost cspstage_cost(const CSPStageParams& p, Extent in) {
  Cost c;
  c += conv_cost(p.short_conv, in);
  c += conv_cost(p.reduce, in);
  c += repconv_cost(p.rep, in);
  c += conv_cost(p.refine, in);
  c += conv_cost(p.mix, in);
  return c;
}

Cost wtconv_cost(const WTConvParams& p, Extent in) {
  Extent half{(in.h + 1) / 2, (in.w + 1) / 2};
  Cost c;
  c += conv_cost(p.ll_conv, half);
  c += conv_cost(p.hl_conv, half);
  c += conv_cost(p.lh_conv, half);
  c += conv_cost(p.hh_conv, half);
  return c;
}

Cost attention_primitive_cost(int channels, Extent at) {
  Cost c;
  std::int64_t tokens = std::int64_t(at.h) * at.w;
  c.macs = 2 * tokens * tokens * channels;  // QK^T and PV
  return c;
}

Cost cga_cost(const AttentionGroupParams& p, Extent at) {
  Cost c;
  for (const auto& g : p.groups) {
    c += conv_cost(g.wq, at);
    c += conv_cost(g.token_interaction, at);
    c += conv_cost(g.wk, at);
    c += conv_cost(g.wv, at);
    c += attention_primitive_cost(p.group_dim, at);
  }
  c += conv_cost(p.mix, at);
  return c;
}

Cost repgfpn_cost(const RepGFPNNeck& n, Extent p3) {
  Extent p2{p3.h / 2, p3.w / 2};
  Extent p1{p3.h / 4, p3.w / 4};
  Cost c;
  c += lateral_cost(n.lat_td_p2, p2);
  c += lateral_cost(n.lat_td_p3, p3);
  c += lateral_cost(n.lat_bu_m2, p2);
  c += lateral_cost(n.lat_bu_p1, p1);
  c += conv_cost(n.down_n3, p3);
  c += conv_cost(n.down_n2, p2);
  c += cspstage_cost(n.fuse_m2, p2);
  c += cspstage_cost(n.fuse_m3, p3);
  c += cspstage_cost(n.fuse_n2, p2);
  c += cspstage_cost(n.fuse_n1, p1);
  return c;
}

Cost plain_pan_cost(const PlainPANNeck& n, Extent p3) {
  Extent p2{p3.h / 2, p3.w / 2};
  Extent p1{p3.h / 4, p3.w / 4};
  Cost c;
  c += conv_cost(n.lat_td_p2, p2);
  c += conv_cost(n.lat_td_p3, p3);
  c += conv_cost(n.lat_bu_m2, p2);
  c += conv_cost(n.lat_bu_p1, p1);
  c += conv_cost(n.down_n3, p3);
  c += conv_cost(n.down_n2, p2);
  auto fuse = [](const PlainPANNeck::Fuse& f, Extent e) {
    Cost fc;
    fc += conv_cost(f.reduce, e);
    fc += conv_cost(f.conv, e);
    return fc;
  };
  c += fuse(n.fuse_m2, p2);
  c += fuse(n.fuse_m3, p3);
  c += fuse(n.fuse_n2, p2);
  c += fuse(n.fuse_n1, p1);
  return c;
}

}  // namespace ehdk
