#include "ehdk/neck.hpp"

#include <cmath>

namespace ehdk {

// ---------------------------------------------------------------------------
// RepConv
// ---------------------------------------------------------------------------

RepConvParams RepConvParams::make(int in_ch, int out_ch, int stride, Rng& rng) {
  if (stride != 1 && stride != 2) {
    throw ConfigError("repconv stride must be 1 or 2");
  }
  RepConvParams p;
  p.conv3 = ConvParams::make(in_ch, out_ch, 3, stride, 1, 1, false);
  p.bn3 = BatchNormParams::make(out_ch);
  p.conv1 = ConvParams::make(in_ch, out_ch, 1, stride, 0, 1, false);
  p.bn1 = BatchNormParams::make(out_ch);
  p.has_identity = in_ch == out_ch && stride == 1;
  if (p.has_identity) p.bn_id = BatchNormParams::make(out_ch);
  p.stride = stride;
  init_conv(p.conv3, rng);
  init_conv(p.conv1, rng);
  return p;
}

Tensor repconv_forward(const Tensor& x, RepConvParams& p, BnMode mode,
                       Tape* tape) {
  if (p.deployed) {
    if (!p.fused.weight.defined()) {
      throw StateError("repconv: deployed without fused parameters");
    }
    return silu(conv2d(x, p.fused, tape), tape);
  }
  Tensor y3 = batchnorm2d(conv2d(x, p.conv3, tape), p.bn3, mode, tape);
  Tensor y1 = batchnorm2d(conv2d(x, p.conv1, tape), p.bn1, mode, tape);
  Tensor s = add(y3, y1, tape);
  if (p.has_identity) {
    Tensor yid = batchnorm2d(x, p.bn_id, mode, tape);
    s = add(s, yid, tape);
  }
  return silu(s, tape);
}

namespace {

// Scale conv output channel oc by g and add the BN shift: y = g*conv(x) + b.
void fold_bn(const BatchNormParams& bn, int oc, double& scale, double& shift) {
  double inv_std = 1.0 / std::sqrt(bn.running_var.data()[oc] + bn.epsilon);
  scale = bn.gamma.data()[oc] * inv_std;
  shift = bn.beta.data()[oc] - bn.gamma.data()[oc] * bn.running_mean.data()[oc] * inv_std;
}

}  // namespace

RepConvParams repconv_fuse(const RepConvParams& p) {
  if (p.deployed) throw StateError("repconv: already deployed");
  int out_ch = p.out_channels();
  int in_ch = p.in_channels();

  RepConvParams d = p;
  d.fused = ConvParams::make(in_ch, out_ch, 3, p.stride, 1, 1, true);
  for (int oc = 0; oc < out_ch; ++oc) {
    double s3, b3, s1, b1;
    fold_bn(p.bn3, oc, s3, b3);
    fold_bn(p.bn1, oc, s1, b1);
    double bias = b3 + b1;
    for (int ic = 0; ic < in_ch; ++ic) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          double w = s3 * p.conv3.weight.at(oc, ic, ky, kx);
          if (ky == 1 && kx == 1) {
            w += s1 * p.conv1.weight.at(oc, ic, 0, 0);
          }
          d.fused.weight.at(oc, ic, ky, kx) = w;
        }
      }
    }
    if (p.has_identity) {
      double sid, bid;
      fold_bn(p.bn_id, oc, sid, bid);
      d.fused.weight.at(oc, oc, 1, 1) += sid;
      bias += bid;
    }
    d.fused.bias.at(0, oc, 0, 0) = bias;
  }
  d.deployed = true;
  return d;
}

// ---------------------------------------------------------------------------
// GSConv
// ---------------------------------------------------------------------------

GSConvParams GSConvParams::make(int in_ch, int out_ch, Rng& rng) {
  if (out_ch % 2 != 0) {
    throw ConfigError("gsconv: output channels must be even, got " +
                      std::to_string(out_ch));
  }
  GSConvParams p;
  p.has_pre = in_ch != out_ch;
  if (p.has_pre) {
    p.pre = ConvParams::make(in_ch, out_ch, 1, 1, 0, 1, true);
    init_conv(p.pre, rng);
  } else if (in_ch % 2 != 0) {
    throw ConfigError("gsconv: odd channels with no pre-projection");
  }
  int half = out_ch / 2;
  p.dw = ConvParams::make(half, half, 3, 1, 1, half, false);
  p.std_conv = ConvParams::make(half, half, 3, 1, 1, 1, false);
  init_conv(p.dw, rng);
  init_conv(p.std_conv, rng);
  return p;
}

Tensor gsconv(const Tensor& x, GSConvParams& p, Tape* tape) {
  if (x.c() != p.in_channels()) {
    throw ShapeError("gsconv: input " + x.shape().str() + " vs configured " +
                     std::to_string(p.in_channels()) + " channels");
  }
  Tensor t = p.has_pre ? conv2d(x, p.pre, tape) : x;
  int half = t.c() / 2;
  Tensor xs = slice_channels(t, 0, half, tape);
  Tensor xr = slice_channels(t, half, t.c(), tape);
  Tensor y = concat_channels({conv2d(xs, p.dw, tape), conv2d(xr, p.std_conv, tape)},
                             tape);
  if (y.shape() == x.shape()) y = add(y, x, tape);
  return y;
}

// ---------------------------------------------------------------------------
// CSPStage
// ---------------------------------------------------------------------------

CSPStageParams CSPStageParams::make(int in_ch, int out_ch, Rng& rng) {
  if (out_ch % 2 != 0) {
    throw ConfigError("cspstage: output channels must be even");
  }
  int mid = out_ch / 2;
  CSPStageParams p;
  p.short_conv = ConvParams::make(in_ch, mid, 1, 1, 0, 1, true);
  p.reduce = ConvParams::make(in_ch, mid, 1, 1, 0, 1, true);
  p.rep = RepConvParams::make(mid, mid, 1, rng);
  p.refine = ConvParams::make(mid, mid, 3, 1, 1, 1, true);
  p.mix = ConvParams::make(2 * mid, out_ch, 1, 1, 0, 1, true);
  init_conv(p.short_conv, rng);
  init_conv(p.reduce, rng);
  init_conv(p.refine, rng);
  init_conv(p.mix, rng);
  return p;
}

Tensor cspstage(const Tensor& x, CSPStageParams& p, BnMode mode, Tape* tape) {
  Tensor s = silu(conv2d(x, p.short_conv, tape), tape);
  Tensor t = silu(conv2d(x, p.reduce, tape), tape);
  t = repconv_forward(t, p.rep, mode, tape);
  t = silu(conv2d(t, p.refine, tape), tape);
  return conv2d(concat_channels({s, t}, tape), p.mix, tape);
}

// ---------------------------------------------------------------------------
// Neck graphs
// ---------------------------------------------------------------------------

LateralConv LateralConv::make(int in_ch, int out_ch, bool slim, Rng& rng) {
  LateralConv l;
  l.slim = slim;
  if (slim) {
    l.gs = GSConvParams::make(in_ch, out_ch, rng);
  } else {
    l.std_conv = ConvParams::make(in_ch, out_ch, 3, 1, 1, 1, true);
    init_conv(l.std_conv, rng);
  }
  return l;
}

Tensor LateralConv::forward(const Tensor& x, Tape* tape) {
  return slim ? gsconv(x, gs, tape) : conv2d(x, std_conv, tape);
}

RepGFPNNeck RepGFPNNeck::make(const NeckChannels& ch, bool slim, Rng& rng) {
  RepGFPNNeck n;
  n.ch = ch;
  n.slim = slim;
  n.lat_td_p2 = LateralConv::make(ch.c2, ch.c2, slim, rng);
  n.lat_td_p3 = LateralConv::make(ch.c3, ch.c3, slim, rng);
  n.lat_bu_m2 = LateralConv::make(ch.c2, ch.c2, slim, rng);
  n.lat_bu_p1 = LateralConv::make(ch.c1, ch.c1, slim, rng);
  n.down_n3 = ConvParams::make(ch.c3, ch.c2, 3, 2, 1, 1, true);
  n.down_n2 = ConvParams::make(ch.c2, ch.c1, 3, 2, 1, 1, true);
  init_conv(n.down_n3, rng);
  init_conv(n.down_n2, rng);
  n.fuse_m2 = CSPStageParams::make(ch.c1 + ch.c2, ch.c2, rng);
  n.fuse_m3 = CSPStageParams::make(ch.c2 + ch.c3, ch.c3, rng);
  n.fuse_n2 = CSPStageParams::make(ch.c2 + ch.c2, ch.c2, rng);
  n.fuse_n1 = CSPStageParams::make(ch.c1 + ch.c1, ch.c1, rng);
  return n;
}

namespace {

void check_pyramid(const PyramidFeatures& f) {
  if (f.p2.h() != 2 * f.p1.h() || f.p2.w() != 2 * f.p1.w() ||
      f.p3.h() != 2 * f.p2.h() || f.p3.w() != 2 * f.p2.w()) {
    throw ShapeError("neck: pyramid strides must double per level, got " +
                     f.p1.shape().str() + " / " + f.p2.shape().str() + " / " +
                     f.p3.shape().str());
  }
}

}  // namespace

PyramidFeatures RepGFPNNeck::forward(const PyramidFeatures& f, BnMode mode,
                                     Tape* tape) {
  check_pyramid(f);
  // top-down
  Tensor m2 = cspstage(
      concat_channels({upsample_nearest(f.p1, 2, tape),
                       lat_td_p2.forward(f.p2, tape)},
                      tape),
      fuse_m2, mode, tape);
  Tensor m3 = cspstage(
      concat_channels({upsample_nearest(m2, 2, tape),
                       lat_td_p3.forward(f.p3, tape)},
                      tape),
      fuse_m3, mode, tape);
  // bottom-up
  Tensor n3 = m3;
  Tensor n2 = cspstage(
      concat_channels({silu(downsample_conv(n3, down_n3, tape), tape),
                       lat_bu_m2.forward(m2, tape)},
                      tape),
      fuse_n2, mode, tape);
  Tensor n1 = cspstage(
      concat_channels({silu(downsample_conv(n2, down_n2, tape), tape),
                       lat_bu_p1.forward(f.p1, tape)},
                      tape),
      fuse_n1, mode, tape);
  PyramidFeatures out;
  out.p1 = n1;
  out.p2 = n2;
  out.p3 = n3;
  return out;
}

std::vector<FusionNodeInfo> RepGFPNNeck::fusion_nodes() const {
  return {
      {"m2", ch.c1, lat_td_p2.out_channels()},
      {"m3", ch.c2, lat_td_p3.out_channels()},
      {"n2", down_n3.out_channels(), lat_bu_m2.out_channels()},
      {"n1", down_n2.out_channels(), lat_bu_p1.out_channels()},
  };
}

PlainPANNeck PlainPANNeck::make(const NeckChannels& ch, Rng& rng) {
  PlainPANNeck n;
  n.ch = ch;
  auto lat = [&](int c) {
    ConvParams p = ConvParams::make(c, c, 3, 1, 1, 1, true);
    init_conv(p, rng);
    return p;
  };
  n.lat_td_p2 = lat(ch.c2);
  n.lat_td_p3 = lat(ch.c3);
  n.lat_bu_m2 = lat(ch.c2);
  n.lat_bu_p1 = lat(ch.c1);
  n.down_n3 = ConvParams::make(ch.c3, ch.c2, 3, 2, 1, 1, true);
  n.down_n2 = ConvParams::make(ch.c2, ch.c1, 3, 2, 1, 1, true);
  init_conv(n.down_n3, rng);
  init_conv(n.down_n2, rng);
  auto fuse = [&](int in_ch, int out_ch) {
    Fuse f;
    f.reduce = ConvParams::make(in_ch, out_ch, 1, 1, 0, 1, true);
    f.conv = ConvParams::make(out_ch, out_ch, 3, 1, 1, 1, true);
    init_conv(f.reduce, rng);
    init_conv(f.conv, rng);
    return f;
  };
  n.fuse_m2 = fuse(ch.c1 + ch.c2, ch.c2);
  n.fuse_m3 = fuse(ch.c2 + ch.c3, ch.c3);
  n.fuse_n2 = fuse(ch.c2 + ch.c2, ch.c2);
  n.fuse_n1 = fuse(ch.c1 + ch.c1, ch.c1);
  return n;
}

PyramidFeatures PlainPANNeck::forward(const PyramidFeatures& f, BnMode,
                                      Tape* tape) {
  check_pyramid(f);
  auto run_fuse = [&](const Tensor& x, Fuse& fu) {
    Tensor t = silu(conv2d(x, fu.reduce, tape), tape);
    return silu(conv2d(t, fu.conv, tape), tape);
  };
  Tensor m2 = run_fuse(
      concat_channels({upsample_nearest(f.p1, 2, tape),
                       conv2d(f.p2, lat_td_p2, tape)},
                      tape),
      fuse_m2);
  Tensor m3 = run_fuse(
      concat_channels({upsample_nearest(m2, 2, tape),
                       conv2d(f.p3, lat_td_p3, tape)},
                      tape),
      fuse_m3);
  Tensor n3 = m3;
  Tensor n2 = run_fuse(
      concat_channels({silu(downsample_conv(n3, down_n3, tape), tape),
                       conv2d(m2, lat_bu_m2, tape)},
                      tape),
      fuse_n2);
  Tensor n1 = run_fuse(
      concat_channels({silu(downsample_conv(n2, down_n2, tape), tape),
                       conv2d(f.p1, lat_bu_p1, tape)},
                      tape),
      fuse_n1);
  PyramidFeatures out;
  out.p1 = n1;
  out.p2 = n2;
  out.p3 = n3;
  return out;
}

}  // namespace ehdk
