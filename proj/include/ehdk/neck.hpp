#pragma once

#include <string>
#include <vector>

#include "ehdk/ops.hpp"

namespace ehdk {

// Multi-branch 3x3 + 1x1 + identity convolution with per-branch batch norms,
// algebraically collapsible into a single biased 3x3 conv for inference.
struct RepConvParams {
  ConvParams conv3;  // 3x3, no bias
  BatchNormParams bn3;
  ConvParams conv1;  // 1x1, no bias
  BatchNormParams bn1;
  bool has_identity = false;  // only when in==out channels and stride 1
  BatchNormParams bn_id;
  int stride = 1;

  bool deployed = false;
  ConvParams fused;  // 3x3 with bias, present once deployed

  static RepConvParams make(int in_ch, int out_ch, int stride, Rng& rng);
  int in_channels() const { return conv3.in_channels(); }
  int out_channels() const { return conv3.out_channels(); }
};

Tensor repconv_forward(const Tensor& x, RepConvParams& p, BnMode mode,
                       Tape* tape = nullptr);

// Folds the batch norms into their convs (using running statistics), pads the
// 1x1 kernel to 3x3, expresses the identity as a centered delta kernel and
// sums everything into one ConvParams. Output-equivalent to the eval-mode
// multi-branch forward.
RepConvParams repconv_fuse(const RepConvParams& p);

// Split-channel hybrid conv: depthwise 3x3 on the first half, standard 3x3 on
// the second, concatenated; a 1x1 pre-projection aligns widths when in != out.
// The residual add applies only when input and output shapes match.
struct GSConvParams {
  bool has_pre = false;
  ConvParams pre;  // 1x1 in -> out
  ConvParams dw;   // 3x3 depthwise, out/2 channels
  ConvParams std_conv;  // 3x3, out/2 -> out/2

  static GSConvParams make(int in_ch, int out_ch, Rng& rng);
  int in_channels() const { return has_pre ? pre.in_channels() : 2 * dw.in_channels(); }
  int out_channels() const { return 2 * dw.out_channels(); }
};

Tensor gsconv(const Tensor& x, GSConvParams& p, Tape* tape = nullptr);

// Cross-stage-partial fusion unit: a 1x1 shortcut path plus a transform path
// (1x1 reduce -> RepConv 3x3 -> conv 3x3), concatenated and 1x1-mixed.
struct CSPStageParams {
  ConvParams short_conv;  // 1x1 in -> mid
  ConvParams reduce;      // 1x1 in -> mid
  RepConvParams rep;      // 3x3 mid -> mid
  ConvParams refine;      // 3x3 mid -> mid
  ConvParams mix;         // 1x1 2*mid -> out

  static CSPStageParams make(int in_ch, int out_ch, Rng& rng);
  int out_channels() const { return mix.out_channels(); }
};

Tensor cspstage(const Tensor& x, CSPStageParams& p, BnMode mode,
                Tape* tape = nullptr);

// Three scale levels; p1 is the deepest (stride 32), p3 the shallowest
// (stride 8). Spatial dims double at each shallower level.
struct PyramidFeatures {
  Tensor p1;
  Tensor p2;
  Tensor p3;
};

struct NeckChannels {
  int c3 = 0;  // stride 8
  int c2 = 0;  // stride 16
  int c1 = 0;  // stride 32
};

// A lateral is a GSConv in the slim neck and a standard 3x3 conv otherwise.
struct LateralConv {
  bool slim = true;
  GSConvParams gs;
  ConvParams std_conv;

  static LateralConv make(int in_ch, int out_ch, bool slim, Rng& rng);
  Tensor forward(const Tensor& x, Tape* tape);
  int out_channels() const {
    return slim ? gs.out_channels() : std_conv.out_channels();
  }
};

struct FusionNodeInfo {
  std::string name;
  int resampled_ch = 0;  // channels arriving via upsample/downsample
  int lateral_ch = 0;    // channels arriving via the same-resolution lateral
};

// Generalized FPN with a top-down and a bottom-up pass. Every fusion node
// concatenates exactly one resampled map with one lateral map and runs a
// CSPStage. slim=true routes laterals through GSConv.
struct RepGFPNNeck {
  NeckChannels ch;
  bool slim = true;
  LateralConv lat_td_p2, lat_td_p3, lat_bu_m2, lat_bu_p1;
  ConvParams down_n3, down_n2;  // strided standard convs
  CSPStageParams fuse_m2, fuse_m3, fuse_n2, fuse_n1;

  static RepGFPNNeck make(const NeckChannels& ch, bool slim, Rng& rng);
  PyramidFeatures forward(const PyramidFeatures& f, BnMode mode,
                          Tape* tape = nullptr);
  std::vector<FusionNodeInfo> fusion_nodes() const;
};

// Baseline path-aggregation neck: the same graph shape with standard conv
// laterals and plain 1x1-reduce + 3x3 fusion blocks.
struct PlainPANNeck {
  NeckChannels ch;
  ConvParams lat_td_p2, lat_td_p3, lat_bu_m2, lat_bu_p1;
  ConvParams down_n3, down_n2;
  struct Fuse {
    ConvParams reduce;  // 1x1 cat -> out
    ConvParams conv;    // 3x3 out -> out
  } fuse_m2, fuse_m3, fuse_n2, fuse_n1;

  static PlainPANNeck make(const NeckChannels& ch, Rng& rng);
  PyramidFeatures forward(const PyramidFeatures& f, BnMode mode,
                          Tape* tape = nullptr);
};

}  // namespace ehdk
