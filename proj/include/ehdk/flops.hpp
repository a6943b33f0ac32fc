#pragma once

#include <cstdint>

#include "ehdk/attention.hpp"
#include "ehdk/neck.hpp"
#include "ehdk/ops.hpp"
#include "ehdk/wavelet.hpp"

namespace ehdk {

// Analytic accounting. params counts trainable scalars; macs counts
// multiply-accumulates for a batch-1 forward at the stated spatial size
// (1 MAC = 2 FLOPs by the usual convention). Activations are free;
// batch norm in eval form costs one MAC per element.
struct Cost {
  std::int64_t params = 0;
  std::int64_t macs = 0;

  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
};

struct Extent {
  int h = 0;
  int w = 0;
};

Extent conv_output_extent(const ConvParams& p, Extent in);

Cost conv_cost(const ConvParams& p, Extent in);
Cost bn_cost(const BatchNormParams& p, Extent at);
Cost repconv_cost(const RepConvParams& p, Extent in);
Cost gsconv_cost(const GSConvParams& p, Extent in);
Cost lateral_cost(const LateralConv& l, Extent in);
Cost cspstage_cost(const CSPStageParams& p, Extent in);
Cost wtconv_cost(const WTConvParams& p, Extent in);
Cost attention_primitive_cost(int channels, Extent at);  // QK^T and PV matmuls
Cost cga_cost(const AttentionGroupParams& p, Extent at);

// Whole-neck accounting given the stride-8 feature extent (p2/p1 halve it).
Cost repgfpn_cost(const RepGFPNNeck& n, Extent p3);
Cost plain_pan_cost(const PlainPANNeck& n, Extent p3);

}  // namespace ehdk
