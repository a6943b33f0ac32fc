#pragma once

#include <array>

#include "ehdk/ops.hpp"

namespace ehdk {

// Orthonormal Haar analysis bank: four fixed 2x2 kernels applied as stride-2
// valid correlations. Row-major entries; each kernel has unit energy and the
// kernels are mutually orthogonal, which makes one decomposition level
// perfectly invertible in finite arithmetic.
struct HaarFilterBank {
  static constexpr std::array<double, 4> lowpass{0.5, 0.5, 0.5, 0.5};
  static constexpr std::array<double, 4> highpass_h{0.5, -0.5, 0.5, -0.5};
  static constexpr std::array<double, 4> highpass_v{0.5, 0.5, -0.5, -0.5};
  static constexpr std::array<double, 4> highpass_d{0.5, -0.5, -0.5, 0.5};
};

// One decomposition level. Bands share one shape with spatial dims half the
// (padded) source; source_h/source_w remember the pre-padding size so the
// inverse can crop.
struct WaveletBands {
  Tensor ll, hl, lh, hh;
  int source_h = 0;
  int source_w = 0;
};

// Extends odd spatial dims by mirroring the last row/column so both become
// even. Exposed so tests can state the Parseval identity for odd inputs.
Tensor reflect_pad_even(const Tensor& x);

WaveletBands wt2(const Tensor& x, Tape* tape = nullptr);
Tensor iwt2(const WaveletBands& b, Tape* tape = nullptr);

// Per-band filtering between analysis and synthesis: 3x3 standard conv on the
// low-frequency band, 5x5 depthwise convs on the three detail bands.
struct WTConvParams {
  ConvParams ll_conv;
  ConvParams hl_conv;
  ConvParams lh_conv;
  ConvParams hh_conv;

  static WTConvParams make(int channels);
  static WTConvParams identity(int channels);
  int channels() const { return ll_conv.in_channels(); }
};

Tensor wtconv(const Tensor& x, WTConvParams& p, Tape* tape = nullptr);

// Appends two coordinate channels (rows then columns), normalized as
// 2*i/H - 1 and 2*j/W - 1. Gradient flows only to the original channels.
Tensor add_coord_channels(const Tensor& x, Tape* tape = nullptr);

// Dual-branch residual block: main branch conv3x3 -> silu -> wtconv ->
// coordinate channels -> conv3x3 (C+2 in) -> silu; added to the shortcut.
struct C3k2WTCoordBlock {
  ConvParams conv_in;
  WTConvParams wt;
  ConvParams conv_coord;
  bool shortcut = true;

  static C3k2WTCoordBlock make(int in_ch, int out_ch, bool shortcut, Rng& rng);
  Tensor forward(const Tensor& x, Tape* tape = nullptr);
};

}  // namespace ehdk
