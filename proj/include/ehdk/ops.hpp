#pragma once

#include <vector>

#include "ehdk/tensor.hpp"

namespace ehdk {

// Convolution parameters. Weight layout (out_channels, in_channels/groups,
// kh, kw); bias (1, out_channels, 1, 1) when present. Only odd kernels are
// supported, with symmetric zero padding.
struct ConvParams {
  Tensor weight;
  Tensor bias;  // undefined when the conv has no bias
  int stride = 1;
  int padding = 0;
  int groups = 1;

  static ConvParams make(int in_ch, int out_ch, int k, int stride, int padding,
                         int groups = 1, bool with_bias = true);
  // Identity kernel (centered delta), used heavily by tests.
  static ConvParams identity(int channels, int k, int groups = 1);

  int out_channels() const { return weight.n(); }
  int in_channels() const { return weight.c() * groups; }
  int kh() const { return weight.h(); }
  int kw() const { return weight.w(); }
  void validate() const;
};

struct BatchNormParams {
  Tensor gamma;         // (1,c,1,1), trainable
  Tensor beta;          // (1,c,1,1), trainable
  Tensor running_mean;  // (1,c,1,1), buffer
  Tensor running_var;   // (1,c,1,1), buffer, strictly positive
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormParams make(int channels, double epsilon = 1e-5,
                              double momentum = 0.1);
  int channels() const { return gamma.c(); }
};

enum class BnMode { kTrain, kEval };

// --- core ops (forward; backward recorded on tape when given) --------------

Tensor conv2d(const Tensor& x, ConvParams& p, Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor multiply(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sigmoid(const Tensor& x, Tape* tape = nullptr);
Tensor silu(const Tensor& x, Tape* tape = nullptr);
// Softmax along the channel axis, per (n, y, x) slice.
Tensor softmax_channels(const Tensor& x, Tape* tape = nullptr);
Tensor scale(const Tensor& x, double k, Tape* tape = nullptr);
// Sum of all elements as a (1,1,1,1) scalar.
Tensor sum_all(const Tensor& x, Tape* tape = nullptr);

Tensor concat_channels(const std::vector<Tensor>& xs, Tape* tape = nullptr);
Tensor slice_channels(const Tensor& x, int c0, int c1, Tape* tape = nullptr);
Tensor upsample_nearest(const Tensor& x, int factor, Tape* tape = nullptr);
// Stride-2 convolution used for pyramid downsampling.
Tensor downsample_conv(const Tensor& x, ConvParams& p, Tape* tape = nullptr);
// Per-channel mean over the half-open pixel rectangle [y0,y1) x [x0,x1);
// result (n, c, 1, 1).
Tensor avgpool_region(const Tensor& x, int y0, int x0, int y1, int x1,
                      Tape* tape = nullptr);

Tensor batchnorm2d(const Tensor& x, BatchNormParams& p, BnMode mode,
                   Tape* tape = nullptr);

// Scaled dot-product attention over spatial tokens. q, k, v are (n, d, h, w);
// tokens are the h*w positions. Row-stochastic weights P = softmax(QK^T/sqrt(d))
// are optionally exported as (n, 1, T, T) for inspection.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 Tape* tape = nullptr, Tensor* weights_out = nullptr);

// Stable row softmax of a (rows x cols) buffer, in place.
void softmax_rows(double* m, int rows, int cols);

// Numerically stable pieces shared across modules.
double sigmoid_scalar(double x);

// Deterministic He-style uniform fill used by all parameter factories.
void init_conv(ConvParams& p, Rng& rng);

}  // namespace ehdk
