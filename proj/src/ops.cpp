#include "ehdk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ehdk {

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// ConvParams / BatchNormParams
// ---------------------------------------------------------------------------

ConvParams ConvParams::make(int in_ch, int out_ch, int k, int stride,
                            int padding, int groups, bool with_bias) {
  if (k % 2 == 0 || k < 1) {
    throw ConfigError("conv kernel must be odd, got " + std::to_string(k));
  }
  if (groups < 1 || in_ch % groups != 0 || out_ch % groups != 0) {
    throw ConfigError("groups=" + std::to_string(groups) +
                      " must divide in=" + std::to_string(in_ch) +
                      " and out=" + std::to_string(out_ch));
  }
  if (stride < 1 || padding < 0) {
    throw ConfigError("invalid stride/padding");
  }
  ConvParams p;
  p.weight = Tensor(out_ch, in_ch / groups, k, k);
  if (with_bias) p.bias = Tensor(1, out_ch, 1, 1);
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  return p;
}

ConvParams ConvParams::identity(int channels, int k, int groups) {
  ConvParams p = make(channels, channels, k, 1, k / 2, groups, false);
  int icg = channels / groups;
  for (int oc = 0; oc < channels; ++oc) {
    // delta at the kernel center on the matching input channel
    p.weight.at(oc, oc % icg, k / 2, k / 2) = 1.0;
  }
  return p;
}

void ConvParams::validate() const {
  if (!weight.defined()) throw ConfigError("conv weight not set");
  if (kh() % 2 == 0 || kw() % 2 == 0) {
    throw ConfigError("conv kernels must be odd");
  }
}

void init_conv(ConvParams& p, Rng& rng) {
  double fan_in = double(p.weight.c()) * p.weight.h() * p.weight.w();
  double bound = std::sqrt(6.0 / fan_in) / 3.0;
  for (std::int64_t i = 0; i < p.weight.numel(); ++i) {
    p.weight.data()[i] = rng.uniform(-bound, bound);
  }
  if (p.bias.defined()) {
    for (std::int64_t i = 0; i < p.bias.numel(); ++i) p.bias.data()[i] = 0.0;
  }
}

BatchNormParams BatchNormParams::make(int channels, double epsilon,
                                      double momentum) {
  if (epsilon <= 0.0) throw ConfigError("batchnorm epsilon must be > 0");
  if (momentum <= 0.0 || momentum >= 1.0) {
    throw ConfigError("batchnorm momentum must lie in (0,1)");
  }
  BatchNormParams p;
  p.gamma = Tensor::full(1, channels, 1, 1, 1.0);
  p.beta = Tensor(1, channels, 1, 1);
  p.running_mean = Tensor(1, channels, 1, 1);
  p.running_var = Tensor::full(1, channels, 1, 1, 1.0);
  p.epsilon = epsilon;
  p.momentum = momentum;
  return p;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int n, in_c, in_h, in_w;
  int out_c, out_h, out_w;
  int kh, kw, stride, pad, groups, icg, ocg;
};

ConvDims conv_dims(const Tensor& x, const ConvParams& p) {
  p.validate();
  if (x.c() != p.in_channels()) {
    throw ShapeError("conv2d: input shape " + x.shape().str() +
                     " does not match weight shape " + p.weight.shape().str() +
                     " with groups=" + std::to_string(p.groups));
  }
  ConvDims d;
  d.n = x.n();
  d.in_c = x.c();
  d.in_h = x.h();
  d.in_w = x.w();
  d.kh = p.kh();
  d.kw = p.kw();
  d.stride = p.stride;
  d.pad = p.padding;
  d.groups = p.groups;
  if (d.in_h + 2 * d.pad < d.kh || d.in_w + 2 * d.pad < d.kw) {
    throw ShapeError("conv2d: padded input " + x.shape().str() +
                     " smaller than kernel " + p.weight.shape().str());
  }
  d.out_c = p.out_channels();
  d.out_h = (d.in_h + 2 * d.pad - d.kh) / d.stride + 1;
  d.out_w = (d.in_w + 2 * d.pad - d.kw) / d.stride + 1;
  d.icg = d.in_c / d.groups;
  d.ocg = d.out_c / d.groups;
  return d;
}

// Valid output-x range for a kernel column: ix = ox*stride - pad + kx in [0, in_w).
inline void ox_range(int kx, const ConvDims& d, int& lo, int& hi) {
  int lo_num = d.pad - kx;
  lo = lo_num > 0 ? (lo_num + d.stride - 1) / d.stride : 0;
  hi = std::min(std::int64_t(d.out_w) - 1,
                std::int64_t(d.in_w - 1 + d.pad - kx) / d.stride);
}

void conv_forward_plane(const Tensor& x, const ConvParams& p,
                        const ConvDims& d, Tensor& out, int in, int oc) {
  int g = oc / d.ocg;
  double* outp = out.data() + out.index(in, oc, 0, 0);
  double b = p.bias.defined() ? p.bias.at(0, oc, 0, 0) : 0.0;
  std::fill(outp, outp + std::size_t(d.out_h) * d.out_w, b);
  for (int icl = 0; icl < d.icg; ++icl) {
    int ic = g * d.icg + icl;
    const double* xp = x.data() + x.index(in, ic, 0, 0);
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        double wv = p.weight.at(oc, icl, ky, kx);
        if (wv == 0.0) continue;
        int oxlo, oxhi;
        ox_range(kx, d, oxlo, oxhi);
        for (int oy = 0; oy < d.out_h; ++oy) {
          int iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.in_h) continue;
          const double* xr = xp + std::size_t(iy) * d.in_w - d.pad + kx;
          double* orow = outp + std::size_t(oy) * d.out_w;
          if (d.stride == 1) {
            for (int ox = oxlo; ox <= oxhi; ++ox) orow[ox] += wv * xr[ox];
          } else {
            for (int ox = oxlo; ox <= oxhi; ++ox) {
              orow[ox] += wv * xr[std::size_t(ox) * d.stride];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, ConvParams& p, Tape* tape) {
  ConvDims d = conv_dims(x, p);
  Tensor out(d.n, d.out_c, d.out_h, d.out_w);

  std::int64_t planes = std::int64_t(d.n) * d.out_c;
  parallel_for(planes, [&](std::int64_t idx) {
    conv_forward_plane(x, p, d, out, int(idx / d.out_c), int(idx % d.out_c));
  });
  maybe_check_finite(out, "conv2d");

  if (tape) {
    Tensor xi = x;
    Tensor wt = p.weight;
    Tensor bt = p.bias;
    tape->record([xi, wt, bt, out, d]() mutable {
      xi.ensure_grad();
      wt.ensure_grad();
      const double* og = out.grad();
      // d(bias)
      if (bt.defined()) {
        bt.ensure_grad();
        for (int oc = 0; oc < d.out_c; ++oc) {
          double acc = 0.0;
          for (int in = 0; in < d.n; ++in) {
            const double* row = og + out.index(in, oc, 0, 0);
            for (std::int64_t i = 0; i < std::int64_t(d.out_h) * d.out_w; ++i) {
              acc += row[i];
            }
          }
          bt.grad()[oc] += acc;
        }
      }
      // d(weight): one thread per output channel owns its slice
      parallel_for(d.out_c, [&](std::int64_t ocl) {
        int oc = int(ocl);
        int g = oc / d.ocg;
        for (int icl = 0; icl < d.icg; ++icl) {
          int ic = g * d.icg + icl;
          for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx) {
              int oxlo, oxhi;
              ox_range(kx, d, oxlo, oxhi);
              double acc = 0.0;
              for (int in = 0; in < d.n; ++in) {
                const double* xp = xi.data() + xi.index(in, ic, 0, 0);
                const double* op = og + out.index(in, oc, 0, 0);
                for (int oy = 0; oy < d.out_h; ++oy) {
                  int iy = oy * d.stride - d.pad + ky;
                  if (iy < 0 || iy >= d.in_h) continue;
                  const double* xr = xp + std::size_t(iy) * d.in_w - d.pad + kx;
                  const double* orow = op + std::size_t(oy) * d.out_w;
                  for (int ox = oxlo; ox <= oxhi; ++ox) {
                    acc += orow[ox] * xr[std::size_t(ox) * d.stride];
                  }
                }
              }
              wt.grad()[wt.index(oc, icl, ky, kx)] += acc;
            }
          }
        }
      });
      // d(input): one thread per sample owns its slice
      parallel_for(d.n, [&](std::int64_t inl) {
        int in = int(inl);
        for (int oc = 0; oc < d.out_c; ++oc) {
          int g = oc / d.ocg;
          const double* op = og + out.index(in, oc, 0, 0);
          for (int icl = 0; icl < d.icg; ++icl) {
            int ic = g * d.icg + icl;
            double* xg = xi.grad() + xi.index(in, ic, 0, 0);
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                double wv = wt.at(oc, icl, ky, kx);
                if (wv == 0.0) continue;
                int oxlo, oxhi;
                ox_range(kx, d, oxlo, oxhi);
                for (int oy = 0; oy < d.out_h; ++oy) {
                  int iy = oy * d.stride - d.pad + ky;
                  if (iy < 0 || iy >= d.in_h) continue;
                  double* xr = xg + std::size_t(iy) * d.in_w - d.pad + kx;
                  const double* orow = op + std::size_t(oy) * d.out_w;
                  for (int ox = oxlo; ox <= oxhi; ++ox) {
                    xr[std::size_t(ox) * d.stride] += wv * orow[ox];
                  }
                }
              }
            }
          }
        }
      });
    });
  }
  return out;
}

Tensor downsample_conv(const Tensor& x, ConvParams& p, Tape* tape) {
  if (p.stride != 2) {
    throw ConfigError("downsample_conv requires stride 2, got " +
                      std::to_string(p.stride));
  }
  return conv2d(x, p, tape);
}

// ---------------------------------------------------------------------------
// pointwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "add");
  Tensor out(a.n(), a.c(), a.h(), a.w());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  maybe_check_finite(out, "add");
  if (tape) {
    Tensor ai = a, bi = b;
    tape->record([ai, bi, out, n]() mutable {
      ai.ensure_grad();
      bi.ensure_grad();
      const double* og = out.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        ai.grad()[i] += og[i];
        bi.grad()[i] += og[i];
      }
    });
  }
  return out;
}

Tensor multiply(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "multiply");
  Tensor out(a.n(), a.c(), a.h(), a.w());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  maybe_check_finite(out, "multiply");
  if (tape) {
    Tensor ai = a, bi = b;
    tape->record([ai, bi, out, n]() mutable {
      ai.ensure_grad();
      bi.ensure_grad();
      const double* og = out.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        ai.grad()[i] += og[i] * bi.data()[i];
        bi.grad()[i] += og[i] * ai.data()[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double k, Tape* tape) {
  Tensor out(x.n(), x.c(), x.h(), x.w());
  std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * k;
  maybe_check_finite(out, "scale");
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, n, k]() mutable {
      xi.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) xi.grad()[i] += k * out.grad()[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x, Tape* tape) {
  Tensor out(x.n(), x.c(), x.h(), x.w());
  std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    out.data()[i] = sigmoid_scalar(x.data()[i]);
  }
  maybe_check_finite(out, "sigmoid");
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, n]() mutable {
      xi.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        double s = out.data()[i];
        xi.grad()[i] += out.grad()[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

Tensor silu(const Tensor& x, Tape* tape) {
  Tensor out(x.n(), x.c(), x.h(), x.w());
  std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    double v = x.data()[i];
    out.data()[i] = v * sigmoid_scalar(v);
  }
  maybe_check_finite(out, "silu");
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, n]() mutable {
      xi.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        double v = xi.data()[i];
        double s = sigmoid_scalar(v);
        xi.grad()[i] += out.grad()[i] * s * (1.0 + v * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor softmax_channels(const Tensor& x, Tape* tape) {
  Tensor out(x.n(), x.c(), x.h(), x.w());
  int C = x.c();
  std::int64_t hw = std::int64_t(x.h()) * x.w();
  for (int in = 0; in < x.n(); ++in) {
    for (std::int64_t px = 0; px < hw; ++px) {
      const double* xp = x.data() + x.index(in, 0, 0, 0) + px;
      double* op = out.data() + out.index(in, 0, 0, 0) + px;
      double mx = xp[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, xp[c * hw]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) {
        double e = std::exp(xp[c * hw] - mx);
        op[c * hw] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) op[c * hw] /= z;
    }
  }
  maybe_check_finite(out, "softmax_channels");
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, C, hw]() mutable {
      xi.ensure_grad();
      for (int in = 0; in < xi.n(); ++in) {
        for (std::int64_t px = 0; px < hw; ++px) {
          const double* p = out.data() + out.index(in, 0, 0, 0) + px;
          const double* og = out.grad() + out.index(in, 0, 0, 0) + px;
          double* xg = xi.grad() + xi.index(in, 0, 0, 0) + px;
          double dot = 0.0;
          for (int c = 0; c < C; ++c) dot += og[c * hw] * p[c * hw];
          for (int c = 0; c < C; ++c) {
            xg[c * hw] += p[c * hw] * (og[c * hw] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x, Tape* tape) {
  Tensor out(1, 1, 1, 1);
  double acc = 0.0;
  std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += x.data()[i];
  out.data()[0] = acc;
  maybe_check_finite(out, "sum_all");
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, n]() mutable {
      xi.ensure_grad();
      double g = out.grad()[0];
      for (std::int64_t i = 0; i < n; ++i) xi.grad()[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& xs, Tape* tape) {
  if (xs.empty()) throw ArgumentError("concat_channels: empty input list");
  int n = xs[0].n(), h = xs[0].h(), w = xs[0].w(), cs = 0;
  for (const Tensor& t : xs) {
    if (t.n() != n || t.h() != h || t.w() != w) {
      throw ShapeError("concat_channels: mismatched shape " + t.shape().str() +
                       " vs " + xs[0].shape().str());
    }
    cs += t.c();
  }
  Tensor out(n, cs, h, w);
  std::int64_t hw = std::int64_t(h) * w;
  for (int in = 0; in < n; ++in) {
    int co = 0;
    for (const Tensor& t : xs) {
      std::memcpy(out.data() + out.index(in, co, 0, 0),
                  t.data() + t.index(in, 0, 0, 0),
                  sizeof(double) * std::size_t(t.c()) * hw);
      co += t.c();
    }
  }
  if (tape) {
    std::vector<Tensor> ins = xs;
    tape->record([ins, out, n, hw]() mutable {
      for (Tensor& t : ins) t.ensure_grad();
      for (int in = 0; in < n; ++in) {
        int co = 0;
        for (Tensor& t : ins) {
          const double* og = out.grad() + out.index(in, co, 0, 0);
          double* tg = t.grad() + t.index(in, 0, 0, 0);
          std::int64_t cnt = std::int64_t(t.c()) * hw;
          for (std::int64_t i = 0; i < cnt; ++i) tg[i] += og[i];
          co += t.c();
        }
      }
    });
  }
  return out;
}

Tensor slice_channels(const Tensor& x, int c0, int c1, Tape* tape) {
  if (c0 < 0 || c1 > x.c() || c0 >= c1) {
    throw BoundsError("slice_channels: range [" + std::to_string(c0) + "," +
                      std::to_string(c1) + ") outside 0.." +
                      std::to_string(x.c()));
  }
  Tensor out(x.n(), c1 - c0, x.h(), x.w());
  std::int64_t hw = std::int64_t(x.h()) * x.w();
  for (int in = 0; in < x.n(); ++in) {
    std::memcpy(out.data() + out.index(in, 0, 0, 0),
                x.data() + x.index(in, c0, 0, 0),
                sizeof(double) * std::size_t(c1 - c0) * hw);
  }
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, c0, hw]() mutable {
      xi.ensure_grad();
      for (int in = 0; in < xi.n(); ++in) {
        const double* og = out.grad() + out.index(in, 0, 0, 0);
        double* xg = xi.grad() + xi.index(in, c0, 0, 0);
        std::int64_t cnt = std::int64_t(out.c()) * hw;
        for (std::int64_t i = 0; i < cnt; ++i) xg[i] += og[i];
      }
    });
  }
  return out;
}

Tensor upsample_nearest(const Tensor& x, int factor, Tape* tape) {
  if (factor < 1) {
    throw ArgumentError("upsample_nearest: factor must be >= 1, got " +
                        std::to_string(factor));
  }
  Tensor out(x.n(), x.c(), x.h() * factor, x.w() * factor);
  for (int in = 0; in < x.n(); ++in) {
    for (int ic = 0; ic < x.c(); ++ic) {
      for (int oy = 0; oy < out.h(); ++oy) {
        const double* xr = x.data() + x.index(in, ic, oy / factor, 0);
        double* orow = out.data() + out.index(in, ic, oy, 0);
        for (int ox = 0; ox < out.w(); ++ox) orow[ox] = xr[ox / factor];
      }
    }
  }
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, factor]() mutable {
      xi.ensure_grad();
      for (int in = 0; in < xi.n(); ++in) {
        for (int ic = 0; ic < xi.c(); ++ic) {
          for (int oy = 0; oy < out.h(); ++oy) {
            const double* og = out.grad() + out.index(in, ic, oy, 0);
            double* xg = xi.grad() + xi.index(in, ic, oy / factor, 0);
            for (int ox = 0; ox < out.w(); ++ox) xg[ox / factor] += og[ox];
          }
        }
      }
    });
  }
  return out;
}

Tensor avgpool_region(const Tensor& x, int y0, int x0, int y1, int x1,
                      Tape* tape) {
  if (y0 < 0 || x0 < 0 || y1 > x.h() || x1 > x.w() || y0 >= y1 || x0 >= x1) {
    throw BoundsError("avgpool_region: rect [" + std::to_string(y0) + "," +
                      std::to_string(x0) + ")-(" + std::to_string(y1) + "," +
                      std::to_string(x1) + ") outside " + x.shape().str());
  }
  Tensor out(x.n(), x.c(), 1, 1);
  double inv = 1.0 / (double(y1 - y0) * double(x1 - x0));
  for (int in = 0; in < x.n(); ++in) {
    for (int ic = 0; ic < x.c(); ++ic) {
      double acc = 0.0;
      for (int iy = y0; iy < y1; ++iy) {
        const double* xr = x.data() + x.index(in, ic, iy, 0);
        for (int ix = x0; ix < x1; ++ix) acc += xr[ix];
      }
      out.at(in, ic, 0, 0) = acc * inv;
    }
  }
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, y0, x0, y1, x1, inv]() mutable {
      xi.ensure_grad();
      for (int in = 0; in < xi.n(); ++in) {
        for (int ic = 0; ic < xi.c(); ++ic) {
          double g = out.grad()[out.index(in, ic, 0, 0)] * inv;
          for (int iy = y0; iy < y1; ++iy) {
            double* xr = xi.grad() + xi.index(in, ic, iy, 0);
            for (int ix = x0; ix < x1; ++ix) xr[ix] += g;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, BatchNormParams& p, BnMode mode,
                   Tape* tape) {
  int C = x.c();
  if (C != p.channels()) {
    throw ShapeError("batchnorm2d: input " + x.shape().str() + " vs " +
                     std::to_string(p.channels()) + " channels of parameters");
  }
  std::int64_t hw = std::int64_t(x.h()) * x.w();
  std::int64_t m = std::int64_t(x.n()) * hw;
  Tensor out(x.n(), x.c(), x.h(), x.w());

  std::vector<double> mean(C), inv_std(C);
  if (mode == BnMode::kTrain) {
    if (m < 2) {
      throw StatsError("batchnorm2d train mode needs batch*h*w >= 2, got " +
                       std::to_string(m));
    }
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int in = 0; in < x.n(); ++in) {
        const double* xp = x.data() + x.index(in, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) acc += xp[i];
      }
      double mu = acc / double(m);
      double vacc = 0.0;
      for (int in = 0; in < x.n(); ++in) {
        const double* xp = x.data() + x.index(in, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) {
          double d = xp[i] - mu;
          vacc += d * d;
        }
      }
      double var = vacc / double(m);  // biased, used for normalization
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + p.epsilon);
      double unbiased = m > 1 ? vacc / double(m - 1) : var;
      p.running_mean.data()[c] =
          (1.0 - p.momentum) * p.running_mean.data()[c] + p.momentum * mu;
      p.running_var.data()[c] =
          (1.0 - p.momentum) * p.running_var.data()[c] + p.momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      if (p.running_var.data()[c] <= 0.0) {
        throw StatsError("batchnorm2d: running_var must be strictly positive");
      }
      mean[c] = p.running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(p.running_var.data()[c] + p.epsilon);
    }
  }

  for (int in = 0; in < x.n(); ++in) {
    for (int c = 0; c < C; ++c) {
      const double* xp = x.data() + x.index(in, c, 0, 0);
      double* op = out.data() + out.index(in, c, 0, 0);
      double g = p.gamma.data()[c], b = p.beta.data()[c];
      double mu = mean[c], is = inv_std[c];
      for (std::int64_t i = 0; i < hw; ++i) {
        op[i] = g * (xp[i] - mu) * is + b;
      }
    }
  }
  maybe_check_finite(out, "batchnorm2d");

  if (tape) {
    Tensor xi = x;
    Tensor gt = p.gamma, bt = p.beta;
    bool train = mode == BnMode::kTrain;
    tape->record([xi, gt, bt, out, mean, inv_std, hw, m, train]() mutable {
      xi.ensure_grad();
      gt.ensure_grad();
      bt.ensure_grad();
      int C = xi.c();
      for (int c = 0; c < C; ++c) {
        double mu = mean[c], is = inv_std[c], g = gt.data()[c];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int in = 0; in < xi.n(); ++in) {
          const double* xp = xi.data() + xi.index(in, c, 0, 0);
          const double* og = out.grad() + out.index(in, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) {
            double xhat = (xp[i] - mu) * is;
            sum_dy += og[i];
            sum_dy_xhat += og[i] * xhat;
          }
        }
        gt.grad()[c] += sum_dy_xhat;
        bt.grad()[c] += sum_dy;
        double mean_dy = sum_dy / double(m);
        double mean_dy_xhat = sum_dy_xhat / double(m);
        for (int in = 0; in < xi.n(); ++in) {
          const double* xp = xi.data() + xi.index(in, c, 0, 0);
          const double* og = out.grad() + out.index(in, c, 0, 0);
          double* xg = xi.grad() + xi.index(in, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) {
            if (train) {
              double xhat = (xp[i] - mu) * is;
              xg[i] += g * is * (og[i] - mean_dy - xhat * mean_dy_xhat);
            } else {
              xg[i] += g * is * og[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

void softmax_rows(double* m, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    double* row = m + std::int64_t(r) * cols;
    double mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (int c = 0; c < cols; ++c) row[c] /= z;
  }
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Tape* tape,
                 Tensor* weights_out) {
  require_same_shape(q, k, "attention(q,k)");
  require_same_shape(q, v, "attention(q,v)");
  int D = q.c();
  if (D < 1) throw ConfigError("attention: key dimension must be >= 1");
  std::int64_t T = std::int64_t(q.h()) * q.w();
  double inv_sqrt_d = 1.0 / std::sqrt(double(D));
  Tensor out(q.n(), D, q.h(), q.w());

  // P kept for the backward pass: one (T x T) row-stochastic matrix per sample
  auto probs = std::make_shared<std::vector<double>>(
      std::size_t(q.n()) * T * T, 0.0);

  for (int in = 0; in < q.n(); ++in) {
    const double* qp = q.data() + q.index(in, 0, 0, 0);
    const double* kp = k.data() + k.index(in, 0, 0, 0);
    const double* vp = v.data() + v.index(in, 0, 0, 0);
    double* P = probs->data() + std::size_t(in) * T * T;
    // S = Q^T K / sqrt(d)  (channel-major layout: q[d*T + t])
    for (std::int64_t t = 0; t < T; ++t) {
      for (std::int64_t u = 0; u < T; ++u) {
        double acc = 0.0;
        for (int dd = 0; dd < D; ++dd) {
          acc += qp[std::int64_t(dd) * T + t] * kp[std::int64_t(dd) * T + u];
        }
        P[t * T + u] = acc * inv_sqrt_d;
      }
    }
    softmax_rows(P, int(T), int(T));
    double* op = out.data() + out.index(in, 0, 0, 0);
    for (int dd = 0; dd < D; ++dd) {
      for (std::int64_t t = 0; t < T; ++t) {
        double acc = 0.0;
        for (std::int64_t u = 0; u < T; ++u) {
          acc += P[t * T + u] * vp[std::int64_t(dd) * T + u];
        }
        op[std::int64_t(dd) * T + t] = acc;
      }
    }
  }
  maybe_check_finite(out, "attention");

  if (weights_out) {
    Tensor wts(q.n(), 1, int(T), int(T));
    std::memcpy(wts.data(), probs->data(), sizeof(double) * probs->size());
    *weights_out = wts;
  }

  if (tape) {
    Tensor qi = q, ki = k, vi = v;
    tape->record([qi, ki, vi, out, probs, T, D, inv_sqrt_d]() mutable {
      qi.ensure_grad();
      ki.ensure_grad();
      vi.ensure_grad();
      std::vector<double> dP(std::size_t(T) * T), dS(std::size_t(T) * T);
      for (int in = 0; in < qi.n(); ++in) {
        const double* P = probs->data() + std::size_t(in) * T * T;
        const double* og = out.grad() + out.index(in, 0, 0, 0);
        const double* qp = qi.data() + qi.index(in, 0, 0, 0);
        const double* kp = ki.data() + ki.index(in, 0, 0, 0);
        const double* vp = vi.data() + vi.index(in, 0, 0, 0);
        double* qg = qi.grad() + qi.index(in, 0, 0, 0);
        double* kg = ki.grad() + ki.index(in, 0, 0, 0);
        double* vg = vi.grad() + vi.index(in, 0, 0, 0);
        // dV = P^T dO ; dP = dO V^T
        for (std::int64_t t = 0; t < T; ++t) {
          for (std::int64_t u = 0; u < T; ++u) {
            double acc = 0.0;
            for (int dd = 0; dd < D; ++dd) {
              acc += og[std::int64_t(dd) * T + t] * vp[std::int64_t(dd) * T + u];
            }
            dP[t * T + u] = acc;
          }
        }
        for (int dd = 0; dd < D; ++dd) {
          for (std::int64_t u = 0; u < T; ++u) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < T; ++t) {
              acc += P[t * T + u] * og[std::int64_t(dd) * T + t];
            }
            vg[std::int64_t(dd) * T + u] += acc;
          }
        }
        // dS = P o (dP - rowsum(dP o P))
        for (std::int64_t t = 0; t < T; ++t) {
          double dot = 0.0;
          for (std::int64_t u = 0; u < T; ++u) {
            dot += dP[t * T + u] * P[t * T + u];
          }
          for (std::int64_t u = 0; u < T; ++u) {
            dS[t * T + u] = P[t * T + u] * (dP[t * T + u] - dot);
          }
        }
        // dQ = dS K / sqrt(d) ; dK = dS^T Q / sqrt(d)
        for (int dd = 0; dd < D; ++dd) {
          for (std::int64_t t = 0; t < T; ++t) {
            double acc = 0.0;
            for (std::int64_t u = 0; u < T; ++u) {
              acc += dS[t * T + u] * kp[std::int64_t(dd) * T + u];
            }
            qg[std::int64_t(dd) * T + t] += acc * inv_sqrt_d;
          }
          for (std::int64_t u = 0; u < T; ++u) {
            double acc = 0.0;
            for (std::int64_t t = 0; t < T; ++t) {
              acc += dS[t * T + u] * qp[std::int64_t(dd) * T + t];
            }
            kg[std::int64_t(dd) * T + u] += acc * inv_sqrt_d;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ehdk
