#include "ehdk/wavelet.hpp"

#include <cmath>

namespace ehdk {

Tensor reflect_pad_even(const Tensor& x) {
  int he = x.h() + (x.h() % 2);
  int we = x.w() + (x.w() % 2);
  if (he == x.h() && we == x.w()) return x;
  Tensor out(x.n(), x.c(), he, we);
  for (int in = 0; in < x.n(); ++in) {
    for (int ic = 0; ic < x.c(); ++ic) {
      for (int iy = 0; iy < he; ++iy) {
        int sy = iy < x.h() ? iy : x.h() - 1;
        const double* xr = x.data() + x.index(in, ic, sy, 0);
        double* orow = out.data() + out.index(in, ic, iy, 0);
        for (int ix = 0; ix < we; ++ix) {
          orow[ix] = xr[ix < x.w() ? ix : x.w() - 1];
        }
      }
    }
  }
  return out;
}

WaveletBands wt2(const Tensor& x, Tape* tape) {
  if (x.h() < 1 || x.w() < 1) {
    throw ShapeError("wt2: zero-sized spatial dims in " + x.shape().str());
  }
  int sh = x.h(), sw = x.w();
  Tensor xe = reflect_pad_even(x);
  int bh = xe.h() / 2, bw = xe.w() / 2;

  WaveletBands bands;
  bands.ll = Tensor(x.n(), x.c(), bh, bw);
  bands.hl = Tensor(x.n(), x.c(), bh, bw);
  bands.lh = Tensor(x.n(), x.c(), bh, bw);
  bands.hh = Tensor(x.n(), x.c(), bh, bw);
  bands.source_h = sh;
  bands.source_w = sw;

  for (int in = 0; in < x.n(); ++in) {
    for (int ic = 0; ic < x.c(); ++ic) {
      for (int by = 0; by < bh; ++by) {
        const double* r0 = xe.data() + xe.index(in, ic, 2 * by, 0);
        const double* r1 = xe.data() + xe.index(in, ic, 2 * by + 1, 0);
        double* pll = bands.ll.data() + bands.ll.index(in, ic, by, 0);
        double* phl = bands.hl.data() + bands.hl.index(in, ic, by, 0);
        double* plh = bands.lh.data() + bands.lh.index(in, ic, by, 0);
        double* phh = bands.hh.data() + bands.hh.index(in, ic, by, 0);
        for (int bx = 0; bx < bw; ++bx) {
          double a = r0[2 * bx], b = r0[2 * bx + 1];
          double c = r1[2 * bx], d = r1[2 * bx + 1];
          pll[bx] = 0.5 * (a + b + c + d);
          phl[bx] = 0.5 * (a - b + c - d);
          plh[bx] = 0.5 * (a + b - c - d);
          phh[bx] = 0.5 * (a - b - c + d);
        }
      }
    }
  }
  maybe_check_finite(bands.ll, "wt2");

  if (tape) {
    Tensor xi = x;
    WaveletBands bo = bands;
    tape->record([xi, bo, bh, bw]() mutable {
      xi.ensure_grad();
      bo.ll.ensure_grad();
      bo.hl.ensure_grad();
      bo.lh.ensure_grad();
      bo.hh.ensure_grad();
      int sh = bo.source_h, sw = bo.source_w;
      for (int in = 0; in < xi.n(); ++in) {
        for (int ic = 0; ic < xi.c(); ++ic) {
          for (int by = 0; by < bh; ++by) {
            const double* gll = bo.ll.grad() + bo.ll.index(in, ic, by, 0);
            const double* ghl = bo.hl.grad() + bo.hl.index(in, ic, by, 0);
            const double* glh = bo.lh.grad() + bo.lh.index(in, ic, by, 0);
            const double* ghh = bo.hh.grad() + bo.hh.index(in, ic, by, 0);
            for (int bx = 0; bx < bw; ++bx) {
              double ll = gll[bx], hl = ghl[bx], lh = glh[bx], hh = ghh[bx];
              double da = 0.5 * (ll + hl + lh + hh);
              double db = 0.5 * (ll - hl + lh - hh);
              double dc = 0.5 * (ll + hl - lh - hh);
              double dd = 0.5 * (ll - hl - lh + hh);
              // fold padded positions back onto the mirrored source pixel
              int y0 = 2 * by, y1 = 2 * by + 1;
              int x0 = 2 * bx, x1 = 2 * bx + 1;
              int fy0 = y0 < sh ? y0 : sh - 1;
              int fy1 = y1 < sh ? y1 : sh - 1;
              int fx0 = x0 < sw ? x0 : sw - 1;
              int fx1 = x1 < sw ? x1 : sw - 1;
              xi.grad()[xi.index(in, ic, fy0, fx0)] += da;
              xi.grad()[xi.index(in, ic, fy0, fx1)] += db;
              xi.grad()[xi.index(in, ic, fy1, fx0)] += dc;
              xi.grad()[xi.index(in, ic, fy1, fx1)] += dd;
            }
          }
        }
      }
    });
  }
  return bands;
}

Tensor iwt2(const WaveletBands& b, Tape* tape) {
  require_same_shape(b.ll, b.hl, "iwt2(ll,hl)");
  require_same_shape(b.ll, b.lh, "iwt2(ll,lh)");
  require_same_shape(b.ll, b.hh, "iwt2(ll,hh)");
  int bh = b.ll.h(), bw = b.ll.w();
  int sh = b.source_h > 0 ? b.source_h : 2 * bh;
  int sw = b.source_w > 0 ? b.source_w : 2 * bw;
  Tensor out(b.ll.n(), b.ll.c(), sh, sw);

  for (int in = 0; in < out.n(); ++in) {
    for (int ic = 0; ic < out.c(); ++ic) {
      for (int by = 0; by < bh; ++by) {
        const double* pll = b.ll.data() + b.ll.index(in, ic, by, 0);
        const double* phl = b.hl.data() + b.hl.index(in, ic, by, 0);
        const double* plh = b.lh.data() + b.lh.index(in, ic, by, 0);
        const double* phh = b.hh.data() + b.hh.index(in, ic, by, 0);
        for (int bx = 0; bx < bw; ++bx) {
          double ll = pll[bx], hl = phl[bx], lh = plh[bx], hh = phh[bx];
          double a = 0.5 * (ll + hl + lh + hh);
          double bb = 0.5 * (ll - hl + lh - hh);
          double c = 0.5 * (ll + hl - lh - hh);
          double d = 0.5 * (ll - hl - lh + hh);
          int y0 = 2 * by, y1 = 2 * by + 1;
          int x0 = 2 * bx, x1 = 2 * bx + 1;
          if (y0 < sh && x0 < sw) out.at(in, ic, y0, x0) = a;
          if (y0 < sh && x1 < sw) out.at(in, ic, y0, x1) = bb;
          if (y1 < sh && x0 < sw) out.at(in, ic, y1, x0) = c;
          if (y1 < sh && x1 < sw) out.at(in, ic, y1, x1) = d;
        }
      }
    }
  }
  maybe_check_finite(out, "iwt2");

  if (tape) {
    WaveletBands bi = b;
    tape->record([bi, out, bh, bw]() mutable {
      bi.ll.ensure_grad();
      bi.hl.ensure_grad();
      bi.lh.ensure_grad();
      bi.hh.ensure_grad();
      int sh = out.h(), sw = out.w();
      for (int in = 0; in < out.n(); ++in) {
        for (int ic = 0; ic < out.c(); ++ic) {
          for (int by = 0; by < bh; ++by) {
            double* gll = bi.ll.grad() + bi.ll.index(in, ic, by, 0);
            double* ghl = bi.hl.grad() + bi.hl.index(in, ic, by, 0);
            double* glh = bi.lh.grad() + bi.lh.index(in, ic, by, 0);
            double* ghh = bi.hh.grad() + bi.hh.index(in, ic, by, 0);
            for (int bx = 0; bx < bw; ++bx) {
              int y0 = 2 * by, y1 = 2 * by + 1;
              int x0 = 2 * bx, x1 = 2 * bx + 1;
              // crop adjoint: positions beyond the source contribute nothing
              double da = (y0 < sh && x0 < sw)
                              ? out.grad()[out.index(in, ic, y0, x0)]
                              : 0.0;
              double db = (y0 < sh && x1 < sw)
                              ? out.grad()[out.index(in, ic, y0, x1)]
                              : 0.0;
              double dc = (y1 < sh && x0 < sw)
                              ? out.grad()[out.index(in, ic, y1, x0)]
                              : 0.0;
              double dd = (y1 < sh && x1 < sw)
                              ? out.grad()[out.index(in, ic, y1, x1)]
                              : 0.0;
              gll[bx] += 0.5 * (da + db + dc + dd);
              ghl[bx] += 0.5 * (da - db + dc - dd);
              glh[bx] += 0.5 * (da + db - dc - dd);
              ghh[bx] += 0.5 * (da - db - dc + dd);
            }
          }
        }
      }
    });
  }
  return out;
}

WTConvParams WTConvParams::make(int channels) {
  WTConvParams p;
  p.ll_conv = ConvParams::make(channels, channels, 3, 1, 1, 1, true);
  p.hl_conv = ConvParams::make(channels, channels, 5, 1, 2, channels, false);
  p.lh_conv = ConvParams::make(channels, channels, 5, 1, 2, channels, false);
  p.hh_conv = ConvParams::make(channels, channels, 5, 1, 2, channels, false);
  return p;
}

WTConvParams WTConvParams::identity(int channels) {
  WTConvParams p;
  p.ll_conv = ConvParams::identity(channels, 3);
  p.hl_conv = ConvParams::identity(channels, 5, channels);
  p.lh_conv = ConvParams::identity(channels, 5, channels);
  p.hh_conv = ConvParams::identity(channels, 5, channels);
  return p;
}

Tensor wtconv(const Tensor& x, WTConvParams& p, Tape* tape) {
  if (x.c() != p.channels()) {
    throw ShapeError("wtconv: input " + x.shape().str() + " vs " +
                     std::to_string(p.channels()) + " configured channels");
  }
  WaveletBands bands = wt2(x, tape);
  WaveletBands filtered;
  filtered.ll = conv2d(bands.ll, p.ll_conv, tape);
  filtered.hl = conv2d(bands.hl, p.hl_conv, tape);
  filtered.lh = conv2d(bands.lh, p.lh_conv, tape);
  filtered.hh = conv2d(bands.hh, p.hh_conv, tape);
  filtered.source_h = bands.source_h;
  filtered.source_w = bands.source_w;
  return iwt2(filtered, tape);
}

Tensor add_coord_channels(const Tensor& x, Tape* tape) {
  if (x.h() < 1 || x.w() < 1) {
    throw ShapeError("add_coord_channels: empty spatial dims in " +
                     x.shape().str());
  }
  int C = x.c(), H = x.h(), W = x.w();
  Tensor out(x.n(), C + 2, H, W);
  std::int64_t hw = std::int64_t(H) * W;
  for (int in = 0; in < x.n(); ++in) {
    std::copy(x.data() + x.index(in, 0, 0, 0),
              x.data() + x.index(in, 0, 0, 0) + std::int64_t(C) * hw,
              out.data() + out.index(in, 0, 0, 0));
    double* rp = out.data() + out.index(in, C, 0, 0);
    double* cp = out.data() + out.index(in, C + 1, 0, 0);
    for (int iy = 0; iy < H; ++iy) {
      double rv = 2.0 * iy / H - 1.0;
      for (int ix = 0; ix < W; ++ix) {
        rp[std::int64_t(iy) * W + ix] = rv;
        cp[std::int64_t(iy) * W + ix] = 2.0 * ix / W - 1.0;
      }
    }
  }
  if (tape) {
    Tensor xi = x;
    tape->record([xi, out, C, hw]() mutable {
      xi.ensure_grad();
      for (int in = 0; in < xi.n(); ++in) {
        const double* og = out.grad() + out.index(in, 0, 0, 0);
        double* xg = xi.grad() + xi.index(in, 0, 0, 0);
        std::int64_t cnt = std::int64_t(C) * hw;
        for (std::int64_t i = 0; i < cnt; ++i) xg[i] += og[i];
      }
    });
  }
  return out;
}

C3k2WTCoordBlock C3k2WTCoordBlock::make(int in_ch, int out_ch, bool shortcut,
                                        Rng& rng) {
  if (shortcut && in_ch != out_ch) {
    throw ConfigError("C3k2WTCoordBlock: shortcut needs in==out channels, got " +
                      std::to_string(in_ch) + " vs " + std::to_string(out_ch));
  }
  C3k2WTCoordBlock b;
  b.conv_in = ConvParams::make(in_ch, out_ch, 3, 1, 1, 1, true);
  b.wt = WTConvParams::make(out_ch);
  b.conv_coord = ConvParams::make(out_ch + 2, out_ch, 3, 1, 1, 1, true);
  b.shortcut = shortcut;
  init_conv(b.conv_in, rng);
  init_conv(b.wt.ll_conv, rng);
  init_conv(b.wt.hl_conv, rng);
  init_conv(b.wt.lh_conv, rng);
  init_conv(b.wt.hh_conv, rng);
  init_conv(b.conv_coord, rng);
  return b;
}

Tensor C3k2WTCoordBlock::forward(const Tensor& x, Tape* tape) {
  Tensor t = silu(conv2d(x, conv_in, tape), tape);
  t = wtconv(t, wt, tape);
  t = add_coord_channels(t, tape);
  t = silu(conv2d(t, conv_coord, tape), tape);
  return shortcut ? add(t, x, tape) : t;
}

}  // namespace ehdk
