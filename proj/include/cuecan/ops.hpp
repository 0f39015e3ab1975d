#pragma once

// Differentiable operations on Tensor4 values recorded on a Tape.
//
// Every reduction runs in a fixed loop order per output element, so results
// are bit-reproducible for identical inputs.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cuecan/autodiff.hpp"
#include "cuecan/error.hpp"
#include "cuecan/tensor.hpp"

namespace cuecan {

namespace detail {

inline Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) continue;
    if (t != nullptr && v.tape != t) throw InvariantError("operands recorded on different tapes");
    t = v.tape;
  }
  if (t == nullptr) throw InvariantError("operation without a recorded operand");
  return *t;
}

inline bool any_grad(Tape& t, std::initializer_list<Var> vars) {
  for (const Var& v : vars) {
    if (t.requires_grad(v)) return true;
  }
  return false;
}

// Expands a spatial (kh*kw) mask over (cin, cout); full-size masks pass through.
inline std::vector<double> expand_mask(std::span<const double> mask, const Shape& ws) {
  if (mask.empty()) return {};
  if (mask.size() == ws.size()) return {mask.begin(), mask.end()};
  if (mask.size() != ws.b * ws.h) {
    throw ShapeError("conv2d: mask has " + std::to_string(mask.size()) + " entries, kernel " + ws.str());
  }
  std::vector<double> full(ws.size());
  const std::size_t inner = ws.w * ws.c;
  for (std::size_t tap = 0; tap < mask.size(); ++tap) {
    std::fill_n(full.begin() + static_cast<std::ptrdiff_t>(tap * inner), inner, mask[tap] != 0.0 ? 1.0 : 0.0);
  }
  return full;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvOptions {
  // Negative means "same" padding, (k - 1) / 2; requires odd k.
  int pad_h = -1;
  int pad_w = -1;
  // Either kh*kw entries (broadcast over channels) or one entry per weight.
  std::span<const double> mask = {};
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

// Geometry of a stride-1 convolution restricted to its live taps.
struct ConvGeometry {
  std::size_t h = 0, w = 0, cin = 0, cout = 0;  // input spatial dims and channels
  std::size_t oh = 0, ow = 0;
  std::size_t kw = 0;
  long ph = 0, pw = 0;
  std::vector<std::size_t> taps;  // live tap indices ky * kw + kx

  std::size_t cols() const { return taps.size() * cin; }
  std::size_t rows() const { return oh * ow; }

  // Row-major (oh*ow) x (taps*cin) patch matrix of one image; zero padding.
  void im2col(const double* img, double* col) const {
    const std::size_t k = cols();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double* row = col + (y * ow + x) * k;
        for (std::size_t l = 0; l < taps.size(); ++l) {
          const long iy = static_cast<long>(y + taps[l] / kw) - ph;
          const long ix = static_cast<long>(x + taps[l] % kw) - pw;
          double* dst = row + l * cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
            std::fill_n(dst, cin, 0.0);
          } else {
            std::copy_n(img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin, cin, dst);
          }
        }
      }
    }
  }

  // Scatter-adds a patch-matrix gradient back onto the image gradient.
  void col2im(const double* col, double* img) const {
    const std::size_t k = cols();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const double* row = col + (y * ow + x) * k;
        for (std::size_t l = 0; l < taps.size(); ++l) {
          const long iy = static_cast<long>(y + taps[l] / kw) - ph;
          const long ix = static_cast<long>(x + taps[l] % kw) - pw;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
          double* dst = img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const double* src = row + l * cin;
          for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
};

}  // namespace detail

// Stride-1 cross-correlation with zero padding. Weights are (kh, kw, cin, cout),
// bias is (1, 1, 1, cout) or an invalid Var for no bias. With a mask the
// effective kernel is weights * mask and masked entries receive no gradient.
inline Var conv2d(Var x, Var w, Var bias = {}, const ConvOptions& opt = {}) {
  Tape& tape = detail::tape_of({x, w, bias});
  const Tensor4& X = x.value();
  const Tensor4& Wt = w.value();
  const Shape xs = X.shape();
  const Shape ws = Wt.shape();
  const std::size_t kh = ws.b, kw = ws.h, cin = ws.w, cout = ws.c;
  if (cin != xs.c) throw ShapeError("conv2d: input channels " + std::to_string(xs.c) + " vs kernel " + ws.str());
  if (bias.valid() && bias.value().size() != cout) throw ShapeError("conv2d: bias size mismatch");
  if ((opt.pad_h < 0 && kh % 2 == 0) || (opt.pad_w < 0 && kw % 2 == 0)) {
    throw ShapeError("conv2d: same padding needs an odd kernel, got " + ws.str());
  }
  detail::ConvGeometry geo;
  geo.h = xs.h;
  geo.w = xs.w;
  geo.cin = cin;
  geo.cout = cout;
  geo.kw = kw;
  geo.ph = opt.pad_h < 0 ? static_cast<long>(kh - 1) / 2 : opt.pad_h;
  geo.pw = opt.pad_w < 0 ? static_cast<long>(kw - 1) / 2 : opt.pad_w;
  const long oh_l = static_cast<long>(xs.h) + 2 * geo.ph - static_cast<long>(kh) + 1;
  const long ow_l = static_cast<long>(xs.w) + 2 * geo.pw - static_cast<long>(kw) + 1;
  if (oh_l <= 0 || ow_l <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());
  geo.oh = static_cast<std::size_t>(oh_l);
  geo.ow = static_cast<std::size_t>(ow_l);

  std::vector<double> mask = detail::expand_mask(opt.mask, ws);
  // Taps whose whole (cin, cout) slice is masked contribute nothing; drop them.
  for (std::size_t tap = 0; tap < kh * kw; ++tap) {
    const bool live = mask.empty() || std::any_of(mask.begin() + static_cast<std::ptrdiff_t>(tap * cin * cout),
                                                  mask.begin() + static_cast<std::ptrdiff_t>((tap + 1) * cin * cout),
                                                  [](double m) { return m != 0.0; });
    if (live) geo.taps.push_back(tap);
  }
  // Effective (live taps * cin) x cout kernel.
  detail::RowMatrix wlive(geo.cols(), cout);
  for (std::size_t l = 0; l < geo.taps.size(); ++l) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t k = (geo.taps[l] * cin + ci) * cout + co;
        wlive(static_cast<Eigen::Index>(l * cin + ci), static_cast<Eigen::Index>(co)) =
            mask.empty() ? Wt[k] : Wt[k] * mask[k];
      }
    }
  }

  Tensor4 Y({xs.b, geo.oh, geo.ow, cout});
  const auto P = static_cast<Eigen::Index>(geo.rows());
  const auto K = static_cast<Eigen::Index>(geo.cols());
  const auto N = static_cast<Eigen::Index>(cout);
  detail::RowMatrix col(P, K);
  for (std::size_t b = 0; b < xs.b; ++b) {
    detail::RowMap out(Y.ptr() + b * geo.rows() * cout, P, N);
    if (K > 0) {
      geo.im2col(X.ptr() + b * xs.h * xs.w * cin, col.data());
      out.noalias() = col * wlive;
    }
    if (bias.valid()) {
      const Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().ptr(), N);
      out.rowwise() += bv;
    }
  }

  const bool rg = detail::any_grad(tape, {x, w, bias});
  return tape.record(std::move(Y), rg, [x, w, bias, geo = std::move(geo), wlive = std::move(wlive),
                                        mask = std::move(mask)](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    const Tensor4& X = t.value(x);
    const std::size_t batch = X.shape().b;
    const std::size_t cin = geo.cin, cout = geo.cout;
    const auto P = static_cast<Eigen::Index>(geo.rows());
    const auto K = static_cast<Eigen::Index>(geo.cols());
    const auto N = static_cast<Eigen::Index>(cout);

    if (t.requires_grad(bias)) {
      Tensor4& gb = t.grad(bias);
      for (std::size_t p = 0; p < batch * geo.rows(); ++p) {
        const double* g = G.ptr() + p * cout;
        for (std::size_t co = 0; co < cout; ++co) gb[co] += g[co];
      }
    }
    if (K == 0) return;
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(w);
    detail::RowMatrix col(P, K);
    detail::RowMatrix dwlive = detail::RowMatrix::Zero(K, N);
    for (std::size_t b = 0; b < batch; ++b) {
      detail::ConstRowMap gb(G.ptr() + b * geo.rows() * cout, P, N);
      if (need_w) {
        geo.im2col(X.ptr() + b * geo.h * geo.w * cin, col.data());
        dwlive.noalias() += col.transpose() * gb;
      }
      if (need_x) {
        col.noalias() = gb * wlive.transpose();
        geo.col2im(col.data(), t.grad(x).ptr() + b * geo.h * geo.w * cin);
      }
    }
    if (need_w) {
      Tensor4& gw = t.grad(w);
      for (std::size_t l = 0; l < geo.taps.size(); ++l) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t co = 0; co < cout; ++co) {
            const std::size_t k = (geo.taps[l] * cin + ci) * cout + co;
            if (!mask.empty() && mask[k] == 0.0) continue;
            gw[k] += dwlive(static_cast<Eigen::Index>(l * cin + ci), static_cast<Eigen::Index>(co));
          }
        }
      }
    }
  });
}

// Transposed convolution (fractionally strided). Weights (k, k, cin, cout);
// output size (in - 1) * stride - 2 * pad + k.
inline Var conv_transpose2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
  Tape& tape = detail::tape_of({x, w, bias});
  const Tensor4& X = x.value();
  const Tensor4& Wt = w.value();
  const Shape xs = X.shape();
  const Shape ws = Wt.shape();
  const std::size_t kh = ws.b, kw = ws.h, cin = ws.w, cout = ws.c;
  if (cin != xs.c) throw ShapeError("conv_transpose2d: channel mismatch " + xs.str() + " vs " + ws.str());
  if (stride == 0) throw ShapeError("conv_transpose2d: zero stride");
  const long oh_l = (static_cast<long>(xs.h) - 1) * static_cast<long>(stride) - 2 * static_cast<long>(pad) + static_cast<long>(kh);
  const long ow_l = (static_cast<long>(xs.w) - 1) * static_cast<long>(stride) - 2 * static_cast<long>(pad) + static_cast<long>(kw);
  if (oh_l <= 0 || ow_l <= 0) throw ShapeError("conv_transpose2d: empty output");
  const std::size_t oh = static_cast<std::size_t>(oh_l), ow = static_cast<std::size_t>(ow_l);

  // Gather form: out(oy, ox) collects inputs iy with iy * stride - pad + ky == oy.
  auto for_each_tap = [xs, oh, ow, kh, kw, stride, pad](auto&& fn) {
    for (std::size_t b = 0; b < xs.b; ++b) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long ny = static_cast<long>(oy + pad) - static_cast<long>(ky);
            if (ny < 0 || ny % static_cast<long>(stride) != 0) continue;
            const long iy = ny / static_cast<long>(stride);
            if (iy >= static_cast<long>(xs.h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long nx = static_cast<long>(ox + pad) - static_cast<long>(kx);
              if (nx < 0 || nx % static_cast<long>(stride) != 0) continue;
              const long ix = nx / static_cast<long>(stride);
              if (ix >= static_cast<long>(xs.w)) continue;
              fn((b * oh + oy) * ow + ox, (b * xs.h + static_cast<std::size_t>(iy)) * xs.w + static_cast<std::size_t>(ix),
                 ky * kw + kx);
            }
          }
        }
      }
    }
  };

  Tensor4 Y({xs.b, oh, ow, cout});
  if (bias.valid()) {
    const Tensor4& B = bias.value();
    for (std::size_t p = 0; p < xs.b * oh * ow; ++p) std::copy_n(B.ptr(), cout, Y.ptr() + p * cout);
  }
  for_each_tap([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
    double* o = Y.ptr() + opix * cout;
    const double* ip = X.ptr() + ipix * cin;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* wr = Wt.ptr() + (tap * cin + ci) * cout;
      for (std::size_t co = 0; co < cout; ++co) o[co] += ip[ci] * wr[co];
    }
  });

  const bool rg = detail::any_grad(tape, {x, w, bias});
  return tape.record(std::move(Y), rg, [x, w, bias, for_each_tap, cin, cout](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    const Tensor4& X = t.value(x);
    const Tensor4& Wt = t.value(w);
    if (t.requires_grad(bias)) {
      Tensor4& gb = t.grad(bias);
      for (std::size_t p = 0; p < G.size() / cout; ++p) {
        for (std::size_t co = 0; co < cout; ++co) gb[co] += G[p * cout + co];
      }
    }
    double* gx = t.requires_grad(x) ? t.grad(x).ptr() : nullptr;
    double* gw = t.requires_grad(w) ? t.grad(w).ptr() : nullptr;
    for_each_tap([&](std::size_t opix, std::size_t ipix, std::size_t tap) {
      const double* g = G.ptr() + opix * cout;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* wr = Wt.ptr() + (tap * cin + ci) * cout;
        if (gx != nullptr) {
          double acc = 0.0;
          for (std::size_t co = 0; co < cout; ++co) acc += g[co] * wr[co];
          gx[ipix * cin + ci] += acc;
        }
        if (gw != nullptr) {
          const double v = X[ipix * cin + ci];
          double* gr = gw + (tap * cin + ci) * cout;
          for (std::size_t co = 0; co < cout; ++co) gr[co] += v * g[co];
        }
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

// 2x2 window, stride 2. Ties route the gradient to the first maximum in scan order.
inline Var max_pool2x2(Var x) {
  Tape& tape = detail::tape_of({x});
  const Tensor4& X = x.value();
  const Shape s = X.shape();
  const std::size_t oh = s.h / 2, ow = s.w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("max_pool2x2: input too small " + s.str());
  Tensor4 Y({s.b, oh, ow, s.c});
  std::vector<std::size_t> argmax(Y.size());
  for (std::size_t b = 0; b < s.b; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        for (std::size_t c = 0; c < s.c; ++c) {
          std::size_t best = X.offset(b, 2 * y, 2 * xo, c);
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t k = X.offset(b, 2 * y + dy, 2 * xo + dx, c);
              if (X[k] > X[best]) best = k;
            }
          }
          const std::size_t o = Y.offset(b, y, xo, c);
          Y[o] = X[best];
          argmax[o] = best;
        }
      }
    }
  }
  const bool rg = tape.requires_grad(x);
  return tape.record(std::move(Y), rg, [x, argmax = std::move(argmax)](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    Tensor4& gx = t.grad(x);
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += G[o];
  });
}

namespace detail {

// Half-open [start, end) of cell i when `in` items are split into `out` cells.
inline std::pair<std::size_t, std::size_t> partition(std::size_t i, std::size_t in, std::size_t out) {
  return {i * in / out, (i + 1) * in / out};
}

}  // namespace detail

// Mean over near-equal, non-overlapping partitions of rows and columns.
inline Var adaptive_avg_pool(Var x, std::size_t out_h, std::size_t out_w) {
  Tape& tape = detail::tape_of({x});
  const Tensor4& X = x.value();
  const Shape s = X.shape();
  if (out_h == 0 || out_w == 0) throw ShapeError("adaptive_avg_pool: zero-sized output");
  if (out_h > s.h || out_w > s.w) {
    throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " larger than input " + s.str());
  }
  Tensor4 Y({s.b, out_h, out_w, s.c});
  for (std::size_t b = 0; b < s.b; ++b) {
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto [r0, r1] = detail::partition(i, s.h, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto [c0, c1] = detail::partition(j, s.w, out_w);
        const double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
        double* o = Y.ptr() + Y.offset(b, i, j, 0);
        for (std::size_t r = r0; r < r1; ++r) {
          for (std::size_t c = c0; c < c1; ++c) {
            const double* ip = X.ptr() + X.offset(b, r, c, 0);
            for (std::size_t ch = 0; ch < s.c; ++ch) o[ch] += ip[ch];
          }
        }
        for (std::size_t ch = 0; ch < s.c; ++ch) o[ch] *= inv;
      }
    }
  }
  const bool rg = tape.requires_grad(x);
  return tape.record(std::move(Y), rg, [x, out_h, out_w](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    Tensor4& gx = t.grad(x);
    const Shape s = gx.shape();
    for (std::size_t b = 0; b < s.b; ++b) {
      for (std::size_t i = 0; i < out_h; ++i) {
        const auto [r0, r1] = detail::partition(i, s.h, out_h);
        for (std::size_t j = 0; j < out_w; ++j) {
          const auto [c0, c1] = detail::partition(j, s.w, out_w);
          const double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
          const double* g = G.ptr() + G.offset(b, i, j, 0);
          for (std::size_t r = r0; r < r1; ++r) {
            for (std::size_t c = c0; c < c1; ++c) {
              double* gp = gx.ptr() + gx.offset(b, r, c, 0);
              for (std::size_t ch = 0; ch < s.c; ++ch) gp[ch] += g[ch] * inv;
            }
          }
        }
      }
    }
  });
}

namespace detail {

struct LerpIndex {
  std::size_t i0;
  std::size_t i1;
  double frac;
};

// Half-pixel-center mapping src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
inline std::vector<LerpIndex> lerp_table(std::size_t in, std::size_t out) {
  std::vector<LerpIndex> table(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    table[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return table;
}

}  // namespace detail

inline Var bilinear_upsample(Var x, std::size_t out_h, std::size_t out_w) {
  Tape& tape = detail::tape_of({x});
  const Tensor4& X = x.value();
  const Shape s = X.shape();
  if (out_h < s.h || out_w < s.w) {
    throw ShapeError("bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " smaller than input " + s.str());
  }
  const auto ry = detail::lerp_table(s.h, out_h);
  const auto rx = detail::lerp_table(s.w, out_w);
  Tensor4 Y({s.b, out_h, out_w, s.c});
  for (std::size_t b = 0; b < s.b; ++b) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& ly = ry[y];
      for (std::size_t xo = 0; xo < out_w; ++xo) {
        const auto& lx = rx[xo];
        const double* p00 = X.ptr() + X.offset(b, ly.i0, lx.i0, 0);
        const double* p01 = X.ptr() + X.offset(b, ly.i0, lx.i1, 0);
        const double* p10 = X.ptr() + X.offset(b, ly.i1, lx.i0, 0);
        const double* p11 = X.ptr() + X.offset(b, ly.i1, lx.i1, 0);
        double* o = Y.ptr() + Y.offset(b, y, xo, 0);
        for (std::size_t c = 0; c < s.c; ++c) {
          const double top = (1.0 - lx.frac) * p00[c] + lx.frac * p01[c];
          const double bot = (1.0 - lx.frac) * p10[c] + lx.frac * p11[c];
          o[c] = (1.0 - ly.frac) * top + ly.frac * bot;
        }
      }
    }
  }
  const bool rg = tape.requires_grad(x);
  return tape.record(std::move(Y), rg, [x, ry, rx](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    Tensor4& gx = t.grad(x);
    const Shape s = gx.shape();
    for (std::size_t b = 0; b < s.b; ++b) {
      for (std::size_t y = 0; y < ry.size(); ++y) {
        const auto& ly = ry[y];
        for (std::size_t xo = 0; xo < rx.size(); ++xo) {
          const auto& lx = rx[xo];
          const double* g = G.ptr() + G.offset(b, y, xo, 0);
          double* p00 = gx.ptr() + gx.offset(b, ly.i0, lx.i0, 0);
          double* p01 = gx.ptr() + gx.offset(b, ly.i0, lx.i1, 0);
          double* p10 = gx.ptr() + gx.offset(b, ly.i1, lx.i0, 0);
          double* p11 = gx.ptr() + gx.offset(b, ly.i1, lx.i1, 0);
          for (std::size_t c = 0; c < s.c; ++c) {
            p00[c] += g[c] * (1.0 - ly.frac) * (1.0 - lx.frac);
            p01[c] += g[c] * (1.0 - ly.frac) * lx.frac;
            p10[c] += g[c] * ly.frac * (1.0 - lx.frac);
            p11[c] += g[c] * ly.frac * lx.frac;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  Tape& tape = detail::tape_of({a, b});
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor4 Y = a.value();
  const Tensor4& B = b.value();
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] += B[i];
  return tape.record(std::move(Y), detail::any_grad(tape, {a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Tensor4& g = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::tape_of({a, b});
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor4 Y = a.value();
  const Tensor4& B = b.value();
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] -= B[i];
  return tape.record(std::move(Y), detail::any_grad(tape, {a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    if (t.requires_grad(a)) {
      Tensor4& g = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
    }
    if (t.requires_grad(b)) {
      Tensor4& g = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= G[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& tape = detail::tape_of({a, b});
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor4 Y = a.value();
  const Tensor4& B = b.value();
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] *= B[i];
  return tape.record(std::move(Y), detail::any_grad(tape, {a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    if (t.requires_grad(a)) {
      const Tensor4& B = t.value(b);
      Tensor4& g = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * B[i];
    }
    if (t.requires_grad(b)) {
      const Tensor4& A = t.value(a);
      Tensor4& g = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * A[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& tape = detail::tape_of({a});
  Tensor4 Y = a.value();
  for (double& v : Y.data()) v *= s;
  return tape.record(std::move(Y), tape.requires_grad(a), [a, s](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    Tensor4& g = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * s;
  });
}

// Gradient is zero where the input is exactly 0.
inline Var relu(Var a) {
  Tape& tape = detail::tape_of({a});
  Tensor4 Y = a.value();
  for (double& v : Y.data()) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(Y), tape.requires_grad(a), [a](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    const Tensor4& A = t.value(a);
    Tensor4& g = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (A[i] > 0.0) g[i] += G[i];
    }
  });
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Tape& tape = detail::tape_of({a});
  Tensor4 Y = a.value();
  for (double& v : Y.data()) v = sigmoid(v);
  return tape.record(std::move(Y), tape.requires_grad(a), [a](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    const Tensor4& Y = t.value(self);
    Tensor4& g = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * Y[i] * (1.0 - Y[i]);
  });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

inline Var concat_channels(const std::vector<Var>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  Tape& tape = *inputs.front().tape;
  const Shape s0 = inputs.front().shape();
  std::size_t total = 0;
  bool rg = false;
  for (const Var& v : inputs) {
    if (v.tape != &tape) throw InvariantError("concat_channels: operands on different tapes");
    const Shape s = v.shape();
    if (s.b != s0.b || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: spatial mismatch " + s.str() + " vs " + s0.str());
    }
    total += s.c;
    rg = rg || tape.requires_grad(v);
  }
  Tensor4 Y({s0.b, s0.h, s0.w, total});
  const std::size_t pixels = s0.b * s0.h * s0.w;
  std::size_t off = 0;
  for (const Var& v : inputs) {
    const Tensor4& X = v.value();
    const std::size_t c = X.shape().c;
    for (std::size_t p = 0; p < pixels; ++p) std::copy_n(X.ptr() + p * c, c, Y.ptr() + p * total + off);
    off += c;
  }
  return tape.record(std::move(Y), rg, [inputs, pixels, total](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    std::size_t off = 0;
    for (const Var& v : inputs) {
      const std::size_t c = t.value(v).shape().c;
      if (t.requires_grad(v)) {
        Tensor4& g = t.grad(v);
        for (std::size_t p = 0; p < pixels; ++p) {
          for (std::size_t k = 0; k < c; ++k) g[p * c + k] += G[p * total + off + k];
        }
      }
      off += c;
    }
  });
}

// (B, H, W, C) -> (B, 1, 1, C)
inline Var global_avg_pool(Var x) {
  Tape& tape = detail::tape_of({x});
  const Tensor4& X = x.value();
  const Shape s = X.shape();
  if (s.h * s.w == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor4 Y({s.b, 1, 1, s.c});
  const double inv = 1.0 / static_cast<double>(s.h * s.w);
  for (std::size_t b = 0; b < s.b; ++b) {
    for (std::size_t p = 0; p < s.h * s.w; ++p) {
      const double* ip = X.ptr() + (b * s.h * s.w + p) * s.c;
      for (std::size_t c = 0; c < s.c; ++c) Y[b * s.c + c] += ip[c];
    }
    for (std::size_t c = 0; c < s.c; ++c) Y[b * s.c + c] *= inv;
  }
  return tape.record(std::move(Y), tape.requires_grad(x), [x, inv](Tape& t, std::size_t self) {
    const Tensor4& G = t.grad(self);
    Tensor4& g = t.grad(x);
    const Shape s = g.shape();
    for (std::size_t b = 0; b < s.b; ++b) {
      for (std::size_t p = 0; p < s.h * s.w; ++p) {
        double* gp = g.ptr() + (b * s.h * s.w + p) * s.c;
        for (std::size_t c = 0; c < s.c; ++c) gp[c] += G[b * s.c + c] * inv;
      }
    }
  });
}

// Affine map on per-item flattened features: (B, h, w, c) with h*w*c == cin,
// weights (1, 1, cin, cout), bias (1, 1, 1, cout). Output (B, 1, 1, cout).
inline Var linear(Var x, Var w, Var bias = {}) {
  Tape& tape = detail::tape_of({x, w, bias});
  const Tensor4& X = x.value();
  const Tensor4& Wt = w.value();
  const std::size_t batch = X.shape().b;
  const std::size_t cin = Wt.shape().w, cout = Wt.shape().c;
  if (Wt.shape().b != 1 || Wt.shape().h != 1 || X.size() != batch * cin) {
    throw ShapeError("linear: input " + X.shape().str() + " incompatible with weights " + Wt.shape().str());
  }
  if (bias.valid() && bias.value().size() != cout) throw ShapeError("linear: bias size mismatch");
  Tensor4 Y({batch, 1, 1, cout});
  for (std::size_t b = 0; b < batch; ++b) {
    double* o = Y.ptr() + b * cout;
    if (bias.valid()) std::copy_n(bias.value().ptr(), cout, o);
    for (std::size_t i = 0; i < cin; ++i) {
      const double v = X[b * cin + i];
      for (std::size_t j = 0; j < cout; ++j) o[j] += v * Wt[i * cout + j];
    }
  }
  return tape.record(std::move(Y), detail::any_grad(tape, {x, w, bias}),
                     [x, w, bias, batch, cin, cout](Tape& t, std::size_t self) {
                       const Tensor4& G = t.grad(self);
                       if (t.requires_grad(bias)) {
                         Tensor4& gb = t.grad(bias);
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t j = 0; j < cout; ++j) gb[j] += G[b * cout + j];
                         }
                       }
                       if (t.requires_grad(x)) {
                         const Tensor4& Wt = t.value(w);
                         Tensor4& gx = t.grad(x);
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t i = 0; i < cin; ++i) {
                             double acc = 0.0;
                             for (std::size_t j = 0; j < cout; ++j) acc += G[b * cout + j] * Wt[i * cout + j];
                             gx[b * cin + i] += acc;
                           }
                         }
                       }
                       if (t.requires_grad(w)) {
                         const Tensor4& X = t.value(x);
                         Tensor4& gw = t.grad(w);
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t i = 0; i < cin; ++i) {
                             for (std::size_t j = 0; j < cout; ++j) gw[i * cout + j] += X[b * cin + i] * G[b * cout + j];
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions to a scalar (1, 1, 1, 1)
// ---------------------------------------------------------------------------

inline Var sum(Var x) {
  Tape& tape = detail::tape_of({x});
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return tape.record(Tensor4({1, 1, 1, 1}, acc), tape.requires_grad(x), [x](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(x).data()) v += g;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// Selects one element as a scalar.
inline Var pick(Var x, std::size_t b, std::size_t y, std::size_t xi, std::size_t c) {
  Tape& tape = detail::tape_of({x});
  const Tensor4& X = x.value();
  const Shape s = X.shape();
  if (b >= s.b || y >= s.h || xi >= s.w || c >= s.c) throw ShapeError("pick: index outside " + s.str());
  const std::size_t k = X.offset(b, y, xi, c);
  return tape.record(Tensor4({1, 1, 1, 1}, X[k]), tape.requires_grad(x), [x, k](Tape& t, std::size_t self) {
    t.grad(x)[k] += t.grad(self)[0];
  });
}

}  // namespace cuecan
