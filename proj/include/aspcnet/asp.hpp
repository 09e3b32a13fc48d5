#ifndef ASPCNET_ASP_HPP
#define ASPCNET_ASP_HPP

#include <cmath>
#include <utility>
#include <vector>

#include "aspcnet/ops.hpp"
#include "aspcnet/rng.hpp"
#include "aspcnet/tape.hpp"

namespace aspcnet {

// ---------------------------------------------------------------------------
// Dilated sampling grid
// ---------------------------------------------------------------------------

/// Integer sampling pattern of a p x q kernel dilated by `rate`, centered on
/// the output pixel. Exactly p*q points spanning an extent of
/// p + (p-1)(rate-1) rows by q + (q-1)(rate-1) columns.
struct DilatedGrid {
  int p = 0, q = 0, rate = 1;
  std::vector<int> dy, dx;  // centered displacements, row-major over (ky,kx)

  int extent_h() const { return p + (p - 1) * (rate - 1); }
  int extent_w() const { return q + (q - 1) * (rate - 1); }
  int points() const { return p * q; }
};

inline DilatedGrid build_dilated_grid(int p, int q, int rate) {
  check(p >= 1 && q >= 1, "dilated grid: kernel extents must be positive");
  check(p % 2 == 1 && q % 2 == 1, "dilated grid: kernel extents must be odd");
  check(rate >= 1, "dilated grid: dilation rate must be >= 1");
  DilatedGrid g;
  g.p = p;
  g.q = q;
  g.rate = rate;
  g.dy.reserve(static_cast<std::size_t>(p) * q);
  g.dx.reserve(static_cast<std::size_t>(p) * q);
  for (int ky = 0; ky < p; ++ky)
    for (int kx = 0; kx < q; ++kx) {
      g.dy.push_back((ky - (p - 1) / 2) * rate);
      g.dx.push_back((kx - (q - 1) / 2) * rate);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear interpolation helpers
// ---------------------------------------------------------------------------

/// Located fractional coordinate: floor cell, fractional parts, and whether
/// the clamp to [0,H-1]x[0,W-1] saturated (saturated axes get zero gradient).
template <typename S>
struct BilinearPoint {
  int y0, x0;
  S fy, fx;
  bool y_sat, x_sat;
};

template <typename S>
inline BilinearPoint<S> bilinear_locate(S y, S x, int h, int w) {
  if (std::isnan(static_cast<double>(y)) || std::isnan(static_cast<double>(x)))
    throw std::runtime_error("bilinear: NaN coordinate");
  BilinearPoint<S> p;
  p.y_sat = y < S(0) || y > S(h - 1);
  p.x_sat = x < S(0) || x > S(w - 1);
  const S yc = std::min(std::max(y, S(0)), S(h - 1));
  const S xc = std::min(std::max(x, S(0)), S(w - 1));
  p.y0 = static_cast<int>(std::floor(yc));
  p.x0 = static_cast<int>(std::floor(xc));
  if (p.y0 > h - 1) p.y0 = h - 1;
  if (p.x0 > w - 1) p.x0 = w - 1;
  p.fy = yc - static_cast<S>(p.y0);
  p.fx = xc - static_cast<S>(p.x0);
  return p;
}

// ---------------------------------------------------------------------------
// asp_sample: the ASP gather. For every output pixel and every grid point,
// samples the input at (grid position + learned fractional offset) by
// bilinear interpolation over the zero-padded plane and scales the value by
// the modulation mask. Output (N, H', W', K, C).
//
// Sampling support: coordinates saturate outside (-1, H) x (-1, W) — the
// value and its coordinate gradient are both zero there, and out-of-map
// corners contribute zero inside the band. With zero offsets this reduces
// bit-exactly to a zero-padded dilated convolution gather.
//
// offsets: (N, H', W', 2K), channel pairs (d_row, d_col) per grid point.
// masks:   (N, H', W', K); pass an invalid Var for unit masks.
// Padding is "same": H' = ceil(H / stride), grid centers laid out over the
// zero-padded frame so the extent matches a dilated convolution exactly.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> asp_sample(Var<S> input, Var<S> offsets, Var<S> masks, const DilatedGrid& grid,
                  int stride) {
  Tape<S>& t = detail::tape_of(input, offsets);
  const bool has_mask = masks.valid();
  if (has_mask) check(masks.tape == &t, "asp_sample: masks on a different tape");
  const Tensor<S>& in = t.value(input);
  const Tensor<S>& off = t.value(offsets);
  check(in.rank() == 4, "asp_sample: input must be (N,H,W,C)");
  const int batch = in.shape[0], h = in.shape[1], w = in.shape[2], c = in.shape[3];
  const int k = grid.points();
  const Conv2dGeometry geo =
      conv2d_geometry(h, w, grid.extent_h(), grid.extent_w(), stride, 1, Padding::same_zero);
  check(off.shape == Shape({batch, geo.out_h, geo.out_w, 2 * k}),
        "asp_sample: offsets must be " +
            shape_str({batch, geo.out_h, geo.out_w, 2 * k}) + ", got " + shape_str(off.shape));
  if (has_mask)
    check(t.value(masks).shape == Shape({batch, geo.out_h, geo.out_w, k}),
          "asp_sample: masks must be " + shape_str({batch, geo.out_h, geo.out_w, k}));

  const int cy0 = -geo.pad_top + (grid.extent_h() - 1) / 2;
  const int cx0 = -geo.pad_left + (grid.extent_w() - 1) / 2;

  Tensor<S> out({batch, geo.out_h, geo.out_w, k, c});
  {
    const S* in_p = in.ptr();
    const S* off_p = off.ptr();
    const S* m_p = has_mask ? t.value(masks).ptr() : nullptr;
    S* out_p = out.ptr();
    parallel_for(batch, [&](int n) {
      const S* in_n = in_p + static_cast<std::size_t>(n) * h * w * c;
      for (int oy = 0; oy < geo.out_h; ++oy)
        for (int ox = 0; ox < geo.out_w; ++ox) {
          const std::size_t px =
              (static_cast<std::size_t>(n) * geo.out_h + oy) * geo.out_w + ox;
          const S* off_px = off_p + px * 2 * k;
          for (int ki = 0; ki < k; ++ki) {
            const S m = has_mask ? m_p[px * k + ki] : S(1);
            const S y = static_cast<S>(oy * stride + cy0 + grid.dy[static_cast<std::size_t>(ki)]) +
                        off_px[2 * ki];
            const S x = static_cast<S>(ox * stride + cx0 + grid.dx[static_cast<std::size_t>(ki)]) +
                        off_px[2 * ki + 1];
            S* o = out_p + (px * k + ki) * c;
            // NaN-safe: a coordinate outside the support samples zero.
            if (!(y > S(-1) && y < S(h) && x > S(-1) && x < S(w))) {
              for (int ch = 0; ch < c; ++ch) o[ch] = S(0);
              continue;
            }
            const int y0 = static_cast<int>(std::floor(y));
            const int x0 = static_cast<int>(std::floor(x));
            const S fy = y - static_cast<S>(y0);
            const S fx = x - static_cast<S>(x0);
            const S w00 = (S(1) - fy) * (S(1) - fx);
            const S w01 = (S(1) - fy) * fx;
            const S w10 = fy * (S(1) - fx);
            const S w11 = fy * fx;
            const bool y0_ok = y0 >= 0, y1_ok = y0 + 1 <= h - 1;
            const bool x0_ok = x0 >= 0, x1_ok = x0 + 1 <= w - 1;
            const S* r0 = in_n + (static_cast<std::size_t>(std::max(y0, 0)) * w +
                                  std::max(x0, 0)) * c;
            if (y0_ok && y1_ok && x0_ok && x1_ok) {
              const S* r1 = r0 + static_cast<std::size_t>(w) * c;
              for (int ch = 0; ch < c; ++ch)
                o[ch] = m * (w00 * r0[ch] + w01 * r0[c + ch] + w10 * r1[ch] + w11 * r1[c + ch]);
            } else {
              for (int ch = 0; ch < c; ++ch) {
                S v = 0;
                if (y0_ok && x0_ok) v += w00 * in_n[(static_cast<std::size_t>(y0) * w + x0) * c + ch];
                if (y0_ok && x1_ok)
                  v += w01 * in_n[(static_cast<std::size_t>(y0) * w + x0 + 1) * c + ch];
                if (y1_ok && x0_ok)
                  v += w10 * in_n[(static_cast<std::size_t>(y0 + 1) * w + x0) * c + ch];
                if (y1_ok && x1_ok)
                  v += w11 * in_n[(static_cast<std::size_t>(y0 + 1) * w + x0 + 1) * c + ch];
                o[ch] = m * v;
              }
            }
          }
        }
    });
  }

  bool rg = t.requires_grad(input) || t.requires_grad(offsets) ||
            (has_mask && t.requires_grad(masks));
  const int ii = input.node, oi = offsets.node, mi = has_mask ? masks.node : -1;
  typename Tape<S>::BackwardFn fn;
  if (rg) {
    DilatedGrid grid_c = grid;
    fn = [ii, oi, mi, batch, h, w, c, k, geo, cy0, cx0, stride, grid_c](
             Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const Tensor<S>& in = t.value(ii);
      const Tensor<S>& off = t.value(oi);
      const bool has_mask = mi >= 0;
      const S* in_p = in.ptr();
      const S* off_p = off.ptr();
      const S* m_p = has_mask ? t.value(mi).ptr() : nullptr;
      const S* g_p = g.ptr();
      const bool want_in = t.requires_grad(ii);
      const bool want_off = t.requires_grad(oi);
      const bool want_mask = has_mask && t.requires_grad(mi);
      S* din_p = want_in ? t.grad_buffer(ii).ptr() : nullptr;
      S* doff_p = want_off ? t.grad_buffer(oi).ptr() : nullptr;
      S* dm_p = want_mask ? t.grad_buffer(mi).ptr() : nullptr;
      // d_input scatters overlap across output pixels of one sample but not
      // across samples, so the batch loop is safe to parallelize.
      parallel_for(batch, [&](int n) {
        const S* in_n = in_p + static_cast<std::size_t>(n) * h * w * c;
        S* din_n = want_in ? din_p + static_cast<std::size_t>(n) * h * w * c : nullptr;
        for (int oy = 0; oy < geo.out_h; ++oy)
          for (int ox = 0; ox < geo.out_w; ++ox) {
            const std::size_t px =
                (static_cast<std::size_t>(n) * geo.out_h + oy) * geo.out_w + ox;
            const S* off_px = off_p + px * 2 * k;
            for (int ki = 0; ki < k; ++ki) {
              const S m = has_mask ? m_p[px * k + ki] : S(1);
              const S y =
                  static_cast<S>(oy * stride + cy0 + grid_c.dy[static_cast<std::size_t>(ki)]) +
                  off_px[2 * ki];
              const S x =
                  static_cast<S>(ox * stride + cx0 + grid_c.dx[static_cast<std::size_t>(ki)]) +
                  off_px[2 * ki + 1];
              // Saturated outside the support: value and gradients all zero.
              if (!(y > S(-1) && y < S(h) && x > S(-1) && x < S(w))) continue;
              const int y0 = static_cast<int>(std::floor(y));
              const int x0 = static_cast<int>(std::floor(x));
              const S fy = y - static_cast<S>(y0);
              const S fx = x - static_cast<S>(x0);
              const S w00 = (S(1) - fy) * (S(1) - fx);
              const S w01 = (S(1) - fy) * fx;
              const S w10 = fy * (S(1) - fx);
              const S w11 = fy * fx;
              const bool c00 = y0 >= 0 && x0 >= 0;
              const bool c01 = y0 >= 0 && x0 + 1 <= w - 1;
              const bool c10 = y0 + 1 <= h - 1 && x0 >= 0;
              const bool c11 = y0 + 1 <= h - 1 && x0 + 1 <= w - 1;
              // Indices are only formed for corners inside the map.
              const std::size_t i00 =
                  c00 ? (static_cast<std::size_t>(y0) * w + x0) * c : 0;
              const std::size_t i01 =
                  c01 ? (static_cast<std::size_t>(y0) * w + x0 + 1) * c : 0;
              const std::size_t i10 =
                  c10 ? (static_cast<std::size_t>(y0 + 1) * w + x0) * c : 0;
              const std::size_t i11 =
                  c11 ? (static_cast<std::size_t>(y0 + 1) * w + x0 + 1) * c : 0;
              const S* go = g_p + (px * k + ki) * c;
              S dmask = 0, dy_acc = 0, dx_acc = 0;
              for (int ch = 0; ch < c; ++ch) {
                const S v00 = c00 ? in_n[i00 + static_cast<std::size_t>(ch)] : S(0);
                const S v01 = c01 ? in_n[i01 + static_cast<std::size_t>(ch)] : S(0);
                const S v10 = c10 ? in_n[i10 + static_cast<std::size_t>(ch)] : S(0);
                const S v11 = c11 ? in_n[i11 + static_cast<std::size_t>(ch)] : S(0);
                const S gm = go[ch] * m;
                if (want_mask)
                  dmask += go[ch] * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11);
                if (want_off) {
                  dy_acc += gm * (-(S(1) - fx) * v00 - fx * v01 + (S(1) - fx) * v10 + fx * v11);
                  dx_acc += gm * (-(S(1) - fy) * v00 + (S(1) - fy) * v01 - fy * v10 + fy * v11);
                }
                if (want_in) {
                  if (c00) din_n[i00 + static_cast<std::size_t>(ch)] += gm * w00;
                  if (c01) din_n[i01 + static_cast<std::size_t>(ch)] += gm * w01;
                  if (c10) din_n[i10 + static_cast<std::size_t>(ch)] += gm * w10;
                  if (c11) din_n[i11 + static_cast<std::size_t>(ch)] += gm * w11;
                }
              }
              if (want_mask) dm_p[px * k + ki] += dmask;
              if (want_off) {
                doff_p[px * 2 * k + 2 * ki] += dy_acc;
                doff_p[px * 2 * k + 2 * ki + 1] += dx_acc;
              }
            }
          }
      });
    };
  }
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

/// Contracts gathered samples (N,H,W,K,C) with a kernel (p,q,C,F) whose
/// row-major (ky,kx) order matches the grid's point order.
template <typename S>
Var<S> contract_samples(Var<S> samples, Var<S> kernel) {
  Tape<S>& t = detail::tape_of(samples, kernel);
  const Shape& ss = t.value(samples).shape;
  const Shape& ks = t.value(kernel).shape;
  check(ss.size() == 5 && ks.size() == 4, "contract_samples: bad ranks");
  check(ss[3] == ks[0] * ks[1] && ss[4] == ks[2],
        "contract_samples: sample/kernel geometry mismatch");
  const int rows = ss[0] * ss[1] * ss[2];
  const int inner = ss[3] * ss[4];
  Var<S> flat = matmul(reshape(samples, {rows, inner}), reshape(kernel, {inner, ks[3]}));
  return reshape(flat, {ss[0], ss[1], ss[2], ks[3]});
}

// ---------------------------------------------------------------------------
// Convolution variants built on the two sampling paths
// ---------------------------------------------------------------------------

/// Dilated convolution: integer-grid gather with zero padding. rate = 1 is a
/// regular convolution.
template <typename S>
Var<S> dilated_conv_forward(Var<S> input, Var<S> kernel, int rate, int stride,
                            Padding pad = Padding::same_zero) {
  return conv2d(input, kernel, stride, pad, rate);
}

/// Deformable convolution: explicit per-pixel fractional offsets (2*p*q
/// channels), bilinear sampling, no modulation. Stride 1, same padding.
template <typename S>
Var<S> deformable_conv_forward(Var<S> input, Var<S> kernel, Var<S> offsets) {
  Tape<S>& t = detail::tape_of(input, kernel);
  const Shape& ks = t.value(kernel).shape;
  check(ks.size() == 4, "deformable_conv: kernel must be (p,q,Cin,Cout)");
  DilatedGrid grid = build_dilated_grid(ks[0], ks[1], 1);
  Var<S> samples = asp_sample(input, offsets, Var<S>{}, grid, 1);
  return contract_samples(samples, kernel);
}

// ---------------------------------------------------------------------------
// ASP convolution layer: dilated grid + learned offsets and masks produced by
// zero-initialized 3x3 branch convolutions over the same input, so the layer
// starts out exactly equal to a plain dilated convolution.
// ---------------------------------------------------------------------------

template <typename S>
void glorot_uniform_fill(Tensor<S>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.data) v = static_cast<S>(rng.uniform(-limit, limit));
}

template <typename S>
struct AspConvLayer {
  DilatedGrid grid;
  int stride = 1;
  Param<S> weight;         // (p,q,Cin,Cout)
  Param<S> bias;           // (Cout)
  Param<S> offset_weight;  // (3,3,Cin,2K) zero at init
  Param<S> offset_bias;    // (2K) zero at init
  Param<S> mask_weight;    // (3,3,Cin,K) zero at init
  Param<S> mask_bias;      // (K) zero at init

  static AspConvLayer make(const std::string& name, int p, int q, int c_in, int c_out, int rate,
                           int stride, Rng& rng) {
    AspConvLayer l;
    l.grid = build_dilated_grid(p, q, rate);
    l.stride = stride;
    const int k = l.grid.points();
    l.weight = Param<S>(name + ".weight", Tensor<S>({p, q, c_in, c_out}));
    glorot_uniform_fill(l.weight.value, static_cast<std::size_t>(p) * q * c_in,
                        static_cast<std::size_t>(p) * q * c_out, rng);
    l.bias = Param<S>(name + ".bias", Tensor<S>({c_out}));
    l.offset_weight = Param<S>(name + ".offset_weight", Tensor<S>({3, 3, c_in, 2 * k}));
    l.offset_bias = Param<S>(name + ".offset_bias", Tensor<S>({2 * k}));
    l.mask_weight = Param<S>(name + ".mask_weight", Tensor<S>({3, 3, c_in, k}));
    l.mask_bias = Param<S>(name + ".mask_bias", Tensor<S>({k}));
    return l;
  }

  /// Offsets and masks come from branch convolutions on the layer input;
  /// masks are 2*sigmoid(raw), exactly 1 where the raw response is zero.
  Var<S> forward(Tape<S>& t, Var<S> input) {
    Var<S> wv = t.param(weight);
    Var<S> off = bias_add(conv2d(input, t.param(offset_weight), stride, Padding::same_zero),
                          t.param(offset_bias));
    Var<S> mraw = bias_add(conv2d(input, t.param(mask_weight), stride, Padding::same_zero),
                           t.param(mask_bias));
    Var<S> masks = scale(sigmoid(mraw), S(2));
    Var<S> samples = asp_sample(input, off, masks, grid, stride);
    return bias_add(contract_samples(samples, wv), t.param(bias));
  }

  std::vector<Param<S>*> params() {
    return {&weight, &bias, &offset_weight, &offset_bias, &mask_weight, &mask_bias};
  }
};

// ---------------------------------------------------------------------------
// Standalone bilinear sampling op (map (H,W,C), coords (2) = [row, col]).
// Differentiable in both the map values and the coordinates.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> bilinear_sample(Var<S> map, Var<S> coords) {
  Tape<S>& t = detail::tape_of(map, coords);
  const Tensor<S>& m = t.value(map);
  const Tensor<S>& cv = t.value(coords);
  check(m.rank() == 3, "bilinear_sample: map must be (H,W,C)");
  check(cv.size() == 2, "bilinear_sample: coords must hold [row, col]");
  const int h = m.shape[0], w = m.shape[1], c = m.shape[2];
  const auto bp = bilinear_locate(cv.data[0], cv.data[1], h, w);
  const S w00 = (S(1) - bp.fy) * (S(1) - bp.fx);
  const S w01 = (S(1) - bp.fy) * bp.fx;
  const S w10 = bp.fy * (S(1) - bp.fx);
  const S w11 = bp.fy * bp.fx;
  const bool y1_ok = bp.y0 + 1 <= h - 1;
  const bool x1_ok = bp.x0 + 1 <= w - 1;
  Tensor<S> out({c});
  for (int ch = 0; ch < c; ++ch) {
    S v = w00 * m.at({bp.y0, bp.x0, ch});
    if (x1_ok) v += w01 * m.at({bp.y0, bp.x0 + 1, ch});
    if (y1_ok) {
      v += w10 * m.at({bp.y0 + 1, bp.x0, ch});
      if (x1_ok) v += w11 * m.at({bp.y0 + 1, bp.x0 + 1, ch});
    }
    out.data[static_cast<std::size_t>(ch)] = v;
  }
  bool rg = t.requires_grad(map) || t.requires_grad(coords);
  const int mi = map.node, ci = coords.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [mi, ci, h, w, c, bp, w00, w01, w10, w11, y1_ok, x1_ok](Tape<S>& t, const Tensor<S>&,
                                                                 const Tensor<S>& g) {
      const Tensor<S>& m = t.value(mi);
      if (t.requires_grad(mi)) {
        Tensor<S>& dm = t.grad_buffer(mi);
        for (int ch = 0; ch < c; ++ch) {
          const S gv = g.data[static_cast<std::size_t>(ch)];
          dm.at({bp.y0, bp.x0, ch}) += gv * w00;
          if (x1_ok) dm.at({bp.y0, bp.x0 + 1, ch}) += gv * w01;
          if (y1_ok) {
            dm.at({bp.y0 + 1, bp.x0, ch}) += gv * w10;
            if (x1_ok) dm.at({bp.y0 + 1, bp.x0 + 1, ch}) += gv * w11;
          }
        }
      }
      if (t.requires_grad(ci)) {
        Tensor<S>& dc = t.grad_buffer(ci);
        S dy = 0, dx = 0;
        for (int ch = 0; ch < c; ++ch) {
          const S v00 = m.at({bp.y0, bp.x0, ch});
          const S v01 = x1_ok ? m.at({bp.y0, bp.x0 + 1, ch}) : S(0);
          const S v10 = y1_ok ? m.at({bp.y0 + 1, bp.x0, ch}) : S(0);
          const S v11 = (y1_ok && x1_ok) ? m.at({bp.y0 + 1, bp.x0 + 1, ch}) : S(0);
          const S gv = g.data[static_cast<std::size_t>(ch)];
          dy += gv * (-(S(1) - bp.fx) * v00 - bp.fx * v01 + (S(1) - bp.fx) * v10 + bp.fx * v11);
          dx += gv * (-(S(1) - bp.fy) * v00 + (S(1) - bp.fy) * v01 - bp.fy * v10 + bp.fy * v11);
        }
        if (!bp.y_sat) dc.data[0] += dy;
        if (!bp.x_sat) dc.data[1] += dx;
      }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

}  // namespace aspcnet

#endif  // ASPCNET_ASP_HPP
