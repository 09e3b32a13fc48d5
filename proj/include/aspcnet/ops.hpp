#ifndef ASPCNET_OPS_HPP
#define ASPCNET_OPS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "aspcnet/parallel.hpp"
#include "aspcnet/tape.hpp"
#include "aspcnet/tensor.hpp"

namespace aspcnet {

namespace detail {

template <typename S>
using ConstMat =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using MutMat = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
Tape<S>& tape_of(Var<S> a) {
  check(a.valid(), "op on invalid var");
  return *a.tape;
}

template <typename S>
Tape<S>& tape_of(Var<S> a, Var<S> b) {
  check(a.valid() && b.valid(), "op on invalid var");
  check(a.tape == b.tape, "operands recorded on different tapes");
  return *a.tape;
}

/// Decomposition of a shape around one axis: (outer, n, inner).
struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, int axis) {
  check(axis >= 0 && axis < static_cast<int>(s.size()), "axis out of range");
  AxisSplit a{1, static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) a.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    a.inner *= static_cast<std::size_t>(s[i]);
  return a;
}

inline Shape drop_axes(const Shape& s, const std::vector<int>& axes) {
  Shape out;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    bool dropped = false;
    for (int a : axes) dropped = dropped || (a == i);
    if (!dropped) out.push_back(s[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S, typename Fwd, typename Bwd>
Var<S> unary_op(Var<S> a, Fwd fwd, Bwd bwd) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  Tensor<S> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = fwd(x.data[i]);
  bool rg = t.requires_grad(a);
  int ai = a.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai, bwd](Tape<S>& t, const Tensor<S>& out, const Tensor<S>& g) {
      Tensor<S>& da = t.grad_buffer(ai);
      const Tensor<S>& x = t.value(ai);
      for (std::size_t i = 0; i < x.size(); ++i)
        da.data[i] += g.data[i] * bwd(x.data[i], out.data[i]);
    };
  return t.wrap(t.emit(std::move(y), rg, std::move(fn)));
}

template <typename S>
Var<S> relu(Var<S> a) {
  return unary_op(
      a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  return unary_op(
      a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> square(Var<S> a) {
  return unary_op(a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <typename S>
Var<S> sqrt(Var<S> a) {
  return unary_op(
      a, [](S x) { return std::sqrt(x); },
      [](S, S y) { return S(1) / (S(2) * y); });
}

template <typename S>
Var<S> exp(Var<S> a) {
  return unary_op(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  return unary_op(a, [s](S x) { return x * s; }, [s](S, S) { return s; });
}

namespace detail {

// dfa/dfb receive (a_i, b_i) and return the local partials.
template <typename S, typename Fwd, typename Da, typename Db>
Var<S> binary_op(Var<S> a, Var<S> b, Fwd fwd, Da dfa, Db dfb) {
  Tape<S>& t = tape_of(a, b);
  const Tensor<S>& x = t.value(a);
  const Tensor<S>& y = t.value(b);
  check(x.same_shape(y), "elementwise: shape mismatch " + shape_str(x.shape) + " vs " +
                             shape_str(y.shape));
  Tensor<S> out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = fwd(x.data[i], y.data[i]);
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  int ai = a.node, bi = b.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai, bi, dfa, dfb](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const Tensor<S>& x = t.value(ai);
      const Tensor<S>& y = t.value(bi);
      if (t.requires_grad(ai)) {
        Tensor<S>& da = t.grad_buffer(ai);
        for (std::size_t i = 0; i < x.size(); ++i)
          da.data[i] += g.data[i] * dfa(x.data[i], y.data[i]);
      }
      if (t.requires_grad(bi)) {
        Tensor<S>& db = t.grad_buffer(bi);
        for (std::size_t i = 0; i < x.size(); ++i)
          db.data[i] += g.data[i] * dfb(x.data[i], y.data[i]);
      }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  return detail::binary_op(
      a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  if (debug_checks()) {
    const Tensor<S>& y = detail::tape_of(a, b).value(b);
    for (S v : y.data)
      if (v == S(0)) throw std::runtime_error("debug check: division by zero");
  }
  return detail::binary_op(
      a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

// Scalar-operand forms.
template <typename S>
Var<S> add(Var<S> a, S c) {
  return unary_op(a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}
template <typename S>
Var<S> sub(Var<S> a, S c) {
  return add(a, S(-c));
}
template <typename S>
Var<S> sub(S c, Var<S> a) {
  return unary_op(a, [c](S x) { return c - x; }, [](S, S) { return S(-1); });
}
template <typename S>
Var<S> mul(Var<S> a, S c) {
  return scale(a, c);
}
template <typename S>
Var<S> div(Var<S> a, S c) {
  if (debug_checks() && c == S(0)) throw std::runtime_error("debug check: division by zero");
  return scale(a, S(1) / c);
}

// ---------------------------------------------------------------------------
// Matrix product (2-D); inner kernel delegated to Eigen.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::tape_of(a, b);
  const Tensor<S>& A = t.value(a);
  const Tensor<S>& B = t.value(b);
  check(A.rank() == 2 && B.rank() == 2, "matmul: operands must be rank 2");
  check(A.shape[1] == B.shape[0], "matmul: inner extents differ " + shape_str(A.shape) +
                                      " x " + shape_str(B.shape));
  const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor<S> out({m, n});
  detail::ConstMat<S> Am(A.ptr(), m, k);
  detail::ConstMat<S> Bm(B.ptr(), k, n);
  detail::MutMat<S>(out.ptr(), m, n).noalias() = Am * Bm;
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  int ai = a.node, bi = b.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai, bi, m, k, n](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      detail::ConstMat<S> G(g.ptr(), m, n);
      if (t.requires_grad(ai)) {
        detail::ConstMat<S> Bm(t.value(bi).ptr(), k, n);
        detail::MutMat<S>(t.grad_buffer(ai).ptr(), m, k).noalias() += G * Bm.transpose();
      }
      if (t.requires_grad(bi)) {
        detail::ConstMat<S> Am(t.value(ai).ptr(), m, k);
        detail::MutMat<S>(t.grad_buffer(bi).ptr(), k, n).noalias() += Am.transpose() * G;
      }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(Var<S> a, Shape target) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  check(shape_numel(target) == x.size(),
        "reshape: element count mismatch " + shape_str(x.shape) + " -> " + shape_str(target));
  Tensor<S> out(target, x.data);
  bool rg = t.requires_grad(a);
  int ai = a.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      Tensor<S>& da = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i];
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

/// Adds a vector over the innermost axis: out[..., c] = x[..., c] + b[c].
template <typename S>
Var<S> bias_add(Var<S> x, Var<S> b) {
  Tape<S>& t = detail::tape_of(x, b);
  const Tensor<S>& xv = t.value(x);
  const Tensor<S>& bv = t.value(b);
  check(bv.rank() == 1 && xv.rank() >= 1 && xv.shape.back() == bv.shape[0],
        "bias_add: bias extent must match innermost axis");
  const std::size_t c = bv.size();
  Tensor<S> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] + bv.data[i % c];
  bool rg = t.requires_grad(x) || t.requires_grad(b);
  int xi = x.node, bi = b.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [xi, bi, c](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      if (t.requires_grad(xi)) {
        Tensor<S>& dx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < g.size(); ++i) dx.data[i] += g.data[i];
      }
      if (t.requires_grad(bi)) {
        Tensor<S>& db = t.grad_buffer(bi);
        for (std::size_t i = 0; i < g.size(); ++i) db.data[i % c] += g.data[i];
      }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// 2-D convolution, NHWC, kernel (kh, kw, Cin, Cout)
// ---------------------------------------------------------------------------

enum class Padding { same_zero, valid };

struct Conv2dGeometry {
  int out_h, out_w, pad_top, pad_left;
};

inline Conv2dGeometry conv2d_geometry(int h, int w, int kh, int kw, int stride, int dilation,
                                      Padding pad) {
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(dilation >= 1, "conv2d: dilation must be >= 1");
  const int eff_kh = kh + (kh - 1) * (dilation - 1);
  const int eff_kw = kw + (kw - 1) * (dilation - 1);
  Conv2dGeometry g{};
  if (pad == Padding::same_zero) {
    // Output extent ceil(H/stride); extra padding goes on the bottom/right.
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    g.pad_top = std::max((g.out_h - 1) * stride + eff_kh - h, 0) / 2;
    g.pad_left = std::max((g.out_w - 1) * stride + eff_kw - w, 0) / 2;
  } else {
    check(eff_kh <= h && eff_kw <= w, "conv2d: kernel larger than input under valid padding");
    g.out_h = (h - eff_kh) / stride + 1;
    g.out_w = (w - eff_kw) / stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

template <typename S>
Var<S> conv2d(Var<S> input, Var<S> kernel, int stride, Padding pad, int dilation = 1) {
  Tape<S>& t = detail::tape_of(input, kernel);
  const Tensor<S>& in = t.value(input);
  const Tensor<S>& k = t.value(kernel);
  check(in.rank() == 4, "conv2d: input must be (N,H,W,C)");
  check(k.rank() == 4, "conv2d: kernel must be (kh,kw,Cin,Cout)");
  check(in.shape[3] == k.shape[2], "conv2d: channel mismatch input " + shape_str(in.shape) +
                                       " kernel " + shape_str(k.shape));
  const int batch = in.shape[0], h = in.shape[1], w = in.shape[2], cin = in.shape[3];
  const int kh = k.shape[0], kw = k.shape[1], cout = k.shape[3];
  const Conv2dGeometry geo = conv2d_geometry(h, w, kh, kw, stride, dilation, pad);

  Tensor<S> out({batch, geo.out_h, geo.out_w, cout});
  {
    const S* in_p = in.ptr();
    const S* k_p = k.ptr();
    S* out_p = out.ptr();
    parallel_for(batch, [&](int n) {
      const S* in_n = in_p + static_cast<std::size_t>(n) * h * w * cin;
      S* out_n = out_p + static_cast<std::size_t>(n) * geo.out_h * geo.out_w * cout;
      for (int oy = 0; oy < geo.out_h; ++oy)
        for (int ox = 0; ox < geo.out_w; ++ox) {
          S* o = out_n + (static_cast<std::size_t>(oy) * geo.out_w + ox) * cout;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - geo.pad_top + ky * dilation;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - geo.pad_left + kx * dilation;
              if (ix < 0 || ix >= w) continue;
              const S* px = in_n + (static_cast<std::size_t>(iy) * w + ix) * cin;
              const S* kp = k_p + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
              for (int c = 0; c < cin; ++c) {
                const S v = px[c];
                const S* kr = kp + static_cast<std::size_t>(c) * cout;
                for (int f = 0; f < cout; ++f) o[f] += v * kr[f];
              }
            }
          }
        }
    });
  }

  bool rg = t.requires_grad(input) || t.requires_grad(kernel);
  int ii = input.node, ki = kernel.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ii, ki, batch, h, w, cin, kh, kw, cout, stride, dilation, geo](
             Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const S* g_p = g.ptr();
      if (t.requires_grad(ii)) {
        const S* k_p = t.value(ki).ptr();
        Tensor<S>& din = t.grad_buffer(ii);
        S* din_p = din.ptr();
        parallel_for(batch, [&](int n) {
          S* din_n = din_p + static_cast<std::size_t>(n) * h * w * cin;
          const S* g_n = g_p + static_cast<std::size_t>(n) * geo.out_h * geo.out_w * cout;
          for (int oy = 0; oy < geo.out_h; ++oy)
            for (int ox = 0; ox < geo.out_w; ++ox) {
              const S* go = g_n + (static_cast<std::size_t>(oy) * geo.out_w + ox) * cout;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - geo.pad_top + ky * dilation;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - geo.pad_left + kx * dilation;
                  if (ix < 0 || ix >= w) continue;
                  S* px = din_n + (static_cast<std::size_t>(iy) * w + ix) * cin;
                  const S* kp = k_p + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
                  for (int c = 0; c < cin; ++c) {
                    const S* kr = kp + static_cast<std::size_t>(c) * cout;
                    S acc = 0;
                    for (int f = 0; f < cout; ++f) acc += kr[f] * go[f];
                    px[c] += acc;
                  }
                }
              }
            }
        });
      }
      if (t.requires_grad(ki)) {
        // Weight gradient accumulates across the batch in a fixed order.
        const S* in_p = t.value(ii).ptr();
        Tensor<S>& dk = t.grad_buffer(ki);
        S* dk_p = dk.ptr();
        for (int n = 0; n < batch; ++n) {
          const S* in_n = in_p + static_cast<std::size_t>(n) * h * w * cin;
          const S* g_n = g_p + static_cast<std::size_t>(n) * geo.out_h * geo.out_w * cout;
          for (int oy = 0; oy < geo.out_h; ++oy)
            for (int ox = 0; ox < geo.out_w; ++ox) {
              const S* go = g_n + (static_cast<std::size_t>(oy) * geo.out_w + ox) * cout;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - geo.pad_top + ky * dilation;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - geo.pad_left + kx * dilation;
                  if (ix < 0 || ix >= w) continue;
                  const S* px = in_n + (static_cast<std::size_t>(iy) * w + ix) * cin;
                  S* kp = dk_p + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
                  for (int c = 0; c < cin; ++c) {
                    const S v = px[c];
                    S* kr = kp + static_cast<std::size_t>(c) * cout;
                    for (int f = 0; f < cout; ++f) kr[f] += v * go[f];
                  }
                }
              }
            }
        }
      }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// Batch normalization over (N,H,W) per channel of an NHWC tensor
// ---------------------------------------------------------------------------

template <typename S>
struct BatchNormState {
  Tensor<S> running_mean, running_var;
  explicit BatchNormState(int channels = 0)
      : running_mean(Shape{std::max(channels, 1)}), running_var(Shape{std::max(channels, 1)}) {
    if (channels > 0) running_var.fill(S(1));
  }
};

enum class BnMode { train, infer };

template <typename S>
Var<S> batch_norm(Var<S> x, Var<S> gamma, Var<S> beta, BatchNormState<S>& state, S momentum,
                  BnMode mode, S epsilon = S(1e-5)) {
  Tape<S>& t = detail::tape_of(x, gamma);
  check(beta.valid() && beta.tape == &t, "batch_norm: beta on a different tape");
  const Tensor<S>& xv = t.value(x);
  const Tensor<S>& gv = t.value(gamma);
  const Tensor<S>& bv = t.value(beta);
  check(xv.rank() == 4, "batch_norm: input must be (N,H,W,C)");
  const int c = xv.shape[3];
  check(gv.rank() == 1 && gv.shape[0] == c && bv.rank() == 1 && bv.shape[0] == c,
        "batch_norm: gamma/beta channel mismatch");
  check(state.running_mean.size() == static_cast<std::size_t>(c),
        "batch_norm: running stats channel mismatch");
  const std::size_t rows = xv.size() / static_cast<std::size_t>(c);

  Tensor<S> mean({c}), var({c});
  if (mode == BnMode::train) {
    for (std::size_t i = 0; i < xv.size(); ++i) mean.data[i % c] += xv.data[i];
    for (int j = 0; j < c; ++j) mean.data[j] /= static_cast<S>(rows);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const S d = xv.data[i] - mean.data[i % c];
      var.data[i % c] += d * d;
    }
    for (int j = 0; j < c; ++j) var.data[j] /= static_cast<S>(rows);
    for (int j = 0; j < c; ++j) {
      state.running_mean.data[j] = momentum * state.running_mean.data[j] + (S(1) - momentum) * mean.data[j];
      state.running_var.data[j] = momentum * state.running_var.data[j] + (S(1) - momentum) * var.data[j];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Tensor<S> inv_std({c});
  for (int j = 0; j < c; ++j) inv_std.data[j] = S(1) / std::sqrt(var.data[j] + epsilon);
  Tensor<S> out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const int j = static_cast<int>(i % c);
    out.data[i] = gv.data[j] * (xv.data[i] - mean.data[j]) * inv_std.data[j] + bv.data[j];
  }

  bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  int xi = x.node, gi = gamma.node, bi = beta.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [xi, gi, bi, c, rows, mean, inv_std, mode](Tape<S>& t, const Tensor<S>&,
                                                    const Tensor<S>& g) {
      const Tensor<S>& xv = t.value(xi);
      const Tensor<S>& gv = t.value(gi);
      const std::size_t n = xv.size();
      // Per-channel reductions of g and g*xhat.
      Tensor<S> sum_g({c}), sum_gx({c});
      for (std::size_t i = 0; i < n; ++i) {
        const int j = static_cast<int>(i % c);
        const S xh = (xv.data[i] - mean.data[j]) * inv_std.data[j];
        sum_g.data[j] += g.data[i];
        sum_gx.data[j] += g.data[i] * xh;
      }
      if (t.requires_grad(bi)) {
        Tensor<S>& db = t.grad_buffer(bi);
        for (int j = 0; j < c; ++j) db.data[j] += sum_g.data[j];
      }
      if (t.requires_grad(gi)) {
        Tensor<S>& dg = t.grad_buffer(gi);
        for (int j = 0; j < c; ++j) dg.data[j] += sum_gx.data[j];
      }
      if (t.requires_grad(xi)) {
        Tensor<S>& dx = t.grad_buffer(xi);
        if (mode == BnMode::train) {
          const S m = static_cast<S>(rows);
          for (std::size_t i = 0; i < n; ++i) {
            const int j = static_cast<int>(i % c);
            const S xh = (xv.data[i] - mean.data[j]) * inv_std.data[j];
            dx.data[i] += gv.data[j] * inv_std.data[j] *
                          (g.data[i] - sum_g.data[j] / m - xh * sum_gx.data[j] / m);
          }
        } else {
          for (std::size_t i = 0; i < n; ++i) {
            const int j = static_cast<int>(i % c);
            dx.data[i] += g.data[i] * gv.data[j] * inv_std.data[j];
          }
        }
      }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void validate_axes(const Tensor<S>& x, const std::vector<int>& axes) {
  check(!axes.empty(), "reduce: empty axis list");
  for (int a : axes) check(a >= 0 && a < x.rank(), "reduce: axis out of range");
  for (std::size_t i = 0; i < axes.size(); ++i)
    for (std::size_t j = i + 1; j < axes.size(); ++j)
      check(axes[i] != axes[j], "reduce: duplicate axis");
}

/// For each input flat index, the flat index of its reduction cell.
template <typename S>
std::size_t reduce_map_index(const Tensor<S>& x, const std::vector<std::size_t>& out_contrib,
                             std::size_t flat) {
  std::size_t out = 0;
  for (int ax = x.rank() - 1; ax >= 0; --ax) {
    const std::size_t e = static_cast<std::size_t>(x.shape[static_cast<std::size_t>(ax)]);
    out += out_contrib[static_cast<std::size_t>(ax)] * (flat % e);
    flat /= e;
  }
  return out;
}

template <typename S>
std::vector<std::size_t> reduce_contrib(const Tensor<S>& x, const std::vector<int>& axes) {
  Shape out_shape = drop_axes(x.shape, axes);
  auto out_strides = row_major_strides(out_shape);
  std::vector<std::size_t> contrib(static_cast<std::size_t>(x.rank()), 0);
  int kept = 0;
  for (int ax = 0; ax < x.rank(); ++ax) {
    bool reduced = false;
    for (int a : axes) reduced = reduced || (a == ax);
    if (!reduced) {
      contrib[static_cast<std::size_t>(ax)] = out_shape.empty() ? 0 : out_strides[static_cast<std::size_t>(kept)];
      ++kept;
    }
  }
  return contrib;
}

}  // namespace detail

template <typename S>
Var<S> reduce_sum(Var<S> a, const std::vector<int>& axes) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  detail::validate_axes(x, axes);
  Shape out_shape = detail::drop_axes(x.shape, axes);
  auto contrib = detail::reduce_contrib(x, axes);
  Tensor<S> out(out_shape);
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data[detail::reduce_map_index(x, contrib, i)] += x.data[i];
  bool rg = t.requires_grad(a);
  int ai = a.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai, contrib](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const Tensor<S>& x = t.value(ai);
      Tensor<S>& da = t.grad_buffer(ai);
      for (std::size_t i = 0; i < x.size(); ++i)
        da.data[i] += g.data[detail::reduce_map_index(x, contrib, i)];
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

template <typename S>
Var<S> reduce_mean(Var<S> a, const std::vector<int>& axes) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  detail::validate_axes(x, axes);
  std::size_t count = 1;
  for (int ax : axes) count *= static_cast<std::size_t>(x.shape[static_cast<std::size_t>(ax)]);
  return scale(reduce_sum(a, axes), S(1) / static_cast<S>(count));
}

/// Euclidean norm along one axis: out = sqrt(sum x^2). Backward divides by
/// norm + 1e-12 so the zero vector propagates a zero gradient.
template <typename S>
Var<S> l2norm(Var<S> a, int axis) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  const auto ax = detail::split_axis(x.shape, axis);
  Tensor<S> out(detail::drop_axes(x.shape, {axis}));
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t in = 0; in < ax.inner; ++in) {
      S acc = 0;
      for (std::size_t k = 0; k < ax.n; ++k) {
        const S v = x.data[(o * ax.n + k) * ax.inner + in];
        acc += v * v;
      }
      out.data[o * ax.inner + in] = std::sqrt(acc);
    }
  bool rg = t.requires_grad(a);
  int ai = a.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai, ax](Tape<S>& t, const Tensor<S>& out, const Tensor<S>& g) {
      const Tensor<S>& x = t.value(ai);
      Tensor<S>& da = t.grad_buffer(ai);
      for (std::size_t o = 0; o < ax.outer; ++o)
        for (std::size_t in = 0; in < ax.inner; ++in) {
          const std::size_t oi = o * ax.inner + in;
          const S coef = g.data[oi] / (out.data[oi] + S(1e-12));
          for (std::size_t k = 0; k < ax.n; ++k) {
            const std::size_t xi = (o * ax.n + k) * ax.inner + in;
            da.data[xi] += coef * x.data[xi];
          }
        }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

template <typename S>
struct MaxResult {
  Var<S> values;
  Tensor<int> indices;  // argmax along the axis, ties to the lowest index
};

template <typename S>
MaxResult<S> reduce_max(Var<S> a, int axis) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  const auto ax = detail::split_axis(x.shape, axis);
  Shape out_shape = detail::drop_axes(x.shape, {axis});
  Tensor<S> out(out_shape);
  Tensor<int> idx(out_shape);
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t in = 0; in < ax.inner; ++in) {
      S best = x.data[o * ax.n * ax.inner + in];
      int best_k = 0;
      for (std::size_t k = 1; k < ax.n; ++k) {
        const S v = x.data[(o * ax.n + k) * ax.inner + in];
        if (v > best) {
          best = v;
          best_k = static_cast<int>(k);
        }
      }
      out.data[o * ax.inner + in] = best;
      idx.data[o * ax.inner + in] = best_k;
    }
  bool rg = t.requires_grad(a);
  int ai = a.node;
  typename Tape<S>::BackwardFn fn;
  if (rg) {
    Tensor<int> idx_copy = idx;
    fn = [ai, ax, idx_copy](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      Tensor<S>& da = t.grad_buffer(ai);
      for (std::size_t o = 0; o < ax.outer; ++o)
        for (std::size_t in = 0; in < ax.inner; ++in) {
          const std::size_t oi = o * ax.inner + in;
          const std::size_t k = static_cast<std::size_t>(idx_copy.data[oi]);
          da.data[(o * ax.n + k) * ax.inner + in] += g.data[oi];
        }
    };
  }
  return MaxResult<S>{t.wrap(t.emit(std::move(out), rg, std::move(fn))), std::move(idx)};
}

/// Numerically stable softmax along one axis (max subtraction).
template <typename S>
Var<S> softmax(Var<S> a, int axis) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  const auto ax = detail::split_axis(x.shape, axis);
  Tensor<S> out(x.shape);
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t in = 0; in < ax.inner; ++in) {
      S hi = x.data[o * ax.n * ax.inner + in];
      for (std::size_t k = 1; k < ax.n; ++k)
        hi = std::max(hi, x.data[(o * ax.n + k) * ax.inner + in]);
      S denom = 0;
      for (std::size_t k = 0; k < ax.n; ++k) {
        const std::size_t xi = (o * ax.n + k) * ax.inner + in;
        out.data[xi] = std::exp(x.data[xi] - hi);
        denom += out.data[xi];
      }
      for (std::size_t k = 0; k < ax.n; ++k) out.data[(o * ax.n + k) * ax.inner + in] /= denom;
    }
  bool rg = t.requires_grad(a);
  int ai = a.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai, ax](Tape<S>& t, const Tensor<S>& y, const Tensor<S>& g) {
      Tensor<S>& da = t.grad_buffer(ai);
      for (std::size_t o = 0; o < ax.outer; ++o)
        for (std::size_t in = 0; in < ax.inner; ++in) {
          S dot = 0;
          for (std::size_t k = 0; k < ax.n; ++k) {
            const std::size_t xi = (o * ax.n + k) * ax.inner + in;
            dot += g.data[xi] * y.data[xi];
          }
          for (std::size_t k = 0; k < ax.n; ++k) {
            const std::size_t xi = (o * ax.n + k) * ax.inner + in;
            da.data[xi] += y.data[xi] * (g.data[xi] - dot);
          }
        }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

}  // namespace aspcnet

#endif  // ASPCNET_OPS_HPP
