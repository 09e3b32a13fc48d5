#ifndef ASPCNET_CAPSULES_HPP
#define ASPCNET_CAPSULES_HPP

#include <string>
#include <vector>

#include "aspcnet/asp.hpp"
#include "aspcnet/ops.hpp"

namespace aspcnet {

// Capsule activations are carried as 5-D tensors (N, H, W, types, dim); the
// routing primitives below operate on a flattened leading batch axis:
//   votes     (B, K, Ti, To, Do)
//   couplings (B, K, Ti, To)
//   outputs   (B, To, Do)
// with K the spatial grid points, Ti/To input/output capsule types.

// ---------------------------------------------------------------------------
// squash: v = (|s|^2 / (1 + |s|^2)) * s / (|s| + 1e-9) along one axis.
// Output norms lie in [0, 1) and v is parallel to s.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> squash(Var<S> a, int axis) {
  Tape<S>& t = detail::tape_of(a);
  const Tensor<S>& x = t.value(a);
  const auto ax = detail::split_axis(x.shape, axis);
  const S eps = S(1e-9);
  Tensor<S> out(x.shape);
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t in = 0; in < ax.inner; ++in) {
      S sq = 0;
      for (std::size_t k = 0; k < ax.n; ++k) {
        const S v = x.data[(o * ax.n + k) * ax.inner + in];
        sq += v * v;
      }
      const S n = std::sqrt(sq);
      const S gain = sq / ((S(1) + sq) * (n + eps));
      for (std::size_t k = 0; k < ax.n; ++k) {
        const std::size_t xi = (o * ax.n + k) * ax.inner + in;
        out.data[xi] = gain * x.data[xi];
      }
    }
  bool rg = t.requires_grad(a);
  int ai = a.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [ai, ax, eps](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const Tensor<S>& x = t.value(ai);
      Tensor<S>& da = t.grad_buffer(ai);
      for (std::size_t o = 0; o < ax.outer; ++o)
        for (std::size_t in = 0; in < ax.inner; ++in) {
          S sq = 0, dot = 0;
          for (std::size_t k = 0; k < ax.n; ++k) {
            const std::size_t xi = (o * ax.n + k) * ax.inner + in;
            sq += x.data[xi] * x.data[xi];
            dot += g.data[xi] * x.data[xi];
          }
          const S n = std::sqrt(sq);
          const S denom = (S(1) + sq) * (n + eps);
          const S gain = sq / denom;
          // d gain / d n, with the same 1e-9 guards as the forward pass.
          const S ddenom = S(2) * n * (n + eps) + (S(1) + sq);
          const S dgain = (S(2) * n * denom - sq * ddenom) / (denom * denom);
          const S coef = dgain * dot / (n + eps);
          for (std::size_t k = 0; k < ax.n; ++k) {
            const std::size_t xi = (o * ax.n + k) * ax.inner + in;
            da.data[xi] += gain * g.data[xi] + coef * x.data[xi];
          }
        }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// Vote prediction: votes[b,k,i,j,:] = W[k,i,j,:,:] * u[b,k,i,:]
// W: (K, Ti, To, Do, Di), u: (B, K, Ti, Di)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> caps_votes(Var<S> transform, Var<S> u) {
  Tape<S>& t = detail::tape_of(transform, u);
  const Tensor<S>& w = t.value(transform);
  const Tensor<S>& uv = t.value(u);
  check(w.rank() == 5, "caps_votes: transform must be (K,Ti,To,Do,Di)");
  check(uv.rank() == 4, "caps_votes: inputs must be (B,K,Ti,Di)");
  const int k = w.shape[0], ti = w.shape[1], to = w.shape[2], dout = w.shape[3],
            din = w.shape[4];
  check(uv.shape[1] == k && uv.shape[2] == ti && uv.shape[3] == din,
        "caps_votes: input " + shape_str(uv.shape) + " does not match transform " +
            shape_str(w.shape));
  const int b = uv.shape[0];
  const int jd = to * dout;

  Tensor<S> out({b, k, ti, to, dout});
  {
    const S* w_p = w.ptr();
    const S* u_p = uv.ptr();
    S* out_p = out.ptr();
    parallel_for(b, [&](int bi) {
      for (int ki = 0; ki < k; ++ki)
        for (int ii = 0; ii < ti; ++ii) {
          const std::size_t cell = (static_cast<std::size_t>(bi) * k + ki) * ti + ii;
          const S* uvec = u_p + cell * din;
          const S* wm = w_p + (static_cast<std::size_t>(ki) * ti + ii) * jd * din;
          S* o = out_p + cell * jd;
          detail::MutMat<S>(o, jd, 1).noalias() =
              detail::ConstMat<S>(wm, jd, din) * detail::ConstMat<S>(uvec, din, 1);
        }
    });
  }

  bool rg = t.requires_grad(transform) || t.requires_grad(u);
  const int wi = transform.node, ui = u.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [wi, ui, b, k, ti, jd, din](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const S* g_p = g.ptr();
      if (t.requires_grad(ui)) {
        const S* w_p = t.value(wi).ptr();
        S* du_p = t.grad_buffer(ui).ptr();
        parallel_for(b, [&](int bi) {
          for (int ki = 0; ki < k; ++ki)
            for (int ii = 0; ii < ti; ++ii) {
              const std::size_t cell = (static_cast<std::size_t>(bi) * k + ki) * ti + ii;
              const S* wm = w_p + (static_cast<std::size_t>(ki) * ti + ii) * jd * din;
              detail::MutMat<S>(du_p + cell * din, din, 1).noalias() +=
                  detail::ConstMat<S>(wm, jd, din).transpose() *
                  detail::ConstMat<S>(g_p + cell * jd, jd, 1);
            }
        });
      }
      if (t.requires_grad(wi)) {
        // Transform gradient sums over the batch in recording order.
        const S* u_p = t.value(ui).ptr();
        S* dw_p = t.grad_buffer(wi).ptr();
        for (int bi = 0; bi < b; ++bi)
          for (int ki = 0; ki < k; ++ki)
            for (int ii = 0; ii < ti; ++ii) {
              const std::size_t cell = (static_cast<std::size_t>(bi) * k + ki) * ti + ii;
              detail::MutMat<S>(dw_p + (static_cast<std::size_t>(ki) * ti + ii) * jd * din, jd,
                                din)
                  .noalias() += detail::ConstMat<S>(g_p + cell * jd, jd, 1) *
                                detail::ConstMat<S>(u_p + cell * din, din, 1).transpose();
            }
      }
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// Weighted vote sum: s[b,j,:] = sum_{k,i} c[b,k,i,j] * votes[b,k,i,j,:]
// ---------------------------------------------------------------------------

template <typename S>
Var<S> weighted_vote_sum(Var<S> votes, Var<S> couplings) {
  Tape<S>& t = detail::tape_of(votes, couplings);
  const Tensor<S>& vv = t.value(votes);
  const Tensor<S>& cv = t.value(couplings);
  check(vv.rank() == 5 && cv.rank() == 4, "weighted_vote_sum: bad ranks");
  const int b = vv.shape[0], k = vv.shape[1], ti = vv.shape[2], to = vv.shape[3],
            dout = vv.shape[4];
  check(cv.shape == Shape({b, k, ti, to}), "weighted_vote_sum: coupling shape mismatch");

  Tensor<S> out({b, to, dout});
  {
    const S* v_p = vv.ptr();
    const S* c_p = cv.ptr();
    S* o_p = out.ptr();
    parallel_for(b, [&](int bi) {
      S* o = o_p + static_cast<std::size_t>(bi) * to * dout;
      const std::size_t base = static_cast<std::size_t>(bi) * k * ti;
      for (std::size_t cell = 0; cell < static_cast<std::size_t>(k) * ti; ++cell) {
        const S* vrow = v_p + (base + cell) * to * dout;
        const S* crow = c_p + (base + cell) * to;
        for (int j = 0; j < to; ++j) {
          const S cc = crow[j];
          const S* vj = vrow + static_cast<std::size_t>(j) * dout;
          S* oj = o + static_cast<std::size_t>(j) * dout;
          for (int d = 0; d < dout; ++d) oj[d] += cc * vj[d];
        }
      }
    });
  }

  bool rg = t.requires_grad(votes) || t.requires_grad(couplings);
  const int vi = votes.node, ci = couplings.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [vi, ci, b, k, ti, to, dout](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const S* g_p = g.ptr();
      const bool want_v = t.requires_grad(vi);
      const bool want_c = t.requires_grad(ci);
      const S* v_p = t.value(vi).ptr();
      const S* c_p = t.value(ci).ptr();
      S* dv_p = want_v ? t.grad_buffer(vi).ptr() : nullptr;
      S* dc_p = want_c ? t.grad_buffer(ci).ptr() : nullptr;
      parallel_for(b, [&](int bi) {
        const S* gb = g_p + static_cast<std::size_t>(bi) * to * dout;
        const std::size_t base = static_cast<std::size_t>(bi) * k * ti;
        for (std::size_t cell = 0; cell < static_cast<std::size_t>(k) * ti; ++cell) {
          const S* vrow = v_p + (base + cell) * to * dout;
          const S* crow = c_p + (base + cell) * to;
          for (int j = 0; j < to; ++j) {
            const S* gj = gb + static_cast<std::size_t>(j) * dout;
            const S* vj = vrow + static_cast<std::size_t>(j) * dout;
            if (want_c) {
              S acc = 0;
              for (int d = 0; d < dout; ++d) acc += gj[d] * vj[d];
              dc_p[(base + cell) * to + j] += acc;
            }
            if (want_v) {
              const S cc = crow[j];
              S* dvj = dv_p + (base + cell) * to * dout + static_cast<std::size_t>(j) * dout;
              for (int d = 0; d < dout; ++d) dvj[d] += cc * gj[d];
            }
          }
        }
      });
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// Agreement: a[b,k,i,j] = <votes[b,k,i,j,:], v[b,j,:]>
// ---------------------------------------------------------------------------

template <typename S>
Var<S> vote_agreement(Var<S> votes, Var<S> outputs) {
  Tape<S>& t = detail::tape_of(votes, outputs);
  const Tensor<S>& vv = t.value(votes);
  const Tensor<S>& ov = t.value(outputs);
  check(vv.rank() == 5 && ov.rank() == 3, "vote_agreement: bad ranks");
  const int b = vv.shape[0], k = vv.shape[1], ti = vv.shape[2], to = vv.shape[3],
            dout = vv.shape[4];
  check(ov.shape == Shape({b, to, dout}), "vote_agreement: output shape mismatch");

  Tensor<S> out({b, k, ti, to});
  {
    const S* v_p = vv.ptr();
    const S* o_p = ov.ptr();
    S* a_p = out.ptr();
    parallel_for(b, [&](int bi) {
      const S* ob = o_p + static_cast<std::size_t>(bi) * to * dout;
      const std::size_t base = static_cast<std::size_t>(bi) * k * ti;
      for (std::size_t cell = 0; cell < static_cast<std::size_t>(k) * ti; ++cell) {
        const S* vrow = v_p + (base + cell) * to * dout;
        S* arow = a_p + (base + cell) * to;
        for (int j = 0; j < to; ++j) {
          const S* vj = vrow + static_cast<std::size_t>(j) * dout;
          const S* oj = ob + static_cast<std::size_t>(j) * dout;
          S acc = 0;
          for (int d = 0; d < dout; ++d) acc += vj[d] * oj[d];
          arow[j] = acc;
        }
      }
    });
  }

  bool rg = t.requires_grad(votes) || t.requires_grad(outputs);
  const int vi = votes.node, oi = outputs.node;
  typename Tape<S>::BackwardFn fn;
  if (rg)
    fn = [vi, oi, b, k, ti, to, dout](Tape<S>& t, const Tensor<S>&, const Tensor<S>& g) {
      const S* g_p = g.ptr();
      const bool want_v = t.requires_grad(vi);
      const bool want_o = t.requires_grad(oi);
      const S* v_p = t.value(vi).ptr();
      const S* o_p = t.value(oi).ptr();
      S* dv_p = want_v ? t.grad_buffer(vi).ptr() : nullptr;
      S* do_p = want_o ? t.grad_buffer(oi).ptr() : nullptr;
      parallel_for(b, [&](int bi) {
        const S* ob = o_p + static_cast<std::size_t>(bi) * to * dout;
        S* dob = want_o ? do_p + static_cast<std::size_t>(bi) * to * dout : nullptr;
        const std::size_t base = static_cast<std::size_t>(bi) * k * ti;
        for (std::size_t cell = 0; cell < static_cast<std::size_t>(k) * ti; ++cell) {
          const S* vrow = v_p + (base + cell) * to * dout;
          S* dvrow = want_v ? dv_p + (base + cell) * to * dout : nullptr;
          const S* grow = g_p + (base + cell) * to;
          for (int j = 0; j < to; ++j) {
            const S gv = grow[j];
            const S* vj = vrow + static_cast<std::size_t>(j) * dout;
            const S* oj = ob + static_cast<std::size_t>(j) * dout;
            if (want_v) {
              S* dvj = dvrow + static_cast<std::size_t>(j) * dout;
              for (int d = 0; d < dout; ++d) dvj[d] += gv * oj[d];
            }
            if (want_o) {
              S* doj = dob + static_cast<std::size_t>(j) * dout;
              for (int d = 0; d < dout; ++d) doj[d] += gv * vj[d];
            }
          }
        }
      });
    };
  return t.wrap(t.emit(std::move(out), rg, std::move(fn)));
}

// ---------------------------------------------------------------------------
// Dynamic routing, unrolled on the tape so gradients flow through every
// iteration. Logits start at zero on every forward pass; couplings are the
// softmax of the logits over the output-capsule axis; the agreement update is
// skipped after the final iteration.
// ---------------------------------------------------------------------------

template <typename S>
struct RoutingTrace {
  std::vector<Tensor<S>> couplings;  // one (B,K,Ti,To) tensor per iteration
};

template <typename S>
Var<S> dynamic_routing(Var<S> votes, int iterations, RoutingTrace<S>* trace = nullptr) {
  check(iterations >= 1, "dynamic_routing: need at least one iteration");
  Tape<S>& t = detail::tape_of(votes);
  const Shape& vs = t.value(votes).shape;
  check(vs.size() == 5, "dynamic_routing: votes must be (B,K,Ti,To,Do)");
  Var<S> logits = t.constant(Tensor<S>({vs[0], vs[1], vs[2], vs[3]}));
  Var<S> out{};
  for (int it = 0; it < iterations; ++it) {
    Var<S> c = softmax(logits, 3);
    if (trace) trace->couplings.push_back(t.value(c));
    Var<S> s = weighted_vote_sum(votes, c);
    out = squash(s, 2);
    if (it + 1 < iterations) logits = add(logits, vote_agreement(votes, out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape adapters (Table-style ConvertToCaps / FlattenCaps / CapsToScalars)
// ---------------------------------------------------------------------------

/// (N,H,W,C) -> (N,H,W,C,1): every channel becomes a 1-D capsule.
template <typename S>
Var<S> convert_to_caps(Var<S> features) {
  const Shape& s = detail::tape_of(features).value(features).shape;
  check(s.size() == 4, "convert_to_caps: input must be (N,H,W,C)");
  return reshape(features, {s[0], s[1], s[2], s[3], 1});
}

/// (N,H,W,T,D) -> (N, H*W*T, D).
template <typename S>
Var<S> flatten_caps(Var<S> caps) {
  const Shape& s = detail::tape_of(caps).value(caps).shape;
  check(s.size() == 5, "flatten_caps: input must be (N,H,W,T,D)");
  return reshape(caps, {s[0], s[1] * s[2] * s[3], s[4]});
}

/// (N,T,D) -> (N,T): per-class Euclidean norm.
template <typename S>
Var<S> caps_to_scalars(Var<S> caps) {
  const Shape& s = detail::tape_of(caps).value(caps).shape;
  check(s.size() == 3, "caps_to_scalars: input must be (N,T,D)");
  return l2norm(caps, 2);
}

// ---------------------------------------------------------------------------
// ASPCaps layer: 3x3 conv-capsule with ASP sampling (rate-1 grid, learned
// offsets/masks over the flattened capsule channels) and a position-shared
// transform matrix. Stride 1, same padding.
// ---------------------------------------------------------------------------

template <typename S>
struct AspCapsLayer {
  int t_in = 0, d_in = 0, t_out = 0, d_out = 0, iterations = 3;
  DilatedGrid grid;
  Param<S> transform;      // (K, Ti, To, Do, Di)
  Param<S> offset_weight;  // (3,3,Ti*Di,2K) zero at init
  Param<S> offset_bias;
  Param<S> mask_weight;  // (3,3,Ti*Di,K) zero at init
  Param<S> mask_bias;

  static AspCapsLayer make(const std::string& name, int t_in, int d_in, int t_out, int d_out,
                           int iterations, Rng& rng) {
    AspCapsLayer l;
    l.t_in = t_in;
    l.d_in = d_in;
    l.t_out = t_out;
    l.d_out = d_out;
    l.iterations = iterations;
    l.grid = build_dilated_grid(3, 3, 1);
    const int k = l.grid.points();
    const int c = t_in * d_in;
    l.transform = Param<S>(name + ".transform", Tensor<S>({k, t_in, t_out, d_out, d_in}));
    glorot_uniform_fill(l.transform.value, static_cast<std::size_t>(d_in),
                        static_cast<std::size_t>(d_out), rng);
    l.offset_weight = Param<S>(name + ".offset_weight", Tensor<S>({3, 3, c, 2 * k}));
    l.offset_bias = Param<S>(name + ".offset_bias", Tensor<S>({2 * k}));
    l.mask_weight = Param<S>(name + ".mask_weight", Tensor<S>({3, 3, c, k}));
    l.mask_bias = Param<S>(name + ".mask_bias", Tensor<S>({k}));
    return l;
  }

  /// in: (N,H,W,Ti,Di) -> (N,H,W,To,Do). Routing state is per position and
  /// per sample, rebuilt from zero logits on every call.
  Var<S> forward(Tape<S>& t, Var<S> in, RoutingTrace<S>* trace = nullptr) {
    const Shape& s = t.value(in).shape;
    check(s.size() == 5 && s[3] == t_in && s[4] == d_in,
          "asp_caps_forward: input " + shape_str(s) + " does not match layer (Ti=" +
              std::to_string(t_in) + ", Di=" + std::to_string(d_in) + ")");
    const int n = s[0], h = s[1], w = s[2];
    const int k = grid.points();
    // Branch convolutions see the capsules as plain channels.
    Var<S> flat = reshape(in, {n, h, w, t_in * d_in});
    Var<S> off = bias_add(conv2d(flat, t.param(offset_weight), 1, Padding::same_zero),
                          t.param(offset_bias));
    Var<S> mraw = bias_add(conv2d(flat, t.param(mask_weight), 1, Padding::same_zero),
                           t.param(mask_bias));
    Var<S> masks = scale(sigmoid(mraw), S(2));
    Var<S> samples = asp_sample(flat, off, masks, grid, 1);
    Var<S> u = reshape(samples, {n * h * w, k, t_in, d_in});
    Var<S> votes = caps_votes(t.param(transform), u);
    Var<S> v = dynamic_routing(votes, iterations, trace);
    return reshape(v, {n, h, w, t_out, d_out});
  }

  std::vector<Param<S>*> params() {
    return {&transform, &offset_weight, &offset_bias, &mask_weight, &mask_bias};
  }
};

// ---------------------------------------------------------------------------
// Fully connected capsule layer: every input capsule has its own transform
// matrix per class capsule.
// ---------------------------------------------------------------------------

template <typename S>
struct DigitalCapsLayer {
  int n_in = 0, d_in = 0, t_out = 0, d_out = 0, iterations = 3;
  Param<S> transform;  // (N_in, To, Do, Di)

  static DigitalCapsLayer make(const std::string& name, int n_in, int d_in, int t_out, int d_out,
                               int iterations, Rng& rng) {
    DigitalCapsLayer l;
    l.n_in = n_in;
    l.d_in = d_in;
    l.t_out = t_out;
    l.d_out = d_out;
    l.iterations = iterations;
    l.transform = Param<S>(name + ".transform", Tensor<S>({n_in, t_out, d_out, d_in}));
    glorot_uniform_fill(l.transform.value, static_cast<std::size_t>(d_in),
                        static_cast<std::size_t>(d_out), rng);
    return l;
  }

  /// in: (N, N_in, Di) -> (N, To, Do).
  Var<S> forward(Tape<S>& t, Var<S> in, RoutingTrace<S>* trace = nullptr) {
    const Shape& s = t.value(in).shape;
    check(s.size() == 3 && s[1] == n_in && s[2] == d_in,
          "digital_caps_forward: input " + shape_str(s) + " does not match layer (N_in=" +
              std::to_string(n_in) + ", Di=" + std::to_string(d_in) + ")");
    const int n = s[0];
    Var<S> u = reshape(in, {n, 1, n_in, d_in});
    Var<S> w = reshape(t.param(transform), {1, n_in, t_out, d_out, d_in});
    Var<S> votes = caps_votes(w, u);
    return dynamic_routing(votes, iterations, trace);
  }

  std::vector<Param<S>*> params() { return {&transform}; }
};

}  // namespace aspcnet

#endif  // ASPCNET_CAPSULES_HPP
