#ifndef ASPCNET_MODEL_HPP
#define ASPCNET_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aspcnet/capsules.hpp"

namespace aspcnet {

// ---------------------------------------------------------------------------
// Network configuration. Defaults follow the reference training protocol
// (27x27 patches of a 15-band reduced cube, Adam 5e-4, batch 96, 200 epochs).
// width_scale uniformly shrinks the filter and capsule-type counts for
// desk-scale experiments; 1.0 reproduces the full architecture.
// ---------------------------------------------------------------------------

struct AspcNetConfig {
  int pca_dims = 15;  // d
  int patch = 27;     // m (odd)
  int classes = 2;    // T
  int dilation = 3;   // h_dr of the ASPConv blocks
  int asp1_filters = 128;
  int asp2_filters = 256;
  int caps_types = 32;
  int caps_dim = 4;
  int digital_dim = 16;
  int routing_iters = 3;
  double margin_pos = 0.9;
  double margin_neg = 0.1;
  double margin_lambda = 0.5;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch = 96;
  int epochs = 200;
  double bn_momentum = 0.9;
  std::uint64_t seed = 0;
  double width_scale = 1.0;

  int scaled(int width) const {
    return std::max(1, static_cast<int>(std::lround(width * width_scale)));
  }
  static int halved(int extent) { return (extent + 1) / 2; }
  int spatial_after_blocks() const { return halved(halved(patch)); }
  int flattened_capsules() const {
    const int s = spatial_after_blocks();
    return s * s * scaled(caps_types);
  }

  void validate() const {
    check(pca_dims >= 1, "config: pca_dims must be positive");
    check(patch >= 3 && patch % 2 == 1, "config: patch must be odd and >= 3");
    check(classes >= 2, "config: need at least 2 classes");
    check(dilation >= 1, "config: dilation must be >= 1");
    check(asp1_filters >= 1 && asp2_filters >= 1 && caps_types >= 1 && caps_dim >= 1 &&
              digital_dim >= 1,
          "config: widths must be positive");
    check(routing_iters >= 1, "config: routing_iters must be >= 1");
    check(batch >= 1 && epochs >= 0, "config: batch/epochs invalid");
    check(width_scale > 0, "config: width_scale must be positive");
  }
};

struct ShapeTraceEntry {
  std::string name;
  Shape shape;  // includes the batch axis
};
using ShapeTrace = std::vector<ShapeTraceEntry>;

// ---------------------------------------------------------------------------
// The full network: two ASPConv blocks (each ASP 3x3 stride 1 + 1x1 stride-2
// convolution + ReLU, the second followed by batch norm), capsule conversion,
// two ASPCaps layers, flatten, fully connected digital capsules, class norms.
// ---------------------------------------------------------------------------

template <typename S>
struct AspcNet {
  AspcNetConfig cfg;
  AspConvLayer<S> asp1, asp2;
  Param<S> conv1_weight, conv1_bias;
  Param<S> conv2_weight, conv2_bias;
  Param<S> bn_gamma, bn_beta;
  BatchNormState<S> bn;
  AspCapsLayer<S> caps1, caps2;
  DigitalCapsLayer<S> digital;

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (Param<S>* p : asp1.params()) out.push_back(p);
    out.push_back(&conv1_weight);
    out.push_back(&conv1_bias);
    for (Param<S>* p : asp2.params()) out.push_back(p);
    out.push_back(&conv2_weight);
    out.push_back(&conv2_bias);
    out.push_back(&bn_gamma);
    out.push_back(&bn_beta);
    for (Param<S>* p : caps1.params()) out.push_back(p);
    for (Param<S>* p : caps2.params()) out.push_back(p);
    for (Param<S>* p : digital.params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Param<S>* p : params()) p->zero_grad();
  }

  /// batch: (N, m, m, d). Returns per-class capsule norms (N, T) in [0, 1).
  Var<S> forward(Tape<S>& t, Var<S> batch, BnMode mode, ShapeTrace* trace = nullptr) {
    const Shape& in_shape = t.value(batch).shape;
    check(in_shape == Shape({in_shape[0], cfg.patch, cfg.patch, cfg.pca_dims}),
          "forward: batch must be (N," + std::to_string(cfg.patch) + "," +
              std::to_string(cfg.patch) + "," + std::to_string(cfg.pca_dims) + "), got " +
              shape_str(in_shape));
    auto record = [&](const char* name, Var<S> v) {
      if (trace) trace->push_back({name, t.value(v).shape});
      return v;
    };
    record("input", batch);
    Var<S> x = record("asp1", asp1.forward(t, batch));
    x = conv2d(x, t.param(conv1_weight), 2, Padding::same_zero);
    x = record("conv1", relu(bias_add(x, t.param(conv1_bias))));
    x = record("asp2", asp2.forward(t, x));
    x = conv2d(x, t.param(conv2_weight), 2, Padding::same_zero);
    x = record("conv2", relu(bias_add(x, t.param(conv2_bias))));
    x = record("bn", batch_norm(x, t.param(bn_gamma), t.param(bn_beta), bn,
                                static_cast<S>(cfg.bn_momentum), mode));
    Var<S> caps = record("convert_to_caps", convert_to_caps(x));
    caps = record("asp_caps1", caps1.forward(t, caps));
    caps = record("asp_caps2", caps2.forward(t, caps));
    caps = record("flatten_caps", flatten_caps(caps));
    caps = record("digital_caps", digital.forward(t, caps));
    return record("caps_to_scalars", caps_to_scalars(caps));
  }
};

template <typename S>
AspcNet<S> build_network(const AspcNetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  AspcNet<S> net;
  net.cfg = cfg;
  const int f1 = cfg.scaled(cfg.asp1_filters);
  const int f2 = cfg.scaled(cfg.asp2_filters);
  const int ct = cfg.scaled(cfg.caps_types);
  net.asp1 = AspConvLayer<S>::make("asp1", 3, 3, cfg.pca_dims, f1, cfg.dilation, 1, rng);
  net.conv1_weight = Param<S>("conv1.weight", Tensor<S>({1, 1, f1, f1}));
  glorot_uniform_fill(net.conv1_weight.value, static_cast<std::size_t>(f1),
                      static_cast<std::size_t>(f1), rng);
  net.conv1_bias = Param<S>("conv1.bias", Tensor<S>({f1}));
  net.asp2 = AspConvLayer<S>::make("asp2", 3, 3, f1, f2, cfg.dilation, 1, rng);
  net.conv2_weight = Param<S>("conv2.weight", Tensor<S>({1, 1, f2, f2}));
  glorot_uniform_fill(net.conv2_weight.value, static_cast<std::size_t>(f2),
                      static_cast<std::size_t>(f2), rng);
  net.conv2_bias = Param<S>("conv2.bias", Tensor<S>({f2}));
  net.bn_gamma = Param<S>("bn.gamma", Tensor<S>(Shape{f2}, S(1)));
  net.bn_beta = Param<S>("bn.beta", Tensor<S>({f2}));
  net.bn = BatchNormState<S>(f2);
  net.caps1 = AspCapsLayer<S>::make("caps1", f2, 1, ct, cfg.caps_dim, cfg.routing_iters, rng);
  net.caps2 = AspCapsLayer<S>::make("caps2", ct, cfg.caps_dim, ct, cfg.caps_dim,
                                    cfg.routing_iters, rng);
  net.digital = DigitalCapsLayer<S>::make("digital", cfg.flattened_capsules(), cfg.caps_dim,
                                          cfg.classes, cfg.digital_dim, cfg.routing_iters, rng);
  return net;
}

// ---------------------------------------------------------------------------
// Margin loss: per class j,
//   T_j * max(0, m+ - |v_j|)^2 + lambda * (1 - T_j) * max(0, |v_j| - m-)^2
// summed over classes, averaged over the batch.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> margin_loss(Var<S> scores, const std::vector<int>& labels, double margin_pos,
                   double margin_neg, double lambda) {
  Tape<S>& t = detail::tape_of(scores);
  const Shape& s = t.value(scores).shape;
  check(s.size() == 2, "margin_loss: scores must be (N,T)");
  const int n = s[0], classes = s[1];
  check(static_cast<int>(labels.size()) == n, "margin_loss: label count mismatch");
  Tensor<S> onehot({n, classes});
  for (int i = 0; i < n; ++i) {
    check(labels[static_cast<std::size_t>(i)] >= 0 &&
              labels[static_cast<std::size_t>(i)] < classes,
          "margin_loss: label out of range");
    onehot.at({i, labels[static_cast<std::size_t>(i)]}) = S(1);
  }
  Var<S> target = t.constant(std::move(onehot));
  Var<S> present = square(relu(sub(static_cast<S>(margin_pos), scores)));
  Var<S> absent = square(relu(sub(scores, static_cast<S>(margin_neg))));
  Var<S> per_class = add(mul(target, present),
                         scale(mul(sub(S(1), target), absent), static_cast<S>(lambda)));
  return reduce_mean(reduce_sum(per_class, {1}), {0});
}

template <typename S>
Var<S> margin_loss(Var<S> scores, const std::vector<int>& labels, const AspcNetConfig& cfg) {
  return margin_loss(scores, labels, cfg.margin_pos, cfg.margin_neg, cfg.margin_lambda);
}

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------

template <typename S>
struct AdamOptimizer {
  double lr = 5e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long long t = 0;

  void step(const std::vector<Param<S>*>& params) {
    ++t;
    const S c1 = static_cast<S>(1.0 - std::pow(beta1, static_cast<double>(t)));
    const S c2 = static_cast<S>(1.0 - std::pow(beta2, static_cast<double>(t)));
    const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
    const S a = static_cast<S>(lr), e = static_cast<S>(eps);
    for (Param<S>* p : params) {
      if (p->adam_m.empty()) {
        p->adam_m = Tensor<S>(p->value.shape);
        p->adam_v = Tensor<S>(p->value.shape);
      }
      check(p->adam_m.same_shape(p->value), "adam: state/param shape mismatch for " + p->name);
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const S g = p->grad.data[i];
        S& m = p->adam_m.data[i];
        S& v = p->adam_v.data[i];
        m = b1 * m + (S(1) - b1) * g;
        v = b2 * v + (S(1) - b2) * g * g;
        p->value.data[i] -= a * (m / c1) / (std::sqrt(v / c2) + e);
      }
    }
  }
};

/// Single-parameter convenience used by the optimizer tests.
template <typename S>
void adam_step(Param<S>& p, AdamOptimizer<S>& opt) {
  std::vector<Param<S>*> one{&p};
  opt.step(one);
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

/// Argmax class per sample; ties break to the lowest index.
template <typename S>
std::vector<int> classify(AspcNet<S>& net, const Tensor<S>& patches) {
  Tape<S> tape;
  tape.set_grad_enabled(false);
  Var<S> scores = net.forward(tape, tape.input(patches), BnMode::infer);
  auto mr = reduce_max(scores, 1);
  return std::vector<int>(mr.indices.data.begin(), mr.indices.data.end());
}

/// Gradient of one class score w.r.t. the input patch: absolute value, summed
/// over bands, min-max normalized to [0,1]. patch: (m,m,d) -> (m,m).
template <typename S>
Tensor<S> saliency(AspcNet<S>& net, const Tensor<S>& patch, int target_class) {
  check(patch.rank() == 3, "saliency: patch must be (m,m,d)");
  check(target_class >= 0 && target_class < net.cfg.classes, "saliency: class out of range");
  const int m = patch.shape[0], d = patch.shape[2];
  Tape<S> tape;
  Var<S> x = tape.input(Tensor<S>({1, m, m, d}, patch.data), true);
  Var<S> scores = net.forward(tape, x, BnMode::infer);
  Tensor<S> pick({1, net.cfg.classes});
  pick.at({0, target_class}) = S(1);
  Var<S> score = reduce_sum(mul(scores, tape.constant(std::move(pick))), {0, 1});
  tape.backward(score);
  Tensor<S> g = tape.grad(x);
  Tensor<S> out({m, m});
  for (int y = 0; y < m; ++y)
    for (int xc = 0; xc < m; ++xc) {
      S acc = 0;
      for (int b = 0; b < d; ++b) acc += std::abs(g.at({0, y, xc, b}));
      out.at({y, xc}) = acc;
    }
  S lo = out.data[0], hi = out.data[0];
  for (S v : out.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo)
    for (S& v : out.data) v = (v - lo) / (hi - lo);
  else
    out.fill(S(0));
  return out;
}

}  // namespace aspcnet

#endif  // ASPCNET_MODEL_HPP
