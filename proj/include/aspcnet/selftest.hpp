#ifndef ASPCNET_SELFTEST_HPP
#define ASPCNET_SELFTEST_HPP

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "aspcnet/metrics.hpp"
#include "aspcnet/model.hpp"

namespace aspcnet {

// Embedded invariant suite: operator equivalences, gradient checks, routing
// invariants, shape conformance, formula spot checks, and oracle
// cross-validation. The oracles here are plain-loop reimplementations kept
// independent of the kernels they check.

struct SelfCheck {
  std::string name;
  std::function<bool(std::string&)> run;  // fills a detail line on failure
};

/// Test hook: deliberately breaks a checked property so the failure path of
/// the runner can be exercised. Enabled via ASPCNET_FAULT=squash-range.
struct FaultInjection {
  bool squash_range = false;
};

namespace selftest_detail {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

// Four-corner bilinear expansion on a zero-padded plane.
inline double corner_bilinear(const std::vector<double>& plane, int h, int w, double y,
                              double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  double acc = 0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const int yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      acc += (dy == 0 ? 1.0 - (y - y0) : y - y0) * (dx == 0 ? 1.0 - (x - x0) : x - x0) *
             plane[static_cast<std::size_t>(yy) * w + xx];
    }
  return acc;
}

// Scripted dynamic routing over votes[i][j][d], one position.
inline std::vector<std::vector<double>> scripted_routing(
    const std::vector<std::vector<std::vector<double>>>& votes, int iterations) {
  const std::size_t n_in = votes.size(), n_out = votes[0].size(), dim = votes[0][0].size();
  std::vector<std::vector<double>> b(n_in, std::vector<double>(n_out, 0.0));
  std::vector<std::vector<double>> c = b;
  std::vector<std::vector<double>> v(n_out, std::vector<double>(dim, 0.0));
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n_in; ++i) {
      double hi = b[i][0];
      for (std::size_t j = 1; j < n_out; ++j) hi = std::max(hi, b[i][j]);
      double denom = 0;
      for (std::size_t j = 0; j < n_out; ++j) denom += (c[i][j] = std::exp(b[i][j] - hi));
      for (std::size_t j = 0; j < n_out; ++j) c[i][j] /= denom;
    }
    for (std::size_t j = 0; j < n_out; ++j) {
      std::vector<double> s(dim, 0.0);
      for (std::size_t i = 0; i < n_in; ++i)
        for (std::size_t d = 0; d < dim; ++d) s[d] += c[i][j] * votes[i][j][d];
      double sq = 0;
      for (double e : s) sq += e * e;
      const double gain = sq / ((1.0 + sq) * (std::sqrt(sq) + 1e-9));
      for (std::size_t d = 0; d < dim; ++d) v[j][d] = gain * s[d];
    }
    if (it + 1 < iterations)
      for (std::size_t i = 0; i < n_in; ++i)
        for (std::size_t j = 0; j < n_out; ++j) {
          double dot = 0;
          for (std::size_t d = 0; d < dim; ++d) dot += votes[i][j][d] * v[j][d];
          b[i][j] += dot;
        }
  }
  return v;
}

inline bool close(double a, double b, double tol, std::string& detail, const char* what) {
  if (std::abs(a - b) <= tol) return true;
  detail = std::string(what) + ": " + std::to_string(a) + " vs " + std::to_string(b);
  return false;
}

template <typename S>
Var<S> asp_graph(Tape<S>&, Var<S> input, Var<S> weight, Var<S> off_w, Var<S> off_b,
                 Var<S> mask_w, Var<S> mask_b, const DilatedGrid& grid, int stride) {
  Var<S> off = bias_add(conv2d(input, off_w, stride, Padding::same_zero), off_b);
  Var<S> masks = scale(sigmoid(bias_add(conv2d(input, mask_w, stride, Padding::same_zero),
                                        mask_b)),
                       S(2));
  return contract_samples(asp_sample(input, off, masks, grid, stride), weight);
}

}  // namespace selftest_detail

inline std::vector<SelfCheck> build_selftest_suite(const FaultInjection& fault = {}) {
  using namespace selftest_detail;
  std::vector<SelfCheck> checks;

  // -------------------------------------------------------------- A1 chain
  checks.push_back({"equivalence-asp-vs-dilated (100 instances)", [](std::string& detail) {
    Rng rng(101);
    for (int trial = 0; trial < 100; ++trial) {
      const int rate = 1 + static_cast<int>(rng.uniform_int(4));
      const int cin = 1 + static_cast<int>(rng.uniform_int(3));
      const int cout = 1 + static_cast<int>(rng.uniform_int(3));
      const int h = 5 + static_cast<int>(rng.uniform_int(4));
      auto in = random_tensor<double>({1, h, h, cin}, rng);
      Rng init(1000 + static_cast<std::uint64_t>(trial));
      auto layer = AspConvLayer<double>::make("l", 3, 3, cin, cout, rate, 1, init);
      Tape<double> t;
      t.set_grad_enabled(false);
      auto a = layer.forward(t, t.input(in));
      auto b = bias_add(
          dilated_conv_forward(t.input(in), t.constant(layer.weight.value), rate, 1),
          t.constant(layer.bias.value));
      const double diff = max_abs_diff(t.value(a), t.value(b));
      if (diff > 1e-6) {
        detail = "trial " + std::to_string(trial) + " diff " + std::to_string(diff);
        return false;
      }
    }
    return true;
  }});

  checks.push_back({"equivalence-dilated-rate1-vs-conv (100 instances)", [](std::string& detail) {
    Rng rng(103);
    for (int trial = 0; trial < 100; ++trial) {
      const int cin = 1 + static_cast<int>(rng.uniform_int(3));
      const int cout = 1 + static_cast<int>(rng.uniform_int(3));
      const int h = 4 + static_cast<int>(rng.uniform_int(5));
      auto in = random_tensor<double>({1, h, h, cin}, rng);
      auto k = random_tensor<double>({3, 3, cin, cout}, rng);
      Tape<double> t;
      t.set_grad_enabled(false);
      auto a = dilated_conv_forward(t.input(in), t.input(k), 1, 1);
      auto b = conv2d(t.input(in), t.input(k), 1, Padding::same_zero);
      const double diff = max_abs_diff(t.value(a), t.value(b));
      if (diff > 1e-6) {
        detail = "trial " + std::to_string(trial) + " diff " + std::to_string(diff);
        return false;
      }
    }
    return true;
  }});

  checks.push_back({"equivalence-deformable-zero-vs-conv (100 instances)",
                    [](std::string& detail) {
    Rng rng(107);
    for (int trial = 0; trial < 100; ++trial) {
      const int cin = 1 + static_cast<int>(rng.uniform_int(3));
      const int cout = 1 + static_cast<int>(rng.uniform_int(3));
      const int h = 4 + static_cast<int>(rng.uniform_int(5));
      auto in = random_tensor<double>({1, h, h, cin}, rng);
      auto k = random_tensor<double>({3, 3, cin, cout}, rng);
      Tape<double> t;
      t.set_grad_enabled(false);
      auto a = deformable_conv_forward(t.input(in), t.input(k),
                                       t.input(Tensor<double>({1, h, h, 18})));
      auto b = conv2d(t.input(in), t.input(k), 1, Padding::same_zero);
      const double diff = max_abs_diff(t.value(a), t.value(b));
      if (diff > 1e-6) {
        detail = "trial " + std::to_string(trial) + " diff " + std::to_string(diff);
        return false;
      }
    }
    return true;
  }});

  // ----------------------------------------------------- A2 gradient suite
  checks.push_back({"grad-elementwise-matmul-reduce", [](std::string& detail) {
    Rng rng(211);
    auto x = random_tensor<double>({2, 3}, rng, 0.2, 1.4);
    auto w = random_tensor<double>({2, 3}, rng, 0.3, 1.0);
    auto rhs = random_tensor<double>({3, 2}, rng);
    double worst = 0;
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          auto y = add(mul(sigmoid(v), t.constant(w)), square(v));
          return reduce_sum(div(y, add(sqrt(v), 1.0)), {0, 1});
        },
        x, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return reduce_mean(square(matmul(v, t.constant(rhs))), {0, 1});
        },
        x, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return reduce_sum(mul(softmax(v, 1), t.constant(w)), {0, 1});
        },
        x, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>&, Var<double> v) { return reduce_sum(l2norm(v, 1), {0}); }, x, 1e-5));
    detail = "max rel err " + std::to_string(worst);
    return worst <= 1e-4;
  }});

  checks.push_back({"grad-conv2d-batchnorm", [](std::string& detail) {
    Rng rng(223);
    auto in = random_tensor<double>({2, 5, 5, 2}, rng);
    auto ker = random_tensor<double>({3, 3, 2, 2}, rng);
    auto w = random_tensor<double>({2, 5, 5, 2}, rng, 0.3, 1.0);
    auto gamma = random_tensor<double>({2}, rng, 0.6, 1.4);
    auto beta = random_tensor<double>({2}, rng, -0.4, 0.4);
    double worst = 0;
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          auto y = conv2d(v, t.constant(ker), 1, Padding::same_zero);
          return reduce_sum(mul(y, t.constant(w)), {0, 1, 2, 3});
        },
        in, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          auto y = conv2d(t.constant(in), v, 2, Padding::same_zero);
          return reduce_sum(square(y), {0, 1, 2, 3});
        },
        ker, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          BatchNormState<double> st(2);
          auto y = batch_norm(v, t.constant(gamma), t.constant(beta), st, 0.9, BnMode::train);
          return reduce_sum(mul(y, t.constant(w)), {0, 1, 2, 3});
        },
        in, 1e-5));
    detail = "max rel err " + std::to_string(worst);
    return worst <= 1e-4;
  }});

  checks.push_back({"grad-bilinear-map-and-coords", [](std::string& detail) {
    Rng rng(227);
    auto map = random_tensor<double>({5, 4, 3}, rng);
    Tensor<double> coords({2}, {2.41, 1.73});
    auto w = random_tensor<double>({3}, rng, 0.4, 1.0);
    double worst = 0;
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return reduce_sum(mul(bilinear_sample(v, t.constant(coords)), t.constant(w)), {0});
        },
        map, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return reduce_sum(mul(bilinear_sample(t.constant(map), v), t.constant(w)), {0});
        },
        coords, 1e-5));
    detail = "max rel err " + std::to_string(worst);
    return worst <= 1e-4;
  }});

  checks.push_back({"grad-asp-all-paths", [](std::string& detail) {
    Rng rng(229);
    const DilatedGrid grid = build_dilated_grid(3, 3, 2);
    auto in = random_tensor<double>({1, 7, 7, 2}, rng);
    auto weight = random_tensor<double>({3, 3, 2, 2}, rng);
    auto off_w = random_tensor<double>({3, 3, 2, 18}, rng, -0.25, 0.25);
    auto off_b = random_tensor<double>({18}, rng, -0.2, 0.2);
    auto mask_w = random_tensor<double>({3, 3, 2, 9}, rng, -0.3, 0.3);
    auto mask_b = random_tensor<double>({9}, rng, -0.2, 0.2);
    auto wsum = random_tensor<double>({1, 7, 7, 2}, rng, 0.4, 1.0);
    auto head = [&](Tape<double>& t, Var<double> input, Var<double> w, Var<double> ow,
                    Var<double> ob, Var<double> mw, Var<double> mb) {
      return reduce_sum(mul(asp_graph(t, input, w, ow, ob, mw, mb, grid, 1), t.constant(wsum)),
                        {0, 1, 2, 3});
    };
    double worst = 0;
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return head(t, v, t.constant(weight), t.constant(off_w), t.constant(off_b),
                      t.constant(mask_w), t.constant(mask_b));
        },
        in, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return head(t, t.constant(in), v, t.constant(off_w), t.constant(off_b),
                      t.constant(mask_w), t.constant(mask_b));
        },
        weight, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return head(t, t.constant(in), t.constant(weight), v, t.constant(off_b),
                      t.constant(mask_w), t.constant(mask_b));
        },
        off_w, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return head(t, t.constant(in), t.constant(weight), t.constant(off_w), v,
                      t.constant(mask_w), t.constant(mask_b));
        },
        off_b, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return head(t, t.constant(in), t.constant(weight), t.constant(off_w),
                      t.constant(off_b), v, t.constant(mask_b));
        },
        mask_w, 1e-5));
    detail = "max rel err " + std::to_string(worst);
    return worst <= 1e-4;
  }});

  checks.push_back({"grad-squash-routing-digitalcaps-marginloss", [](std::string& detail) {
    Rng rng(233);
    auto s = random_tensor<double>({2, 4}, rng, -1.5, 1.5);
    auto sw = random_tensor<double>({2, 4}, rng, 0.3, 1.0);
    auto votes = random_tensor<double>({1, 1, 3, 2, 2}, rng);
    auto vw = random_tensor<double>({1, 2, 2}, rng, 0.4, 1.0);
    auto dtrans = random_tensor<double>({3, 2, 2, 2}, rng);
    auto du = random_tensor<double>({1, 3, 2}, rng);
    auto scores = random_tensor<double>({3, 4}, rng, 0.15, 0.85);
    double worst = 0;
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return reduce_sum(mul(squash(v, 1), t.constant(sw)), {0, 1});
        },
        s, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return reduce_sum(mul(dynamic_routing(v, 3), t.constant(vw)), {0, 1, 2});
        },
        votes, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          auto vt = caps_votes(reshape(v, {1, 3, 2, 2, 2}), reshape(t.constant(du), {1, 1, 3, 2}));
          return reduce_sum(mul(dynamic_routing(vt, 3), t.constant(vw)), {0, 1, 2});
        },
        dtrans, 1e-5));
    worst = std::max(worst, finite_diff_check(
        [&](Tape<double>&, Var<double> v) {
          return margin_loss(v, {0, 2, 1}, 0.9, 0.1, 0.5);
        },
        scores, 1e-5));
    detail = "max rel err " + std::to_string(worst);
    return worst <= 1e-4;
  }});

  checks.push_back({"grad-end-to-end-eighth-width", [](std::string& detail) {
    AspcNetConfig cfg;
    cfg.width_scale = 0.125;
    cfg.patch = 15;
    cfg.pca_dims = 4;
    cfg.classes = 3;
    cfg.seed = 17;
    auto net = build_network<double>(cfg);
    Rng rng(239);
    // Branch weights move off zero so no sampling coordinate sits on a
    // bilinear kink (see the gradient notes in the tests).
    for (Param<double>* p : net.params())
      if (p->name.find("offset_") != std::string::npos ||
          p->name.find("mask_") != std::string::npos)
        for (auto& v : p->value.data) v = rng.uniform(-0.2, 0.2);
    auto input = random_tensor<double>({1, 15, 15, 4}, rng);
    const double err = finite_diff_check(
        [&](Tape<double>& t, Var<double> v) {
          return margin_loss(net.forward(t, v, BnMode::train), {1}, net.cfg);
        },
        input, 1e-5);
    detail = "max rel err " + std::to_string(err);
    return err <= 1e-3;
  }});

  // ------------------------------------------------- A3 routing invariants
  checks.push_back({"routing-coupling-sums (1000 instances)", [](std::string& detail) {
    Rng rng(307);
    for (int trial = 0; trial < 1000; ++trial) {
      const int b = 1 + static_cast<int>(rng.uniform_int(2));
      const int k = 1 + static_cast<int>(rng.uniform_int(3));
      const int ti = 1 + static_cast<int>(rng.uniform_int(5));
      const int to = 2 + static_cast<int>(rng.uniform_int(4));
      const int dm = 2 + static_cast<int>(rng.uniform_int(3));
      Tape<double> t;
      t.set_grad_enabled(false);
      auto votes = t.input(random_tensor<double>({b, k, ti, to, dm}, rng, -2.0, 2.0));
      RoutingTrace<double> trace;
      dynamic_routing(votes, 3, &trace);
      for (const auto& c : trace.couplings)
        for (std::size_t row = 0; row < c.size() / static_cast<std::size_t>(to); ++row) {
          double sum = 0;
          for (int j = 0; j < to; ++j)
            sum += c.data[row * static_cast<std::size_t>(to) + static_cast<std::size_t>(j)];
          if (std::abs(sum - 1.0) > 1e-6) {
            detail = "trial " + std::to_string(trial) + " coupling sum " + std::to_string(sum);
            return false;
          }
        }
    }
    return true;
  }});

  checks.push_back({"routing-squash-range (1000 instances)", [fault](std::string& detail) {
    Rng rng(311);
    for (int trial = 0; trial < 1000; ++trial) {
      const int to = 2 + static_cast<int>(rng.uniform_int(4));
      const int dm = 2 + static_cast<int>(rng.uniform_int(3));
      Tape<double> t;
      t.set_grad_enabled(false);
      auto votes = t.input(random_tensor<double>({1, 1, 4, to, dm}, rng, -2.0, 2.0));
      auto out = dynamic_routing(votes, 3);
      const Tensor<double>& v = t.value(out);
      for (int j = 0; j < to; ++j) {
        double sq = 0;
        for (int d = 0; d < dm; ++d) sq += v.at({0, j, d}) * v.at({0, j, d});
        double norm = std::sqrt(sq);
        if (fault.squash_range) {
          // Test hook: recompute the norm bound with a perturbed squash
          // constant so this property fails on purpose.
          const double n = norm / (1.0 - norm + 1e-12);
          norm = n * n / (0.35 + n * n) * 2.0;
        }
        if (!(norm < 1.0)) {
          detail = "trial " + std::to_string(trial) + " norm " + std::to_string(norm);
          return false;
        }
      }
    }
    return true;
  }});

  checks.push_back({"routing-symmetry-uniform-couplings", [](std::string& detail) {
    Rng rng(313);
    for (int trial = 0; trial < 50; ++trial) {
      const int ti = 2 + static_cast<int>(rng.uniform_int(4));
      const int to = 2 + static_cast<int>(rng.uniform_int(4));
      // One shared vote vector: every (input, output) pair agrees equally, so
      // nothing can break the tie at any iteration.
      double shared[3] = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
                          rng.uniform(-1.0, 1.0)};
      Tensor<double> votes({1, 1, ti, to, 3});
      for (int i = 0; i < ti; ++i)
        for (int j = 0; j < to; ++j)
          for (int d = 0; d < 3; ++d) votes.at({0, 0, i, j, d}) = shared[d];
      Tape<double> t;
      t.set_grad_enabled(false);
      RoutingTrace<double> trace;
      dynamic_routing(t.input(votes), 3, &trace);
      for (const auto& c : trace.couplings)
        for (double v : c.data)
          if (std::abs(v - 1.0 / to) > 1e-9) {
            detail = "coupling " + std::to_string(v) + " expected " + std::to_string(1.0 / to);
            return false;
          }
    }
    return true;
  }});

  // ------------------------------------------------- A4 shape conformance
  checks.push_back({"shape-trace-table (T in {9,15,16})", [](std::string& detail) {
    for (int classes : {9, 15, 16}) {
      AspcNetConfig cfg;
      cfg.classes = classes;
      auto net = build_network<float>(cfg);
      Tape<float> t;
      t.set_grad_enabled(false);
      ShapeTrace trace;
      net.forward(t, t.input(Tensor<float>({1, 27, 27, 15})), BnMode::infer, &trace);
      const std::vector<Shape> expected = {
          {1, 27, 27, 15}, {1, 27, 27, 128},   {1, 14, 14, 128}, {1, 14, 14, 256},
          {1, 7, 7, 256},  {1, 7, 7, 256},     {1, 7, 7, 256, 1}, {1, 7, 7, 32, 4},
          {1, 7, 7, 32, 4}, {1, 1568, 4},      {1, classes, 16}, {1, classes}};
      if (trace.size() != expected.size()) {
        detail = "trace has " + std::to_string(trace.size()) + " rows";
        return false;
      }
      for (std::size_t i = 0; i < expected.size(); ++i)
        if (trace[i].shape != expected[i]) {
          detail = trace[i].name + " is " + shape_str(trace[i].shape) + ", expected " +
                   shape_str(expected[i]);
          return false;
        }
    }
    return true;
  }});

  // ---------------------------------------------- A6 formula spot checks
  checks.push_back({"formula-dilated-extents", [](std::string& detail) {
    DilatedGrid g = build_dilated_grid(3, 3, 3);
    if (g.extent_h() != 7 || g.extent_w() != 7) {
      detail = "(3,3,3) extent " + std::to_string(g.extent_h());
      return false;
    }
    for (int p : {1, 3, 5})
      for (int q : {1, 3, 5})
        for (int rate = 1; rate <= 5; ++rate) {
          DilatedGrid gg = build_dilated_grid(p, q, rate);
          if (gg.extent_h() != p + (p - 1) * (rate - 1) ||
              gg.extent_w() != q + (q - 1) * (rate - 1) ||
              static_cast<int>(gg.dy.size()) != p * q) {
            detail = "extent law broken at p=" + std::to_string(p) + " rate=" +
                     std::to_string(rate);
            return false;
          }
        }
    return true;
  }});

  checks.push_back({"formula-margin-loss-bounds", [](std::string& detail) {
    Tape<double> t;
    auto s = t.input(Tensor<double>({1, 3}, {0.9, 0.1, 0.1}));
    const double at_bounds = t.value(margin_loss(s, {0}, 0.9, 0.1, 0.5)).data[0];
    auto z = t.input(Tensor<double>({1, 3}, {0.0, 0.0, 0.0}));
    const double at_zero = t.value(margin_loss(z, {0}, 0.9, 0.1, 0.5)).data[0];
    return close(at_bounds, 0.0, 1e-12, detail, "loss at the (0.9, 0.1) bounds") &&
           close(at_zero, 0.81, 1e-9, detail, "loss at zero scores");
  }});

  checks.push_back({"formula-kappa-half-matrix", [](std::string& detail) {
    ConfusionMatrix cm(2);
    for (int n = 0; n < 50; ++n) cm.accumulate(0, 0);
    for (int n = 0; n < 50; ++n) cm.accumulate(1, 0);
    return close(cm.kappa(), 0.0, 1e-12, detail, "kappa of [[50,0],[50,0]]");
  }});

  // --------------------------------------------- A7 oracle equivalences
  checks.push_back({"oracle-bilinear-corner-expansion (10k points)", [](std::string& detail) {
    Rng rng(701);
    Tensor<double> map({7, 6, 1});
    for (auto& v : map.data) v = rng.uniform(-2.0, 2.0);
    std::vector<double> plane(map.data.begin(), map.data.end());
    Tape<double> t;
    t.set_grad_enabled(false);
    auto m = t.input(map);
    for (int trial = 0; trial < 10000; ++trial) {
      const double y = rng.uniform(0.0, 6.0);
      const double x = rng.uniform(0.0, 5.0);
      auto v = bilinear_sample(m, t.input(Tensor<double>({2}, {y, x})));
      const double expected = corner_bilinear(plane, 7, 6, y, x);
      if (std::abs(t.value(v).data[0] - expected) > 1e-6) {
        detail = "point (" + std::to_string(y) + "," + std::to_string(x) + ")";
        return false;
      }
    }
    return true;
  }});

  checks.push_back({"oracle-kappa-marginals (1000 matrices)", [](std::string& detail) {
    Rng rng(709);
    for (int trial = 0; trial < 1000; ++trial) {
      const int classes = 2 + static_cast<int>(rng.uniform_int(4));
      ConfusionMatrix cm(classes);
      std::vector<long long> row(static_cast<std::size_t>(classes), 0);
      std::vector<long long> col(static_cast<std::size_t>(classes), 0);
      long long trace = 0, total = 0;
      for (int i = 0; i < 120; ++i) {
        const int truth = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(classes)));
        const int pred = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(classes)));
        cm.accumulate(truth, pred);
        ++row[static_cast<std::size_t>(truth)];
        ++col[static_cast<std::size_t>(pred)];
        if (truth == pred) ++trace;
        ++total;
      }
      double pe = 0;
      for (int c = 0; c < classes; ++c)
        pe += (static_cast<double>(row[static_cast<std::size_t>(c)]) / total) *
              (static_cast<double>(col[static_cast<std::size_t>(c)]) / total);
      const double po = static_cast<double>(trace) / total;
      const double expected = pe >= 1.0 ? (po >= 1.0 ? 1.0 : 0.0) : (po - pe) / (1.0 - pe);
      if (std::abs(cm.kappa() - expected) > 1e-10) {
        detail = "trial " + std::to_string(trial);
        return false;
      }
    }
    return true;
  }});

  checks.push_back({"oracle-digital-caps-scripted", [](std::string& detail) {
    Rng rng(719);
    for (int trial = 0; trial < 20; ++trial) {
      auto layer = DigitalCapsLayer<double>::make("d", 2, 2, 2, 2, 3, rng);
      Tensor<double> input({1, 2, 2});
      for (auto& v : input.data) v = rng.uniform(-1.0, 1.0);
      Tape<double> t;
      t.set_grad_enabled(false);
      auto out = layer.forward(t, t.input(input));
      std::vector<std::vector<std::vector<double>>> votes(
          2, std::vector<std::vector<double>>(2, std::vector<double>(2, 0.0)));
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          for (int d = 0; d < 2; ++d)
            for (int e = 0; e < 2; ++e)
              votes[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]
                   [static_cast<std::size_t>(d)] +=
                  layer.transform.value.at({i, j, d, e}) * input.at({0, i, e});
      auto expected = scripted_routing(votes, 3);
      for (int j = 0; j < 2; ++j)
        for (int d = 0; d < 2; ++d)
          if (std::abs(t.value(out).at({0, j, d}) -
                       expected[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)]) >
              1e-6) {
            detail = "trial " + std::to_string(trial);
            return false;
          }
    }
    return true;
  }});

  return checks;
}

/// Runs the suite printing one PASS/FAIL line per property; returns the count
/// of failures.
inline int run_selftest(std::ostream& out, const FaultInjection& fault = {}) {
  int failures = 0;
  for (const SelfCheck& check : build_selftest_suite(fault)) {
    std::string detail;
    const bool ok = check.run(detail);
    out << (ok ? "PASS " : "FAIL ") << check.name;
    if (!detail.empty()) out << " [" << detail << "]";
    out << "\n";
    out.flush();
    if (!ok) ++failures;
  }
  return failures;
}

}  // namespace aspcnet

#endif  // ASPCNET_SELFTEST_HPP
