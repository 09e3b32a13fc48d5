#include <doctest.h>

#include <aspcnet/asp.hpp>

#include "oracles.hpp"

using namespace aspcnet;

namespace {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

// The ASP forward path with every piece exposed as a Var, so each gradient
// path can be finite-difference checked independently.
Var<double> asp_forward_graph(Tape<double>& t, Var<double> input, Var<double> weight,
                              Var<double> off_w, Var<double> off_b, Var<double> mask_w,
                              Var<double> mask_b, const DilatedGrid& grid, int stride) {
  Var<double> off = bias_add(conv2d(input, off_w, stride, Padding::same_zero), off_b);
  Var<double> mraw = bias_add(conv2d(input, mask_w, stride, Padding::same_zero), mask_b);
  Var<double> masks = scale(sigmoid(mraw), 2.0);
  return contract_samples(asp_sample(input, off, masks, grid, stride), weight);
}

}  // namespace

TEST_CASE("dilated grid: rate-3 case, rate-1 reduction, extent law") {
  DilatedGrid g = build_dilated_grid(3, 3, 3);
  CHECK(g.points() == 9);
  CHECK(g.extent_h() == 7);  // 3 + (3-1)(3-1)
  CHECK(g.extent_w() == 7);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK((g.dy[i] == -3 || g.dy[i] == 0 || g.dy[i] == 3));
    CHECK((g.dx[i] == -3 || g.dx[i] == 0 || g.dx[i] == 3));
  }

  DilatedGrid unit = build_dilated_grid(3, 3, 1);
  CHECK(unit.extent_h() == 3);
  int idx = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      CHECK(unit.dy[static_cast<std::size_t>(idx)] == dy);
      CHECK(unit.dx[static_cast<std::size_t>(idx)] == dx);
      ++idx;
    }

  DilatedGrid four = build_dilated_grid(3, 3, 4);
  CHECK(four.extent_h() == 9);
  CHECK(four.extent_w() == 9);
  for (std::size_t i = 0; i < 9; ++i) CHECK(four.dy[i] % 4 == 0);

  for (int p : {1, 3, 5})
    for (int q : {1, 3, 5})
      for (int rate = 1; rate <= 5; ++rate) {
        DilatedGrid gg = build_dilated_grid(p, q, rate);
        CHECK(gg.extent_h() == p + (p - 1) * (rate - 1));
        CHECK(gg.extent_w() == q + (q - 1) * (rate - 1));
        CHECK(static_cast<int>(gg.dy.size()) == p * q);
      }

  CHECK_THROWS(build_dilated_grid(2, 3, 1));
  CHECK_THROWS(build_dilated_grid(3, 3, 0));
}

TEST_CASE("bilinear sampling: grid points, symmetric mean, corner oracle") {
  Tape<double> t;
  Tensor<double> map({2, 2, 1}, {0.0, 1.0, 2.0, 3.0});
  auto m = t.input(map);

  auto exact = bilinear_sample(m, t.input(Tensor<double>({2}, {1.0, 0.0})));
  CHECK(t.value(exact).data[0] == 2.0);  // map[1][0], bit-exact at integers

  auto mid = bilinear_sample(m, t.input(Tensor<double>({2}, {0.5, 0.5})));
  CHECK(t.value(mid).data[0] == doctest::Approx(1.5));

  Rng rng(3);
  Tensor<double> big = random_tensor<double>({6, 5, 1}, rng);
  auto bigv = t.input(big);
  for (int trial = 0; trial < 200; ++trial) {
    const double y = rng.uniform(0.0, 5.0);
    const double x = rng.uniform(0.0, 4.0);
    auto v = bilinear_sample(bigv, t.input(Tensor<double>({2}, {y, x})));
    CHECK(t.value(v).data[0] ==
          doctest::Approx(oracles::bilinear(big.data, 6, 5, y, x)).epsilon(1e-9));
  }

  CHECK_THROWS(bilinear_sample(
      m, t.input(Tensor<double>({2}, {std::nan(""), 0.0}))));
}

TEST_CASE("bilinear sampling is a convex combination of its corners") {
  Rng rng(31);
  Tensor<double> map = random_tensor<double>({4, 4, 2}, rng);
  Tape<double> t;
  auto m = t.input(map);
  for (int trial = 0; trial < 100; ++trial) {
    const double y = rng.uniform(0.0, 3.0);
    const double x = rng.uniform(0.0, 3.0);
    const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
    auto v = bilinear_sample(m, t.input(Tensor<double>({2}, {y, x})));
    for (int c = 0; c < 2; ++c) {
      double lo = 1e9, hi = -1e9;
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          const double corner = map.at({std::min(y0 + dy, 3), std::min(x0 + dx, 3), c});
          lo = std::min(lo, corner);
          hi = std::max(hi, corner);
        }
      CHECK(t.value(v).data[static_cast<std::size_t>(c)] >= lo - 1e-12);
      CHECK(t.value(v).data[static_cast<std::size_t>(c)] <= hi + 1e-12);
    }
  }
}

TEST_CASE("bilinear gradients: map values and coordinates") {
  Rng rng(41);
  Tensor<double> map = random_tensor<double>({5, 4, 3}, rng);
  Tensor<double> coords({2}, {2.37, 1.61});
  Tensor<double> w = random_tensor<double>({3}, rng, 0.5, 1.0);

  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              auto s = bilinear_sample(v, t.constant(coords));
              return reduce_sum(mul(s, t.constant(w)), {0});
            },
            map, 1e-5) <= 1e-4);
  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              auto s = bilinear_sample(t.constant(map), v);
              return reduce_sum(mul(s, t.constant(w)), {0});
            },
            coords, 1e-5) <= 1e-4);
}

TEST_CASE("dilated convolution: rate-1 identity, 1x1 kernels, index trace") {
  Rng rng(53);
  auto in = random_tensor<double>({1, 6, 6, 2}, rng);
  auto k = random_tensor<double>({3, 3, 2, 2}, rng);
  Tape<double> t;
  auto a = dilated_conv_forward(t.input(in), t.input(k), 1, 1);
  auto b = conv2d(t.input(in), t.input(k), 1, Padding::same_zero);
  CHECK(max_abs_diff(t.value(a), t.value(b)) == 0.0);

  auto one = random_tensor<double>({1, 1, 2, 3}, rng);
  auto c = dilated_conv_forward(t.input(in), t.input(one), 4, 1);
  auto d = conv2d(t.input(in), t.input(one), 1, Padding::same_zero);
  CHECK(max_abs_diff(t.value(c), t.value(d)) == 0.0);

  // Center pixel of a 7x7 map under a 3x3 rate-3 kernel of ones reads exactly
  // the corner/edge/center pixels {0,3,6} x {0,3,6}.
  Tensor<double> trace({1, 7, 7, 1});
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) trace.at({0, y, x, 0}) = 10.0 * y + x;
  auto ones = t.input(Tensor<double>({3, 3, 1, 1}, 1.0));
  auto traced = dilated_conv_forward(t.input(trace), ones, 3, 1);
  double expected = 0;
  for (int y : {0, 3, 6})
    for (int x : {0, 3, 6}) expected += 10.0 * y + x;
  CHECK(t.value(traced).at({0, 3, 3, 0}) == doctest::Approx(expected));
}

TEST_CASE("deformable convolution: zero offsets, column shift, corner oracle") {
  Rng rng(67);
  auto in = random_tensor<double>({1, 6, 6, 2}, rng);
  auto k = random_tensor<double>({3, 3, 2, 2}, rng);
  Tape<double> t;

  auto zero_off = t.input(Tensor<double>({1, 6, 6, 18}));
  auto def = deformable_conv_forward(t.input(in), t.input(k), zero_off);
  auto reg = conv2d(t.input(in), t.input(k), 1, Padding::same_zero);
  CHECK(max_abs_diff(t.value(def), t.value(reg)) <= 1e-12);

  // Offsets (0, +1) everywhere shift the sampled columns by one for interior
  // pixels.
  Tensor<double> col_shift({1, 6, 6, 18});
  for (std::size_t i = 0; i < col_shift.size(); ++i)
    if (i % 2 == 1) col_shift.data[i] = 1.0;
  auto shifted = deformable_conv_forward(t.input(in), t.input(k), t.input(col_shift));
  for (int y = 1; y < 5; ++y)
    for (int x = 1; x < 4; ++x)  // x+1 stays interior
      for (int f = 0; f < 2; ++f)
        CHECK(t.value(shifted).at({0, y, x, f}) ==
              doctest::Approx(t.value(reg).at({0, y, x + 1, f})).epsilon(1e-9));

  // Random fractional offsets against a per-pixel corner expansion.
  auto off = random_tensor<double>({1, 6, 6, 18}, rng, -0.9, 0.9);
  auto frac = deformable_conv_forward(t.input(in), t.input(k), t.input(off));
  DilatedGrid grid = build_dilated_grid(3, 3, 1);
  for (int oy = 0; oy < 6; ++oy)
    for (int ox = 0; ox < 6; ++ox)
      for (int f = 0; f < 2; ++f) {
        double acc = 0;
        for (int ki = 0; ki < 9; ++ki) {
          const double y = oy + grid.dy[static_cast<std::size_t>(ki)] + off.at({0, oy, ox, 2 * ki});
          const double x =
              ox + grid.dx[static_cast<std::size_t>(ki)] + off.at({0, oy, ox, 2 * ki + 1});
          if (!(y > -1.0 && y < 6.0 && x > -1.0 && x < 6.0)) continue;  // zero outside
          for (int c = 0; c < 2; ++c) {
            std::vector<double> plane(36);
            for (int yy = 0; yy < 6; ++yy)
              for (int xx = 0; xx < 6; ++xx)
                plane[static_cast<std::size_t>(yy) * 6 + xx] = in.at({0, yy, xx, c});
            acc += oracles::bilinear(plane, 6, 6, y, x) *
                   k.at({ki / 3, ki % 3, c, f});
          }
        }
        CHECK(t.value(frac).at({0, oy, ox, f}) == doctest::Approx(acc).epsilon(1e-6));
      }

  CHECK_THROWS(deformable_conv_forward(t.input(in), t.input(k),
                                       t.input(Tensor<double>({1, 6, 6, 17}))));
}

TEST_CASE("ASP init-equivalence and the reduction chain to conv2d") {
  Rng rng(71);
  for (int trial = 0; trial < 10; ++trial) {
    const int rate = 1 + static_cast<int>(rng.uniform_int(3));
    auto in = random_tensor<float>({2, 7, 7, 3}, rng);
    Rng init(1000 + static_cast<std::uint64_t>(trial));
    auto layer = AspConvLayer<float>::make("l", 3, 3, 3, 4, rate, 1, init);
    Tape<float> t;
    auto out = layer.forward(t, t.input(in));
    auto plain = bias_add(dilated_conv_forward(t.input(in), t.constant(layer.weight.value),
                                               rate, 1),
                          t.constant(layer.bias.value));
    CHECK(max_abs_diff(t.value(out), t.value(plain)) <= 1e-6f);
  }

  // rate 1 + zero branches: ASP == deformable(zero offsets) == conv2d.
  auto in = random_tensor<float>({1, 5, 5, 2}, rng);
  Rng init(5);
  auto layer = AspConvLayer<float>::make("l", 3, 3, 2, 3, 1, 1, init);
  Tape<float> t;
  auto asp_out = layer.forward(t, t.input(in));
  auto def = deformable_conv_forward(t.input(in), t.constant(layer.weight.value),
                                     t.input(Tensor<float>({1, 5, 5, 18})));
  auto reg = conv2d(t.input(in), t.constant(layer.weight.value), 1, Padding::same_zero);
  CHECK(max_abs_diff(t.value(def), t.value(reg)) <= 1e-6f);
  auto def_b = bias_add(def, t.constant(layer.bias.value));
  CHECK(max_abs_diff(t.value(asp_out), t.value(def_b)) <= 1e-6f);
}

TEST_CASE("ASP on a constant field gives c * sum(W) away from borders") {
  Rng init(9);
  auto layer = AspConvLayer<double>::make("l", 3, 3, 2, 2, 2, 1, init);
  const double c = 0.75;
  Tape<double> t;
  auto out = layer.forward(t, t.input(Tensor<double>({1, 9, 9, 2}, c)));
  for (int f = 0; f < 2; ++f) {
    double wsum = 0;
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx)
        for (int ci = 0; ci < 2; ++ci) wsum += layer.weight.value.at({ky, kx, ci, f});
    // Interior pixels: the 5x5 dilated footprint stays inside a 9x9 map for
    // output rows/cols 2..6.
    for (int y = 2; y <= 6; ++y)
      for (int x = 2; x <= 6; ++x)
        CHECK(t.value(out).at({0, y, x, f}) == doctest::Approx(c * wsum).epsilon(1e-9));
  }
}

TEST_CASE("asp_sample mask gradient equals the sampled value times upstream grad") {
  Rng rng(83);
  auto in = random_tensor<double>({1, 3, 3, 1}, rng);
  DilatedGrid grid = build_dilated_grid(3, 3, 1);
  Tape<double> t;
  auto input = t.constant(in);
  auto offsets = t.constant(Tensor<double>({1, 3, 3, 18}));
  auto masks = t.input(Tensor<double>({1, 3, 3, 9}, 1.0), true);
  auto out = asp_sample(input, offsets, masks, grid, 1);
  t.backward(reduce_sum(out, {0, 1, 2, 3, 4}));
  const Tensor<double> g = t.grad(masks);
  for (int oy = 0; oy < 3; ++oy)
    for (int ox = 0; ox < 3; ++ox)
      for (int ki = 0; ki < 9; ++ki) {
        const int sy = oy + grid.dy[static_cast<std::size_t>(ki)];
        const int sx = ox + grid.dx[static_cast<std::size_t>(ki)];
        // Out-of-map grid points sample the zero padding.
        const double val =
            (sy >= 0 && sy < 3 && sx >= 0 && sx < 3) ? in.at({0, sy, sx, 0}) : 0.0;
        CHECK(g.at({0, oy, ox, ki}) == doctest::Approx(val).epsilon(1e-9));
      }
}

TEST_CASE("saturated clamps propagate zero coordinate gradients") {
  Rng rng(97);
  auto in = random_tensor<double>({1, 4, 4, 1}, rng);
  DilatedGrid grid = build_dilated_grid(1, 1, 1);
  Tape<double> t;
  auto offsets = t.input(Tensor<double>({1, 4, 4, 2}, 100.0), true);  // far outside
  auto out = asp_sample(t.constant(in), offsets, Var<double>{}, grid, 1);
  t.backward(reduce_sum(out, {0, 1, 2, 3, 4}));
  for (double v : t.grad(offsets).data) CHECK(v == 0.0);
}

TEST_CASE("ASP gradients pass finite differences on every path") {
  Rng rng(101);
  const DilatedGrid grid = build_dilated_grid(3, 3, 2);
  const int stride = 1;
  auto in = random_tensor<double>({1, 7, 7, 2}, rng);
  auto weight = random_tensor<double>({3, 3, 2, 2}, rng);
  auto off_w = random_tensor<double>({3, 3, 2, 18}, rng, -0.25, 0.25);
  auto off_b = random_tensor<double>({18}, rng, -0.2, 0.2);
  auto mask_w = random_tensor<double>({3, 3, 2, 9}, rng, -0.3, 0.3);
  auto mask_b = random_tensor<double>({9}, rng, -0.2, 0.2);
  auto wsum = random_tensor<double>({1, 7, 7, 2}, rng, 0.4, 1.0);

  auto graph = [&](Tape<double>& t, Var<double> input, Var<double> w, Var<double> ow,
                   Var<double> ob, Var<double> mw, Var<double> mb) {
    auto y = asp_forward_graph(t, input, w, ow, ob, mw, mb, grid, stride);
    return reduce_sum(mul(y, t.constant(wsum)), {0, 1, 2, 3});
  };

  const double step = 1e-5, tol = 1e-4;
  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              return graph(t, v, t.constant(weight), t.constant(off_w), t.constant(off_b),
                           t.constant(mask_w), t.constant(mask_b));
            },
            in, step) <= tol);
  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              return graph(t, t.constant(in), v, t.constant(off_w), t.constant(off_b),
                           t.constant(mask_w), t.constant(mask_b));
            },
            weight, step) <= tol);
  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              return graph(t, t.constant(in), t.constant(weight), v, t.constant(off_b),
                           t.constant(mask_w), t.constant(mask_b));
            },
            off_w, step) <= tol);
  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              return graph(t, t.constant(in), t.constant(weight), t.constant(off_w), v,
                           t.constant(mask_w), t.constant(mask_b));
            },
            off_b, step) <= tol);
  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              return graph(t, t.constant(in), t.constant(weight), t.constant(off_w),
                           t.constant(off_b), v, t.constant(mask_b));
            },
            mask_w, step) <= tol);
  CHECK(finite_diff_check(
            [&](Tape<double>& t, Var<double> v) {
              return graph(t, t.constant(in), t.constant(weight), t.constant(off_w),
                           t.constant(off_b), t.constant(mask_w), v);
            },
            mask_b, step) <= tol);
}
