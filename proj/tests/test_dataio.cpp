#include <doctest.h>

#include <aspcnet/dataio.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "oracles.hpp"

using namespace aspcnet;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("cube files round-trip exactly and reject bad headers") {
  HsiCube cube;
  cube.height = 2;
  cube.width = 2;
  cube.bands = 1;
  cube.data = {1.5f, -2.25f, 0.0f, 3.75f};
  TempFile f("cube_io.hsic");
  save_cube(cube, f.path);
  HsiCube back = load_cube(f.path);
  CHECK(back.height == 2);
  CHECK(back.width == 2);
  CHECK(back.bands == 1);
  CHECK(back.data == cube.data);

  {
    std::ofstream bad("bad_cube.hsic", std::ios::binary);
    bad << "NOTCUBE 2 2 1\n";
  }
  TempFile g("bad_cube.hsic");
  CHECK_THROWS_WITH_AS(load_cube(g.path), doctest::Contains("magic"), std::runtime_error);

  {
    std::ofstream trunc("trunc_cube.hsic", std::ios::binary);
    trunc << "HSICUBE1 2 2 1\n";
    const char few[4] = {0, 0, 0, 0};
    trunc.write(few, 4);
  }
  TempFile h("trunc_cube.hsic");
  CHECK_THROWS_WITH_AS(load_cube(h.path), doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("label files validate the class range") {
  LabelRaster r;
  r.height = 2;
  r.width = 3;
  r.classes = 4;
  r.labels = {0, 1, 2, 3, 4, 1};
  TempFile f("labels_io.hsig");
  save_labels(r, f.path);
  LabelRaster back = load_labels(f.path);
  CHECK(back.labels == r.labels);
  CHECK(back.classes == 4);

  LabelRaster stray = r;
  stray.labels[2] = 5;  // exceeds T
  TempFile g("labels_bad.hsig");
  save_labels(stray, g.path);
  CHECK_THROWS_WITH_AS(load_labels(g.path), doctest::Contains("exceeds"), std::runtime_error);
}

TEST_CASE("palette files parse class,r,g,b lines") {
  Palette p;
  p.colors[1] = {255, 0, 0};
  p.colors[2] = {0, 255, 0};
  TempFile f("pal.txt");
  save_palette(p, f.path);
  Palette back = load_palette(f.path);
  CHECK(back.colors == p.colors);

  {
    std::ofstream bad("pal_bad.txt");
    bad << "1,255,0\n";
  }
  TempFile g("pal_bad.txt");
  CHECK_THROWS(load_palette(g.path));
}

TEST_CASE("split files round-trip") {
  SplitSpec s;
  s.seed = 99;
  s.train = {{0, 1}, {2, 3}, {4, 5}};
  TempFile f("split.txt");
  save_split(s, f.path);
  SplitSpec back = load_split(f.path);
  CHECK(back.seed == 99);
  CHECK(back.train == s.train);
}

TEST_CASE("stratified split: exact counts, determinism, disjointness") {
  LabelRaster r;
  r.height = 30;
  r.width = 30;
  r.classes = 9;
  r.labels.assign(900, 0);
  for (int i = 0; i < 900; ++i) r.labels[static_cast<std::size_t>(i)] =
      static_cast<std::uint16_t>(i % 10 == 0 ? 0 : 1 + (i % 9));

  SplitRequest req;
  req.seed = 7;
  req.per_class = 40;
  SplitSpec a = stratified_split(r, req);
  CHECK(a.train.size() == 9u * 40u);
  SplitSpec b = stratified_split(r, req);
  CHECK(a.train == b.train);  // same seed, same pixels

  auto test = test_pixels(r, a);
  std::set<std::pair<int, int>> train_set(a.train.begin(), a.train.end());
  for (const auto& px : test) CHECK(!train_set.count(px));
  std::size_t labeled = 0;
  for (auto v : r.labels) labeled += v > 0 ? 1u : 0u;
  CHECK(a.train.size() + test.size() == labeled);

  // Fraction mode: 2% of a 100-pixel class is 2 pixels.
  LabelRaster small;
  small.height = 10;
  small.width = 10;
  small.classes = 1;
  small.labels.assign(100, 1);
  SplitRequest frac;
  frac.seed = 1;
  frac.fraction = 0.02;
  CHECK(stratified_split(small, frac).train.size() == 2);

  // Clamp with warning when a class is too small.
  SplitRequest big;
  big.seed = 1;
  big.per_class = 1000;
  std::string warnings;
  CHECK(stratified_split(small, big, &warnings).train.size() == 100);
  CHECK(warnings.find("clamped") != std::string::npos);

  // A class missing from the raster is an error.
  LabelRaster missing = small;
  missing.classes = 2;  // class 2 never appears
  CHECK_THROWS_AS(stratified_split(missing, frac), std::invalid_argument);
}

TEST_CASE("patch extraction mirrors borders and keeps the center") {
  HsiCube cube;
  cube.height = 4;
  cube.width = 4;
  cube.bands = 2;
  cube.data.resize(32);
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) cube.at(b, y, x) = static_cast<float>(100 * b + 10 * y + x);

  // Interior patch is a plain window copy.
  auto p = extract_patch<float>(cube, 2, 1, 3);
  CHECK(p.shape == Shape({3, 3, 2}));
  for (int dy = 0; dy < 3; ++dy)
    for (int dx = 0; dx < 3; ++dx)
      for (int b = 0; b < 2; ++b)
        CHECK(p.at({dy, dx, b}) == cube.at(b, 1 + dy, dx));

  // Corner (0,0), m=3: reflected rows/cols [1,0,1], center equals the corner.
  auto c = extract_patch<float>(cube, 0, 0, 3);
  CHECK(c.at({1, 1, 0}) == cube.at(0, 0, 0));
  const int map[3] = {1, 0, 1};
  for (int dy = 0; dy < 3; ++dy)
    for (int dx = 0; dx < 3; ++dx)
      CHECK(c.at({dy, dx, 0}) == cube.at(0, map[dy], map[dx]));

  // Center-pixel identity everywhere.
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      auto q = extract_patch<float>(cube, y, x, 5);
      for (int b = 0; b < 2; ++b) CHECK(q.at({2, 2, b}) == cube.at(b, y, x));
    }

  CHECK_THROWS(extract_patch<float>(cube, 4, 0, 3));
  CHECK_THROWS(extract_patch<float>(cube, 0, 0, 4));
}

TEST_CASE("pca: signal recovery, orthonormal projection, jacobi oracle") {
  // Bands: [signal, signal, tiny noise] — the top component tracks the signal.
  Rng rng(3);
  HsiCube cube;
  cube.height = 12;
  cube.width = 12;
  cube.bands = 3;
  cube.data.resize(cube.pixels() * 3);
  std::vector<double> signal(cube.pixels());
  for (std::size_t i = 0; i < cube.pixels(); ++i) {
    signal[i] = std::sin(0.37 * static_cast<double>(i)) + 0.2 * rng.normal();
    cube.data[i] = static_cast<float>(signal[i]);
    cube.data[cube.pixels() + i] = static_cast<float>(signal[i]);
    cube.data[2 * cube.pixels() + i] = static_cast<float>(1e-3 * rng.normal());
  }
  PcaModel m1 = fit_pca(cube, 1);
  HsiCube reduced = apply_pca(m1, cube);
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  const double n = static_cast<double>(cube.pixels());
  for (std::size_t i = 0; i < cube.pixels(); ++i) {
    const double x = signal[i], y = reduced.data[i];
    sx += x;
    sy += y;
    sxy += x * y;
    sxx += x * x;
    syy += y * y;
  }
  const double corr = (n * sxy - sx * sy) /
                      std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
  CHECK(std::abs(corr) >= 0.999);

  // Full-rank projection reconstructs the centered data.
  Rng rng2(5);
  HsiCube toy;
  toy.height = 8;
  toy.width = 8;
  toy.bands = 6;
  toy.data.resize(toy.pixels() * 6);
  for (auto& v : toy.data) v = static_cast<float>(rng2.uniform(-2.0, 2.0));
  PcaModel full = fit_pca(toy, 6);
  for (std::size_t p = 0; p < toy.pixels(); ++p) {
    std::vector<double> y(6, 0.0), back(6, 0.0);
    for (int c = 0; c < 6; ++c)
      for (int b = 0; b < 6; ++b)
        y[static_cast<std::size_t>(c)] +=
            full.proj(b, c) * (toy.data[static_cast<std::size_t>(b) * toy.pixels() + p] -
                               full.band_mean[static_cast<std::size_t>(b)]);
    for (int b = 0; b < 6; ++b)
      for (int c = 0; c < 6; ++c) back[static_cast<std::size_t>(b)] += full.proj(b, c) * y[static_cast<std::size_t>(c)];
    for (int b = 0; b < 6; ++b)
      CHECK(back[static_cast<std::size_t>(b)] ==
            doctest::Approx(toy.data[static_cast<std::size_t>(b) * toy.pixels() + p] -
                            full.band_mean[static_cast<std::size_t>(b)])
                .epsilon(1e-4));
  }

  // Orthonormal columns, non-increasing eigenvalues.
  for (int a = 0; a < 6; ++a)
    for (int b = 0; b < 6; ++b) {
      double dot = 0;
      for (int r = 0; r < 6; ++r) dot += full.proj(r, a) * full.proj(r, b);
      CHECK(dot == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-6));
    }
  for (int c = 1; c < 6; ++c)
    CHECK(full.eigenvalues[static_cast<std::size_t>(c - 1)] >=
          full.eigenvalues[static_cast<std::size_t>(c)] - 1e-12);

  // Against the cyclic-Jacobi oracle on the same covariance.
  std::vector<double> mean(6, 0.0);
  for (int b = 0; b < 6; ++b) {
    for (std::size_t p = 0; p < toy.pixels(); ++p)
      mean[static_cast<std::size_t>(b)] += toy.data[static_cast<std::size_t>(b) * toy.pixels() + p];
    mean[static_cast<std::size_t>(b)] /= static_cast<double>(toy.pixels());
  }
  std::vector<double> cov(36, 0.0);
  for (std::size_t p = 0; p < toy.pixels(); ++p)
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b)
        cov[static_cast<std::size_t>(a) * 6 + b] +=
            (toy.data[static_cast<std::size_t>(a) * toy.pixels() + p] - mean[static_cast<std::size_t>(a)]) *
            (toy.data[static_cast<std::size_t>(b) * toy.pixels() + p] - mean[static_cast<std::size_t>(b)]);
  for (auto& v : cov) v /= static_cast<double>(toy.pixels() - 1);
  std::vector<double> jvals, jvecs;
  oracles::jacobi_eigen(cov, 6, jvals, jvecs);
  for (int c = 0; c < 6; ++c) {
    CHECK(full.eigenvalues[static_cast<std::size_t>(c)] ==
          doctest::Approx(jvals[static_cast<std::size_t>(c)]).epsilon(1e-8));
    double dot = 0;
    for (int r = 0; r < 6; ++r) dot += full.proj(r, c) * jvecs[static_cast<std::size_t>(r) * 6 + c];
    CHECK(std::abs(dot) == doctest::Approx(1.0).epsilon(1e-6));
  }

  // Standardized components: zero mean, unit variance over the pixels.
  HsiCube std_reduced = apply_pca(full, toy);
  for (int c = 0; c < 6; ++c) {
    double s = 0, ss = 0;
    for (std::size_t p = 0; p < toy.pixels(); ++p) {
      const double v = std_reduced.data[static_cast<std::size_t>(c) * toy.pixels() + p];
      s += v;
      ss += v * v;
    }
    s /= static_cast<double>(toy.pixels());
    ss = std::sqrt(ss / static_cast<double>(toy.pixels()) - s * s);
    CHECK(std::abs(s) <= 1e-6);
    CHECK(ss == doctest::Approx(1.0).epsilon(1e-4));
  }

  CHECK_THROWS(fit_pca(toy, 7));

  // Labeled-only covariance ignores unlabeled pixels entirely.
  HsiCube mixed = toy;
  LabelRaster partial;
  partial.height = 8;
  partial.width = 8;
  partial.classes = 1;
  partial.labels.assign(64, 0);
  for (int i = 0; i < 32; ++i) partial.labels[static_cast<std::size_t>(i)] = 1;
  for (int b = 0; b < 6; ++b)
    for (std::size_t p = 32; p < 64; ++p)
      mixed.data[static_cast<std::size_t>(b) * 64 + p] = 1000.0f;  // wild unlabeled values
  PcaModel labeled_model = fit_pca(mixed, 2, &partial);
  PcaModel clean_model = fit_pca(toy, 2, &partial);
  for (std::size_t i = 0; i < labeled_model.projection.size(); ++i)
    CHECK(labeled_model.projection[i] == doctest::Approx(clean_model.projection[i]).epsilon(1e-12));
}

TEST_CASE("batch iterator: partial batches, per-epoch shuffles, coverage") {
  BatchIterator it(100, 96, 42, 0);
  std::vector<std::size_t> batch;
  CHECK(it.next(batch));
  CHECK(batch.size() == 96);
  CHECK(it.next(batch));
  CHECK(batch.size() == 4);
  CHECK(!it.next(batch));

  auto collect = [](int epoch) {
    BatchIterator b(50, 16, 9, epoch);
    std::vector<std::size_t> order, chunk;
    while (b.next(chunk)) order.insert(order.end(), chunk.begin(), chunk.end());
    return order;
  };
  auto e0 = collect(0), e0b = collect(0), e1 = collect(1);
  CHECK(e0 == e0b);
  CHECK(e0 != e1);
  std::set<std::size_t> seen(e0.begin(), e0.end());
  CHECK(seen.size() == 50);  // exact once-per-epoch coverage
  CHECK(e0.size() == 50);
}

TEST_CASE("ppm export: header bytes, mapping, palette inversion") {
  Palette pal;
  pal.colors[1] = {255, 0, 0};
  pal.colors[2] = {0, 255, 0};
  TempFile f("map.ppm");
  export_map({1, 1, 2, 0}, 2, 2, pal, f.path);

  std::ifstream in(f.path, std::ios::binary);
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P6\n2 2\n255\n";
  REQUIRE(contents.size() == header.size() + 12);
  CHECK(contents.substr(0, header.size()) == header);
  const unsigned char* px = reinterpret_cast<const unsigned char*>(contents.data() + header.size());
  CHECK((px[0] == 255 && px[1] == 0 && px[2] == 0));
  CHECK((px[3] == 255 && px[4] == 0 && px[5] == 0));
  CHECK((px[6] == 0 && px[7] == 255 && px[8] == 0));
  CHECK((px[9] == 0 && px[10] == 0 && px[11] == 0));

  // Inverting the palette restores the class raster.
  std::map<std::array<std::uint8_t, 3>, int> inverse{{{255, 0, 0}, 1}, {{0, 255, 0}, 2},
                                                     {{0, 0, 0}, 0}};
  std::vector<int> restored;
  for (int i = 0; i < 4; ++i)
    restored.push_back(inverse.at({px[i * 3], px[i * 3 + 1], px[i * 3 + 2]}));
  CHECK(restored == std::vector<int>{1, 1, 2, 0});

  Palette incomplete;
  incomplete.colors[1] = {1, 2, 3};
  CHECK_THROWS_AS(export_map({1, 2, 0, 0}, 2, 2, incomplete, "never.ppm"),
                  std::invalid_argument);
}

TEST_CASE("synthetic scene: blocked labels, class signatures, SNR") {
  SyntheticSpec spec;
  spec.seed = 11;
  spec.block = 8;
  SyntheticData data = make_synthetic(spec);
  CHECK(data.cube.height == 48);
  CHECK(data.cube.bands == 10);
  CHECK(data.labels.classes == 4);
  for (auto v : data.labels.labels) {
    CHECK(v >= 1);
    CHECK(v <= 4);
  }
  // Labels are constant within each 8x8 block.
  for (int by = 0; by < 6; ++by)
    for (int bx = 0; bx < 6; ++bx) {
      const int ref = data.labels.at(by * 8, bx * 8);
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) CHECK(data.labels.at(by * 8 + y, bx * 8 + x) == ref);
    }
  for (int c = 1; c <= 4; ++c) CHECK(data.palette.colors.count(c) == 1);

  // The default block width covers a 15-pixel patch and every class appears.
  SyntheticData dflt = make_synthetic(SyntheticSpec{});
  CHECK(SyntheticSpec{}.block >= 15);
  std::vector<int> pop(5, 0);
  for (auto v : dflt.labels.labels) ++pop[v];
  for (int c = 1; c <= 4; ++c) CHECK(pop[static_cast<std::size_t>(c)] >= 40);

  // Empirical SNR close to the requested 20 dB: regenerate the clean signal
  // by averaging many noisy pixels of one class.
  SyntheticData again = make_synthetic(spec);
  CHECK(again.cube.data == data.cube.data);  // deterministic

  double signal_power = 0, noise_power = 0;
  std::size_t count = 0;
  // Per-class mean spectrum approximates the clean signature.
  std::vector<std::vector<double>> mean(5, std::vector<double>(10, 0.0));
  std::vector<std::size_t> per_class(5, 0);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      const int c = data.labels.at(y, x);
      ++per_class[static_cast<std::size_t>(c)];
      for (int b = 0; b < 10; ++b)
        mean[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)] += data.cube.at(b, y, x);
    }
  for (int c = 1; c <= 4; ++c)
    for (int b = 0; b < 10; ++b)
      mean[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)] /=
          static_cast<double>(per_class[static_cast<std::size_t>(c)]);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      const int c = data.labels.at(y, x);
      for (int b = 0; b < 10; ++b) {
        const double s = mean[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)];
        const double d = data.cube.at(b, y, x) - s;
        signal_power += s * s;
        noise_power += d * d;
        ++count;
      }
    }
  const double snr_db = 10.0 * std::log10(signal_power / noise_power);
  CHECK(snr_db == doctest::Approx(20.0).epsilon(0.08));
}
