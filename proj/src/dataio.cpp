#include "aspcnet/dataio.hpp"

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace aspcnet {

namespace {

void write_exact(std::ofstream& f, const void* p, std::size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_exact(std::ifstream& f, void* p, std::size_t n, const std::string& what) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(f.gcount()) != n)
    throw std::runtime_error("truncated payload reading " + what);
}

std::uint32_t f32_bits(float v) { return std::bit_cast<std::uint32_t>(v); }
float bits_f32(std::uint32_t b) { return std::bit_cast<float>(b); }

void put_f32le(std::ofstream& f, float v) {
  const std::uint32_t b = f32_bits(v);
  const unsigned char raw[4] = {static_cast<unsigned char>(b & 0xFF),
                                static_cast<unsigned char>((b >> 8) & 0xFF),
                                static_cast<unsigned char>((b >> 16) & 0xFF),
                                static_cast<unsigned char>((b >> 24) & 0xFF)};
  write_exact(f, raw, 4);
}

float get_f32le(const unsigned char* p) {
  const std::uint32_t b = static_cast<std::uint32_t>(p[0]) |
                          (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  return bits_f32(b);
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return f;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  return f;
}

std::string read_header_line(std::ifstream& f, const std::string& path) {
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("missing header in " + path);
  return line;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cube / labels / palette / split files
// ---------------------------------------------------------------------------

HsiCube load_cube(const std::string& path) {
  std::ifstream f = open_in(path);
  std::istringstream head(read_header_line(f, path));
  std::string magic;
  HsiCube cube;
  head >> magic >> cube.height >> cube.width >> cube.bands;
  if (magic != "HSICUBE1" || head.fail())
    throw std::runtime_error("bad cube magic in " + path);
  if (cube.height <= 0 || cube.width <= 0 || cube.bands <= 0)
    throw std::runtime_error("bad cube extents in " + path);
  const std::size_t n = static_cast<std::size_t>(cube.height) * cube.width * cube.bands;
  std::vector<unsigned char> raw(n * 4);
  read_exact(f, raw.data(), raw.size(), path);
  cube.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    cube.data[i] = get_f32le(raw.data() + i * 4);
    if (!std::isfinite(cube.data[i]))
      throw std::runtime_error("non-finite value in cube " + path);
  }
  return cube;
}

void save_cube(const HsiCube& cube, const std::string& path) {
  check(cube.data.size() == cube.pixels() * static_cast<std::size_t>(cube.bands),
        "save_cube: extent mismatch");
  std::ofstream f = open_out(path);
  f << "HSICUBE1 " << cube.height << ' ' << cube.width << ' ' << cube.bands << '\n';
  for (float v : cube.data) put_f32le(f, v);
}

LabelRaster load_labels(const std::string& path) {
  std::ifstream f = open_in(path);
  std::istringstream head(read_header_line(f, path));
  std::string magic;
  LabelRaster r;
  head >> magic >> r.height >> r.width >> r.classes;
  if (magic != "HSIGT1" || head.fail())
    throw std::runtime_error("bad label magic in " + path);
  if (r.height <= 0 || r.width <= 0 || r.classes <= 0)
    throw std::runtime_error("bad label extents in " + path);
  const std::size_t n = static_cast<std::size_t>(r.height) * r.width;
  std::vector<unsigned char> raw(n * 2);
  read_exact(f, raw.data(), raw.size(), path);
  r.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.labels[i] = static_cast<std::uint16_t>(raw[i * 2] | (raw[i * 2 + 1] << 8));
    if (r.labels[i] > r.classes)
      throw std::runtime_error("label " + std::to_string(r.labels[i]) + " exceeds class count " +
                               std::to_string(r.classes) + " in " + path);
  }
  return r;
}

void save_labels(const LabelRaster& r, const std::string& path) {
  check(r.labels.size() == static_cast<std::size_t>(r.height) * r.width,
        "save_labels: extent mismatch");
  std::ofstream f = open_out(path);
  f << "HSIGT1 " << r.height << ' ' << r.width << ' ' << r.classes << '\n';
  for (std::uint16_t v : r.labels) {
    const unsigned char raw[2] = {static_cast<unsigned char>(v & 0xFF),
                                  static_cast<unsigned char>(v >> 8)};
    write_exact(f, raw, 2);
  }
}

Palette load_palette(const std::string& path) {
  std::ifstream f = open_in(path);
  Palette p;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    int cls, r, g, b;
    char c1, c2, c3;
    std::istringstream is(line);
    is >> cls >> c1 >> r >> c2 >> g >> c3 >> b;
    if (is.fail() || c1 != ',' || c2 != ',' || c3 != ',')
      throw std::runtime_error("bad palette line " + std::to_string(line_no) + " in " + path);
    if (r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255)
      throw std::runtime_error("palette component out of range in " + path);
    p.colors[cls] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                     static_cast<std::uint8_t>(b)};
  }
  return p;
}

void save_palette(const Palette& p, const std::string& path) {
  std::ofstream f = open_out(path);
  for (const auto& [cls, rgb] : p.colors)
    f << cls << ',' << static_cast<int>(rgb[0]) << ',' << static_cast<int>(rgb[1]) << ','
      << static_cast<int>(rgb[2]) << '\n';
}

SplitSpec load_split(const std::string& path) {
  std::ifstream f = open_in(path);
  std::istringstream head(read_header_line(f, path));
  std::string magic;
  SplitSpec s;
  std::size_t n = 0;
  head >> magic >> s.seed >> n;
  if (magic != "HSISPLIT1" || head.fail())
    throw std::runtime_error("bad split magic in " + path);
  s.train.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    int row, col;
    if (!(f >> row >> col)) throw std::runtime_error("truncated split file " + path);
    s.train.emplace_back(row, col);
  }
  return s;
}

void save_split(const SplitSpec& s, const std::string& path) {
  std::ofstream f = open_out(path);
  f << "HSISPLIT1 " << s.seed << ' ' << s.train.size() << '\n';
  for (const auto& [row, col] : s.train) f << row << ' ' << col << '\n';
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

SplitSpec stratified_split(const LabelRaster& labels, const SplitRequest& request,
                           std::string* warnings) {
  check(request.per_class > 0 || request.fraction > 0,
        "split: need per-class count or fraction");
  std::vector<std::vector<std::pair<int, int>>> by_class(
      static_cast<std::size_t>(labels.classes) + 1);
  for (int y = 0; y < labels.height; ++y)
    for (int x = 0; x < labels.width; ++x) {
      const int c = labels.at(y, x);
      if (c > 0) by_class[static_cast<std::size_t>(c)].emplace_back(y, x);
    }
  SplitSpec out;
  out.seed = request.seed;
  for (int c = 1; c <= labels.classes; ++c) {
    auto& pool = by_class[static_cast<std::size_t>(c)];
    if (pool.empty())
      throw std::invalid_argument("split: class " + std::to_string(c) +
                                  " absent from the label raster");
    std::size_t want;
    if (request.per_class > 0) {
      want = static_cast<std::size_t>(request.per_class);
    } else {
      want = static_cast<std::size_t>(
          std::llround(request.fraction * static_cast<double>(pool.size())));
      if (want == 0) want = 1;
    }
    if (want > pool.size()) {
      if (warnings)
        *warnings += "class " + std::to_string(c) + ": requested " + std::to_string(want) +
                     " of " + std::to_string(pool.size()) + " pixels, clamped\n";
      want = pool.size();
    }
    Rng rng(Rng::mix_streams(request.seed, static_cast<std::uint64_t>(c)));
    rng.shuffle(pool.begin(), pool.end());
    out.train.insert(out.train.end(), pool.begin(),
                     pool.begin() + static_cast<std::ptrdiff_t>(want));
  }
  return out;
}

std::vector<std::pair<int, int>> test_pixels(const LabelRaster& labels, const SplitSpec& split) {
  std::set<std::pair<int, int>> in_train(split.train.begin(), split.train.end());
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < labels.height; ++y)
    for (int x = 0; x < labels.width; ++x)
      if (labels.at(y, x) > 0 && !in_train.count({y, x})) out.emplace_back(y, x);
  return out;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

PcaModel fit_pca(const HsiCube& cube, int out_bands, const LabelRaster* labeled_only) {
  check(out_bands >= 1 && out_bands <= cube.bands, "pca: need 1 <= d <= band count");
  if (labeled_only)
    check(labeled_only->height == cube.height && labeled_only->width == cube.width,
          "pca: label raster extents do not match cube");
  std::vector<std::size_t> px;
  for (int y = 0; y < cube.height; ++y)
    for (int x = 0; x < cube.width; ++x)
      if (!labeled_only || labeled_only->at(y, x) > 0)
        px.push_back(static_cast<std::size_t>(y) * cube.width + x);
  check(px.size() >= 2, "pca: need at least two pixels");

  const int d = cube.bands;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (std::size_t p : px)
    for (int b = 0; b < d; ++b)
      mean(b) += cube.data[static_cast<std::size_t>(b) * cube.pixels() + p];
  mean /= static_cast<double>(px.size());

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd centered(d);
  for (std::size_t p : px) {
    for (int b = 0; b < d; ++b)
      centered(b) = cube.data[static_cast<std::size_t>(b) * cube.pixels() + p] - mean(b);
    cov.noalias() += centered * centered.transpose();
  }
  cov /= static_cast<double>(px.size() - 1);
  if (!cov.allFinite()) throw std::runtime_error("pca: non-finite covariance");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca: eigensolver failed");

  PcaModel model;
  model.in_bands = d;
  model.out_bands = out_bands;
  model.band_mean.assign(mean.data(), mean.data() + d);
  model.projection.resize(static_cast<std::size_t>(d) * out_bands);
  model.eigenvalues.resize(static_cast<std::size_t>(out_bands));
  // Eigen returns ascending eigenvalues; take the top `out_bands` in
  // non-increasing order and fix each sign so the largest-magnitude entry is
  // positive.
  for (int c = 0; c < out_bands; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - c);
    int arg = 0;
    for (int b = 1; b < d; ++b)
      if (std::abs(v(b)) > std::abs(v(arg))) arg = b;
    if (v(arg) < 0) v = -v;
    for (int b = 0; b < d; ++b) model.projection[static_cast<std::size_t>(b) * out_bands + c] = v(b);
    model.eigenvalues[static_cast<std::size_t>(c)] = solver.eigenvalues()(d - 1 - c);
  }

  // Standardization statistics of the projected components over the same
  // pixel set (population variance).
  model.comp_mean.assign(static_cast<std::size_t>(out_bands), 0.0);
  model.comp_std.assign(static_cast<std::size_t>(out_bands), 1.0);
  std::vector<double> sum(static_cast<std::size_t>(out_bands), 0.0);
  std::vector<double> sum_sq(static_cast<std::size_t>(out_bands), 0.0);
  for (std::size_t p : px) {
    for (int c = 0; c < out_bands; ++c) {
      double acc = 0;
      for (int b = 0; b < d; ++b)
        acc += model.proj(b, c) *
               (cube.data[static_cast<std::size_t>(b) * cube.pixels() + p] - model.band_mean[static_cast<std::size_t>(b)]);
      sum[static_cast<std::size_t>(c)] += acc;
      sum_sq[static_cast<std::size_t>(c)] += acc * acc;
    }
  }
  for (int c = 0; c < out_bands; ++c) {
    const double n = static_cast<double>(px.size());
    const double m = sum[static_cast<std::size_t>(c)] / n;
    const double var = sum_sq[static_cast<std::size_t>(c)] / n - m * m;
    model.comp_mean[static_cast<std::size_t>(c)] = m;
    model.comp_std[static_cast<std::size_t>(c)] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return model;
}

HsiCube apply_pca(const PcaModel& model, const HsiCube& cube) {
  check(cube.bands == model.in_bands, "apply_pca: band count mismatch");
  HsiCube out;
  out.height = cube.height;
  out.width = cube.width;
  out.bands = model.out_bands;
  out.data.resize(cube.pixels() * static_cast<std::size_t>(model.out_bands));
  for (std::size_t p = 0; p < cube.pixels(); ++p) {
    for (int c = 0; c < model.out_bands; ++c) {
      double acc = 0;
      for (int b = 0; b < model.in_bands; ++b)
        acc += model.proj(b, c) *
               (cube.data[static_cast<std::size_t>(b) * cube.pixels() + p] - model.band_mean[static_cast<std::size_t>(b)]);
      out.data[static_cast<std::size_t>(c) * cube.pixels() + p] = static_cast<float>(
          (acc - model.comp_mean[static_cast<std::size_t>(c)]) / model.comp_std[static_cast<std::size_t>(c)]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM export
// ---------------------------------------------------------------------------

void write_ppm(int width, int height, const std::vector<std::uint8_t>& rgb,
               const std::string& path) {
  check(rgb.size() == static_cast<std::size_t>(width) * height * 3, "write_ppm: size mismatch");
  std::ofstream f = open_out(path);
  f << "P6\n" << width << ' ' << height << "\n255\n";
  write_exact(f, rgb.data(), rgb.size());
}

void export_map(const std::vector<int>& predictions, int height, int width,
                const Palette& palette, const std::string& path) {
  check(predictions.size() == static_cast<std::size_t>(height) * width,
        "export_map: prediction count mismatch");
  std::vector<std::uint8_t> rgb(predictions.size() * 3, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int cls = predictions[i];
    if (cls == 0) continue;  // unlabeled stays black
    auto it = palette.colors.find(cls);
    if (it == palette.colors.end())
      throw std::invalid_argument("export_map: palette missing class " + std::to_string(cls));
    rgb[i * 3 + 0] = it->second[0];
    rgb[i * 3 + 1] = it->second[1];
    rgb[i * 3 + 2] = it->second[2];
  }
  write_ppm(width, height, rgb, path);
}

// ---------------------------------------------------------------------------
// Synthetic scene
// ---------------------------------------------------------------------------

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  check(spec.size >= spec.block && spec.block >= 1, "synthetic: bad block size");
  check(spec.classes >= 2 && spec.bands >= 2, "synthetic: need >= 2 classes and bands");
  SyntheticData out;
  out.cube.height = spec.size;
  out.cube.width = spec.size;
  out.cube.bands = spec.bands;
  out.cube.data.assign(static_cast<std::size_t>(spec.size) * spec.size * spec.bands, 0.0f);
  out.labels.height = spec.size;
  out.labels.width = spec.size;
  out.labels.classes = spec.classes;
  out.labels.labels.assign(static_cast<std::size_t>(spec.size) * spec.size, 0);

  // Class-specific Gaussian signature over the band axis.
  std::vector<std::vector<double>> signature(static_cast<std::size_t>(spec.classes));
  for (int c = 0; c < spec.classes; ++c) {
    signature[static_cast<std::size_t>(c)].resize(static_cast<std::size_t>(spec.bands));
    const double center =
        (static_cast<double>(c) + 0.5) * static_cast<double>(spec.bands) / spec.classes - 0.5;
    const double sigma = std::max(0.75, static_cast<double>(spec.bands) / (3.0 * spec.classes));
    for (int b = 0; b < spec.bands; ++b) {
      const double z = (static_cast<double>(b) - center) / sigma;
      signature[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)] = std::exp(-0.5 * z * z);
    }
  }

  // Blocked class regions.
  const int blocks = (spec.size + spec.block - 1) / spec.block;
  double signal_power = 0;
  for (int y = 0; y < spec.size; ++y)
    for (int x = 0; x < spec.size; ++x) {
      const int c = ((y / spec.block) * blocks + (x / spec.block)) % spec.classes;
      out.labels.labels[static_cast<std::size_t>(y) * spec.size + x] =
          static_cast<std::uint16_t>(c + 1);
      for (int b = 0; b < spec.bands; ++b) {
        const double v = signature[static_cast<std::size_t>(c)][static_cast<std::size_t>(b)];
        out.cube.at(b, y, x) = static_cast<float>(v);
        signal_power += v * v;
      }
    }
  signal_power /= static_cast<double>(out.cube.data.size());

  // White noise scaled to the requested SNR.
  const double noise_std = std::sqrt(signal_power / std::pow(10.0, spec.snr_db / 10.0));
  Rng rng(spec.seed);
  for (auto& v : out.cube.data) v += static_cast<float>(noise_std * rng.normal());

  static const std::uint8_t base[8][3] = {{230, 25, 75},  {60, 180, 75},  {255, 225, 25},
                                          {0, 130, 200},  {245, 130, 48}, {145, 30, 180},
                                          {70, 240, 240}, {240, 50, 230}};
  for (int c = 0; c < spec.classes; ++c) {
    const auto& b = base[c % 8];
    out.palette.colors[c + 1] = {b[0], b[1], b[2]};
  }
  return out;
}

}  // namespace aspcnet
