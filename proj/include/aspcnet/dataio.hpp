#ifndef ASPCNET_DATAIO_HPP
#define ASPCNET_DATAIO_HPP

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "aspcnet/rng.hpp"
#include "aspcnet/tensor.hpp"

namespace aspcnet {

// ---------------------------------------------------------------------------
// On-disk formats (all integers little-endian):
//   cube:    "HSICUBE1 <H> <W> <D>\n" + H*W*D float32, band-sequential [b][h][w]
//   labels:  "HSIGT1 <H> <W> <T>\n"   + H*W uint16, row-major, 0 = unlabeled
//   palette: text lines "class,r,g,b"
//   split:   "HSISPLIT1 <seed> <n_train>\n" + one "row col" line per pixel
//   maps:    binary PPM, "P6\n<W> <H>\n255\n" + RGB triples
// ---------------------------------------------------------------------------

struct HsiCube {
  int height = 0, width = 0, bands = 0;
  std::vector<float> data;  // band-sequential [b][h][w]

  float at(int b, int y, int x) const {
    return data[(static_cast<std::size_t>(b) * height + y) * width + x];
  }
  float& at(int b, int y, int x) {
    return data[(static_cast<std::size_t>(b) * height + y) * width + x];
  }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
};

struct LabelRaster {
  int height = 0, width = 0, classes = 0;  // labels in {0..classes}, 0 = unlabeled
  std::vector<std::uint16_t> labels;

  int at(int y, int x) const {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
};

struct Palette {
  std::map<int, std::array<std::uint8_t, 3>> colors;
};

HsiCube load_cube(const std::string& path);
void save_cube(const HsiCube& cube, const std::string& path);
LabelRaster load_labels(const std::string& path);
void save_labels(const LabelRaster& raster, const std::string& path);
Palette load_palette(const std::string& path);
void save_palette(const Palette& palette, const std::string& path);

// ---------------------------------------------------------------------------
// Train/test split
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::uint64_t seed = 0;
  std::vector<std::pair<int, int>> train;  // (row, col), grouped by class
};

struct SplitRequest {
  std::uint64_t seed = 0;
  int per_class = 0;      // exact count per class when > 0
  double fraction = 0.0;  // otherwise round(fraction * population), at least 1
};

/// Seeded, reproducible, per-class sampling of labeled pixels. Requested
/// counts beyond a class population are clamped with a warning line.
SplitSpec stratified_split(const LabelRaster& labels, const SplitRequest& request,
                           std::string* warnings = nullptr);

/// Labeled pixels not in the training set, in row-major order.
std::vector<std::pair<int, int>> test_pixels(const LabelRaster& labels, const SplitSpec& split);

SplitSpec load_split(const std::string& path);
void save_split(const SplitSpec& split, const std::string& path);

// ---------------------------------------------------------------------------
// PCA over the band axis
// ---------------------------------------------------------------------------

struct PcaModel {
  int in_bands = 0, out_bands = 0;
  std::vector<double> band_mean;    // D
  std::vector<double> projection;   // D x d row-major; columns orthonormal
  std::vector<double> eigenvalues;  // d, non-increasing
  std::vector<double> comp_mean, comp_std;  // standardization of each component

  double proj(int band, int comp) const {
    return projection[static_cast<std::size_t>(band) * out_bands + comp];
  }
};

/// Eigendecomposition of the band covariance over all pixels (or only labeled
/// ones when `labeled_only` is given). Retained components are standardized to
/// zero mean, unit variance; eigenvector signs are fixed so the
/// largest-magnitude entry is positive.
PcaModel fit_pca(const HsiCube& cube, int out_bands, const LabelRaster* labeled_only = nullptr);
HsiCube apply_pca(const PcaModel& model, const HsiCube& cube);

// ---------------------------------------------------------------------------
// Patch extraction, mirror-padded (reflection about the border pixel)
// ---------------------------------------------------------------------------

inline int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

/// m x m window centered on (row, col), shaped (m, m, bands).
template <typename S>
Tensor<S> extract_patch(const HsiCube& cube, int row, int col, int m) {
  check(m >= 1 && m % 2 == 1, "extract_patch: window must be odd");
  check(row >= 0 && row < cube.height && col >= 0 && col < cube.width,
        "extract_patch: center out of bounds");
  const int half = m / 2;
  Tensor<S> out({m, m, cube.bands});
  for (int dy = 0; dy < m; ++dy) {
    const int sy = mirror_index(row - half + dy, cube.height);
    for (int dx = 0; dx < m; ++dx) {
      const int sx = mirror_index(col - half + dx, cube.width);
      for (int b = 0; b < cube.bands; ++b)
        out.at({dy, dx, b}) = static_cast<S>(cube.at(b, sy, sx));
    }
  }
  return out;
}

/// Stacked patches (N, m, m, bands) for a pixel list.
template <typename S>
Tensor<S> extract_patch_batch(const HsiCube& cube, const std::vector<std::pair<int, int>>& px,
                              int m) {
  Tensor<S> out({static_cast<int>(px.size()), m, m, cube.bands});
  const std::size_t stride = static_cast<std::size_t>(m) * m * cube.bands;
  for (std::size_t i = 0; i < px.size(); ++i) {
    Tensor<S> p = extract_patch<S>(cube, px[i].first, px[i].second, m);
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + i * stride);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Epoch batching: reshuffled per (seed, epoch), final partial batch emitted.
// ---------------------------------------------------------------------------

class BatchIterator {
 public:
  BatchIterator(std::size_t count, int batch, std::uint64_t seed, int epoch)
      : batch_(batch), order_(count) {
    check(batch >= 1, "batch_iterator: batch must be >= 1");
    for (std::size_t i = 0; i < count; ++i) order_[i] = i;
    Rng rng(Rng::mix_streams(seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order_.begin(), order_.end());
  }

  /// Fills `out` with the next batch of indices; false when exhausted.
  bool next(std::vector<std::size_t>& out) {
    out.clear();
    if (cursor_ >= order_.size()) return false;
    const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_));
    out.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
               order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return true;
  }

 private:
  int batch_;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Classification-map export
// ---------------------------------------------------------------------------

void write_ppm(int width, int height, const std::vector<std::uint8_t>& rgb,
               const std::string& path);

/// predictions: H*W class values, 0 rendered black, classes 1..T through the
/// palette (every present class must have a palette entry).
void export_map(const std::vector<int>& predictions, int height, int width,
                const Palette& palette, const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic scene for desk-scale experiments: blocked class regions with
// class-specific Gaussian spectral signatures plus white noise at a given SNR.
// Blocks default to at least a patch width so that patches are predominantly
// same-class, like the homogeneous fields of real scenes.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int size = 48;
  int bands = 10;
  int classes = 4;
  int block = 24;
  double snr_db = 20.0;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  HsiCube cube;
  LabelRaster labels;
  Palette palette;
};

SyntheticData make_synthetic(const SyntheticSpec& spec);

}  // namespace aspcnet

#endif  // ASPCNET_DATAIO_HPP
