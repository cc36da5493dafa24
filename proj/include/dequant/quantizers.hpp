#pragma once

// Hard quantizers used to synthesize observations, plus Otsu threshold
// selection and a k-means palette builder.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dequant/error.hpp"
#include "dequant/image.hpp"

namespace dequant {

using Color = std::array<double, 3>;

inline double squared_distance(std::span<const double> x, const Color& q) {
  const double d0 = x[0] - q[0];
  const double d1 = x[1] - q[1];
  const double d2 = x[2] - q[2];
  return d0 * d0 + d1 * d1 + d2 * d2;
}

/// Per-channel uniform quantizer with m levels at centers (i - 0.5) / m.
class UniformQuantizer {
 public:
  explicit UniformQuantizer(int levels) : levels_(levels) {
    if (levels < 1) throw RangeError("uniform quantizer needs m >= 1, got " + std::to_string(levels));
  }

  int levels() const noexcept { return levels_; }

  /// Center of 1-based bin i.
  double center(int i) const noexcept { return (i - 0.5) / levels_; }

  /// 1-based bin of r: (i-1)/m < r <= i/m, with r = 0 assigned to bin 1.
  int bin(double r) const noexcept {
    const double m = levels_;
    int i = std::clamp(static_cast<int>(std::ceil(r * m)), 1, levels_);
    while (i > 1 && r <= (i - 1) / m) --i;
    while (i < levels_ && r > i / m) ++i;
    return i;
  }

  double operator()(double r) const noexcept { return center(bin(r)); }

 private:
  int levels_;
};

/// Nearest-color quantizer over an ordered palette.
class PaletteQuantizer {
 public:
  explicit PaletteQuantizer(std::vector<Color> colors) : colors_(std::move(colors)) {
    if (colors_.empty()) throw RangeError("palette must contain at least one color");
    for (std::size_t i = 0; i < colors_.size(); ++i) {
      for (double c : colors_[i]) {
        if (!(c >= 0.0 && c <= 1.0)) {
          throw RangeError("palette entry " + std::to_string(i) + " has a component outside [0,1]");
        }
      }
    }
  }

  const std::vector<Color>& colors() const noexcept { return colors_; }
  std::size_t size() const noexcept { return colors_.size(); }

  /// Indices (j) of entries that repeat an earlier entry.
  std::vector<std::size_t> duplicate_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 1; j < colors_.size(); ++j) {
      if (std::find(colors_.begin(), colors_.begin() + static_cast<std::ptrdiff_t>(j), colors_[j]) !=
          colors_.begin() + static_cast<std::ptrdiff_t>(j)) {
        out.push_back(j);
      }
    }
    return out;
  }

  /// Arg-min squared distance; ties go to the lowest index.
  std::size_t nearest(std::span<const double> x) const {
    std::size_t best = 0;
    double best_d = squared_distance(x, colors_[0]);
    for (std::size_t i = 1; i < colors_.size(); ++i) {
      const double d = squared_distance(x, colors_[i]);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return best;
  }

 private:
  std::vector<Color> colors_;
};

/// The full m^3 grid of uniform-quantizer centers, red-major.
inline PaletteQuantizer uniform_grid_palette(int levels) {
  const UniformQuantizer uq(levels);
  std::vector<Color> grid;
  grid.reserve(static_cast<std::size_t>(levels) * levels * levels);
  for (int r = 1; r <= levels; ++r) {
    for (int g = 1; g <= levels; ++g) {
      for (int b = 1; b <= levels; ++b) grid.push_back({uq.center(r), uq.center(g), uq.center(b)});
    }
  }
  return PaletteQuantizer(std::move(grid));
}

/// Binarization threshold delta in (0,1): output 1 where intensity >= delta.
class ThresholdQuantizer {
 public:
  explicit ThresholdQuantizer(double delta) : delta_(delta) {
    if (!(delta > 0.0 && delta < 1.0)) {
      std::ostringstream os;
      os << "threshold must lie in (0,1), got " << delta;
      throw RangeError(os.str());
    }
  }

  double delta() const noexcept { return delta_; }
  double operator()(double intensity) const noexcept { return intensity >= delta_ ? 1.0 : 0.0; }

 private:
  double delta_;
};

inline ImageTensor quantize_uniform(const ImageTensor& img, const UniformQuantizer& q) {
  std::vector<double> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = q(img[i]);
  return ImageTensor(img.shape(), std::move(out));
}

inline ImageTensor quantize_palette(const ImageTensor& img, const PaletteQuantizer& q) {
  if (img.channels() != 3) {
    throw ShapeError("palette quantization expects 3 channels, got " + std::to_string(img.channels()));
  }
  std::vector<double> out(img.size());
  for (std::size_t p = 0; p < img.shape().pixels(); ++p) {
    const Color& c = q.colors()[q.nearest(img.pixel(p))];
    std::copy(c.begin(), c.end(), out.begin() + static_cast<std::ptrdiff_t>(3 * p));
  }
  return ImageTensor(img.shape(), std::move(out));
}

inline ImageTensor quantize_threshold(const ImageTensor& intensity, const ThresholdQuantizer& t) {
  if (intensity.channels() != 1) {
    throw ShapeError("threshold quantization expects 1 channel, got " +
                     std::to_string(intensity.channels()));
  }
  std::vector<double> out(intensity.size());
  for (std::size_t i = 0; i < intensity.size(); ++i) out[i] = t(intensity[i]);
  return ImageTensor(intensity.shape(), std::move(out));
}

inline constexpr int kOtsuBins = 256;

/// Bin of v in a kOtsuBins-bin histogram over [0,1]; v = 1 falls in the last bin.
inline int otsu_bin(double v) {
  return std::clamp(static_cast<int>(std::floor(v * kOtsuBins)), 0, kOtsuBins - 1);
}

inline std::array<std::uint64_t, kOtsuBins> intensity_histogram(const ImageTensor& intensity) {
  std::array<std::uint64_t, kOtsuBins> hist{};
  for (double v : intensity.data()) ++hist[static_cast<std::size_t>(otsu_bin(v))];
  return hist;
}

/// Otsu threshold over a 256-bin histogram on [0,1].
///
/// Candidates are the interior bin edges t/256 (t = 1..255); class 1 holds bins
/// >= t, so quantize_threshold with the returned delta reproduces the split.
/// Maximizes between-class variance, lowest t on ties.
inline double otsu_threshold(const ImageTensor& intensity) {
  if (intensity.channels() != 1) {
    throw ShapeError("otsu_threshold expects 1 channel, got " + std::to_string(intensity.channels()));
  }
  const auto hist = intensity_histogram(intensity);
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](std::uint64_t c) { return c > 0; });
  if (occupied < 2) {
    throw DegenerateInputError("otsu_threshold: histogram occupies a single bin");
  }

  double total = 0.0;
  double total_sum = 0.0;
  for (int b = 0; b < kOtsuBins; ++b) {
    total += static_cast<double>(hist[b]);
    total_sum += static_cast<double>(b) * static_cast<double>(hist[b]);
  }

  int best_t = 0;
  double best_var = -1.0;
  double n0 = 0.0;
  double sum0 = 0.0;
  for (int t = 1; t < kOtsuBins; ++t) {
    n0 += static_cast<double>(hist[t - 1]);
    sum0 += static_cast<double>(t - 1) * static_cast<double>(hist[t - 1]);
    const double n1 = total - n0;
    if (n0 == 0.0 || n1 == 0.0) continue;
    const double mean_gap = sum0 / n0 - (total_sum - sum0) / n1;
    const double between = (n0 / total) * (n1 / total) * mean_gap * mean_gap;
    if (between > best_var) {
      best_var = between;
      best_t = t;
    }
  }
  return static_cast<double>(best_t) / kOtsuBins;
}

/// Lloyd k-means over pixel colors with k-means++ seeding from the distinct colors.
/// Deterministic for fixed (img, count, seed).
inline PaletteQuantizer kmeans_palette(const ImageTensor& img, std::size_t count, std::uint64_t seed,
                                       int max_iterations = 100) {
  if (img.channels() != 3) {
    throw ShapeError("kmeans_palette expects 3 channels, got " + std::to_string(img.channels()));
  }
  if (count == 0) throw RangeError("kmeans_palette needs at least one cluster");

  const std::size_t n = img.shape().pixels();
  std::vector<Color> pixels(n);
  for (std::size_t p = 0; p < n; ++p) {
    auto px = img.pixel(p);
    pixels[p] = {px[0], px[1], px[2]};
  }
  std::vector<Color> distinct = pixels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (count > distinct.size()) {
    throw RangeError("kmeans_palette: requested " + std::to_string(count) + " colors but image has only " +
                     std::to_string(distinct.size()) + " distinct colors");
  }

  std::mt19937_64 rng(seed);
  std::vector<Color> centers;
  centers.reserve(count);
  centers.push_back(distinct[std::uniform_int_distribution<std::size_t>(0, distinct.size() - 1)(rng)]);
  std::vector<double> d2(distinct.size());
  while (centers.size() < count) {
    for (std::size_t i = 0; i < distinct.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, squared_distance(distinct[i], c));
      d2[i] = best;
    }
    std::discrete_distribution<std::size_t> pick(d2.begin(), d2.end());
    centers.push_back(distinct[pick(rng)]);
  }

  std::vector<std::size_t> assign(n, count);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t best = 0;
      double best_d = squared_distance(pixels[p], centers[0]);
      for (std::size_t c = 1; c < count; ++c) {
        const double d = squared_distance(pixels[p], centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[p] != best) {
        assign[p] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<Color> sums(count, Color{0.0, 0.0, 0.0});
    std::vector<std::size_t> sizes(count, 0);
    for (std::size_t p = 0; p < n; ++p) {
      for (int ch = 0; ch < 3; ++ch) sums[assign[p]][ch] += pixels[p][ch];
      ++sizes[assign[p]];
    }
    for (std::size_t c = 0; c < count; ++c) {
      if (sizes[c] == 0) continue;  // empty cluster keeps its previous centroid
      for (int ch = 0; ch < 3; ++ch) {
        centers[c][ch] = std::clamp(sums[c][ch] / static_cast<double>(sizes[c]), 0.0, 1.0);
      }
    }
  }
  return PaletteQuantizer(std::move(centers));
}

/// Reads "r g b" lines (values in [0,1]); blank lines and '#' comments are skipped.
inline PaletteQuantizer read_palette(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open palette " + path.string());
  std::vector<Color> colors;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Color c{};
    std::string extra;
    if (!(ls >> c[0] >> c[1] >> c[2]) || (ls >> extra)) {
      throw FormatError(FormatError::Kind::Malformed,
                        path.string() + ":" + std::to_string(lineno) + ": expected three numbers");
    }
    for (double v : c) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw FormatError(FormatError::Kind::Malformed,
                          path.string() + ":" + std::to_string(lineno) + ": value outside [0,1]");
      }
    }
    colors.push_back(c);
  }
  if (colors.empty()) throw FormatError(FormatError::Kind::Malformed, path.string() + ": empty palette");
  return PaletteQuantizer(std::move(colors));
}

inline void write_palette(const PaletteQuantizer& q, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write palette " + path.string());
  out.precision(17);
  for (const auto& c : q.colors()) out << c[0] << ' ' << c[1] << ' ' << c[2] << '\n';
}

}  // namespace dequant
