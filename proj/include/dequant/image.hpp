#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dequant/error.hpp"

namespace dequant {

/// Spatial and channel extent of an image. Channels is 1 (intensity) or 3 (RGB).
struct Shape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t pixels() const noexcept { return height * width; }
  std::size_t size() const noexcept { return height * width * channels; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.height << "x" << s.width << "x" << s.channels;
  return os.str();
}

/// H x W x C image of unit-interval intensities, row-major, channel-interleaved.
///
/// Construction rejects values outside [0,1] (and non-finite values); use
/// ImageTensor::clamped() when clamping is the intended behavior.
class ImageTensor {
 public:
  ImageTensor() = default;

  /// Constant-valued image.
  ImageTensor(Shape shape, double fill = 0.0) : shape_(shape) {
    validate_shape(shape_);
    check_value(fill, 0);
    data_.assign(shape_.size(), fill);
  }

  ImageTensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_.size()) {
      throw ShapeError("image data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) check_value(data_[i], i);
  }

  /// Builds an image from arbitrary reals, clamping each into [0,1]. NaN is rejected.
  static ImageTensor clamped(Shape shape, std::vector<double> data) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (std::isnan(data[i])) {
        throw RangeError("NaN at element " + std::to_string(i));
      }
      data[i] = std::clamp(data[i], 0.0, 1.0);
    }
    return ImageTensor(shape, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t height() const noexcept { return shape_.height; }
  std::size_t width() const noexcept { return shape_.width; }
  std::size_t channels() const noexcept { return shape_.channels; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }

  double at(std::size_t row, std::size_t col, std::size_t ch) const {
    return data_[(row * shape_.width + col) * shape_.channels + ch];
  }

  /// Pixel p as a span of `channels` values.
  std::span<const double> pixel(std::size_t p) const {
    return std::span<const double>(data_).subspan(p * shape_.channels, shape_.channels);
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  static void validate_shape(const Shape& s) {
    if (s.height == 0 || s.width == 0) {
      throw ShapeError("image height and width must be positive, got " + to_string(s));
    }
    if (s.channels != 1 && s.channels != 3) {
      throw ShapeError("image channels must be 1 or 3, got " + std::to_string(s.channels));
    }
  }

  static void check_value(double v, std::size_t i) {
    if (!(v >= 0.0 && v <= 1.0)) {
      std::ostringstream os;
      os << "image element " << i << " = " << v << " outside [0,1]";
      throw RangeError(os.str());
    }
  }

  Shape shape_{};
  std::vector<double> data_;
};

/// Returns a copy of `values` clamped into [0,1] as an image of `shape`.
inline ImageTensor clamp_image(Shape shape, std::span<const double> values) {
  return ImageTensor::clamped(shape, std::vector<double>(values.begin(), values.end()));
}

/// RGB-to-intensity weights. Defaults are the Rec. 709 luma coefficients.
struct GrayscaleCoefficients {
  double red = 0.2126;
  double green = 0.7152;
  double blue = 0.0722;

  void validate() const {
    if (red < 0.0 || green < 0.0 || blue < 0.0) {
      throw RangeError("grayscale coefficients must be nonnegative");
    }
  }
};

/// Per-pixel weighted sum of the three color channels.
inline ImageTensor rgb_to_intensity(const ImageTensor& img, const GrayscaleCoefficients& coeffs = {}) {
  coeffs.validate();
  if (img.channels() != 3) {
    throw ShapeError("rgb_to_intensity expects 3 channels, got " + std::to_string(img.channels()));
  }
  const std::size_t n = img.shape().pixels();
  std::vector<double> out(n);
  auto d = img.data();
  for (std::size_t p = 0; p < n; ++p) {
    out[p] = coeffs.red * d[3 * p] + coeffs.green * d[3 * p + 1] + coeffs.blue * d[3 * p + 2];
  }
  // Weights summing slightly above one can push a white pixel past 1 by an ulp.
  return ImageTensor::clamped({img.height(), img.width(), 1}, std::move(out));
}

namespace detail {

inline void require_same_shape(const ImageTensor& a, const ImageTensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

}  // namespace detail

/// Mean squared error over all elements.
inline double mse(const ImageTensor& a, const ImageTensor& b) {
  detail::require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// PSNR in dB for peak 1. Identical images give +infinity.
inline double psnr_from_mse(double err) {
  if (err <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(err);
}

inline double psnr(const ImageTensor& a, const ImageTensor& b) { return psnr_from_mse(mse(a, b)); }

/// Average of per-image values (PSNR is averaged per image, not pooled).
inline double mean_of(std::span<const double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc / static_cast<double>(values.size());
}

}  // namespace dequant
